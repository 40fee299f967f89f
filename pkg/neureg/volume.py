"""3D volume types, raw-container and NIfTI-1 I/O, and geometric preprocessing.

Arrays are held with shape ``(W, H, D)`` and indexed ``[x, y, z]``; on disk
they are written in Fortran order so x varies fastest, which is the layout
every other module relies on.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Union

import numpy as np
from nibabel.nifti1 import header_dtype as nifti1_header_dtype

from neureg.errors import (
    BadMagicError,
    InvalidInputError,
    NiftiHeaderError,
    ShapeMismatchError,
    TruncatedPayloadError,
    UnsupportedDtypeError,
)
from neureg.fourierdecoder import DeformationField

Dims = tuple[int, int, int]

RAW_MAGIC = b"NRV1"
RAW_HEADER = np.dtype(
    [
        ("magic", "S4"),
        ("dtype_code", "u1"),
        ("reserved", "u1", (3,)),
        ("dims", "<u4", (3,)),
    ]
)

DTYPE_F32 = 1
DTYPE_F64 = 2
DTYPE_LABEL_U16 = 3
DTYPE_FIELD_F32 = 4

_RAW_PAYLOAD_DTYPES: dict[int, np.dtype] = {
    DTYPE_F32: np.dtype("<f4"),
    DTYPE_F64: np.dtype("<f8"),
    DTYPE_LABEL_U16: np.dtype("<u2"),
    DTYPE_FIELD_F32: np.dtype("<f4"),
}

NIFTI1_SIZEOF_HDR = 348
# NIfTI-1 datatype codes accepted by import_nifti1.
_NIFTI_DATATYPES: dict[int, str] = {
    2: "u1",  # uint8
    4: "i2",  # int16
    16: "f4",  # float32
}


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class Volume3:
    """Dense scalar image on a W x H x D voxel grid."""

    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise InvalidInputError(f"Volume3 needs a non-empty 3D array, got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        if not np.all(np.isfinite(data)):
            raise InvalidInputError("Volume3 values must be finite")
        object.__setattr__(self, "data", _frozen(data))

    @classmethod
    def from_array(cls, array: np.ndarray) -> "Volume3":
        """Build a volume from any 3D array, copying it as float64."""
        return cls(np.array(array, dtype=np.float64))

    @property
    def dims(self) -> Dims:
        """Voxel counts (W, H, D)."""
        return self.data.shape  # type: ignore[return-value]

    @cached_property
    def value_range(self) -> tuple[float, float]:
        """(min, max) of the voxel values."""
        return float(self.data.min()), float(self.data.max())


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Integer segmentation on a W x H x D grid; 0 is background."""

    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise InvalidInputError(f"LabelVolume needs a non-empty 3D array, got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.integer):
            raise InvalidInputError(f"LabelVolume needs integer data, got {data.dtype}")
        if data.size and data.min() < 0:
            raise InvalidInputError("labels must be non-negative")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def dims(self) -> Dims:
        """Voxel counts (W, H, D)."""
        return self.data.shape  # type: ignore[return-value]

    @cached_property
    def label_set(self) -> tuple[int, ...]:
        """Sorted distinct labels present, background included."""
        return tuple(int(v) for v in np.unique(self.data))


AnyVolume = Union[Volume3, LabelVolume, DeformationField]


def check_same_dims(a: tuple[int, ...], b: tuple[int, ...], what: str) -> None:
    """Raise ShapeMismatchError unless two grids agree."""
    if tuple(a) != tuple(b):
        raise ShapeMismatchError(f"{what}: dims {tuple(a)} and {tuple(b)} differ")


# ---------------------------------------------------------------------------
# Raw container
# ---------------------------------------------------------------------------


def save_raw(volume: AnyVolume, path: str | Path) -> None:
    """Write a volume as header + little-endian payload.

    Args:
        volume: Volume3 (f32 or f64), LabelVolume or DeformationField.
        path: Destination file; its directory must exist.
    """
    if isinstance(volume, DeformationField):
        code = DTYPE_FIELD_F32
        dims = volume.dims
        payload = np.concatenate(
            [np.asarray(c, dtype="<f4").ravel(order="F") for c in volume.data]
        )
    elif isinstance(volume, LabelVolume):
        code = DTYPE_LABEL_U16
        dims = volume.dims
        if volume.data.size and volume.data.max() > np.iinfo(np.uint16).max:
            raise InvalidInputError("labels above 65535 do not fit the raw container")
        payload = volume.data.astype("<u2").ravel(order="F")
    elif isinstance(volume, Volume3):
        code = DTYPE_F32 if volume.data.dtype == np.float32 else DTYPE_F64
        dims = volume.dims
        payload = volume.data.astype(_RAW_PAYLOAD_DTYPES[code]).ravel(order="F")
    else:
        raise InvalidInputError(f"cannot save object of type {type(volume).__name__}")

    header = np.zeros((), dtype=RAW_HEADER)
    header["magic"] = RAW_MAGIC
    header["dtype_code"] = code
    header["dims"] = dims
    with open(path, "wb") as f:
        f.write(header.tobytes())
        f.write(payload.tobytes())
    logging.debug(f"Saved raw volume dims={dims} code={code} to {path}")


def load_raw(path: str | Path) -> AnyVolume:
    """Read a raw-container file written by :func:`save_raw`.

    Raises:
        BadMagicError: The file does not start with ``NRV1``.
        UnsupportedDtypeError: The dtype code is not 1-4.
        TruncatedPayloadError: Header or payload length disagree with the dims.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != RAW_MAGIC:
        raise BadMagicError(f"{path}: missing NRV1 magic")
    if len(raw) < RAW_HEADER.itemsize:
        raise TruncatedPayloadError(f"{path}: header is {len(raw)} bytes")
    header = np.frombuffer(raw, dtype=RAW_HEADER, count=1)[0]
    code = int(header["dtype_code"])
    if code not in _RAW_PAYLOAD_DTYPES:
        raise UnsupportedDtypeError(f"{path}: dtype code {code}")
    dims: Dims = tuple(int(d) for d in header["dims"])  # type: ignore[assignment]
    if min(dims) < 1:
        raise InvalidInputError(f"{path}: dims {dims} must be positive")
    dtype = _RAW_PAYLOAD_DTYPES[code]
    n_voxels = int(np.prod(dims))
    n_values = n_voxels * (3 if code == DTYPE_FIELD_F32 else 1)
    payload = raw[RAW_HEADER.itemsize:]
    if len(payload) != n_values * dtype.itemsize:
        raise TruncatedPayloadError(
            f"{path}: expected {n_values * dtype.itemsize} payload bytes, found {len(payload)}"
        )
    values = np.frombuffer(payload, dtype=dtype, count=n_values)

    if code == DTYPE_FIELD_F32:
        channels = values.reshape(3, n_voxels)
        data = np.stack([c.reshape(dims, order="F") for c in channels]).astype(np.float32)
        return DeformationField(data)
    array = values.reshape(dims, order="F").astype(dtype.newbyteorder("="))
    if code == DTYPE_LABEL_U16:
        return LabelVolume(array)
    return Volume3(array)


# ---------------------------------------------------------------------------
# NIfTI-1 import
# ---------------------------------------------------------------------------


def _read_nifti1_header(raw: bytes, path: str | Path) -> tuple[np.ndarray, str]:
    """Parse the 348-byte header, sniffing byte order through sizeof_hdr."""
    if len(raw) < NIFTI1_SIZEOF_HDR:
        raise NiftiHeaderError(f"{path}: file shorter than a NIfTI-1 header")
    for order in ("<", ">"):
        hdr = np.ndarray(
            shape=(),
            dtype=nifti1_header_dtype.newbyteorder(order),
            buffer=raw[:NIFTI1_SIZEOF_HDR],
        )
        if int(hdr["sizeof_hdr"]) == NIFTI1_SIZEOF_HDR:
            return hdr, order
    raise NiftiHeaderError(f"{path}: sizeof_hdr is not {NIFTI1_SIZEOF_HDR}")


def import_nifti1(path: str | Path) -> Volume3:
    """Import an uncompressed single-file NIfTI-1 volume.

    Orientation (qform/sform) is ignored; voxels are taken in stored order.
    Scaling is applied when scl_slope is non-zero.

    Args:
        path: Location of the .nii file.

    Returns:
        A float64 Volume3.
    """
    raw = Path(path).read_bytes()
    hdr, order = _read_nifti1_header(raw, path)

    dim = [int(d) for d in hdr["dim"]]
    if not (dim[0] == 3 or (dim[0] == 4 and dim[4] == 1)):
        raise NiftiHeaderError(f"{path}: dim[0]={dim[0]} (dim[4]={dim[4]}) is not a 3D volume")
    dims: Dims = (dim[1], dim[2], dim[3])
    if min(dims) < 1:
        raise NiftiHeaderError(f"{path}: non-positive dims {dims}")

    datatype = int(hdr["datatype"])
    if datatype not in _NIFTI_DATATYPES:
        raise UnsupportedDtypeError(f"{path}: NIfTI datatype {datatype} is not supported")
    dtype = np.dtype(_NIFTI_DATATYPES[datatype]).newbyteorder(order)

    offset = int(float(hdr["vox_offset"]))
    count = int(np.prod(dims))
    if len(raw) < offset + count * dtype.itemsize:
        raise TruncatedPayloadError(f"{path}: voxel payload is shorter than {count} values")
    values = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).astype(np.float64)
    data = values.reshape(dims, order="F")

    slope = float(hdr["scl_slope"])
    if slope != 0.0 and np.isfinite(slope):
        data = data * slope + float(hdr["scl_inter"])
    logging.info(f"Imported NIfTI-1 {path}: dims={dims}, datatype={datatype}, slope={slope}")
    return Volume3(data)


# ---------------------------------------------------------------------------
# Geometric and intensity preprocessing
# ---------------------------------------------------------------------------


def crop_center(volume: Volume3 | LabelVolume, target_dims: Dims) -> Volume3 | LabelVolume:
    """Return the centered sub-block of ``target_dims``.

    When the size difference along an axis is odd the extra voxel is
    dropped from the high-index side.
    """
    dims = volume.dims
    if len(target_dims) != 3 or any(t < 1 or t > d for t, d in zip(target_dims, dims)):
        raise InvalidInputError(f"cannot crop {dims} to {tuple(target_dims)}")
    starts = [(d - t) // 2 for d, t in zip(dims, target_dims)]
    block = volume.data[tuple(slice(s, s + t) for s, t in zip(starts, target_dims))]
    return type(volume)(block.copy())


def normalize_minmax(volume: Volume3) -> Volume3:
    """Affinely map values to [0, 1]; a constant volume maps to zeros."""
    lo, hi = volume.value_range
    if hi == lo:
        return Volume3(np.zeros(volume.dims, dtype=np.float64))
    return Volume3((volume.data.astype(np.float64) - lo) / (hi - lo))
