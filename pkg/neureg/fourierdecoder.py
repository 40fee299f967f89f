"""Training-free decoder: DFT, zero-padding in frequency, inverse DFT.

The encoder emits a low-resolution spatial field of shape ``(3, bx, by, bz)``.
Each channel is transformed, its spectrum embedded in the corners of a
full-size spectrum and transformed back, which yields a smooth band-limited
displacement field at full resolution. The map is linear and real, so its
gradient is the adjoint chain: forward DFT, crop of the spectrum, inverse DFT.

Spectrum embedding along one axis of band size ``b`` into ``n``: indices
``0 .. ceil(b/2)-1`` keep their place, the remaining (negative) frequencies
move to the top indices. For even ``b`` the Nyquist coefficient is shared
half and half between ``+b/2`` and ``n-b/2``, which keeps the padded
spectrum Hermitian so real fields decode to real fields.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from neureg.errors import ImaginaryResidueError, InvalidInputError, ShapeMismatchError
from neureg.tensorautodiff import Tensor, as_tensor, record

Dims = tuple[int, int, int]

IMAG_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class DeformationField:
    """Displacements (dx, dy, dz) in voxels, stored as ``(3, W, H, D)``."""

    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.asarray(self.data)
        if data.ndim != 4 or data.shape[0] != 3 or min(data.shape) < 1:
            raise InvalidInputError(f"DeformationField needs shape (3, W, H, D), got {data.shape}")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        if not np.all(np.isfinite(data)):
            raise InvalidInputError("DeformationField components must be finite")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @classmethod
    def zeros(cls, dims: Dims) -> "DeformationField":
        return cls(np.zeros((3,) + tuple(dims)))

    @property
    def dims(self) -> Dims:
        return self.data.shape[1:]  # type: ignore[return-value]


@dataclass(frozen=True, eq=False)
class SpectralField:
    """Complex DFT coefficients of one channel, DC at (0, 0, 0), standard order."""

    coeffs: np.ndarray

    @property
    def dims(self) -> Dims:
        return self.coeffs.shape  # type: ignore[return-value]

    def hermitian_error(self) -> float:
        """Largest |X[k] - conj(X[-k])|; zero for spectra of real data."""
        mirrored = np.conj(np.flip(self.coeffs, axis=(0, 1, 2)))
        mirrored = np.roll(mirrored, 1, axis=(0, 1, 2))
        return float(np.max(np.abs(self.coeffs - mirrored), initial=0.0))


@lru_cache(maxsize=64)
def embedding_matrix(band: int, full: int) -> np.ndarray:
    """Real (full, band) matrix placing a band spectrum into a full one."""
    if band < 1 or full < band:
        raise InvalidInputError(f"cannot embed a band of {band} into {full} frequencies")
    m = np.zeros((full, band))
    half = (band + 1) // 2
    for k in range(band):
        if band % 2 == 0 and k == band // 2:
            m[k, k] += 0.5
            m[full - band // 2, k] += 0.5
        elif k < half:
            m[k, k] = 1.0
        else:
            m[full - (band - k), k] = 1.0
    m.setflags(write=False)
    return m


def _apply_per_axis(x: np.ndarray, mats: list[np.ndarray], first_axis: int) -> np.ndarray:
    for i, m in enumerate(mats):
        axis = first_axis + i
        x = np.moveaxis(np.tensordot(m, x, axes=([1], [axis])), 0, axis)
    return x


def _check_dims(band: Dims, full: Dims) -> None:
    if len(band) != 3 or len(full) != 3:
        raise ShapeMismatchError(f"expected 3D extents, got band {band} and full {full}")
    if any(f < b for b, f in zip(band, full)):
        raise InvalidInputError(f"full dims {tuple(full)} smaller than band {tuple(band)}")


def dft3(spatial: np.ndarray) -> SpectralField:
    """Unnormalized forward 3D DFT."""
    spatial = np.asarray(spatial)
    if spatial.ndim != 3:
        raise ShapeMismatchError(f"dft3 expects a 3D array, got shape {spatial.shape}")
    return SpectralField(np.fft.fftn(spatial))


def zero_pad_spectrum(spec: SpectralField, full_dims: Dims) -> SpectralField:
    """Embed the band spectrum in a zero full-size spectrum."""
    full_dims = tuple(full_dims)  # type: ignore[assignment]
    _check_dims(spec.dims, full_dims)
    mats = [embedding_matrix(b, f) for b, f in zip(spec.dims, full_dims)]
    return SpectralField(_apply_per_axis(spec.coeffs, mats, 0))


def crop_spectrum(spec: SpectralField, band_dims: Dims) -> SpectralField:
    """Adjoint of :func:`zero_pad_spectrum`."""
    band_dims = tuple(band_dims)  # type: ignore[assignment]
    _check_dims(band_dims, spec.dims)
    mats = [embedding_matrix(b, f).T for b, f in zip(band_dims, spec.dims)]
    return SpectralField(_apply_per_axis(spec.coeffs, mats, 0))


def idft3(spec: SpectralField) -> np.ndarray:
    """Inverse DFT with 1/N normalization, returning the real part.

    Raises:
        ImaginaryResidueError: The imaginary part exceeds the tolerance, which
            means the spectrum was not Hermitian.
    """
    x = np.fft.ifftn(spec.coeffs)
    scale = max(1.0, float(np.max(np.abs(x.real), initial=0.0)))
    residue = float(np.max(np.abs(x.imag), initial=0.0))
    if residue > IMAG_TOL * scale:
        raise ImaginaryResidueError(f"imaginary residue {residue:.3e} after inverse DFT")
    return x.real.copy()


def amplitude_factor(band_dims: Dims, full_dims: Dims) -> float:
    """Scale that makes a constant band field decode to the same constant."""
    return float(np.prod(np.asarray(full_dims, dtype=np.float64) / np.asarray(band_dims)))


def decode_array(lowres: np.ndarray, full_dims: Dims) -> np.ndarray:
    """Decode a ``(3, bx, by, bz)`` array to ``(3, W, H, D)`` float64."""
    lowres = np.asarray(lowres, dtype=np.float64)
    if lowres.ndim != 4 or lowres.shape[0] != 3:
        raise ShapeMismatchError(f"decode expects (3, bx, by, bz), got {lowres.shape}")
    band = lowres.shape[1:]
    full_dims = tuple(full_dims)  # type: ignore[assignment]
    _check_dims(band, full_dims)  # type: ignore[arg-type]
    s = amplitude_factor(band, full_dims)  # type: ignore[arg-type]
    return np.stack(
        [idft3(zero_pad_spectrum(dft3(channel), full_dims)) * s for channel in lowres]
    )


def decode(lowres: np.ndarray, full_dims: Dims) -> DeformationField:
    """Band-limited full-resolution field from a low-resolution one."""
    return DeformationField(decode_array(lowres, full_dims))


def decode_adjoint(full: np.ndarray, band_dims: Dims) -> np.ndarray:
    """Transpose of :func:`decode_array` with respect to the real inner product.

    With ``s = N_full / N_band`` the 1/N factors of the two transforms cancel
    against the amplitude factor, leaving a plain crop between transforms.
    """
    full = np.asarray(full, dtype=np.float64)
    if full.ndim != 4 or full.shape[0] != 3:
        raise ShapeMismatchError(f"decode_adjoint expects (3, W, H, D), got {full.shape}")
    band_dims = tuple(band_dims)  # type: ignore[assignment]
    return np.stack(
        [idft3(crop_spectrum(SpectralField(np.fft.fftn(c)), band_dims)) for c in full]
    )


def decode_tensor(lowres: Tensor | np.ndarray, full_dims: Dims) -> Tensor:
    """Recorded decode whose backward pass is :func:`decode_adjoint`."""
    lowres = as_tensor(lowres)
    band = lowres.shape[1:]
    out = decode_array(lowres.data, full_dims)
    logging.debug(f"decode {band} -> {tuple(full_dims)}")
    return record("fourier_decode", out, (lowres,), lambda g: (decode_adjoint(g, band),))
