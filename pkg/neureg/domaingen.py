"""Domain-generalization layer.

Each voxel is replaced by the standard deviation of the non-overlapping
cubic patch that contains it, divided by the largest patch standard
deviation of the volume. The result depends only on local contrast
magnitude, so any affine intensity map ``a*I + b`` with ``a != 0``
(contrast inversion included) leaves it unchanged.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from neureg.errors import InvalidInputError
from neureg.volume import Dims, Volume3, normalize_minmax

DEFAULT_PATCH_SIZE = 4


@dataclass(frozen=True, eq=False)
class PatchGrid:
    """Per-patch statistics of a non-overlapping tiling.

    Boundary patches along an axis whose extent is not a multiple of
    ``patch_size`` are smaller; their statistics use their own voxel count.
    """

    patch_size: int
    dims: Dims
    mean: np.ndarray
    std: np.ndarray

    @property
    def patch_counts(self) -> Dims:
        return self.std.shape  # type: ignore[return-value]

    def patch_extents(self) -> list[np.ndarray]:
        """Voxel extent of every patch along each axis."""
        return [np.diff(np.append(np.arange(0, d, self.patch_size), d)) for d in self.dims]

    def broadcast(self, per_patch: np.ndarray) -> np.ndarray:
        """Expand a per-patch array to the voxel grid."""
        out = per_patch
        for axis, extents in enumerate(self.patch_extents()):
            out = np.repeat(out, extents, axis=axis)
        return out


@dataclass(frozen=True, eq=False)
class DomainAgnosticVolume:
    """Piecewise-constant volume of normalized patch standard deviations in [0, 1]."""

    data: np.ndarray
    source_patch_size: int

    @property
    def dims(self) -> Dims:
        return self.data.shape  # type: ignore[return-value]

    def as_volume(self) -> Volume3:
        return Volume3(self.data)


def _patch_reduce(array: np.ndarray, ufunc: np.ufunc, x: int) -> np.ndarray:
    for axis in range(array.ndim):
        array = ufunc.reduceat(array, np.arange(0, array.shape[axis], x), axis=axis)
    return array


def partition_patches(volume: Volume3, x: int) -> PatchGrid:
    """Population mean and standard deviation of every patch.

    Values are shifted by the patch minimum before accumulating, so a
    constant patch yields a standard deviation of exactly zero.
    """
    if x < 1:
        raise InvalidInputError(f"patch size must be >= 1, got {x}")
    data = np.asarray(volume.data, dtype=np.float64)
    skeleton = PatchGrid(x, volume.dims, np.empty(0), np.empty(0))

    mins = _patch_reduce(data, np.minimum, x)
    shifted = data - skeleton.broadcast(mins)
    extents = skeleton.patch_extents()
    counts = np.einsum("i,j,k->ijk", *[e.astype(np.float64) for e in extents])

    shifted_mean = _patch_reduce(shifted, np.add, x) / counts
    deviation = shifted - skeleton.broadcast(shifted_mean)
    variance = _patch_reduce(deviation * deviation, np.add, x) / counts
    return PatchGrid(x, volume.dims, mins + shifted_mean, np.sqrt(variance))


def domain_generalize(volume: Volume3, x: int = DEFAULT_PATCH_SIZE) -> DomainAgnosticVolume:
    """Map a volume to its domain-agnostic representation.

    Args:
        volume: Input intensities.
        x: Patch edge length in voxels.

    Returns:
        Voxels set to ``std(patch) / max_std``; all zeros when every patch
        is constant.
    """
    grid = partition_patches(volume, x)
    z = float(grid.std.max())
    if z == 0.0:
        logging.debug(f"domain_generalize: all {grid.std.size} patches constant")
        return DomainAgnosticVolume(np.zeros(volume.dims), x)
    return DomainAgnosticVolume(grid.broadcast(grid.std / z), x)


def encoder_input(volume: Volume3, patch_size: int, dg_enabled: bool = True) -> np.ndarray:
    """Array fed to the encoder: the DG representation, or min-max scaled raw intensities."""
    if dg_enabled:
        return domain_generalize(volume, patch_size).data
    return normalize_minmax(volume).data.astype(np.float64)
