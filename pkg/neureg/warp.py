"""Spatial transformer: backward warping of volumes through a displacement field.

Output voxel ``(i, j, k)`` samples the moving volume at
``(i + dx, j + dy, k + dz)``. Sample coordinates are clamped to the grid, so
the border is replicated.
"""
from __future__ import annotations

from itertools import product
from typing import NamedTuple

import numpy as np

from neureg.errors import InvalidInputError
from neureg.fourierdecoder import DeformationField
from neureg.tensorautodiff import Tensor, as_tensor, record
from neureg.volume import LabelVolume, Volume3, check_same_dims

_CORNERS = tuple(product((0, 1), repeat=3))


class SampleGrid:
    """Clamped sampling coordinates and trilinear cell geometry for one field."""

    def __init__(self, displacement: np.ndarray) -> None:
        displacement = np.asarray(displacement, dtype=np.float64)
        self.dims = displacement.shape[1:]
        identity = np.indices(self.dims, dtype=np.float64)
        raw = identity + displacement
        upper = np.asarray(self.dims, dtype=np.float64).reshape(3, 1, 1, 1) - 1.0
        self.coords = np.clip(raw, 0.0, upper)
        # d(coords)/d(displacement): 1 inside the grid, 0 where clamping bites
        self.inside = (raw >= 0.0) & (raw <= upper)
        self.lo = np.empty(self.coords.shape, dtype=np.intp)
        self.hi = np.empty(self.coords.shape, dtype=np.intp)
        for a, n in enumerate(self.dims):
            self.lo[a] = np.clip(np.floor(self.coords[a]).astype(np.intp), 0, max(n - 2, 0))
            self.hi[a] = np.minimum(self.lo[a] + 1, n - 1)
        self.frac = self.coords - self.lo

    def corner(self, c: tuple[int, int, int]) -> tuple[tuple[np.ndarray, ...], np.ndarray]:
        """Indices and trilinear weight of one of the eight cell corners."""
        idx = tuple(self.hi[a] if c[a] else self.lo[a] for a in range(3))
        w = np.ones(self.dims)
        for a in range(3):
            w = w * (self.frac[a] if c[a] else 1.0 - self.frac[a])
        return idx, w

    def corner_weight_slopes(self, c: tuple[int, int, int]) -> list[np.ndarray]:
        """d(weight)/d(coordinate) for each axis at one corner."""
        slopes = []
        for a in range(3):
            s = np.full(self.dims, 1.0 if c[a] else -1.0)
            for b in range(3):
                if b != a:
                    s = s * (self.frac[b] if c[b] else 1.0 - self.frac[b])
            slopes.append(s)
        return slopes

    def nearest(self) -> tuple[np.ndarray, ...]:
        """Nearest voxel per sample, ties at .5 going to the lower index."""
        return tuple(
            np.clip(np.ceil(self.coords[a] - 0.5).astype(np.intp), 0, n - 1)
            for a, n in enumerate(self.dims)
        )


def _trilinear(moving: np.ndarray, grid: SampleGrid) -> np.ndarray:
    out = np.zeros(grid.dims)
    for c in _CORNERS:
        idx, w = grid.corner(c)
        out += w * moving[idx]
    return out


def warp_tensor(moving: Tensor | np.ndarray, field: Tensor | np.ndarray) -> Tensor:
    """Recorded trilinear warp, differentiable in both the volume and the field."""
    moving, field = as_tensor(moving), as_tensor(field)
    if field.ndim != 4 or field.shape[0] != 3:
        raise InvalidInputError(f"field must have shape (3, W, H, D), got {field.shape}")
    check_same_dims(moving.shape, field.shape[1:], "warp")
    grid = SampleGrid(field.data)

    def vjp(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        n = moving.size
        g_moving = np.zeros(n)
        g_field = np.zeros(field.shape)
        for c in _CORNERS:
            idx, w = grid.corner(c)
            flat = np.ravel_multi_index(idx, grid.dims).ravel()
            g_moving += np.bincount(flat, weights=(w * g).ravel(), minlength=n)
            values = moving.data[idx]
            for a, slope in enumerate(grid.corner_weight_slopes(c)):
                g_field[a] += slope * values
        g_field *= g[None] * grid.inside
        return g_moving.reshape(moving.shape), g_field

    return record("warp_trilinear", _trilinear(moving.data, grid), (moving, field), vjp)


def warp_trilinear(moving: Volume3, field: DeformationField) -> Volume3:
    """Resample ``moving`` through ``field`` with trilinear interpolation."""
    check_same_dims(moving.dims, field.dims, "warp_trilinear")
    grid = SampleGrid(field.data)
    return Volume3(_trilinear(np.asarray(moving.data, dtype=np.float64), grid))


def warp_labels(labels: LabelVolume, field: DeformationField) -> LabelVolume:
    """Nearest-neighbor resampling; never creates labels absent from the input."""
    check_same_dims(labels.dims, field.dims, "warp_labels")
    grid = SampleGrid(field.data)
    return LabelVolume(labels.data[grid.nearest()].copy())


class JacobianStats(NamedTuple):
    min_det: float
    nonpos_fraction: float


def jacobian_determinant(field: DeformationField) -> np.ndarray:
    """det(I + grad(field)) per voxel; central differences inside, one-sided at edges."""
    if min(field.dims) < 2:
        raise InvalidInputError(f"jacobian needs >= 2 voxels per axis, got {field.dims}")
    data = np.asarray(field.data, dtype=np.float64)
    jac = np.empty(field.dims + (3, 3))
    for c in range(3):
        for a, deriv in enumerate(np.gradient(data[c])):
            jac[..., c, a] = deriv + (1.0 if a == c else 0.0)
    return np.linalg.det(jac)


def jacobian_stats(field: DeformationField) -> JacobianStats:
    """Minimum Jacobian determinant and the fraction of voxels where it is <= 0."""
    det = jacobian_determinant(field)
    return JacobianStats(float(det.min()), float(np.mean(det <= 0.0)))
