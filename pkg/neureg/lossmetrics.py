"""Training losses and evaluation metrics.

Losses take tensors (or arrays / volumes, wrapped as constants) and are
recorded on the active tape. Metrics work on plain volumes and return floats.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from scipy.ndimage import uniform_filter

from neureg.config import LossConfig
from neureg.errors import InvalidInputError
from neureg.tensorautodiff import (
    Tensor,
    add,
    as_tensor,
    box_sum,
    div,
    mean,
    mul,
    neg,
    scalar_mul,
    slice_,
    square,
    sub,
)
from neureg.volume import LabelVolume, Volume3, check_same_dims

SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03

VolumeLike = Union[Tensor, np.ndarray, Volume3]


def _tensor(x: VolumeLike) -> Tensor:
    return as_tensor(x.data if isinstance(x, Volume3) else x)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def mse_loss(fixed: VolumeLike, warped: VolumeLike) -> Tensor:
    """Mean squared voxel difference."""
    f, w = _tensor(fixed), _tensor(warped)
    check_same_dims(f.shape, w.shape, "mse_loss")
    return mean(square(sub(f, w)))


def ncc_loss(
    fixed: VolumeLike, warped: VolumeLike, window: int = 9, eps: float = 1e-5
) -> Tensor:
    """Negative mean local squared normalized cross-correlation, in [-1, 0].

    Window statistics count only voxels inside the volume, so a positive
    affine change of either input leaves border windows unchanged as well.
    """
    i, j = _tensor(fixed), _tensor(warped)
    check_same_dims(i.shape, j.shape, "ncc_loss")
    if window < 3 or window % 2 == 0:
        raise InvalidInputError(f"ncc window must be odd and >= 3, got {window}")
    count = box_sum(np.ones(i.shape), window).data

    i_sum = box_sum(i, window)
    j_sum = box_sum(j, window)
    cross = sub(box_sum(mul(i, j), window), div(mul(i_sum, j_sum), count))
    i_var = sub(box_sum(square(i), window), div(square(i_sum), count))
    j_var = sub(box_sum(square(j), window), div(square(j_sum), count))
    cc = div(square(cross), add(mul(i_var, j_var), eps))
    return neg(mean(cc))


def smoothness_reg(field: Tensor | np.ndarray) -> Tensor:
    """Diffusion regularizer on a ``(3, W, H, D)`` field.

    Sum over the three channels and three axes of the mean squared forward
    difference, i.e. the mean squared gradient magnitude.
    """
    phi = as_tensor(field)
    if phi.ndim != 4 or phi.shape[0] != 3 or min(phi.shape[1:]) < 2:
        raise InvalidInputError(f"smoothness_reg needs a (3, W, H, D) field with extents >= 2, got {phi.shape}")
    total: Tensor | None = None
    for axis in (1, 2, 3):
        ahead = [slice(None)] * 4
        behind = [slice(None)] * 4
        ahead[axis] = slice(1, None)
        behind[axis] = slice(None, -1)
        diff = sub(slice_(phi, tuple(ahead)), slice_(phi, tuple(behind)))
        per_channel = mean(square(diff), axis=(1, 2, 3))
        term = per_channel.sum()
        total = term if total is None else add(total, term)
    return total  # type: ignore[return-value]


def similarity_loss(fixed: VolumeLike, warped: VolumeLike, config: LossConfig) -> Tensor:
    if config.similarity == "MSE":
        return mse_loss(fixed, warped)
    return ncc_loss(fixed, warped, config.ncc_window, config.ncc_eps)


def total_loss(
    fixed: VolumeLike, warped: VolumeLike, field: Tensor | np.ndarray, config: LossConfig
) -> Tensor:
    """Similarity plus ``lambda`` times the smoothness regularizer."""
    return add(similarity_loss(fixed, warped, config), scalar_mul(smoothness_reg(field), config.lam))


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass
class DiceResult:
    per_label: dict[int, float] = field(default_factory=dict)
    mean: float = math.nan


def dice(a: LabelVolume, b: LabelVolume) -> DiceResult:
    """Per-label and mean DICE over the non-background labels of either volume.

    A label present in only one volume scores 0. With no foreground anywhere
    the mean is NaN.
    """
    check_same_dims(a.dims, b.dims, "dice")
    labels = sorted((set(a.label_set) | set(b.label_set)) - {0})
    per_label: dict[int, float] = {}
    for label in labels:
        in_a = a.data == label
        in_b = b.data == label
        overlap = np.count_nonzero(in_a & in_b)
        per_label[label] = 2.0 * overlap / (np.count_nonzero(in_a) + np.count_nonzero(in_b))
    mean_score = float(np.mean(list(per_label.values()))) if per_label else math.nan
    return DiceResult(per_label=per_label, mean=mean_score)


def ssim3(a: Volume3, b: Volume3, window: int = SSIM_WINDOW) -> float:
    """Mean local SSIM over a uniform cubic window.

    Both volumes are rescaled by their joint min and max so the dynamic range
    is 1. Local statistics use the sample covariance, and the half-window
    border, where the filter sees reflected data, is left out of the mean.
    """
    check_same_dims(a.dims, b.dims, "ssim3")
    if min(a.dims) < window:
        raise InvalidInputError(f"ssim3 needs dims >= {window}, got {a.dims}")
    x = np.asarray(a.data, dtype=np.float64)
    y = np.asarray(b.data, dtype=np.float64)
    lo = min(x.min(), y.min())
    hi = max(x.max(), y.max())
    if hi == lo:
        return 1.0
    x = (x - lo) / (hi - lo)
    y = (y - lo) / (hi - lo)

    n = window**3
    cov_norm = n / (n - 1.0)
    ux = uniform_filter(x, size=window)
    uy = uniform_filter(y, size=window)
    vx = cov_norm * (uniform_filter(x * x, size=window) - ux * ux)
    vy = cov_norm * (uniform_filter(y * y, size=window) - uy * uy)
    vxy = cov_norm * (uniform_filter(x * y, size=window) - ux * uy)

    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
    pad = (window - 1) // 2
    interior = tuple(slice(pad, d - pad) for d in a.dims)
    return float(s[interior].mean())
