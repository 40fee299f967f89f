"""Hierarchical shifted-window attention encoder.

The fixed and moving inputs enter as two channels of one patch embedding.
Four stages of windowed multi-head self-attention follow, with 2x2x2 patch
merging between them, and a linear head projects the last token grid to a
3-channel field that is linearly resized to the decoder's band extents.

Token grids are tensors of shape ``(X, Y, Z, C)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import product
from typing import Iterator, Optional

import numpy as np

from neureg.config import NUM_STAGES, EncoderConfig
from neureg.errors import InvalidInputError, ShapeMismatchError
from neureg.tensorautodiff import (
    Tensor,
    add,
    concat,
    cyclic_shift,
    gelu,
    layer_norm,
    linear,
    matmul,
    pad,
    permute,
    reshape,
    resize_linear,
    scalar_mul,
    slice_,
    softmax,
    take,
)

Dims = tuple[int, int, int]


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def bias_table_size(window: Dims) -> int:
    """Number of distinct 3D offsets inside a window."""
    mx, my, mz = window
    return (2 * mx - 1) * (2 * my - 1) * (2 * mz - 1)


@dataclass
class ModelParams:
    """Named trainable tensors of the encoder, in a fixed creation order."""

    config: EncoderConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.tensors.values())

    def __len__(self) -> int:
        return len(self.tensors)

    @property
    def names(self) -> list[str]:
        return list(self.tensors)

    @property
    def n_values(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def grads(self) -> list[np.ndarray]:
        """Gradients in parameter order; missing ones are zeros."""
        return [np.zeros_like(t.data) if t.grad is None else t.grad for t in self.tensors.values()]

    def all_finite(self) -> bool:
        return all(bool(np.all(np.isfinite(t.data))) for t in self.tensors.values())

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.tensors.items()}

    @classmethod
    def from_arrays(cls, config: EncoderConfig, arrays: dict[str, np.ndarray]) -> "ModelParams":
        reference = init_params(config, seed=0)
        missing = set(reference.names) ^ set(arrays)
        if missing:
            raise ShapeMismatchError(f"parameter names differ from the encoder layout: {sorted(missing)}")
        for name, t in reference.tensors.items():
            if arrays[name].shape != t.shape:
                raise ShapeMismatchError(f"{name}: shape {arrays[name].shape}, expected {t.shape}")
        return cls(config, {name: Tensor.parameter(arrays[name], name) for name in reference.names})

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config.model_copy(deep=True),
            {name: Tensor.parameter(t.data, name) for name, t in self.tensors.items()},
        )


def init_params(config: EncoderConfig, seed: int) -> ModelParams:
    """Seed-deterministic initialization.

    Weights are N(0, init_std) (head: N(0, head_init_std)); biases and
    LayerNorm shifts are zero, LayerNorm scales one.
    """
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}

    def weight(name: str, shape: tuple[int, ...], std: float = config.init_std) -> None:
        tensors[name] = Tensor.parameter(rng.normal(0.0, std, size=shape), name)

    def const(name: str, shape: tuple[int, ...], value: float) -> None:
        tensors[name] = Tensor.parameter(np.full(shape, value), name)

    c = config.embed_dim
    weight("patch_embed.weight", (2 * config.patch_embed_size**3, c))
    const("patch_embed.bias", (c,), 0.0)

    table = bias_table_size(config.window)
    for s in range(NUM_STAGES):
        c = config.stage_dim(s)
        hidden = int(round(c * config.mlp_ratio))
        for b in range(config.depths[s]):
            p = f"stage{s}.block{b}."
            const(p + "norm1.gamma", (c,), 1.0)
            const(p + "norm1.beta", (c,), 0.0)
            weight(p + "attn.qkv.weight", (c, 3 * c))
            const(p + "attn.qkv.bias", (3 * c,), 0.0)
            weight(p + "attn.rel_bias", (table, config.heads[s]))
            weight(p + "attn.proj.weight", (c, c))
            const(p + "attn.proj.bias", (c,), 0.0)
            const(p + "norm2.gamma", (c,), 1.0)
            const(p + "norm2.beta", (c,), 0.0)
            weight(p + "mlp.fc1.weight", (c, hidden))
            const(p + "mlp.fc1.bias", (hidden,), 0.0)
            weight(p + "mlp.fc2.weight", (hidden, c))
            const(p + "mlp.fc2.bias", (c,), 0.0)
        if s < NUM_STAGES - 1:
            p = f"merge{s}."
            const(p + "norm.gamma", (8 * c,), 1.0)
            const(p + "norm.beta", (8 * c,), 0.0)
            weight(p + "reduction.weight", (8 * c, 2 * c))

    c = config.stage_dim(NUM_STAGES - 1)
    const("head.norm.gamma", (c,), 1.0)
    const("head.norm.beta", (c,), 0.0)
    weight("head.weight", (c, 3), config.head_init_std)
    const("head.bias", (3,), 0.0)

    params = ModelParams(config, tensors)
    logging.debug(f"Initialized {len(params)} encoder tensors ({params.n_values} values), seed={seed}")
    return params


# ---------------------------------------------------------------------------
# Patch embedding and merging
# ---------------------------------------------------------------------------


def patch_embed(
    fixed_dg: np.ndarray, moving_dg: np.ndarray, params: ModelParams, config: EncoderConfig
) -> Tensor:
    """Split the two-channel input into p^3 patches and project them to tokens.

    Extents that are not multiples of p are zero-padded symmetrically (the odd
    voxel on the high side).
    """
    fixed_dg = np.asarray(fixed_dg, dtype=np.float64)
    moving_dg = np.asarray(moving_dg, dtype=np.float64)
    if fixed_dg.shape != moving_dg.shape or fixed_dg.ndim != 3:
        raise ShapeMismatchError(
            f"patch_embed: fixed {fixed_dg.shape} and moving {moving_dg.shape} must be equal 3D grids"
        )
    p = config.patch_embed_size
    x = np.stack([fixed_dg, moving_dg], axis=-1)
    widths = []
    for n in x.shape[:3]:
        total = (-n) % p
        widths.append((total // 2, total - total // 2))
    x = np.pad(x, widths + [(0, 0)])
    gx, gy, gz = (n // p for n in x.shape[:3])
    x = x.reshape(gx, p, gy, p, gz, p, 2).transpose(0, 2, 4, 1, 3, 5, 6).reshape(gx, gy, gz, -1)
    return linear(x, params["patch_embed.weight"], params["patch_embed.bias"])


def patch_merging(tokens: Tensor, params: ModelParams, stage: int) -> Tensor:
    """Concatenate 2x2x2 neighborhoods (8C), normalize, project to 2C.

    Odd extents, including 1, are zero-padded at the high end first.
    """
    gx, gy, gz, _ = tokens.shape
    tokens = pad(tokens, [(0, gx % 2), (0, gy % 2), (0, gz % 2), (0, 0)])
    parts = [
        slice_(tokens, (slice(i, None, 2), slice(j, None, 2), slice(k, None, 2), slice(None)))
        for i, j, k in product((0, 1), repeat=3)
    ]
    merged = concat(parts, axis=-1)
    p = f"merge{stage}."
    merged = layer_norm(merged, params[p + "norm.gamma"], params[p + "norm.beta"])
    return linear(merged, params[p + "reduction.weight"])


# ---------------------------------------------------------------------------
# Windowed attention
# ---------------------------------------------------------------------------


def effective_window(grid: Dims, window: Dims) -> Dims:
    """Per-axis window, shrunk to the grid extent where the grid is smaller."""
    return tuple(min(m, g) for m, g in zip(window, grid))  # type: ignore[return-value]


def shift_for(grid: Dims, window: Dims, shifted: bool) -> Dims:
    """Half-window shift on axes whose extent exceeds the configured window."""
    if not shifted:
        return (0, 0, 0)
    eff = effective_window(grid, window)
    return tuple(e // 2 if g > m else 0 for e, g, m in zip(eff, grid, window))  # type: ignore[return-value]


def relative_position_index(window: Dims, table_window: Dims) -> np.ndarray:
    """(N, N) index into a bias table laid out for ``table_window``."""
    coords = np.stack(np.meshgrid(*[np.arange(m) for m in window], indexing="ij")).reshape(3, -1)
    rel = coords[:, :, None] - coords[:, None, :]
    mx, my, mz = table_window
    rel = rel + np.array([mx - 1, my - 1, mz - 1]).reshape(3, 1, 1)
    return (rel[0] * (2 * my - 1) + rel[1]) * (2 * mz - 1) + rel[2]


def _partition_array(x: np.ndarray, window: Dims) -> np.ndarray:
    gx, gy, gz = x.shape[:3]
    mx, my, mz = window
    rest = x.shape[3:]
    x = x.reshape((gx // mx, mx, gy // my, my, gz // mz, mz) + rest)
    x = x.transpose((0, 2, 4, 1, 3, 5) + tuple(range(6, 6 + len(rest))))
    return x.reshape((-1, mx * my * mz) + rest)


def shifted_window_mask(padded: Dims, window: Dims, shift: Dims) -> Optional[np.ndarray]:
    """Additive attention mask for a cyclically shifted grid.

    Tokens are labelled by the region they came from before the shift; pairs
    from different regions get ``-inf``. Returns None when nothing is shifted.
    """
    if not any(shift):
        return None
    region = np.zeros(padded, dtype=np.int64)
    for axis, (n, m, s) in enumerate(zip(padded, window, shift)):
        bounds = (0, n - m, n - s, n) if s else (0, n)
        labels = np.zeros(n, dtype=np.int64)
        for r in range(len(bounds) - 1):
            labels[bounds[r] : bounds[r + 1]] = r
        shape = [1, 1, 1]
        shape[axis] = n
        region = region * 3 + labels.reshape(shape)
    windows = _partition_array(region, window)
    same = windows[:, :, None] == windows[:, None, :]
    return np.where(same, 0.0, -np.inf)


def _partition(x: Tensor, window: Dims) -> Tensor:
    gx, gy, gz, c = x.shape
    mx, my, mz = window
    x = reshape(x, (gx // mx, mx, gy // my, my, gz // mz, mz, c))
    x = permute(x, (0, 2, 4, 1, 3, 5, 6))
    return reshape(x, (-1, mx * my * mz, c))


def _merge_windows(x: Tensor, grid: Dims, window: Dims) -> Tensor:
    gx, gy, gz = grid
    mx, my, mz = window
    c = x.shape[-1]
    x = reshape(x, (gx // mx, gy // my, gz // mz, mx, my, mz, c))
    x = permute(x, (0, 3, 1, 4, 2, 5, 6))
    return reshape(x, (gx, gy, gz, c))


def window_attention(
    tokens: Tensor,
    window: Dims,
    shift: Dims,
    params: ModelParams,
    prefix: str,
    heads: int,
    table_window: Optional[Dims] = None,
    attention_out: Optional[list[np.ndarray]] = None,
) -> Tensor:
    """Multi-head self-attention with relative position bias inside windows.

    Args:
        tokens: (X, Y, Z, C) grid.
        window: Effective window, each extent <= the grid extent.
        shift: Cyclic offset applied before partitioning and undone after.
        params: Model parameters; ``prefix`` selects the block.
        heads: Number of attention heads; C must be divisible by it.
        table_window: Window the bias table was sized for (defaults to ``window``).
        attention_out: If given, the (nW, heads, N, N) attention weights are
            appended to it.
    """
    gx, gy, gz, c = tokens.shape
    grid = (gx, gy, gz)
    if any(m < 1 or m > g for m, g in zip(window, grid)):
        raise InvalidInputError(f"window {window} does not fit token grid {grid}")
    if c % heads:
        raise ShapeMismatchError(f"{c} channels not divisible by {heads} heads")
    table_window = table_window or window
    d = c // heads
    n = int(np.prod(window))

    padded = tuple(g + (-g) % m for g, m in zip(grid, window))
    x = pad(tokens, [(0, p - g) for p, g in zip(padded, grid)] + [(0, 0)])
    if any(shift):
        x = cyclic_shift(x, [-s for s in shift], axes=(0, 1, 2))

    windows = _partition(x, window)
    n_windows = windows.shape[0]
    qkv = linear(windows, params[prefix + "qkv.weight"], params[prefix + "qkv.bias"])
    qkv = permute(reshape(qkv, (n_windows, n, 3, heads, d)), (2, 0, 3, 1, 4))
    q = scalar_mul(qkv[0], d**-0.5)
    k = qkv[1]
    v = qkv[2]

    logits = matmul(q, permute(k, (0, 1, 3, 2)))
    index = relative_position_index(window, table_window)
    bias = take(params[prefix + "rel_bias"], index.reshape(-1), axis=0)
    logits = add(logits, permute(reshape(bias, (n, n, heads)), (2, 0, 1)))
    mask = shifted_window_mask(padded, window, shift)  # type: ignore[arg-type]
    if mask is not None:
        logits = add(logits, mask[:, None, :, :])
    attn = softmax(logits, axis=-1)
    if attention_out is not None:
        attention_out.append(attn.data.copy())

    out = reshape(permute(matmul(attn, v), (0, 2, 1, 3)), (n_windows, n, c))
    out = linear(out, params[prefix + "proj.weight"], params[prefix + "proj.bias"])
    out = _merge_windows(out, padded, window)  # type: ignore[arg-type]
    if any(shift):
        out = cyclic_shift(out, list(shift), axes=(0, 1, 2))
    return slice_(out, (slice(0, gx), slice(0, gy), slice(0, gz), slice(None)))


def swin_block(
    tokens: Tensor, params: ModelParams, stage: int, block: int, config: EncoderConfig
) -> Tensor:
    """Pre-norm block: attention + residual, then MLP + residual. Odd blocks are shifted."""
    p = f"stage{stage}.block{block}."
    grid = tokens.shape[:3]
    window = effective_window(grid, config.window)
    shift = shift_for(grid, config.window, shifted=block % 2 == 1)

    h = layer_norm(tokens, params[p + "norm1.gamma"], params[p + "norm1.beta"])
    h = window_attention(
        h, window, shift, params, p + "attn.", config.heads[stage], table_window=config.window
    )
    tokens = add(tokens, h)

    h = layer_norm(tokens, params[p + "norm2.gamma"], params[p + "norm2.beta"])
    h = gelu(linear(h, params[p + "mlp.fc1.weight"], params[p + "mlp.fc1.bias"]))
    h = linear(h, params[p + "mlp.fc2.weight"], params[p + "mlp.fc2.bias"])
    return add(tokens, h)


def swin_stage(tokens: Tensor, stage: int, params: ModelParams, config: EncoderConfig) -> Tensor:
    for block in range(config.depths[stage]):
        tokens = swin_block(tokens, params, stage, block, config)
    return tokens


# ---------------------------------------------------------------------------
# Full forward pass
# ---------------------------------------------------------------------------


def token_grid_dims(full_dims: Dims, config: EncoderConfig, stage: int) -> Dims:
    """Token extents inside ``stage``: ceil(n / (p * 2^stage)) per axis."""
    step = config.patch_embed_size * 2**stage
    return tuple(-(-n // step) for n in full_dims)  # type: ignore[return-value]


def forward(
    fixed_dg: np.ndarray, moving_dg: np.ndarray, params: ModelParams, config: EncoderConfig
) -> Tensor:
    """Low-resolution displacement field of shape (3, bx, by, bz)."""
    full_dims = tuple(np.shape(fixed_dg))
    tokens = patch_embed(fixed_dg, moving_dg, params, config)
    for stage in range(NUM_STAGES):
        tokens = swin_stage(tokens, stage, params, config)
        if stage < NUM_STAGES - 1:
            tokens = patch_merging(tokens, params, stage)

    tokens = layer_norm(tokens, params["head.norm.gamma"], params["head.norm.beta"])
    coarse = permute(linear(tokens, params["head.weight"], params["head.bias"]), (3, 0, 1, 2))
    band = config.resolve_band_dims(full_dims)  # type: ignore[arg-type]
    return resize_linear(coarse, band, axes=(1, 2, 3))
