"""Toy frozen patch encoder and the multigranularity multimodal adapter.

The adapter compresses a grid of visual embeddings by adaptive average
pooling at several target sides, re-injects spatial position through a
shared zero-padded 3x3 convolution, optionally appends a global 1x1 view,
and maps everything into the language dimension:

    linear(d->D) + GELU -> reshape to (g_h, g_w, D)
        -> per kernel s: adaptive_avg_pool2d(s) -> positional_conv
        -> global mean view (no conv) when enabled
        -> flatten row-major, concatenate (coarse..fine, then global)
        -> linear(D->D)

Token count: sum(s_n^2) + 1 if the global view is enabled.
The MLP baseline (triple linear with GELUs) keeps all tokens instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError, UsageError, NumericError


@dataclass(frozen=True)
class EncoderConfig:
    height: int
    width: int
    patch: int
    dim: int

    def __post_init__(self):
        if self.patch <= 0 or self.dim <= 0:
            raise ShapeError("patch size and embedding dim must be positive")
        if self.height < self.patch or self.width < self.patch:
            raise ShapeError("image must be at least one patch in each dimension")

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.patch, self.width // self.patch

    @property
    def tokens(self) -> int:
        g_h, g_w = self.grid
        return g_h * g_w


def init_encoder_params(cfg: EncoderConfig, seed: int) -> dict[str, np.ndarray]:
    """Frozen random patch projection (stand-in for a pretrained encoder)."""
    rng = np.random.default_rng(seed)
    flat = 3 * cfg.patch * cfg.patch
    return {
        "proj_w": rng.normal(0.0, 0.02, size=(flat, cfg.dim)),
        "proj_b": np.zeros(cfg.dim),
    }


def patch_embed(image: np.ndarray, cfg: EncoderConfig, params: dict[str, np.ndarray]) -> np.ndarray:
    """Project non-overlapping P x P patches (row-major) into d-dim rows."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (cfg.height, cfg.width, 3):
        raise ShapeError(
            f"expected image of shape {(cfg.height, cfg.width, 3)}, got {image.shape}"
        )
    g_h, g_w = cfg.grid
    p = cfg.patch
    cropped = image[: g_h * p, : g_w * p, :]
    patches = cropped.reshape(g_h, p, g_w, p, 3).transpose(0, 2, 1, 3, 4)
    flat = patches.reshape(g_h * g_w, 3 * p * p)
    return flat @ params["proj_w"] + params["proj_b"]


@dataclass(frozen=True)
class AdapterConfig:
    kernels: tuple[int, ...]
    include_global: bool
    in_dim: int
    out_dim: int
    conv_kernel: int = 3
    conv_padding: int = 1

    def __post_init__(self):
        if any(s <= 0 for s in self.kernels):
            raise ShapeError("pooling kernels must be positive")
        if list(self.kernels) != sorted(self.kernels, reverse=True) or len(set(self.kernels)) != len(self.kernels):
            raise ShapeError("kernels must be strictly decreasing")
        if not self.include_global and not self.kernels:
            raise ShapeError("adapter needs at least one kernel or the global view")
        if self.conv_kernel != 3 or self.conv_padding != 1:
            raise ShapeError("positional conv is fixed at kernel 3, padding 1")


def visual_token_count(cfg: AdapterConfig) -> int:
    return sum(s * s for s in cfg.kernels) + (1 if cfg.include_global else 0)


@dataclass
class AdapterParams:
    linear1_w: Tensor  # (d, D)
    linear1_b: Tensor  # (D,)
    pos_conv_w: Tensor  # (D, D, 3, 3), shared across granularities
    pos_conv_b: Tensor  # (D,)
    linear2_w: Tensor  # (D, D)
    linear2_b: Tensor  # (D,)

    def named(self) -> dict[str, Tensor]:
        return {
            "linear1_w": self.linear1_w,
            "linear1_b": self.linear1_b,
            "pos_conv_w": self.pos_conv_w,
            "pos_conv_b": self.pos_conv_b,
            "linear2_w": self.linear2_w,
            "linear2_b": self.linear2_b,
        }


def init_adapter_params(cfg: AdapterConfig, seed: int, trainable: bool = True) -> AdapterParams:
    rng = np.random.default_rng(seed)
    d, D = cfg.in_dim, cfg.out_dim

    def param(shape):
        return Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=trainable)

    def zeros(shape):
        return Tensor(np.zeros(shape), requires_grad=trainable)

    return AdapterParams(
        linear1_w=param((d, D)),
        linear1_b=zeros((D,)),
        pos_conv_w=param((D, D, 3, 3)),
        pos_conv_b=zeros((D,)),
        linear2_w=param((D, D)),
        linear2_b=zeros((D,)),
    )


def adaptive_avg_pool2d(grid, s: int) -> Tensor:
    """Pool an (h, w, C) grid to (s, s, C).

    Bin (i, j) averages rows [floor(i*h/s), ceil((i+1)*h/s)) and columns
    [floor(j*w/s), ceil((j+1)*w/s)); bins overlap when the side does not
    divide evenly.
    """
    grid = ad.as_tensor(grid)
    if grid.data.ndim != 3:
        raise ShapeError(f"expected (h, w, C) grid, got shape {grid.data.shape}")
    h, w, c = grid.data.shape
    if not (1 <= s <= min(h, w)):
        raise ShapeError(f"pool side {s} out of range for {h}x{w} grid")

    row_bins = [(math.floor(i * h / s), math.ceil((i + 1) * h / s)) for i in range(s)]
    col_bins = [(math.floor(j * w / s), math.ceil((j + 1) * w / s)) for j in range(s)]

    out_data = np.empty((s, s, c))
    for i, (r0, r1) in enumerate(row_bins):
        for j, (c0, c1) in enumerate(col_bins):
            out_data[i, j] = grid.data[r0:r1, c0:c1].mean(axis=(0, 1))

    def backward(g):
        if not (ad.tracked(grid)):
            return
        full = np.zeros_like(grid.data)
        for i, (r0, r1) in enumerate(row_bins):
            for j, (c0, c1) in enumerate(col_bins):
                full[r0:r1, c0:c1] += g[i, j] / ((r1 - r0) * (c1 - c0))
        grid.accumulate(full)

    return ad.make_node(out_data, (grid,), backward)


def positional_conv(grid, weight, bias) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1, full channel mixing.

    ``weight`` has shape (C_out, C_in, 3, 3); the output replaces the input
    (no residual). out[y, x, o] = sum_{dy, dx, c} pad[y+dy, x+dx, c] *
    weight[o, c, dy, dx] + bias[o].
    """
    grid = ad.as_tensor(grid)
    weight = ad.as_tensor(weight)
    bias = ad.as_tensor(bias)
    h, w, c_in = grid.data.shape
    c_out = weight.data.shape[0]
    if weight.data.shape != (c_out, c_in, 3, 3):
        raise ShapeError(
            f"conv weight shape {weight.data.shape} incompatible with "
            f"{c_in}-channel grid"
        )

    padded = np.zeros((h + 2, w + 2, c_in))
    padded[1:-1, 1:-1] = grid.data
    # columns[y, x, tap*c_in + c] row-major over the 3x3 taps
    cols = np.empty((h, w, 9 * c_in))
    for dy in range(3):
        for dx in range(3):
            tap = dy * 3 + dx
            cols[:, :, tap * c_in:(tap + 1) * c_in] = padded[dy:dy + h, dx:dx + w]
    w_flat = weight.data.transpose(0, 2, 3, 1).reshape(c_out, 9 * c_in)
    out_data = cols.reshape(h * w, 9 * c_in) @ w_flat.T + bias.data
    out_data = out_data.reshape(h, w, c_out)

    def backward(g):
        g2 = g.reshape(h * w, c_out)
        if ad.tracked(weight):
            gw_flat = g2.T @ cols.reshape(h * w, 9 * c_in)
            weight.accumulate(
                gw_flat.reshape(c_out, 3, 3, c_in).transpose(0, 3, 1, 2)
            )
        if ad.tracked(bias):
            bias.accumulate(g2.sum(axis=0))
        if ad.tracked(grid):
            gcols = (g2 @ w_flat).reshape(h, w, 9 * c_in)
            gpad = np.zeros_like(padded)
            for dy in range(3):
                for dx in range(3):
                    tap = dy * 3 + dx
                    gpad[dy:dy + h, dx:dx + w] += gcols[:, :, tap * c_in:(tap + 1) * c_in]
            grid.accumulate(gpad[1:-1, 1:-1])

    return ad.make_node(out_data, (grid, weight, bias), backward)


def adapter_forward(embedding, grid_shape: tuple[int, int], cfg: AdapterConfig, params: AdapterParams) -> Tensor:
    """Map an (n, d) visual embedding to (visual_token_count(cfg), D) tokens."""
    embedding = ad.as_tensor(embedding)
    g_h, g_w = grid_shape
    n, d = embedding.data.shape
    if n != g_h * g_w:
        raise ShapeError(f"embedding rows {n} != grid {g_h}x{g_w}")
    if d != cfg.in_dim:
        raise ShapeError(f"embedding dim {d} != adapter in_dim {cfg.in_dim}")
    if cfg.kernels and cfg.kernels[0] > min(g_h, g_w):
        raise ShapeError(
            f"kernel {cfg.kernels[0]} exceeds grid side {min(g_h, g_w)}"
        )

    x = ad.gelu(embedding @ params.linear1_w + params.linear1_b)
    grid = x.reshape((g_h, g_w, cfg.out_dim))

    blocks = []
    for s in cfg.kernels:
        pooled = adaptive_avg_pool2d(grid, s)
        encoded = positional_conv(pooled, params.pos_conv_w, params.pos_conv_b)
        blocks.append(encoded.reshape((s * s, cfg.out_dim)))
    if cfg.include_global:
        blocks.append(adaptive_avg_pool2d(grid, 1).reshape((1, cfg.out_dim)))

    tokens = blocks[0] if len(blocks) == 1 else ad.concat(blocks, axis=0)
    return tokens @ params.linear2_w + params.linear2_b


@dataclass
class MlpAdapterParams:
    w1: Tensor  # (d, D)
    b1: Tensor
    w2: Tensor  # (D, D)
    b2: Tensor
    w3: Tensor  # (D, D)
    b3: Tensor

    def named(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2,
                "w3": self.w3, "b3": self.b3}


def init_mlp_adapter_params(d: int, D: int, seed: int, trainable: bool = True) -> MlpAdapterParams:
    rng = np.random.default_rng(seed)

    def param(shape):
        return Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=trainable)

    return MlpAdapterParams(
        w1=param((d, D)), b1=Tensor(np.zeros(D), requires_grad=trainable),
        w2=param((D, D)), b2=Tensor(np.zeros(D), requires_grad=trainable),
        w3=param((D, D)), b3=Tensor(np.zeros(D), requires_grad=trainable),
    )


def mlp_adapter_forward(embedding, params: MlpAdapterParams) -> Tensor:
    """Triple linear with intervening GELUs; keeps every token (n -> n)."""
    embedding = ad.as_tensor(embedding)
    x = ad.gelu(embedding @ params.w1 + params.b1)
    x = ad.gelu(x @ params.w2 + params.b2)
    return x @ params.w3 + params.b3


@dataclass(frozen=True)
class GradCheckReport:
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def max_rel_error(self) -> float:
        return max(self.per_param.values(), default=0.0)


def grad_check(forward_fn, params: dict[str, Tensor], eps: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of a sum-of-squares loss on ``forward_fn``'s
    output against central finite differences.

    ``params`` is the check set; frozen groups are excluded by not passing
    them. Relative error per entry is |analytic - numeric| /
    max(1e-12, |analytic| + |numeric|); the report keeps the per-parameter
    maximum.
    """
    if not (1e-6 <= eps <= 1e-3):
        raise UsageError(f"eps {eps} outside [1e-6, 1e-3]")

    def loss_value() -> float:
        out = forward_fn()
        return float((out.data ** 2).sum())

    for p in params.values():
        p.grad = None
    out = forward_fn()
    loss = ad.tsum(out * out)
    loss.backward()

    per_param: dict[str, float] = {}
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(analytic).all():
            raise NumericError(f"non-finite analytic gradient for '{name}'")
        worst = 0.0
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = loss_value()
            flat[i] = orig - eps
            f_minus = loss_value()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            if not math.isfinite(numeric):
                raise NumericError(f"non-finite numeric gradient for '{name}'")
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(1e-12, abs(a) + abs(numeric)))
        per_param[name] = worst
    return GradCheckReport(per_param=per_param)
