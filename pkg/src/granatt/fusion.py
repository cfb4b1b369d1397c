"""Cross dual-attention encoder fusion and efficient multi-input decoder fusion."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from .gba import eca, eca_kernel_size
from .layers import Conv, Linear
from .ops import concat_channels, max_pool2d, pool
from .tensor import ShapeError, Tensor, as_tensor, relu, sigmoid

MLP_REDUCTION = 16

AttentionFn = Callable[[Tensor], Tuple[Tensor, Tensor]]


@dataclass
class Transform:
    """F_t: 1x1 convolution halving the channels, then a 3x3 convolution."""

    reduce: Conv
    edge: Conv

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int) -> "Transform":
        if channels % 2:
            raise ValueError(f"channel count must be even, got {channels}")
        half = channels // 2
        return cls(Conv.init(rng, channels, half, 1), Conv.init(rng, half, half, 3))


@dataclass
class CdaParams:
    ft_x: Transform
    ft_y: Transform
    mlp_in: Linear
    mlp_out: Linear
    spatial: Conv
    out: Conv

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int, reduction: int = MLP_REDUCTION) -> "CdaParams":
        half = channels // 2
        hidden = max(1, half // reduction)
        return cls(
            ft_x=Transform.init(rng, channels),
            ft_y=Transform.init(rng, channels),
            mlp_in=Linear.init(rng, half, hidden),
            mlp_out=Linear.init(rng, hidden, half),
            spatial=Conv.init(rng, 2, 1, 7),
            out=Conv.init(rng, 2 * half, half, 3),
        )


@dataclass
class EmiParams:
    fuse: Conv
    eca_kernel: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int) -> "EmiParams":
        k = eca_kernel_size(channels)
        bound = 1.0 / math.sqrt(k)
        return cls(Conv.init(rng, 3 * channels, channels, 3),
                   Tensor(rng.uniform(-bound, bound, k), requires_grad=True))


def transform_ft(f: Tensor, params: Transform) -> Tensor:
    f = as_tensor(f)
    c = f.shape[1]
    if c % 2:
        raise ShapeError(f"transform_ft: channel axis must be even, got {c}")
    if params.reduce.weight.shape[:2] != (c // 2, c):
        raise ShapeError(f"transform_ft: 1x1 weights {params.reduce.weight.shape} do not halve {c} channels")
    return params.edge(params.reduce(f))


def channel_attention(f: Tensor, mlp_in: Linear, mlp_out: Linear) -> Tensor:
    """sigmoid(MLP(GAP f) + MLP(GMP f)) as N x C x 1 x 1, one MLP shared by both paths."""
    f = as_tensor(f)
    n, c = f.shape[:2]

    def mlp(z):
        return mlp_out(relu(mlp_in(z.reshape(n, c))))

    return sigmoid(mlp(pool(f, "GAP")) + mlp(pool(f, "GMP"))).reshape(n, c, 1, 1)


def spatial_attention(f: Tensor, conv7: Conv) -> Tensor:
    """sigmoid(conv7x7([mean_c f, max_c f])) as N x 1 x H x W."""
    f = as_tensor(f)
    return sigmoid(conv7(concat_channels([pool(f, "CAP"), pool(f, "CMP")])))


def dual_attention(f: Tensor, params: CdaParams) -> Tuple[Tensor, Tensor]:
    return channel_attention(f, params.mlp_in, params.mlp_out), spatial_attention(f, params.spatial)


def cda_fuse(
    f_x: Tensor,
    f_y: Tensor,
    params: CdaParams,
    cross: bool = True,
    attention_fn: Optional[AttentionFn] = None,
    return_parts: bool = False,
):
    """Cross dual-attention fusion of two same-shaped feature maps into C/2 channels.

    Each transformed branch is modulated by the channel and spatial attention of
    the *other* branch; ``cross=False`` uses each branch's own attention instead.
    ``attention_fn`` replaces the attention computation (test hook).
    """
    f_x, f_y = as_tensor(f_x), as_tensor(f_y)
    if f_x.shape != f_y.shape:
        raise ShapeError(f"cda_fuse: branch shapes differ {f_x.shape} vs {f_y.shape}")
    if f_x.ndim != 4 or f_x.shape[1] % 2:
        raise ShapeError(f"cda_fuse: need NCHW with an even channel axis, got {f_x.shape}")
    px = transform_ft(f_x, params.ft_x)
    py = transform_ft(f_y, params.ft_y)
    attend = attention_fn or (lambda f: dual_attention(f, params))
    mc_x, ms_x = attend(px)
    mc_y, ms_y = attend(py)
    if cross:
        enh_x = ms_y * mc_y * px
        enh_y = ms_x * mc_x * py
    else:
        enh_x = ms_x * mc_x * px
        enh_y = ms_y * mc_y * py
    out = params.out(concat_channels([enh_x, enh_y]))
    if return_parts:
        return out, {"fx": px, "fy": py, "enh_x": enh_x, "enh_y": enh_y}
    return out


def align_previous(previous: Tensor, h: int, w: int) -> Tensor:
    """Stride-2 3x3 max pooling of the previous level onto (h, w)."""
    aligned = max_pool2d(previous, 3, 2, 1)
    if aligned.shape[2:] != (h, w):
        raise ShapeError(f"previous level {previous.shape[2:]} cannot be aligned to ({h}, {w}) by stride-2 pooling")
    return aligned


def encoder_level_merge(fused: Tensor, previous: Optional[Tensor], conv: Optional[Conv]) -> Tensor:
    """Combine a fused level with the previous shared level: conv3x3([fused, pool(previous)])."""
    fused = as_tensor(fused)
    if previous is None:
        return fused
    aligned = align_previous(as_tensor(previous), *fused.shape[2:])
    return conv(concat_channels([fused, aligned]))


def emi_fuse(f_r: Tensor, f_d: Tensor, f_h: Tensor, params: EmiParams) -> Tensor:
    """G-ECA(conv3x3([f_R, f_D, f_h])) + f_h."""
    f_r, f_d, f_h = as_tensor(f_r), as_tensor(f_d), as_tensor(f_h)
    if not f_r.shape == f_d.shape == f_h.shape:
        raise ShapeError(f"emi_fuse: input shapes differ {f_r.shape}, {f_d.shape}, {f_h.shape}")
    mixed = params.fuse(concat_channels([f_r, f_d, f_h]))
    return eca(mixed, params.eca_kernel) + f_h
