"""Granularity-based attention: local channel attention per depth band plus a residual."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .ops import conv1d_channels, pool
from .tensor import ShapeError, Tensor, as_tensor, sigmoid

VARIANTS = ("I", "II", "III")

logger = logging.getLogger(__name__)


def eca_kernel_size(channels: int, gamma: int = 2, b: int = 1) -> int:
    """Adaptive ECA kernel length: |log2(C) + b| / gamma truncated, bumped to odd, at least 3."""
    t = int(abs((math.log2(channels) + b) / gamma))
    k = t if t % 2 else t + 1
    return max(k, 3)


@dataclass
class GbaParams:
    """ECA kernels for one GBA instance.

    With ``per_region`` False a single kernel is shared by all regions;
    otherwise ``kernels[i]`` serves region i.
    """

    kernels: List[Tensor]
    per_region: bool = False
    variant: str = "III"

    def __post_init__(self):
        for k in self.kernels:
            n = k.shape[0]
            if k.ndim != 1 or n % 2 == 0 or n < 3:
                raise ValueError(f"ECA kernel length must be odd and >= 3, got shape {k.shape}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown pooling variant {self.variant!r}")

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator, regions: int = 1, per_region: bool = False,
             variant: str = "III") -> "GbaParams":
        k = eca_kernel_size(channels)
        bound = 1.0 / math.sqrt(k)
        count = regions if per_region else 1
        kernels = [Tensor(rng.uniform(-bound, bound, k), requires_grad=True) for _ in range(count)]
        return cls(kernels, per_region=per_region, variant=variant)

    def kernel_for(self, region: int) -> Tensor:
        return self.kernels[region] if self.per_region else self.kernels[0]


def pooling_variant(x: Tensor, mask, variant: str = "III") -> Tensor:
    """Per-channel descriptor N x C x 1 x 1 under one of the three average-pooling variants.

    I: plain global mean. II: masked sum over the full area H*W.
    III: masked sum over the mask area (zeros when the mask is empty).
    """
    x = as_tensor(x)
    if variant == "I":
        return pool(x, "GAP")
    if variant == "III":
        return pool(x, "LAP", mask)
    if variant == "II":
        n, c, h, w = x.shape
        m = np.asarray(getattr(mask, "data", mask), dtype=np.float64)
        return pool(x * _as_nchw_mask(m, n, h, w), "GAP")
    raise ValueError(f"unknown pooling variant {variant!r}")


def _as_nchw_mask(m: np.ndarray, n: int, h: int, w: int) -> Tensor:
    if m.shape == (h, w):
        m = m[None, None]
    elif m.ndim == 3:
        m = m[:, None]
    if m.ndim != 4 or m.shape[2:] != (h, w):
        raise ShapeError(f"mask spatial size {m.shape[-2:]} != feature size ({h}, {w})")
    return Tensor(m)


def eca(x: Tensor, kernel: Tensor, descriptor: Optional[Tensor] = None) -> Tensor:
    """sigmoid(conv1d(descriptor)) broadcast onto x; global average pooling when no descriptor is given."""
    z = pool(x, "GAP") if descriptor is None else descriptor
    return sigmoid(conv1d_channels(z, kernel)) * x


def local_eca(x: Tensor, mask, kernel: Tensor, variant: str = "III") -> Tensor:
    """ECA driven by a region descriptor; samples whose mask is empty yield zeros."""
    x = as_tensor(x)
    out = eca(x, kernel, pooling_variant(x, mask, variant))
    n, _, h, w = x.shape
    m = _as_nchw_mask(np.asarray(getattr(mask, "data", mask), dtype=np.float64), n, h, w).data
    present = m.reshape(m.shape[0], -1).any(axis=1)
    if not present.all():
        out = out * Tensor(present.astype(np.float64).reshape(-1, 1, 1, 1))
    return out


def _region_masks(masks, h: int, w: int) -> np.ndarray:
    """Normalize to (R, N|1, 1, H, W) float masks."""
    m = np.asarray(masks, dtype=np.float64)
    if m.ndim == 3:  # (R, H, W)
        m = m[:, None, None]
    elif m.ndim == 4:  # (N, R, H, W)
        m = m.transpose(1, 0, 2, 3)[:, :, None]
    else:
        raise ShapeError(f"masks must be (R, H, W) or (N, R, H, W), got {m.shape}")
    if m.shape[-2:] != (h, w):
        raise ShapeError(f"mask spatial size {m.shape[-2:]} != feature size ({h}, {w})")
    return m


def gba_forward(f_in: Tensor, masks, params: GbaParams) -> Tensor:
    """Sum of local ECA over masked copies of ``f_in`` plus the ``f_in`` residual."""
    f_in = as_tensor(f_in)
    if f_in.ndim != 4:
        raise ShapeError(f"gba_forward: expected NCHW features, got {f_in.shape}")
    n, c, h, w = f_in.shape
    rm = _region_masks(masks, h, w)
    if params.per_region and rm.shape[0] > len(params.kernels):
        raise ValueError(f"{rm.shape[0]} regions but only {len(params.kernels)} per-region kernels")
    total = None
    for i, m in enumerate(rm):
        if not m.any():
            logger.debug("gba: region %d is empty at %dx%d, contributes zeros", i, h, w)
        mt = Tensor(m)
        term = local_eca(f_in * mt, m, params.kernel_for(i), params.variant)
        total = term if total is None else total + term
    return total + f_in


def global_eca_residual(f_in: Tensor, kernel: Tensor) -> Tensor:
    """Conventional channel attention with a residual: ECA(f_in) + f_in."""
    f_in = as_tensor(f_in)
    return eca(f_in, kernel) + f_in
