"""Differentiable feature-map operations on NCHW tensors."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor

POOL_MODES = ("GAP", "GMP", "CAP", "CMP", "LAP")


def _windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (N, C, Ho, Wo, kh, kw) view over an already padded input
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(
    x: Tensor,
    kernel: Tensor,
    stride: int = 1,
    padding: int = 0,
    bias: Optional[Tensor] = None,
) -> Tensor:
    """Cross-correlation of an NCHW input with an OIKhKw kernel (zero padding)."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: stride must be >= 1 and padding >= 0 (got {stride}, {padding})")
    n, c, h, w = x.shape
    o, i, kh, kw = kernel.shape
    if c != i:
        raise ShapeError(f"conv2d: input channel axis (dim 1) = {c} does not match kernel in-channel axis (dim 1) = {i}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"conv2d: spatial axes (H, W) = ({h}, {w}) smaller than kernel ({kh}, {kw})")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({o},)")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = _windows(xp, kh, kw, stride)
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    kmat = kernel.data.reshape(o, -1)
    out = cols @ kmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def back(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gk = (gm.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gm @ kmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros(xp.shape)
            for a in range(kh):
                for b in range(kw):
                    gxp[:, :, a:a + stride * ho:stride, b:b + stride * wo:stride] += gcols[:, :, :, :, a, b].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        gb = gm.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor.from_op(np.ascontiguousarray(out), parents, back)


def conv1d_channels(z: Tensor, kernel: Tensor) -> Tensor:
    """Zero-padded 1-D cross-correlation along the channel axis.

    ``z`` is a channel descriptor of shape (N, C), (N, C, 1, 1) or (C,);
    the output keeps that shape. The kernel length must be odd.
    """
    z, kernel = as_tensor(z), as_tensor(kernel)
    if kernel.ndim != 1:
        raise ShapeError(f"conv1d_channels: kernel must be 1-D, got {kernel.shape}")
    k = kernel.shape[0]
    if k % 2 == 0:
        raise ValueError(f"conv1d_channels: kernel length must be odd, got {k}")
    shape = z.shape
    if z.ndim == 1:
        flat = z.data[None, :]
    elif z.ndim == 2:
        flat = z.data
    elif z.ndim == 4 and shape[2] == 1 and shape[3] == 1:
        flat = z.data[:, :, 0, 0]
    else:
        raise ShapeError(f"conv1d_channels: expected a channel descriptor, got {shape}")
    n, c = flat.shape
    p = (k - 1) // 2
    fp = np.pad(flat, ((0, 0), (p, p)))
    win = sliding_window_view(fp, k, axis=1)  # (N, C, k)
    kd = kernel.data
    out = win @ kd

    def back(g):
        g2 = g.reshape(n, c)
        gk = np.einsum("nc,nck->k", g2, win) if kernel.requires_grad else None
        gz = None
        if z.requires_grad:
            gfp = np.zeros(fp.shape)
            for j in range(k):
                gfp[:, j:j + c] += g2 * kd[j]
            gz = gfp[:, p:p + c].reshape(shape)
        return gz, gk

    return Tensor.from_op(out.reshape(shape), (z, kernel), back)


def _first_argmax_mask(d: np.ndarray, axis) -> np.ndarray:
    """One-hot mask of the first (row-major) maximum along ``axis``."""
    axes = axis if isinstance(axis, tuple) else (axis,)
    rest = [a for a in range(d.ndim) if a not in axes]
    moved = np.transpose(d, rest + list(axes))
    lead = moved.shape[:len(rest)]
    flat = moved.reshape(lead + (-1,))
    idx = flat.argmax(axis=-1)
    onehot = np.zeros_like(flat)
    np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
    onehot = onehot.reshape(moved.shape)
    inverse = np.argsort(rest + list(axes))
    return np.transpose(onehot, inverse)


def _mask_array(mask, n: int, h: int, w: int) -> np.ndarray:
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
    if m.shape == (h, w):
        m = m[None, None]
    elif m.ndim == 3 and m.shape[1:] == (h, w):
        m = m[:, None]
    if m.ndim != 4 or m.shape[1] != 1 or m.shape[2:] != (h, w) or m.shape[0] not in (1, n):
        raise ShapeError(f"mask shape {np.shape(mask)} does not match feature spatial size ({h}, {w})")
    return m.astype(np.float64)


def pool(x: Tensor, mode: str, mask=None) -> Tensor:
    """Pooling family used by the attention blocks.

    GAP/GMP reduce H and W to N x C x 1 x 1; CAP/CMP reduce channels to
    N x 1 x H x W; LAP averages over ``mask == 1`` only and yields zeros for
    an empty mask. Max modes send the gradient to the first maximum.
    """
    x = as_tensor(x)
    if mode not in POOL_MODES:
        raise ValueError(f"unknown pool mode {mode!r}")
    if x.ndim != 4:
        raise ShapeError(f"pool: expected NCHW input, got {x.shape}")
    if (mode == "LAP") != (mask is not None):
        raise ValueError("pool: a mask is required for LAP and only for LAP")
    d = x.data
    n, c, h, w = d.shape

    if mode == "GAP":
        out = d.sum(axis=(2, 3), keepdims=True) / (h * w)
        return Tensor.from_op(out, (x,), lambda g: (np.broadcast_to(g / (h * w), d.shape).copy(),))
    if mode == "CAP":
        out = d.sum(axis=1, keepdims=True) / c
        return Tensor.from_op(out, (x,), lambda g: (np.broadcast_to(g / c, d.shape).copy(),))
    if mode in ("GMP", "CMP"):
        axis = (2, 3) if mode == "GMP" else 1
        out = d.max(axis=axis, keepdims=True)
        sel = _first_argmax_mask(d, axis)
        return Tensor.from_op(out, (x,), lambda g: (sel * g,))

    m = _mask_array(mask, n, h, w)
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("pool: LAP mask must be binary")
    area = m.sum(axis=(2, 3), keepdims=True)
    safe = np.where(area > 0, area, 1.0)
    out = np.where(area > 0, (d * m).sum(axis=(2, 3), keepdims=True) / safe, 0.0)
    return Tensor.from_op(out, (x,), lambda g: (g * m / safe,))


def max_pool2d(x: Tensor, kernel: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    """Windowed max pooling with -inf padding; ties go to the first element in the window."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    win = _windows(xp, kernel, kernel, stride)
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gxp = np.zeros(xp.shape)
        ky, kx = np.divmod(arg, kernel)
        rows = np.arange(ho)[None, None, :, None] * stride + ky
        cols = np.arange(wo)[None, None, None, :] * stride + kx
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        np.add.at(gxp, (ni, ci, rows, cols), g)
        return (gxp[:, :, padding:padding + h, padding:padding + w],)

    return Tensor.from_op(out, (x,), back)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat_channels: no inputs")
    ref = parts[0].shape
    for k, p in enumerate(parts):
        if p.ndim != 4 or p.shape[0] != ref[0] or p.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: part {k} shape {p.shape} mismatches N/H/W of {ref}")
    if len(parts) == 1:
        return parts[0]
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])
    out = np.concatenate([p.data for p in parts], axis=1)

    def back(g):
        return tuple(g[:, bounds[k]:bounds[k + 1]] for k in range(len(parts)))

    return Tensor.from_op(out, parts, back)


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    # align_corners=False source coordinates, clamped at the low edge
    a = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for j in range(n_out):
        src = max((j + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        t = src - i0
        a[j, i0] += 1.0 - t
        a[j, i1] += t
    return a


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    x = as_tensor(x)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"upsample_bilinear: output size must be positive, got ({out_h}, {out_w})")
    if x.ndim != 4:
        raise ShapeError(f"upsample_bilinear: expected NCHW input, got {x.shape}")
    h, w = x.shape[2:]
    if (h, w) == (out_h, out_w):
        return x
    ah = _interp_matrix(h, out_h)
    aw = _interp_matrix(w, out_w)
    out = ah @ x.data @ aw.T
    return Tensor.from_op(out, (x,), lambda g: (ah.T @ g @ aw,))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map over the last axis: ``x @ weight.T + bias`` with weight C_out x C_in."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input feature axis {x.shape[-1:]} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def back(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.reshape(-1, g.shape[-1]).T @ xd.reshape(-1, xd.shape[-1]) if weight.requires_grad else None
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, back)
