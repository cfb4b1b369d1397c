"""Registered gradient-check suite, grouped by scope."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np

from . import fusion, gba, objective, ops
from .gradcheck import grad_check
from .layers import named_tensors
from .tensor import Tensor, clamp, log, relu, sigmoid

UNIT_TOL = 1e-4
NETWORK_TOL = 1e-3


@dataclass
class Check:
    scope: str
    name: str
    run: Callable[[], float]
    tol: float = UNIT_TOL


REGISTRY: List[Check] = []


def register(scope: str, name: str, tol: float = UNIT_TOL):
    def deco(fn):
        REGISTRY.append(Check(scope, name, fn, tol))
        return fn

    return deco


def scopes() -> List[str]:
    return sorted({c.scope for c in REGISTRY})


def run_checks(scope: str = "all") -> List[dict]:
    chosen = [c for c in REGISTRY if scope in ("all", c.scope)]
    if not chosen:
        raise ValueError(f"unknown gradcheck scope {scope!r}; choose from {['all'] + scopes()}")
    results = []
    for c in chosen:
        err = c.run()
        results.append({"scope": c.scope, "name": c.name, "error": err, "tol": c.tol, "ok": bool(err < c.tol)})
    return results


def _rng(seed: int = 0) -> np.random.Generator:
    return np.random.default_rng(seed)


def _weighted(out: Tensor, seed: int = 99) -> Tensor:
    # random projection so every output coordinate matters with O(1) weight
    w = _rng(seed).uniform(0.5, 1.5, out.shape)
    return (out * Tensor(w)).sum()


# -- tensor core ---------------------------------------------------------------


@register("tensor-core", "conv2d")
def _conv2d() -> float:
    r = _rng(1)
    x, k, b = r.standard_normal((2, 3, 8, 8)), r.standard_normal((4, 3, 3, 3)), r.standard_normal(4)
    return grad_check(lambda x, k, b: _weighted(ops.conv2d(x, k, 2, 1, b)), [x, k, b])


@register("tensor-core", "conv1d_channels")
def _conv1d() -> float:
    r = _rng(2)
    return grad_check(lambda z, k: _weighted(ops.conv1d_channels(z, k)), [r.standard_normal((2, 8)), r.standard_normal(5)])


@register("tensor-core", "pool")
def _pool() -> float:
    r = _rng(3)
    x = r.standard_normal((2, 4, 8, 8))
    mask = (r.random((8, 8)) > 0.5).astype(float)
    worst = 0.0
    for mode in ("GAP", "GMP", "CAP", "CMP", "LAP"):
        m = mask if mode == "LAP" else None
        worst = max(worst, grad_check(lambda x, mode=mode, m=m: _weighted(ops.pool(x, mode, m)), [x]))
    return worst


@register("tensor-core", "max_pool2d")
def _maxpool() -> float:
    return grad_check(lambda x: _weighted(ops.max_pool2d(x)), [_rng(4).standard_normal((2, 4, 8, 8))])


@register("tensor-core", "elementwise")
def _elementwise() -> float:
    r = _rng(5)
    a, b = r.standard_normal((2, 4, 8, 8)), r.standard_normal((2, 4, 1, 1))
    e1 = grad_check(lambda a, b: _weighted(a * b + sigmoid(a) - a / (2.0 + sigmoid(b))), [a, b])
    e2 = grad_check(lambda a: _weighted(relu(a) + log(clamp(sigmoid(a), 0.1, 0.9))), [a])
    return max(e1, e2)


@register("tensor-core", "concat_channels")
def _concat() -> float:
    r = _rng(6)
    return grad_check(lambda a, b: _weighted(ops.concat_channels([a, b])),
                      [r.standard_normal((2, 2, 8, 8)), r.standard_normal((2, 3, 8, 8))])


@register("tensor-core", "upsample_bilinear")
def _upsample() -> float:
    return grad_check(lambda x: _weighted(ops.upsample_bilinear(x, 11, 13)), [_rng(7).standard_normal((2, 4, 5, 6))])


@register("tensor-core", "linear")
def _linear() -> float:
    r = _rng(8)
    return grad_check(lambda x, w, b: _weighted(ops.linear(x, w, b)),
                      [r.standard_normal((2, 4)), r.standard_normal((3, 4)), r.standard_normal(3)])


# -- gba -----------------------------------------------------------------------


def _three_region_masks(h: int, w: int, seed: int = 9) -> np.ndarray:
    lab = _rng(seed).integers(0, 3, (h, w))
    return np.stack([(lab == i).astype(float) for i in range(3)])


@register("gba", "local_eca")
def _local_eca() -> float:
    r = _rng(10)
    x = r.standard_normal((2, 4, 8, 8))
    mask = _three_region_masks(8, 8)[0]
    worst = 0.0
    for variant in gba.VARIANTS:
        worst = max(worst, grad_check(lambda x, k, v=variant: _weighted(gba.local_eca(x, mask, k, v)),
                                      [x, r.standard_normal(3)]))
    return worst


@register("gba", "gba_forward")
def _gba_forward() -> float:
    r = _rng(11)
    masks = _three_region_masks(8, 8)

    def f(x, k):
        return _weighted(gba.gba_forward(x, masks, gba.GbaParams([k])))

    return grad_check(f, [r.standard_normal((2, 4, 8, 8)), r.standard_normal(3)])


@register("gba", "gba_forward_per_region")
def _gba_per_region() -> float:
    r = _rng(12)
    masks = _three_region_masks(8, 8, seed=13)

    def f(x, k1, k2, k3):
        return _weighted(gba.gba_forward(x, masks, gba.GbaParams([k1, k2, k3], per_region=True)))

    return grad_check(f, [r.standard_normal((2, 4, 8, 8))] + [r.standard_normal(3) for _ in range(3)])


# -- fusion --------------------------------------------------------------------


def _param_check(build, inputs, forward) -> float:
    """grad_check over inputs and every tensor of a parameter bundle."""
    from .layers import replace_tensors

    named = named_tensors(build)
    names = list(named)

    def f(*ts):
        ins = ts[: len(inputs)]
        mapping = dict(zip(names, ts[len(inputs):]))
        return _weighted(forward(replace_tensors(build, mapping), *ins))

    return grad_check(f, list(inputs) + [named[n].data for n in names])


@register("fusion", "transform_ft")
def _ft() -> float:
    r = _rng(20)
    p = fusion.Transform.init(r, 4)
    return _param_check(p, [r.standard_normal((2, 4, 8, 8))], lambda p, x: fusion.transform_ft(x, p))


@register("fusion", "channel_attention")
def _ca() -> float:
    r = _rng(21)
    p = fusion.CdaParams.init(r, 8, reduction=2)
    return _param_check(p, [r.standard_normal((2, 4, 8, 8))],
                        lambda p, x: fusion.channel_attention(x, p.mlp_in, p.mlp_out))


@register("fusion", "spatial_attention")
def _sa() -> float:
    r = _rng(22)
    p = fusion.CdaParams.init(r, 4)
    return _param_check(p, [r.standard_normal((2, 2, 8, 8))], lambda p, x: fusion.spatial_attention(x, p.spatial))


@register("fusion", "cda_fuse")
def _cda() -> float:
    r = _rng(23)
    p = fusion.CdaParams.init(r, 4)
    return _param_check(p, [r.standard_normal((2, 4, 8, 8)), r.standard_normal((2, 4, 8, 8))],
                        lambda p, x, y: fusion.cda_fuse(x, y, p))


@register("fusion", "encoder_level_merge")
def _merge() -> float:
    from .layers import Conv

    r = _rng(24)
    conv = Conv.init(r, 4, 2, 3)
    return _param_check(conv, [r.standard_normal((2, 2, 4, 4)), r.standard_normal((2, 2, 8, 8))],
                        lambda c, fused, prev: fusion.encoder_level_merge(fused, prev, c))


@register("fusion", "emi_fuse")
def _emi() -> float:
    r = _rng(25)
    p = fusion.EmiParams.init(r, 4)
    xs = [r.standard_normal((2, 4, 8, 8)) for _ in range(3)]
    return _param_check(p, xs, lambda p, a, b, c: fusion.emi_fuse(a, b, c, p))


# -- objective -----------------------------------------------------------------


def _pred_gt(seed: int, shape=(2, 1, 8, 8)):
    r = _rng(seed)
    return r.uniform(0.05, 0.95, shape), (r.random(shape) > 0.5).astype(float)


@register("objective", "bce_loss")
def _bce() -> float:
    p, g = _pred_gt(30)
    return grad_check(lambda p: objective.bce_loss(p, g), [p])


@register("objective", "iou_loss")
def _iou() -> float:
    p, g = _pred_gt(31)
    return grad_check(lambda p: objective.iou_loss(p, g), [p])


@register("objective", "multilevel_loss")
def _ml() -> float:
    r = _rng(32)
    g = (r.random((1, 1, 8, 8)) > 0.5).astype(float)
    keys = [(b, i) for i in range(1, 6) for b in objective.BRANCHES]
    preds = [r.uniform(0.05, 0.95, (1, 1, 8, 8)) for _ in keys]
    return grad_check(lambda *ps: objective.multilevel_loss(dict(zip(keys, ps)), g), preds)


# -- network -------------------------------------------------------------------


def network_check(size: int = 88, sample: int = 32, seed: int = 0, config=None) -> float:
    """Multilevel loss of the full network w.r.t. a random parameter subsample."""
    from .network import Network, NetworkConfig

    cfg = config or NetworkConfig(input_size=(size, size), seed=seed)
    net = Network(cfg)
    r = _rng(seed + 100)
    h, w = cfg.input_size
    rgb = r.random((1, 3, h, w))
    yy = np.linspace(0, 1, h)[:, None] * np.ones((1, w))
    depth = np.clip(yy + 0.05 * r.standard_normal((h, w)), 0, 1)[None, None]
    gt = (r.random((1, 1, h, w)) > 0.5).astype(float)
    masks = net.masks_for(depth)
    named = net.named_parameters()
    names = list(named)

    def f(*ts):
        return objective.multilevel_loss(net.with_parameters(dict(zip(names, ts))).forward(rgb, depth, masks), gt)

    return grad_check(f, [named[n].data for n in names], sample=sample, seed=seed)


@register("network", "end_to_end", tol=NETWORK_TOL)
def _network() -> float:
    return network_check()
