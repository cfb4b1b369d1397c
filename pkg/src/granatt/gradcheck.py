"""Central-difference verification of recorded gradients."""

from __future__ import annotations

from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .tensor import Tensor, as_tensor


class GradCheckError(RuntimeError):
    def __init__(self, message: str, coordinate: Optional[Tuple[int, int]] = None):
        super().__init__(message)
        self.coordinate = coordinate


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))


def _scalar(out) -> float:
    val = float(np.asarray(out.data if isinstance(out, Tensor) else out).reshape(-1)[0])
    return val


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence,
    eps: float = 1e-5,
    sample: Optional[int] = None,
    seed: int = 0,
    wrt: Optional[Sequence[int]] = None,
) -> float:
    """Max relative error between recorded and central-difference gradients.

    ``f`` is called as ``f(*tensors)`` and must return a scalar tensor.
    ``wrt`` restricts the check to some input positions; ``sample`` draws that
    many coordinates at random (without replacement) instead of checking all.
    """
    base = [np.array(as_tensor(t).data, dtype=np.float64) for t in inputs]
    wrt = list(range(len(base))) if wrt is None else list(wrt)

    leaves = [Tensor(b.copy(), requires_grad=(k in wrt)) for k, b in enumerate(base)]
    out = f(*leaves)
    if out.data.size != 1:
        raise GradCheckError(f"grad_check: f must be scalar-valued, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise GradCheckError("grad_check: f is not finite at the base point")
    out.backward()
    analytic = [
        leaves[k].grad if leaves[k].grad is not None else np.zeros_like(base[k]) for k in range(len(base))
    ]

    coords: List[Tuple[int, int]] = [(k, j) for k in wrt for j in range(base[k].size)]
    if sample is not None and sample < len(coords):
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=sample, replace=False)
        coords = [coords[p] for p in sorted(pick)]

    worst = 0.0
    for k, j in coords:
        vals = []
        for step in (eps, -eps):
            pert = [b if m != k else b.copy() for m, b in enumerate(base)]
            pert[k].reshape(-1)[j] += step
            v = _scalar(f(*[Tensor(p) for p in pert]))
            if not np.isfinite(v):
                raise GradCheckError(f"grad_check: non-finite value at input {k}, coordinate {j}", (k, j))
            vals.append(v)
        numeric = (vals[0] - vals[1]) / (2 * eps)
        worst = max(worst, relative_error(float(analytic[k].reshape(-1)[j]), numeric))
    return worst
