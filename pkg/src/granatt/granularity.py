"""Depth histograms, exact multi-Otsu thresholds and depth-band masks."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

NBINS = 256
MAX_T = 3
DEFAULT_T = 2


@dataclass(frozen=True)
class DepthHistogram:
    bins: np.ndarray  # int64 counts, length 256
    total: int


@dataclass(frozen=True)
class ThresholdSet:
    """Ascending bin thresholds; region i holds bins in (d_{i-1}, d_i]."""

    thresholds: Tuple[int, ...]
    objective: float
    requested_t: int = DEFAULT_T
    exact_objective: Fraction = field(default=Fraction(0), compare=False, repr=False)

    @property
    def effective_t(self) -> int:
        return len(self.thresholds)

    def to_json(self) -> dict:
        return {
            "thresholds": list(self.thresholds),
            "objective": self.objective,
            "requested_T": self.requested_t,
            "effective_T": self.effective_t,
        }


def check_depth(depth) -> np.ndarray:
    d = np.asarray(depth, dtype=np.float64)
    if d.ndim == 3 and d.shape[0] == 1:
        d = d[0]
    if d.ndim != 2 or d.size == 0:
        raise ValueError(f"depth map must be a non-empty H x W array, got shape {d.shape}")
    if not np.all((d >= 0) & (d <= 1)):
        raise ValueError("depth values must lie in [0, 1]")
    return d


def quantize(depth) -> np.ndarray:
    d = check_depth(depth)
    return np.clip(np.floor(d * 255 + 0.5), 0, 255).astype(np.int64)


def build_histogram(depth) -> DepthHistogram:
    q = quantize(depth)
    return DepthHistogram(np.bincount(q.ravel(), minlength=NBINS).astype(np.int64), int(q.size))


def _moments(bins: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    # P[k] = sum over bins < k; index e = d + 1 turns threshold d into a boundary
    w = np.concatenate([[0], np.cumsum(bins)]).astype(np.int64)
    s = np.concatenate([[0], np.cumsum(bins * np.arange(len(bins)))]).astype(np.int64)
    return w, s


def _class_table(w: np.ndarray, s: np.ndarray) -> np.ndarray:
    """G[a, b] = S(a, b)^2 / W(a, b) for boundaries a < b; 0 where the class is empty."""
    dw = w[None, :] - w[:, None]
    ds = (s[None, :] - s[:, None]).astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.where(dw > 0, ds * ds / np.where(dw > 0, dw, 1), 0.0)
    return g


def _exact_score(w, s, bounds) -> Fraction:
    total = Fraction(0)
    for a, b in zip(bounds[:-1], bounds[1:]):
        cw = int(w[b] - w[a])
        if cw:
            cs = int(s[b] - s[a])
            total += Fraction(cs * cs, cw)
    return total


def _candidates(g: np.ndarray, t: int, nb: int) -> Tuple[np.ndarray, float]:
    """All boundary tuples whose float score is within rounding of the float maximum."""
    last = nb
    if t == 1:
        scores = g[0, 1:last] + g[1:last, last]
        best = scores.max()
        tol = 1e-9 * max(1.0, abs(best))
        e1 = np.nonzero(scores >= best - tol)[0] + 1
        return e1[:, None], best
    if t == 2:
        e = np.arange(1, last)
        scores = g[0, e][:, None] + g[np.ix_(e, e)] + g[e, last][None, :]
        valid = e[:, None] < e[None, :]
        scores = np.where(valid, scores, -np.inf)
        best = scores.max()
        tol = 1e-9 * max(1.0, abs(best))
        i, j = np.nonzero(scores >= best - tol)
        return np.stack([e[i], e[j]], axis=1), best
    # t == 3: loop over the first boundary, vectorize the remaining pair
    e = np.arange(1, last)
    tail = g[np.ix_(e, e)] + g[e, last][None, :]
    tail = np.where(e[:, None] < e[None, :], tail, -np.inf)
    per_first = np.empty(len(e))
    for idx, e1 in enumerate(e):
        sub = tail[idx + 1:, :]
        inner = g[e1, e[idx + 1:]][:, None] + sub
        per_first[idx] = g[0, e1] + (inner.max() if inner.size else -np.inf)
    best = per_first.max()
    tol = 1e-9 * max(1.0, abs(best))
    out = []
    for idx in np.nonzero(per_first >= best - tol)[0]:
        e1 = e[idx]
        inner = g[0, e1] + g[e1, e[idx + 1:]][:, None] + tail[idx + 1:, :]
        jj, kk = np.nonzero(inner >= best - tol)
        for a, b in zip(jj, kk):
            out.append((e1, e[idx + 1 + a], e[b]))
    return np.array(out, dtype=np.int64).reshape(-1, 3), best


def multi_otsu(hist: DepthHistogram, t: int = DEFAULT_T) -> ThresholdSet:
    """Exhaustive multi-level Otsu over a 256-bin histogram.

    Maximizes the between-class scatter sum_i w_i mu_i^2 - (sum_i w_i mu_i)^2 / N.
    Near-ties under float scoring are resolved with exact rational arithmetic,
    preferring tuples without empty classes, then the lexicographically smallest.
    When fewer than t + 1 bins are occupied the number of thresholds shrinks to
    (occupied bins - 1).
    """
    if not 0 <= t <= MAX_T:
        raise ValueError(f"threshold count must be in [0, {MAX_T}], got {t}")
    bins = np.asarray(hist.bins, dtype=np.int64)
    if bins.ndim != 1 or bins.size < 2:
        raise ValueError("histogram must be a 1-D array of at least 2 bins")
    if np.any(bins < 0) or bins.sum() == 0:
        raise ValueError("histogram is empty")
    nb = bins.size
    n = int(bins.sum())
    w, s = _moments(bins)
    total_s = int(s[-1])
    t_eff = min(t, int(np.count_nonzero(bins)) - 1)

    def report(bounds, score: Fraction) -> ThresholdSet:
        between = (score - Fraction(total_s * total_s, n)) / n
        ths = tuple(int(b) - 1 for b in bounds[1:-1])
        return ThresholdSet(ths, float(between), requested_t=t, exact_objective=between)

    if t_eff == 0:
        bounds = (0, nb)
        return report(bounds, _exact_score(w, s, bounds))

    g = _class_table(w, s)
    cands, _ = _candidates(g, t_eff, nb)
    # boundaries inside an empty stretch give the same partition; keep the smallest
    cands = cands[np.lexsort(cands.T[::-1])]
    _, first = np.unique(w[cands], axis=0, return_index=True)
    cands = cands[np.sort(first)]
    best_key, best_bounds, best_score = None, None, None
    for row in cands:
        bounds = (0, *map(int, row), nb)
        score = _exact_score(w, s, bounds)
        has_empty = any(w[b] == w[a] for a, b in zip(bounds[:-1], bounds[1:]))
        key = (-score, has_empty, bounds)
        if best_key is None or key < best_key:
            best_key, best_bounds, best_score = key, bounds, score
    return report(best_bounds, best_score)


def generate_masks(depth, thresholds: ThresholdSet | Sequence[int]) -> np.ndarray:
    """Binary masks (R, H, W), R = number of thresholds + 1, ordered near to far by bin."""
    q = quantize(depth)
    ths = thresholds.thresholds if isinstance(thresholds, ThresholdSet) else tuple(thresholds)
    edges = (-1, *ths, 255)
    masks = np.stack([(q > lo) & (q <= hi) for lo, hi in zip(edges[:-1], edges[1:])])
    return masks.astype(np.float64)


def resize_masks(masks: np.ndarray, h: int, w: int) -> np.ndarray:
    """Nearest-neighbour resize of (R, H, W) masks; the partition property survives."""
    if h < 1 or w < 1:
        raise ValueError(f"target size must be positive, got ({h}, {w})")
    m = np.asarray(masks)
    lead = m.shape[:-2]
    H, W = m.shape[-2:]
    if (H, W) == (h, w):
        return m.copy()
    rows = np.minimum((np.arange(h) * H) // h, H - 1)
    cols = np.minimum((np.arange(w) * W) // w, W - 1)
    return m[..., rows[:, None], cols[None, :]].reshape(lead + (h, w))


def depth_masks(depth, t: int = DEFAULT_T) -> Tuple[np.ndarray, ThresholdSet]:
    ts = multi_otsu(build_histogram(depth), t)
    return generate_masks(depth, ts), ts


def export_masks(masks: np.ndarray, ts: ThresholdSet, out_dir: Path, stem: str) -> List[Path]:
    """Write masks as 0/255 grayscale PNGs plus a JSON sidecar."""
    from .imageio import save_map

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, m in enumerate(masks, start=1):
        p = out_dir / f"{stem}_m{i}.png"
        save_map(m[None], p)
        paths.append(p)
    sidecar = out_dir / f"{stem}_masks.json"
    sidecar.write_text(json.dumps({"stem": stem, "regions": len(masks), **ts.to_json()}, indent=2))
    paths.append(sidecar)
    return paths
