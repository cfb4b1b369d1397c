"""Saliency evaluation: MAE, max F-measure, S-measure, max E-measure and PR curves."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import __version__
from .imageio import list_images, load_image

logger = logging.getLogger(__name__)

BETA2 = 0.3
ALPHA = 0.5
N_THRESHOLDS = 256
# machine epsilon, as in the reference alignment code; a larger epsilon keeps
# perfect predictions measurably below 1
EM_EPS = np.finfo(np.float64).eps
SSIM_EPS = np.finfo(np.float64).eps
REPORT_SCHEMA_VERSION = 1
CSV_COLUMNS = ("name", "mae", "max_f", "s_measure", "max_e")
EM_VARIANT = "enhanced-alignment, 256 thresholds (pred > k/255), max over thresholds; uniform gt -> mean agreement"

THRESHOLDS = np.arange(N_THRESHOLDS) / 255.0


def _prep(pred, gt) -> Tuple[np.ndarray, np.ndarray]:
    p = np.asarray(getattr(pred, "data", pred), dtype=np.float64)
    g = np.asarray(getattr(gt, "data", gt), dtype=np.float64)
    p, g = np.squeeze(p), np.squeeze(g)
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} != ground truth shape {g.shape}")
    return p, g >= 0.5


def mae(pred, gt) -> float:
    p, g = _prep(pred, gt)
    return float(np.mean(np.abs(p - g)))


def _confusion(p: np.ndarray, g: np.ndarray):
    """TP and predicted-positive counts for every threshold (pred > t)."""
    # bins are t_k < v <= t_{k+1}; counts of pred > t_k are suffix sums
    idx = np.searchsorted(THRESHOLDS, p.ravel(), side="left")  # number of thresholds strictly below v
    fg = g.ravel()
    pos_hist = np.bincount(idx, minlength=N_THRESHOLDS + 1)
    tp_hist = np.bincount(idx[fg], minlength=N_THRESHOLDS + 1)
    # pred > t_k  <=>  idx > k
    pos = np.cumsum(pos_hist[::-1])[::-1][1:]
    tp = np.cumsum(tp_hist[::-1])[::-1][1:]
    return tp.astype(np.float64), pos.astype(np.float64), float(fg.sum())


def pr_curve(pred, gt) -> np.ndarray:
    """(256, 2) array of (precision, recall) at thresholds k/255; 0/0 counts as 1."""
    p, g = _prep(pred, gt)
    if not g.any():
        logger.debug("pr_curve: ground truth has no foreground; recall follows the 0/0 = 1 convention")
    tp, pos, n_fg = _confusion(p, g)
    precision = np.where(pos > 0, tp / np.where(pos > 0, pos, 1), 1.0)
    recall = np.where(n_fg > 0, tp / max(n_fg, 1.0), 1.0)
    return np.stack([precision, recall], axis=1)


def f_curve(pred, gt, beta2: float = BETA2) -> np.ndarray:
    pr = pr_curve(pred, gt)
    prec, rec = pr[:, 0], pr[:, 1]
    den = beta2 * prec + rec
    return np.where(den > 0, (1 + beta2) * prec * rec / np.where(den > 0, den, 1), 0.0)


def max_f_measure(pred, gt, beta2: float = BETA2) -> float:
    return float(f_curve(pred, gt, beta2).max())


# -- S-measure ---------------------------------------------------------------


def _s_object(pred: np.ndarray, region: np.ndarray) -> float:
    x = pred[region]
    if x.size == 0:
        return 0.0
    mu = x.mean()
    sigma = x.std(ddof=1) if x.size > 1 else 0.0
    return float(2.0 * mu / (mu * mu + 1.0 + sigma + SSIM_EPS))


def _object_score(p: np.ndarray, g: np.ndarray) -> float:
    u = g.mean()
    fg = _s_object(p, g)
    bg = _s_object(1.0 - p, ~g)
    return float(u * fg + (1 - u) * bg)


def _centroid(g: np.ndarray) -> Tuple[int, int]:
    h, w = g.shape
    if not g.any():
        return int(np.floor(w / 2 + 0.5)), int(np.floor(h / 2 + 0.5))
    rows, cols = np.nonzero(g)
    # round half away from zero, then one-based
    return int(np.floor(cols.mean() + 0.5)) + 1, int(np.floor(rows.mean() + 0.5)) + 1


def _ssim(p: np.ndarray, g: np.ndarray) -> float:
    n = p.size
    x, y = p.mean(), g.mean()
    if n > 1:
        sx = ((p - x) ** 2).sum() / (n - 1)
        sy = ((g - y) ** 2).sum() / (n - 1)
        sxy = ((p - x) * (g - y)).sum() / (n - 1)
    else:
        sx = sy = sxy = 0.0
    a = 4 * x * y * sxy
    b = (x * x + y * y) * (sx + sy)
    if a != 0:
        return float(a / (b + SSIM_EPS))
    return 1.0 if b == 0 else 0.0


def _region_score(p: np.ndarray, g: np.ndarray) -> float:
    h, w = g.shape
    cx, cy = _centroid(g)
    cx, cy = min(cx, w), min(cy, h)
    gf = g.astype(np.float64)
    area = float(h * w)
    quads = [
        (slice(0, cy), slice(0, cx)),
        (slice(0, cy), slice(cx, w)),
        (slice(cy, h), slice(0, cx)),
        (slice(cy, h), slice(cx, w)),
    ]
    score = 0.0
    for rs, cs in quads:
        block = p[rs, cs]
        if block.size == 0:
            continue
        score += block.size / area * _ssim(block, gf[rs, cs])
    return score


def s_measure(pred, gt, alpha: float = ALPHA) -> float:
    """Structure measure alpha * object score + (1 - alpha) * region score.

    Uniform ground truth: all background -> 1 - mean(pred), all foreground -> mean(pred).
    """
    p, g = _prep(pred, gt)
    y = g.mean()
    if y == 0:
        return float(1.0 - p.mean())
    if y == 1:
        return float(p.mean())
    return float(max(0.0, alpha * _object_score(p, g) + (1 - alpha) * _region_score(p, g)))


# -- E-measure ---------------------------------------------------------------


def e_curve(pred, gt) -> np.ndarray:
    p, g = _prep(pred, gt)
    gf = g.astype(np.float64)
    n = gf.size
    n_fg = gf.sum()
    out = np.empty(N_THRESHOLDS)
    for k, t in enumerate(THRESHOLDS):
        fm = (p > t).astype(np.float64)
        if n_fg == 0:
            out[k] = 1.0 - fm.mean()
        elif n_fg == n:
            out[k] = fm.mean()
        else:
            phi_fm = fm - fm.mean()
            phi_gt = gf - gf.mean()
            xi = 2.0 * phi_gt * phi_fm / (phi_gt * phi_gt + phi_fm * phi_fm + EM_EPS)
            out[k] = ((xi + 1.0) ** 2 / 4.0).mean()
    return out


def e_measure(pred, gt) -> float:
    return float(e_curve(pred, gt).max())


# -- reports -----------------------------------------------------------------


@dataclass
class ImageMetrics:
    name: str
    mae: float
    max_f: float
    s_measure: float
    max_e: float
    pr: np.ndarray = field(repr=False)

    def row(self) -> dict:
        return {"name": self.name, "mae": self.mae, "max_f": self.max_f, "s_measure": self.s_measure, "max_e": self.max_e}


def evaluate_pair(name: str, pred, gt) -> ImageMetrics:
    return ImageMetrics(name, mae(pred, gt), max_f_measure(pred, gt), s_measure(pred, gt), e_measure(pred, gt), pr_curve(pred, gt))


@dataclass
class MetricReport:
    images: List[ImageMetrics]
    skipped: List[str]
    config: dict = field(default_factory=dict)

    @property
    def means(self) -> Dict[str, float]:
        if not self.images:
            return {k: float("nan") for k in CSV_COLUMNS[1:]}
        return {k: float(np.mean([getattr(im, k) for im in self.images])) for k in CSV_COLUMNS[1:]}

    @property
    def mean_pr(self) -> np.ndarray:
        return np.mean([im.pr for im in self.images], axis=0)

    def to_json(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "tool_version": __version__,
            "config": self.config,
            "constants": {"beta2": BETA2, "alpha": ALPHA, "thresholds": N_THRESHOLDS, "e_measure_variant": EM_VARIANT},
            "images": [im.row() for im in self.images],
            "mean": self.means,
            "count": len(self.images),
            "skipped": list(self.skipped),
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow([f"# schema_version={REPORT_SCHEMA_VERSION} tool_version={__version__}"])
            wr.writerow(CSV_COLUMNS)
            for im in self.images:
                wr.writerow([im.name] + [repr(getattr(im, k)) for k in CSV_COLUMNS[1:]])
            means = self.means
            wr.writerow(["__mean__"] + [repr(means[k]) for k in CSV_COLUMNS[1:]])

    def write_pr(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for im in self.images:
            write_pr_csv(im.pr, d / f"{im.name}_pr.csv")
        if self.images:
            write_pr_csv(self.mean_pr, d / "mean_pr.csv")


def write_pr_csv(pr: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["threshold", "precision", "recall"])
        for k, (prec, rec) in enumerate(pr):
            wr.writerow([k, repr(float(prec)), repr(float(rec))])


def _resize_bilinear(img: np.ndarray, h: int, w: int) -> np.ndarray:
    from .ops import upsample_bilinear

    return upsample_bilinear(img[None, None], h, w).data[0, 0]


def evaluate_dataset(pred_dir, gt_dir, threads: int = 1, config: Optional[dict] = None) -> MetricReport:
    """Per-image metrics for stem-matched pairs plus unweighted means.

    Predictions are bilinearly resized to the ground-truth size. Unmatched files
    are logged and listed in ``skipped``.
    """
    preds = list_images(pred_dir)
    gts = list_images(gt_dir)
    skipped = sorted(set(preds) ^ set(gts))
    for name in skipped:
        logger.warning("unmatched file skipped: %s", name)
    names = sorted(set(preds) & set(gts))

    def one(name: str) -> ImageMetrics:
        p = load_image(preds[name])[0]
        g = load_image(gts[name])[0]
        if p.shape != g.shape:
            p = np.clip(_resize_bilinear(p, *g.shape), 0.0, 1.0)
        return evaluate_pair(name, p, g)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            rows = list(pool.map(one, names))
    else:
        rows = [one(n) for n in names]
    return MetricReport(rows, skipped, dict(config or {}))
