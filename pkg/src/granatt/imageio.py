"""8-bit image ingestion/emission and the depth-noise robustness harness."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

PathLike = Union[str, Path]

IMAGE_SUFFIXES = (".png", ".pgm", ".ppm", ".pnm")

# Named targets matching the robustness table (RMSE, reported delta1).
NOISE_PRESETS = {
    "des": (0.261, 0.270),
    "nlpr": (0.259, 0.342),
    "nju2k": (0.236, 0.413),
}

DELTA1_RATIO = 1.25
DELTA1_GUARD = 1e-3
CALIBRATION_RTOL = 0.05
MAX_BISECTIONS = 20


class ImageFormatError(ValueError):
    pass


class UnreachableNoiseError(ValueError):
    def __init__(self, target: float, ceiling: float):
        super().__init__(f"target RMSE {target:.4f} exceeds the maximum reachable RMSE {ceiling:.4f} after clamping")
        self.target = target
        self.ceiling = ceiling


def load_image(path: PathLike) -> np.ndarray:
    """Read an 8-bit PNG/PGM/PPM as float64 (C, H, W) in [0, 1]; C is 1 or 3."""
    path = Path(path)
    if path.suffix.lower() not in IMAGE_SUFFIXES:
        raise ImageFormatError(f"{path}: unsupported image format {path.suffix!r}")
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("L", "P", "1"):
                arr = np.asarray(im.convert("L"), dtype=np.uint8)[None]
            elif mode in ("RGB", "RGBA"):
                arr = np.asarray(im.convert("RGB"), dtype=np.uint8).transpose(2, 0, 1)
            elif mode == "LA":
                arr = np.asarray(im.convert("L"), dtype=np.uint8)[None]
            else:
                raise ImageFormatError(f"{path}: unsupported pixel mode {mode!r} (8-bit only)")
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ImageFormatError(f"{path}: cannot decode image ({exc})") from exc
    return arr.astype(np.float64) / 255.0


def to_bytes(values: np.ndarray) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    return np.clip(np.floor(v * 255 + 0.5), 0, 255).astype(np.uint8)


def save_map(values, path: PathLike) -> None:
    """Write a single-channel map in [0, 1] as 8-bit grayscale (PNG or PGM by suffix)."""
    path = Path(path)
    v = np.asarray(getattr(values, "data", values), dtype=np.float64)
    if v.ndim == 3 and v.shape[0] == 1:
        v = v[0]
    if v.ndim != 2:
        raise ValueError(f"save_map expects a 1 x H x W or H x W map, got shape {v.shape}")
    if np.any(v < 0) or np.any(v > 1) or not np.isfinite(v).all():
        raise ValueError(f"{path}: map values must lie in [0, 1]")
    fmt = "PPM" if path.suffix.lower() in (".pgm", ".pnm") else "PNG"
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(to_bytes(v), mode="L").save(path, format=fmt)
    except OSError as exc:
        raise OSError(f"{path}: cannot write image ({exc})") from exc


def list_images(directory: PathLike) -> dict:
    """Map stem -> path for every supported image in ``directory`` (sorted by stem)."""
    d = Path(directory)
    if not d.is_dir():
        raise NotADirectoryError(f"{d}: not a readable directory")
    found = {p.stem: p for p in sorted(d.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file()}
    return dict(sorted(found.items()))


@dataclass
class NoiseSpec:
    target_rmse: float
    seed: int
    sigma: float
    achieved_rmse: float
    achieved_delta1: float
    iterations: int

    def to_json(self) -> dict:
        out = asdict(self)
        out["delta1_definition"] = f"fraction of pixels with max(a/b, b/a) > {DELTA1_RATIO}, both values > {DELTA1_GUARD}"
        return out


def noise_stats(clean, noisy) -> Tuple[float, float]:
    """(RMSE, delta1) where delta1 is the failing-pixel fraction over guarded pixels."""
    a = np.asarray(clean, dtype=np.float64)
    b = np.asarray(noisy, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"noise_stats: shape mismatch {a.shape} vs {b.shape}")
    rmse = float(np.sqrt(np.mean((a - b) ** 2)))
    ok = (a > DELTA1_GUARD) & (b > DELTA1_GUARD)
    if not ok.any():
        return rmse, 0.0
    ratio = np.maximum(a[ok] / b[ok], b[ok] / a[ok])
    return rmse, float(np.count_nonzero(ratio > DELTA1_RATIO)) / float(ok.sum())


def add_depth_noise(depth, target_rmse: float, seed: int = 42) -> Tuple[np.ndarray, NoiseSpec]:
    """Add clamped i.i.d. Gaussian noise whose post-clamp RMSE matches ``target_rmse``.

    A single standard-normal draw is scaled by sigma; the clamped RMSE is
    monotone in sigma, so bisection finds sigma within the 5% band.
    """
    if not 0 < target_rmse < 1:
        raise ValueError(f"target RMSE must lie in (0, 1), got {target_rmse}")
    d = np.asarray(depth, dtype=np.float64)
    z = np.random.default_rng(seed).standard_normal(d.shape)

    def rmse_at(sigma: float) -> float:
        return float(np.sqrt(np.mean((np.clip(d + sigma * z, 0.0, 1.0) - d) ** 2)))

    ceiling = float(np.sqrt(np.mean((np.where(z > 0, 1.0, np.where(z < 0, 0.0, d)) - d) ** 2)))
    if target_rmse > ceiling:
        raise UnreachableNoiseError(target_rmse, ceiling)

    lo, hi = 0.0, 1.0
    while rmse_at(hi) < target_rmse and hi < 1e6:
        lo, hi = hi, hi * 2
    sigma, achieved, its = hi, rmse_at(hi), 0
    for its in range(1, MAX_BISECTIONS + 1):
        sigma = 0.5 * (lo + hi)
        achieved = rmse_at(sigma)
        if abs(achieved - target_rmse) <= CALIBRATION_RTOL * target_rmse * 0.1:
            break
        if achieved < target_rmse:
            lo = sigma
        else:
            hi = sigma
    if abs(achieved - target_rmse) > CALIBRATION_RTOL * target_rmse:
        raise UnreachableNoiseError(target_rmse, ceiling)
    noisy = np.clip(d + sigma * z, 0.0, 1.0)
    rmse, delta1 = noise_stats(d, noisy)
    return noisy, NoiseSpec(float(target_rmse), int(seed), float(sigma), rmse, delta1, its)
