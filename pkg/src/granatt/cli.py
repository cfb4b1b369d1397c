"""Batch command line: masks, forward, eval, gradcheck, noise.

Exit codes: 0 success, 1 usage or fatal error, 2 partial success, 3 gradient
verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

from . import __version__

logger = logging.getLogger("granatt")

EXIT_OK, EXIT_FATAL, EXIT_PARTIAL, EXIT_VERIFY = 0, 1, 2, 3
THREADS_ENV = "GRANATT_THREADS"


class UsageError(Exception):
    pass


def resolve_threads(flag: Optional[int]) -> int:
    if flag is not None:
        n = flag
    else:
        raw = os.environ.get(THREADS_ENV, "1")
        try:
            n = int(raw)
        except ValueError:
            raise UsageError(f"{THREADS_ENV}={raw!r} is not an integer")
    if n < 1:
        raise UsageError(f"thread count must be >= 1, got {n}")
    return n


def run_config(args: argparse.Namespace) -> dict:
    """The parsed flags as plain JSON values, echoed into every report."""
    skip = {"func"}
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k not in skip}
    cfg["tool_version"] = __version__
    return cfg


def _map_ordered(fn: Callable, items: Sequence, threads: int) -> List:
    # results come back in input order regardless of the pool size
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(min(threads, len(items))) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _input_dir(path: Path, what: str) -> Dict[str, Path]:
    from .imageio import list_images

    if not path.is_dir():
        raise UsageError(f"cannot read {what} directory {path}")
    try:
        return list_images(path)
    except OSError as exc:
        raise UsageError(f"cannot read {what} directory {path}: {exc}")


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=False))


# -- masks ---------------------------------------------------------------------


def cmd_masks(args) -> int:
    from .granularity import MAX_T, depth_masks, export_masks
    from .imageio import ImageFormatError, load_image

    if not 1 <= args.T <= MAX_T:
        raise UsageError(f"--T must be in 1..{MAX_T}, got {args.T}")
    images = _input_dir(args.depth_dir, "depth")
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    if not images:
        logger.warning("no depth images found in %s", args.depth_dir)

    def one(stem: str):
        try:
            depth = load_image(images[stem])[0]
            masks, ts = depth_masks(depth, args.T)
            export_masks(masks, ts, out, stem)
            return stem, ts.to_json(), None
        except (ImageFormatError, ValueError) as exc:
            return stem, None, str(exc)

    results = _map_ordered(one, sorted(images), resolve_threads(args.threads))
    skipped = [{"name": s, "reason": err} for s, _, err in results if err]
    for item in skipped:
        logger.warning("skipped %s: %s", item["name"], item["reason"])
    _write_json(out / "run.json", {
        "command": "masks",
        "config": run_config(args),
        "seed": None,
        "images": {s: ts for s, ts, err in results if not err},
        "skipped": skipped,
    })
    print(f"masks: {len(results) - len(skipped)} written, {len(skipped)} skipped -> {out}")
    return EXIT_PARTIAL if skipped else EXIT_OK


# -- forward -------------------------------------------------------------------


def _fit(img: np.ndarray, h: int, w: int) -> np.ndarray:
    from .ops import upsample_bilinear

    if img.shape[1:] == (h, w):
        return img
    return np.clip(upsample_bilinear(img[None], h, w).data[0], 0.0, 1.0)


def cmd_forward(args) -> int:
    from .imageio import ImageFormatError, load_image, save_map
    from .network import CheckpointError, Network, NetworkConfig
    from .tensor import no_grad

    if args.checkpoint is not None:
        try:
            net = Network.load(args.checkpoint)
        except (OSError, CheckpointError) as exc:
            raise UsageError(f"cannot load checkpoint: {exc}")
    else:
        size = (args.size, args.size) if args.size else NetworkConfig().input_size
        net = Network(NetworkConfig(input_size=size, seed=args.seed, thresholds=args.T))
    h, w = net.config.input_size
    rgbs = _input_dir(args.rgb_dir, "rgb")
    depths = _input_dir(args.depth_dir, "depth")
    unpaired = sorted(set(rgbs) ^ set(depths))
    for name in unpaired:
        logger.warning("unpaired file skipped: %s", name)
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)

    def one(stem: str):
        try:
            rgb = load_image(rgbs[stem])
            depth = load_image(depths[stem])[:1]
        except ImageFormatError as exc:
            return stem, str(exc)
        if rgb.shape[0] == 1:
            rgb = np.repeat(rgb, 3, axis=0)
        src = depth.shape[1:]
        with no_grad():
            res = net.forward(_fit(rgb, h, w)[None], _fit(depth, h, w)[None])
        items = res.maps.items() if args.all_levels else [(("S", 1), res.final)]
        for (branch, level), m in items:
            pm = _fit(m.data[0], *src) if src != (h, w) else m.data[0]
            suffix = f"_{branch}{level}" if args.all_levels else ""
            save_map(pm, out / f"{stem}{suffix}.png")
        return stem, None

    stems = sorted(set(rgbs) & set(depths))
    results = _map_ordered(one, stems, resolve_threads(args.threads))
    failed = [{"name": s, "reason": err} for s, err in results if err]
    for item in failed:
        logger.warning("skipped %s: %s", item["name"], item["reason"])
    _write_json(out / "run.json", {
        "command": "forward",
        "config": run_config(args),
        "network": net.config.to_json(),
        "seed": net.config.seed,
        "written": [s for s, err in results if not err],
        "skipped": unpaired + [f["name"] for f in failed],
    })
    print(f"forward: {len(results) - len(failed)} images -> {out}")
    return EXIT_PARTIAL if failed else EXIT_OK


# -- eval ----------------------------------------------------------------------


def cmd_eval(args) -> int:
    from .metrics import evaluate_dataset

    _input_dir(args.pred_dir, "prediction")
    _input_dir(args.gt_dir, "ground-truth")
    report = evaluate_dataset(args.pred_dir, args.gt_dir, resolve_threads(args.threads), run_config(args))
    if not report.images:
        raise UsageError("no matched prediction/ground-truth pairs")
    target = args.output or Path(f"report.{args.report}")
    if args.report == "json":
        report.write_json(target)
    else:
        report.write_csv(target)
    if args.pr is not None:
        report.write_pr(args.pr)
    means = report.means
    print(f"eval: {len(report.images)} pairs, {len(report.skipped)} skipped -> {target}")
    print("  " + "  ".join(f"{k}={v:.4f}" for k, v in means.items()))
    return EXIT_OK


# -- gradcheck -----------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    from . import verify

    try:
        results = verify.run_checks(args.scope)
    except ValueError as exc:
        raise UsageError(str(exc))
    return report_gradchecks(results)


def report_gradchecks(results: Iterable[dict]) -> int:
    failed = []
    for r in results:
        status = "ok" if r["ok"] else "FAIL"
        print(f"{r['scope']:12s} {r['name']:24s} {r['error']:.3e}  (tol {r['tol']:.0e})  {status}")
        if not r["ok"]:
            failed.append(f"{r['scope']}/{r['name']}")
    if failed:
        print("gradient check failed: " + ", ".join(failed), file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


# -- noise ---------------------------------------------------------------------


def cmd_noise(args) -> int:
    from .imageio import NOISE_PRESETS, ImageFormatError, UnreachableNoiseError, add_depth_noise, load_image, save_map

    if args.preset is not None:
        target = NOISE_PRESETS[args.preset][0]
    elif args.rmse is not None:
        target = args.rmse
    else:
        raise UsageError("one of --rmse or --preset is required")
    if not 0 < target < 1:
        raise UsageError(f"--rmse must lie in (0, 1), got {target}")
    images = _input_dir(args.depth_dir, "depth")
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    if not images:
        logger.warning("no depth images found in %s", args.depth_dir)

    def one(stem: str):
        try:
            depth = load_image(images[stem])[0]
            noisy, spec = add_depth_noise(depth, target, args.seed)
        except (ImageFormatError, UnreachableNoiseError) as exc:
            return stem, None, str(exc)
        save_map(noisy, out / f"{stem}.png")
        _write_json(out / f"{stem}_noise.json", {"name": stem, "tool_version": __version__, **spec.to_json()})
        return stem, spec, None

    results = _map_ordered(one, sorted(images), resolve_threads(args.threads))
    done = [(s, spec) for s, spec, err in results if not err]
    skipped = [{"name": s, "reason": err} for s, _, err in results if err]
    for item in skipped:
        logger.warning("skipped %s: %s", item["name"], item["reason"])
    summary = {
        "mean_rmse": float(np.mean([sp.achieved_rmse for _, sp in done])) if done else None,
        "mean_delta1": float(np.mean([sp.achieved_delta1 for _, sp in done])) if done else None,
    }
    _write_json(out / "run.json", {
        "command": "noise",
        "config": run_config(args),
        "seed": args.seed,
        "target_rmse": target,
        "summary": summary,
        "skipped": skipped,
    })
    if done:
        print(f"noise: {len(done)} images, mean RMSE {summary['mean_rmse']:.4f}, mean delta1 {summary['mean_delta1']:.4f}")
    else:
        print("noise: no images written")
    return EXIT_PARTIAL if skipped else EXIT_OK


# -- parser --------------------------------------------------------------------


def _unit_interval(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1), got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    from .granularity import DEFAULT_T
    from .imageio import NOISE_PRESETS

    p = argparse.ArgumentParser(prog="granatt", description="RGB-D saliency toolkit: masks, inference, evaluation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def threads(sp):
        sp.add_argument("--threads", type=int, default=None, help=f"worker threads (default ${THREADS_ENV} or 1)")

    sp = sub.add_parser("masks", help="depth-granularity masks per depth image")
    sp.add_argument("depth_dir", type=Path)
    sp.add_argument("out_dir", type=Path)
    sp.add_argument("--T", type=int, default=DEFAULT_T, help="number of thresholds (1..3)")
    threads(sp)
    sp.set_defaults(func=cmd_masks)

    sp = sub.add_parser("forward", help="saliency maps for paired RGB and depth images")
    sp.add_argument("rgb_dir", type=Path)
    sp.add_argument("depth_dir", type=Path)
    sp.add_argument("out_dir", type=Path)
    sp.add_argument("--checkpoint", type=Path, default=None)
    sp.add_argument("--seed", type=int, default=42, help="initialization seed when no checkpoint is given")
    sp.add_argument("--T", type=int, default=DEFAULT_T, help="thresholds when no checkpoint is given")
    sp.add_argument("--size", type=int, default=None, help="square network resolution when no checkpoint is given")
    sp.add_argument("--all-levels", action="store_true", help="write all 15 maps per image")
    threads(sp)
    sp.set_defaults(func=cmd_forward)

    sp = sub.add_parser("eval", help="score predictions against ground truth")
    sp.add_argument("pred_dir", type=Path)
    sp.add_argument("gt_dir", type=Path)
    sp.add_argument("--report", choices=("csv", "json"), default="json")
    sp.add_argument("-o", "--output", type=Path, default=None, help="report path (default report.<format>)")
    sp.add_argument("--pr", type=Path, default=None, metavar="DIR", help="also write PR curves to DIR")
    threads(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", help="run the registered gradient checks")
    sp.add_argument("--scope", default="all", help="all, tensor-core, gba, fusion, objective or network")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("noise", help="add calibrated Gaussian noise to depth images")
    sp.add_argument("depth_dir", type=Path)
    sp.add_argument("out_dir", type=Path)
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--rmse", type=_unit_interval, default=None)
    g.add_argument("--preset", choices=sorted(NOISE_PRESETS), default=None)
    sp.add_argument("--seed", type=int, default=42)
    threads(sp)
    sp.set_defaults(func=cmd_noise)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad usage; the contract reserves 2 for partial runs
        return EXIT_OK if exc.code == 0 else EXIT_FATAL
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
