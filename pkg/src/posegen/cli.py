"""Command-line entry point: ``posegen {gen-data,train,eval,bench}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data, losses, metrics, training
from .config import RunConfig, load_config
from .geometry import (PointCloud, RigidTransform, compose, random_pose,
                       random_unit_quaternion, sample_points)
from .model import PoseNet, prepare_inputs, stack_inputs
from .refine import IcpConfig, icp_refine

log = logging.getLogger("posegen")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _non_negative_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _fraction(text: str) -> float:
    v = _non_negative_float(text)
    if v >= 1:
        raise argparse.ArgumentTypeError(f"must be in [0, 1), got {v}")
    return v


def _shape_list(text: str) -> tuple:
    shapes = tuple(s.strip() for s in text.split(",") if s.strip())
    bad = [s for s in shapes if s not in data.SHAPES]
    if not shapes or bad:
        raise argparse.ArgumentTypeError(f"shapes must be a comma list of {data.SHAPES}")
    return shapes


def _run_config(args) -> RunConfig:
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        return cfg.with_overrides(args.set or [])
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {exc.filename}") from None
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    settings = data.GenerationSettings(
        shapes=args.shapes, samples_per_object=args.samples_per_object,
        n_points=args.n_points, rotation_bound=args.rotation_bound,
        noise_sigma=args.noise, occlusion_fraction=args.occlusion)
    ds = data.generate_dataset(settings, seed=args.seed)
    path = data.write_manifest(ds, args.out)
    print(f"wrote {len(ds.samples)} samples to {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    cfg = _run_config(args)
    if args.no_generation:
        cfg = replace(cfg, lambda_cano=0.0, lambda_posed=0.0)
    if args.no_pointfusion:
        cfg = replace(cfg, use_pointfusion=False)
    data_dir = args.data or cfg.data
    if not data_dir:
        raise UsageError("no dataset given (--data or 'data' config key)")
    cfg = replace(cfg, data=str(data_dir))
    ds = data.read_manifest(data_dir)
    net = PoseNet(cfg.model_config())
    history = training.train(net, ds, cfg.train_config())
    out = Path(args.out_checkpoint)
    out.parent.mkdir(parents=True, exist_ok=True)
    net.save(out)
    _attach_config(Path(f"{out}.json"), cfg)
    Path(f"{out}.config").write_text(cfg.to_text())
    log_path = Path(args.loss_log) if args.loss_log else Path(f"{out}.loss.csv")
    training.write_loss_log(history, log_path)
    last = history[-1]
    print(f"trained {len(history)} epochs; final total loss {last.total:.6f}; "
          f"checkpoint {out}; loss log {log_path}")
    return EXIT_OK


def _attach_config(sidecar: Path, cfg: RunConfig) -> None:
    meta = json.loads(sidecar.read_text())
    meta["run_config"] = cfg.to_dict()
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# eval


def _write_records(results, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "object_id", "symmetric", "diameter", "add", "adds",
                    "qw", "qx", "qy", "qz", "tx", "ty", "tz", "icp_residual", "icp_iterations"])
        for r in results:
            q = r.estimate.rotation.as_array()
            w.writerow([r.index, r.object_id, int(r.record.symmetric), repr(r.record.diameter),
                        repr(r.record.add_distance), repr(r.record.adds_distance),
                        *(repr(float(v)) for v in q), *(repr(float(v)) for v in r.estimate.t),
                        repr(r.icp_residual), r.icp_iterations])


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    if args.checkpoint is None and not args.gt_poses:
        raise UsageError("either --checkpoint or --gt-poses is required")
    data_dir = args.data or cfg.data
    if not data_dir:
        raise UsageError("no dataset given (--data or 'data' config key)")
    ds = data.read_manifest(data_dir)
    if args.gt_poses:
        estimates = [s.pose_gt for s in ds.samples]
        results = training.evaluate_poses(ds, estimates, args.with_icp, cfg.icp_config())
    else:
        net = PoseNet.load(args.checkpoint)
        results = training.evaluate(net, ds, args.with_icp, cfg.eval_seed, cfg.icp_config())
    records = [r.record for r in results]
    rows = metrics.per_object_report(records, cfg.auc_max_threshold, cfg.adds_threshold,
                                     cfg.add_fraction)
    report = Path(args.report)
    report.parent.mkdir(parents=True, exist_ok=True)
    json_path = report.with_suffix(".json")
    records_path = report.with_name(report.stem + ".records.csv")
    mean_add = float(np.mean([r.add_distance for r in records]))
    extra = {"run_config": cfg.to_dict(), "checkpoint": args.checkpoint, "data": str(data_dir),
             "with_icp": bool(args.with_icp), "gt_poses": bool(args.gt_poses),
             "n_samples": len(records), "mean_add": mean_add,
             "mean_adds": float(np.mean([r.adds_distance for r in records]))}
    metrics.write_report(rows, report, json_path, extra)
    _write_records(results, records_path)
    for r in rows:
        print(f"{r.object:>12s}  AUC {r.auc:.4f}  <2cm {r.acc_2cm:.4f}  ADD {r.acc_add:.4f}")
    print(f"mean ADD distance {mean_add:.6f} m over {len(records)} samples")
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench


def _time(fn, repeats: int) -> list[float]:
    out = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return out


def bench(op: str, size: int, repeats: int, method: str = "auto", seed: int = 0) -> list[float]:
    """Wall-clock seconds of ``repeats`` runs of ``op`` at problem size ``size``."""
    rng = np.random.default_rng(seed)
    if op == "chamfer":
        a, b = rng.normal(size=(size, 3)), rng.normal(size=(size, 3))
        return _time(lambda: losses.chamfer(a, b, method), repeats)
    if op == "icp":
        obj = data.make_object("l_block", n_points=max(size, 16), seed=seed)
        gt = RigidTransform(random_unit_quaternion(rng), [0.0, 0.0, 1.0])
        observed = PointCloud(gt.apply(sample_points(obj.cloud_cano, size, seed).points))
        start = compose(gt, random_pose(np.radians(10), 0.05, rng))
        return _time(lambda: icp_refine(start, observed, obj.cloud_cano, IcpConfig()), repeats)
    if op == "forward":
        net = PoseNet()
        feats = rng.uniform(-1, 1, size=(size, data.APPEARANCE_DIM))
        pts = rng.normal(scale=0.03, size=(size, 3)) + [0.0, 0.0, 1.0]
        model_pts = rng.normal(scale=0.03, size=(net.cfg.n_points, 3))
        batch = stack_inputs([prepare_inputs(feats, pts, model_pts, net.cfg, rng, net.dtype)])
        return _time(lambda: net.forward(batch, with_generation=True), repeats)
    raise ValueError(f"unknown bench op {op!r}")


def cmd_bench(args) -> int:
    methods = args.method.split(",") if args.op == "chamfer" else ["-"]
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["op", "method", "size", "repeats", "min_s", "median_s", "timings_s"])
    for size in args.sizes:
        for m in methods:
            if m not in ("-", "auto", "kdtree", "brute"):
                raise UsageError(f"unknown chamfer method {m!r}")
            t = bench(args.op, size, args.repeats, m if m != "-" else "auto", args.seed)
            w.writerow([args.op, m, size, args.repeats, f"{min(t):.6e}", f"{np.median(t):.6e}",
                        ";".join(f"{x:.6e}" for x in t)])
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="posegen", description="Pose estimation by point-cloud generation.")
    sub = p.add_subparsers(dest="command", required=True)
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    g = sub.add_parser("gen-data", parents=[shared], help="render a synthetic dataset")
    g.add_argument("--shapes", type=_shape_list, default=("l_block", "cube"))
    g.add_argument("--samples-per-object", type=_positive_int, default=100)
    g.add_argument("--noise", type=_non_negative_float, default=0.001, help="depth noise sigma (m)")
    g.add_argument("--occlusion", type=_fraction, default=0.3)
    g.add_argument("--rotation-bound", type=_non_negative_float, default=np.pi / 2,
                   help="max rotation angle of sampled poses (rad)")
    g.add_argument("--n-points", type=_positive_int, default=2000, help="points per object model")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    def common(sp):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--data", help="dataset directory (overrides the 'data' key)")

    t = sub.add_parser("train", parents=[shared], help="train a model")
    common(t)
    t.add_argument("--out-checkpoint", required=True)
    t.add_argument("--loss-log", help="CSV loss log (default: <checkpoint>.loss.csv)")
    t.add_argument("--no-generation", action="store_true",
                   help="drop both generation losses (lambda_cano = lambda_posed = 0)")
    t.add_argument("--no-pointfusion", action="store_true",
                   help="plain per-point MLPs instead of point-fusion blocks")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[shared], help="evaluate a checkpoint")
    common(e)
    e.add_argument("--checkpoint")
    e.add_argument("--report", required=True, help="report CSV; JSON and raw records go alongside")
    e.add_argument("--with-icp", action="store_true")
    e.add_argument("--gt-poses", action="store_true",
                   help="score the ground-truth poses instead of model predictions")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", parents=[shared], help="time chamfer, icp or the forward pass")
    b.add_argument("--op", choices=("chamfer", "icp", "forward"), required=True)
    b.add_argument("--sizes", type=_positive_int, nargs="+", default=[512])
    b.add_argument("--repeats", type=_positive_int, default=5)
    b.add_argument("--method", default="kdtree,brute", help="chamfer methods, comma separated")
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"posegen {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"posegen {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
