"""``vtpnet`` command line: train, eval, gradcheck, ablate, gen-data, infer, export.

Exit codes:

    0    success
    1    a check failed (gradcheck row over tolerance)
    2    usage error (bad arguments, missing config file)
    3    invalid input (config, checkpoint or point cloud format, shape mismatch)
    4    runtime failure (numerical error, I/O error)
    130  interrupted
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .config import ConfigError, RunConfig, load_config, parse_config_text, serialize_config
from .geometry import PointCloud
from .io.atomic import atomic_write_text
from .io.checkpoint import CheckpointFormatError, load_checkpoint, restore
from .io.export import Prediction, export_prediction
from .io.pointcloud import PointCloudFormatError, load_pointcloud, write_ply, write_xyzn
from .network import SegNet
from .nn.tensor import no_grad
from .training.data import PART_NAMES, Dataset, parts_layout
from .training.loop import evaluate, train_loop

log = logging.getLogger("vtpnet")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE, EXIT_INVALID, EXIT_RUNTIME, EXIT_INTERRUPT = 0, 1, 2, 3, 4, 130
METRIC_COLUMNS = ("epoch", "loss", "OA", "mAcc", "mIoU")


class UsageError(Exception):
    pass


@contextmanager
def thread_limit(deterministic: bool):
    """Single BLAS thread with ``--deterministic``; else ``VTP_THREADS`` if set."""
    env = os.environ.get("VTP_THREADS")
    limit = 1 if deterministic else (int(env) if env else None)
    if limit is not None and limit < 1:
        raise UsageError("VTP_THREADS must be a positive integer")
    with threadpool_limits(limits=limit):
        yield


# -- helpers -----------------------------------------------------------------------

def _config_arg(path: str | None) -> RunConfig:
    if path is None:
        raise UsageError("--config is required")
    if not Path(path).is_file():
        raise UsageError(f"config file not found: {path}")
    return load_config(path).resolved()


def _fmt(v) -> str:
    return "" if v is None else f"{v:.8f}" if isinstance(v, float) else str(v)


def metrics_csv(rows) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in METRIC_COLUMNS])
    return out.getvalue()


def _load_model(ckpt_path: str):
    ckpt = load_checkpoint(ckpt_path)
    if not ckpt.config_text:
        raise CheckpointFormatError("checkpoint carries no run configuration")
    cfg = parse_config_text(ckpt.config_text).resolved()
    model = cfg.model()
    restore(ckpt, model)
    model.eval()
    return cfg, model


def _read_manifest(data_dir: Path, cfg: RunConfig) -> Dataset:
    manifest = data_dir / "manifest.csv"
    if not manifest.is_file():
        raise PointCloudFormatError(f"{manifest} not found")
    with open(manifest, newline="") as fh:
        entries = list(csv.DictReader(fh))
    clouds = []
    for e in entries:
        cloud = load_pointcloud(data_dir / e["file"])
        cloud.category = int(e["category"])
        if cloud.normals is None:
            raise PointCloudFormatError(f"{e['file']}: the network needs normals")
        if cfg.task == "seg" and cloud.labels is None:
            raise PointCloudFormatError(f"{e['file']}: segmentation data needs labels")
        clouds.append(cloud)
    task = "classification" if cfg.task == "cls" else "part_segmentation"
    return Dataset(task, clouds, tuple(cfg.data.shapes), parts_layout(cfg.data.shapes))


# -- commands ------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _config_arg(args.config)
    if args.output_dir:
        cfg = dataclasses.replace(cfg, output_dir=args.output_dir)
    if args.epochs is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, epochs=args.epochs))
        cfg.validate()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    text = serialize_config(cfg)
    atomic_write_text(out / "config.resolved.cfg", text)
    model = cfg.model()
    opt = cfg.optimizer(model.parameters())
    train_set = cfg.dataset("train")
    metric_set = cfg.dataset("eval") if cfg.train.metrics_split == "eval" else None
    rows: list[dict] = []
    atomic_write_text(out / "metrics.csv", metrics_csv(rows))

    def on_epoch_end(epoch, report):
        rows.append(report.row())
        atomic_write_text(out / "metrics.csv", metrics_csv(rows))

    metric = "mIoU" if cfg.task == "seg" else "OA"
    stop = (lambda r: getattr(r, metric) >= cfg.train.stop_at) if cfg.train.stop_at > 0 else None
    last = out / "last.ckpt"
    result = train_loop(model, train_set, cfg.train.epochs, cfg.train.batch_size, opt, cfg.train.seed,
                        cfg.schedule(), metric_set, on_epoch_end=on_epoch_end, stop_when=stop,
                        checkpoint_path=last, config_text=text)
    os.replace(last, out / "final.ckpt")
    if result.history:
        r = result.history[-1]
        print(f"trained {len(result.history)} epochs in {result.seconds:.1f}s: "
              f"loss {r.loss:.4f} OA {r.OA:.4f} mAcc {r.mAcc:.4f} mIoU {r.mIoU:.4f}")
    print(f"artifacts in {out}: final.ckpt metrics.csv config.resolved.cfg")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, model = _load_model(args.checkpoint)
    data = _read_manifest(Path(args.data), cfg) if args.data else cfg.dataset(args.split)
    report = evaluate(model, data, cfg.train.batch_size)
    row = report.row()
    print("  ".join(f"{k}={_fmt(row[k])}" for k in METRIC_COLUMNS if k != "epoch"))
    for cat, iou in report.per_class_iou.items():
        print(f"  {cfg.data.shapes[cat]}: IoU {iou:.4f}")
    if args.output:
        atomic_write_text(args.output, metrics_csv([row]))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import REGISTRY, TOLERANCE, check

    names = sorted(REGISTRY) if args.scope in ([], ["all"]) else args.scope
    unknown = [n for n in names if n not in REGISTRY]
    if unknown:
        raise UsageError(f"unknown gradient check(s) {unknown}; known: {', '.join(sorted(REGISTRY))}")
    failed = 0
    print(f"{'op':24s} {'max rel err':>12s} {'entries':>8s} {'time':>7s}  status")
    for name in names:
        r = check(name)
        failed += not r.passed
        print(f"{r.name:24s} {r.max_rel_err:12.3e} {r.n_entries:8d} {r.seconds:6.2f}s  "
              f"{'ok' if r.passed else 'FAIL'}")
    print(f"{len(names) - failed}/{len(names)} passed (tolerance {TOLERANCE:g})")
    return EXIT_CHECK_FAILED if failed else EXIT_OK


def cmd_ablate(args) -> int:
    from .training.ablation import AXES, run_ablation

    cfg = _config_arg(args.config)
    axes = tuple(a.strip() for a in args.axes.split(",")) if args.axes else AXES
    bad = [a for a in axes if a not in AXES]
    if bad:
        raise UsageError(f"unknown axes {bad}; choose from {AXES}")
    try:
        seeds = tuple(int(s) for s in args.seeds.split(","))
    except ValueError as exc:
        raise UsageError(f"--seeds must be comma-separated integers: {exc}") from exc
    out = Path(args.output_dir or Path(cfg.output_dir) / "ablation")
    results = run_ablation(cfg, axes, seeds, args.r_large, args.r_small, out_dir=out)
    for axis, rows in results.items():
        print(f"[{axis}]")
        seen = set()
        for r in sorted(rows, key=lambda r: r.rank):
            if r.variant not in seen:
                seen.add(r.variant)
                print(f"  {r.rank}. {r.variant:18s} {r.mean:.4f} +- {r.std:.4f}  ({r.tag})")
    print(f"tables written to {out}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = _config_arg(args.config)
    data = cfg.dataset(args.split)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["file,category"]
    for i, cloud in enumerate(data.clouds):
        name = f"{args.split}_{i:05d}.{args.format}"
        if cfg.task == "cls":
            cloud = PointCloud(cloud.coords, normals=cloud.normals, category=cloud.category)
        if args.format == "ply":
            write_ply(out / name, cloud)
        else:
            write_xyzn(out / name, cloud)
        lines.append(f"{name},{cloud.category}")
    atomic_write_text(out / "manifest.csv", "\n".join(lines) + "\n")
    print(f"wrote {len(data.clouds)} clouds to {out}")
    return EXIT_OK


def _predict(args):
    cfg, model = _load_model(args.checkpoint)
    cloud = load_pointcloud(args.input)
    if cloud.normals is None:
        raise PointCloudFormatError(f"{args.input}: the network needs normals")
    with no_grad():
        if isinstance(model, SegNet):
            if args.category is None:
                raise UsageError("segmentation models need --category")
            if not 0 <= args.category < len(cfg.data.shapes):
                raise UsageError(f"--category must be in [0, {len(cfg.data.shapes)})")
            onehot = np.zeros(len(cfg.data.shapes))
            onehot[args.category] = 1.0
            logits = model(cloud.coords, cloud.normals, onehot).data[0]
            valid = parts_layout(cfg.data.shapes)[args.category]
            masked = np.full_like(logits, -np.inf)
            masked[:, valid] = logits[:, valid]
            return cfg, cloud, Prediction(np.argmax(masked, axis=-1), logits)
        logits = model(cloud.coords, cloud.normals).data[0]
        return cfg, cloud, Prediction(np.array([int(np.argmax(logits))]), logits)


def cmd_infer(args) -> int:
    cfg, cloud, pred = _predict(args)
    if cfg.task == "cls":
        k = int(pred.labels[0])
        print(f"class {k} ({cfg.data.shapes[k]})")
        return EXIT_OK
    names = [f"{s}.{p}" for s in cfg.data.shapes for p in PART_NAMES[s]]
    counts = np.bincount(pred.labels, minlength=len(names))
    for i, c in enumerate(counts):
        if c:
            print(f"part {i} ({names[i]}): {c} points")
    if args.output:
        write_xyzn(args.output, PointCloud(cloud.coords, normals=cloud.normals, labels=pred.labels))
    return EXIT_OK


def cmd_export(args) -> int:
    cfg, cloud, pred = _predict(args)
    if cfg.task != "seg":
        raise UsageError("export needs a segmentation checkpoint")
    export_prediction(cloud, pred, args.output)
    print(f"wrote {len(cloud)} colored points to {args.output}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--deterministic", action="store_true", help="single-threaded, bitwise reproducible")
    common.add_argument("-q", "--quiet", action="store_true", help="only warnings on stderr")
    p = _Parser(prog="vtpnet", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("train", parents=[common], help="train from a config file")
    s.add_argument("--config")
    s.add_argument("--output-dir")
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--split", choices=("train", "eval"), default="eval")
    s.add_argument("--data", help="directory written by gen-data (manifest.csv + clouds)")
    s.add_argument("--output", help="write the metrics row as CSV")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    s.add_argument("scope", nargs="*", default=[], help="op names or 'all' (default)")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("ablate", parents=[common], help="run the ablation axes")
    s.add_argument("--config")
    s.add_argument("--axes", help="comma-separated subset of scale_pairing,feature_mode,aggregation")
    s.add_argument("--seeds", default="0,1,2")
    s.add_argument("--r-large", type=float)
    s.add_argument("--r-small", type=float)
    s.add_argument("--output-dir")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("gen-data", parents=[common], help="write a synthetic split to disk")
    s.add_argument("--config")
    s.add_argument("--split", choices=("train", "eval"), default="train")
    s.add_argument("--format", choices=("xyzn", "ply"), default="xyzn")
    s.add_argument("--output-dir", required=True)
    s.set_defaults(func=cmd_gen_data)

    for name, func, helptext in (("infer", cmd_infer, "predict one point cloud file"),
                                 ("export", cmd_export, "write a colored PLY of a segmentation")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--input", required=True)
        s.add_argument("--category", type=int, help="shape category (segmentation)")
        s.add_argument("--output", required=name == "export")
        s.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"vtpnet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        with thread_limit(args.deterministic):
            return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"vtpnet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, CheckpointFormatError, PointCloudFormatError, KeyError, ValueError) as exc:
        print(f"vtpnet: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except KeyboardInterrupt:
        print("vtpnet: interrupted", file=sys.stderr)
        return EXIT_INTERRUPT
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"vtpnet: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
