"""``gazenet`` command-line tool.

Angles are given in degrees on the command line and stored in radians
everywhere else.  Exit status: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from contextlib import nullcontext
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import analysis
from .geometry import GazemapSpec, render_gazemap, save_gazemap_pgms
from .models import GazeNet, PRESETS, count_parameters, get_preset
from .synth import SynthConfig, generate_dataset, load_dataset
from .training import (FoldResult, fold_partitions, get_train_preset, train, evaluate, train_fold,
                       parse_scheme)
from .weights import load_tensors, save_weights

log = logging.getLogger("gazenet")

LOSS_HEADER = ["step", "lr", "gaze", "gazemap", "l2", "total"]
SUMMARY_HEADER = ["fold", "held_out", "mean_error_deg", "std_error_deg", "samples"]
WEIGHTS_NAME = "weights.gzwt"


class UsageError(Exception):
    pass


def _thread_limit():
    value = os.environ.get("GAZENET_THREADS")
    if not value:
        return nullcontext()
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"GAZENET_THREADS must be a positive integer, got {value!r}") from None
    if n < 1:
        raise UsageError(f"GAZENET_THREADS must be a positive integer, got {value!r}")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _train_config(args):
    cfg = get_train_preset(args.preset).replace(seed=args.seed)
    if getattr(args, "no_gazemap_loss", False):
        cfg = cfg.replace(gazemap_supervision=False)
    if getattr(args, "steps", None) is not None:
        cfg = cfg.replace(max_steps=args.steps, epochs=max(cfg.epochs, args.steps))
    return cfg


def write_losses(path: Path, curve, cfg) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(LOSS_HEADER)
        for step, b in curve:
            wr.writerow([step, repr(cfg.lr_at(step)), repr(b.gaze), repr(b.gazemap), repr(b.l2), repr(b.total)])


def _require_dir(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise FileNotFoundError(f"{what} directory {p} does not exist")
    return p


def _prepare_out(path: str) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ------------------------------------------------------------------ commands

def cmd_gen_data(args) -> int:
    if args.persons < 2:
        raise UsageError("--persons must be at least 2")
    if args.per_person < 1:
        raise UsageError("--per-person must be positive")
    cfg = SynthConfig(seed=args.seed, persons=args.persons, samples_per_person=args.per_person,
                      size=(args.height, args.width))
    ds = generate_dataset(cfg, args.out)
    print(f"wrote {len(ds)} samples to {args.out}")
    return 0


def cmd_render_gazemaps(args) -> int:
    spec = GazemapSpec(width=args.width, height=args.height)
    pitch, yaw = math.radians(args.pitch_deg), math.radians(args.yaw_deg)
    if abs(pitch) >= math.pi / 2 or abs(yaw) >= math.pi / 2:
        raise UsageError("pitch and yaw must lie strictly between -90 and 90 degrees")
    iris, ball = save_gazemap_pgms(_prepare_out(args.out), render_gazemap(spec, pitch, yaw))
    print(f"wrote {iris} and {ball}")
    return 0


def cmd_train(args) -> int:
    net_cfg = get_preset(args.preset)
    cfg = _train_config(args)
    ds = load_dataset(_require_dir(args.data, "dataset"))
    out = _prepare_out(args.out)
    test = None
    if args.holdout_person is not None:
        if args.holdout_person not in ds.person_ids:
            raise ValueError(f"person {args.holdout_person} is not in the dataset")
        test = ds.select_persons([args.holdout_person])
        ds = ds.select_persons([p for p in ds.person_ids if p != args.holdout_person])

    def progress(step, b):
        if step % 50 == 0 or step == 1:
            log.info("step %d: gaze %.5f gazemap %.5f total %.5f", step, b.gaze, b.gazemap, b.total)

    net, curve = train(ds, net_cfg, cfg, on_step=progress)
    save_weights(net.store, out / WEIGHTS_NAME)
    write_losses(out / "losses.csv", curve, cfg)
    if test is not None:
        records = evaluate(net, test)
        analysis.write_records_csv(out / "eval.csv", records)
        print(f"held-out person {args.holdout_person}: mean error "
              f"{np.mean([r.angular_error for r in records]):.3f} deg")
    print(f"trained {len(curve)} steps; wrote {out / WEIGHTS_NAME} and {out / 'losses.csv'}")
    return 0


def load_network(preset: str, weights_path: str) -> GazeNet:
    net = GazeNet(get_preset(preset))
    tensors = load_tensors(weights_path)
    net.store.load_state(tensors, strict=True)
    # eval mode needs running statistics for every normalization layer
    norms = {n.rsplit("/", 1)[0] for n in net.store.names() if n.endswith("/gamma")}
    missing = sorted(n for n in norms
                     if f"{n}/running_mean" not in tensors or f"{n}/running_var" not in tensors)
    if missing:
        raise ValueError(f"{weights_path}: missing normalization statistics for {missing[:3]}")
    return net


def cmd_eval(args) -> int:
    ds = load_dataset(_require_dir(args.data, "dataset"))
    if not Path(args.weights).is_file():
        raise FileNotFoundError(f"weights file {args.weights} does not exist")
    net = load_network(args.preset, args.weights)
    records = evaluate(net, ds)
    out = _prepare_out(args.out)
    analysis.write_records_csv(out / "eval.csv", records)
    print(f"{len(records)} samples, mean error {np.mean([r.angular_error for r in records]):.3f} deg")
    return 0


def _run_fold(task):
    data, preset, cfg, held, fold_dir = task
    ds = load_dataset(data)
    test = ds.select_persons(held)
    train_set = ds.select_persons([p for p in ds.person_ids if p not in held])
    res, net = train_fold(train_set, test, get_preset(preset), cfg)
    fold_dir = Path(fold_dir)
    fold_dir.mkdir(parents=True, exist_ok=True)
    save_weights(net.store, fold_dir / WEIGHTS_NAME)
    write_losses(fold_dir / "losses.csv", res.loss_curve, cfg)
    analysis.write_records_csv(fold_dir / "eval.csv", res.records)
    return res


def cmd_cross_validate(args) -> int:
    try:
        parse_scheme(args.scheme)
    except ValueError as e:
        raise UsageError(str(e)) from None
    if args.jobs < 1:
        raise UsageError("--jobs must be positive")
    get_preset(args.preset)
    cfg = _train_config(args)
    data = _require_dir(args.data, "dataset")
    ds = load_dataset(data)
    parts = fold_partitions(ds.person_ids, args.scheme)
    chosen = list(range(len(parts))) if args.folds is None else _parse_folds(args.folds, len(parts))
    out = _prepare_out(args.out)
    tasks = [(str(data), args.preset, cfg, parts[i], str(out / f"fold_{i}")) for i in chosen]
    if args.jobs == 1:
        results: List[FoldResult] = []
        for i, t in zip(chosen, tasks):
            res = _run_fold(t)
            log.info("fold %d (held out %s): %.3f deg", i, parts[i], res.mean_error)
            results.append(res)
    else:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_run_fold, tasks))
    means = [r.mean_error for r in results]
    with open(out / "summary.csv", "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(SUMMARY_HEADER)
        for i, r in zip(chosen, results):
            wr.writerow([i, " ".join(str(p) for p in r.held_out), repr(r.mean_error),
                         repr(float(np.std(r.errors))), len(r.records)])
        wr.writerow(["mean", "", repr(float(np.mean(means))), repr(float(np.std(means))),
                     sum(len(r.records) for r in results)])
    print(f"{len(results)} folds: mean {np.mean(means):.3f} deg, std {np.std(means):.3f} deg")
    return 0


def _parse_folds(text: str, n: int) -> List[int]:
    try:
        folds = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"--folds must be comma-separated integers, got {text!r}") from None
    bad = [i for i in folds if not 0 <= i < n]
    if bad or not folds:
        raise UsageError(f"--folds entries must lie in [0, {n - 1}], got {text!r}")
    return folds


def cmd_analyze(args) -> int:
    if args.window < 1 or args.stride < 1:
        raise UsageError("--window and --stride must be positive")
    if args.mad < 0:
        raise UsageError("--mad must be non-negative")
    records = analysis.read_records_csv(args.eval)
    out = _prepare_out(args.out)
    curves = analysis.robustness_curves(records, args.window, args.stride, args.mad)
    for name, curve in curves.items():
        analysis.write_curve_csv(out / f"robustness_{name}.csv", curve)
        print(f"{name}: {curve.records_used} records, {len(curve.points)} points")
    return 0


def parameter_report(preset: str) -> List[str]:
    net = GazeNet(get_preset(preset))
    store = net.store
    stages = sorted({"/".join(n.split("/")[:2]) for n in store.names()})
    lines = [f"preset {preset}"]
    for st in stages:
        lines.append(f"  {st:<28s}{store.num_parameters(st + '/'):>10d}")
    lines.append(f"gazemap network (hourglass)   {store.num_parameters('hourglass/'):>10d}")
    lines.append(f"regressor (densenet)          {store.num_parameters('densenet/'):>10d}")
    lines.append(f"total                         {count_parameters(store):>10d}")
    trace = ", ".join(f"{name} {c}@{h}x{w}" for name, c, (h, w) in net.regressor.trace)
    lines.append(f"densenet channel trace: {trace}")
    return lines


def cmd_params(args) -> int:
    get_preset(args.preset)
    print("\n".join(parameter_report(args.preset)))
    return 0


# ------------------------------------------------------------------ parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gazenet", description="Gazemap-based gaze estimation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    sub.required = True
    presets = sorted(PRESETS)

    g = sub.add_parser("gen-data", help="generate a synthetic eye-image dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--persons", type=int, required=True)
    g.add_argument("--per-person", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--width", type=int, default=80)
    g.add_argument("--height", type=int, default=48)
    g.set_defaults(func=cmd_gen_data)

    r = sub.add_parser("render-gazemaps", help="write iris/eyeball gazemap images for one gaze")
    r.add_argument("--pitch-deg", type=float, required=True)
    r.add_argument("--yaw-deg", type=float, required=True)
    r.add_argument("--width", type=int, default=75)
    r.add_argument("--height", type=int, default=45)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render_gazemaps)

    t = sub.add_parser("train", help="train on a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--preset", choices=presets, required=True)
    t.add_argument("--no-gazemap-loss", action="store_true")
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--holdout-person", type=int)
    t.add_argument("--steps", type=int, help="override the preset's step budget")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate saved weights on a dataset")
    e.add_argument("--data", required=True)
    e.add_argument("--weights", required=True)
    e.add_argument("--preset", choices=presets, required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("cross-validate", help="leave-one-person-out or k-fold evaluation")
    c.add_argument("--data", required=True)
    c.add_argument("--scheme", required=True, help="lopo or kfold:K")
    c.add_argument("--preset", choices=presets, required=True)
    c.add_argument("--seed", type=int, required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--no-gazemap-loss", action="store_true")
    c.add_argument("--folds", help="comma-separated fold indices to run (default: all)")
    c.add_argument("--steps", type=int, help="override the preset's step budget")
    c.add_argument("--jobs", type=int, default=1, help="folds trained in parallel")
    c.set_defaults(func=cmd_cross_validate)

    a = sub.add_parser("analyze", help="robustness curves from an eval.csv")
    a.add_argument("--eval", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--window", type=int, default=200)
    a.add_argument("--stride", type=int, default=20)
    a.add_argument("--mad", type=float, default=1.0)
    a.set_defaults(func=cmd_analyze)

    m = sub.add_parser("params", help="print parameter counts")
    m.add_argument("--preset", choices=presets, required=True)
    m.set_defaults(func=cmd_params)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"gazenet: error: {e}", file=sys.stderr)
        return 2
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        with _thread_limit():
            return args.func(args)
    except UsageError as e:
        print(f"gazenet: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure: report, don't dump a traceback
        print(f"gazenet: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
