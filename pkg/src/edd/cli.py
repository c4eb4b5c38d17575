"""``edd`` command line: run experiments, evaluate checkpoints, and compare runs.

Exit codes: 0 success, 1 contract violation, 2 I/O, parse, or usage error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import warnings

import numpy as np

from . import experiment_io as eio
from .adjustment import capacity_projection
from .errors import ContractViolation, IntegrityError, ParseError
from .gradcheck import format_report, run_suite
from .metrics import PAIR_METRICS, avg_acc, class_pair_table, dispersion_gap, export_features, forgetting, read_features
from .streams import Dataset
from .trainer import MODES, evaluate, run_stream

EXIT_OK, EXIT_CONTRACT, EXIT_IO = 0, 1, 2

RUN_FILES = ("accuracy_matrix.csv", "losses.csv", "capacity.csv", "features.csv", "run.json")


def _config(args):
    config = eio.load_config(args.config) if args.config else eio.ExperimentConfig.from_dict({})
    overrides = {k: v for k, v in (("mode", getattr(args, "mode", None)), ("seed", getattr(args, "seed", None)))
                 if v is not None}
    return config.replace(**overrides) if overrides else config


def _all_test(stream, upto=None):
    tasks = stream.tasks[:upto]
    return Dataset(np.concatenate([t.test.features for t in tasks]), np.concatenate([t.test.labels for t in tasks]))


def cmd_run(args, out):
    config = _config(args)
    stream = config.build_stream()
    report = run_stream(stream, config.train_config(), config.model_config(stream))
    os.makedirs(args.out, exist_ok=True)
    eio.write_accuracy_matrix(report.accuracy, os.path.join(args.out, "accuracy_matrix.csv"))
    eio.write_losses(report.losses, os.path.join(args.out, "losses.csv"))
    eio.write_capacity(report.capacity, os.path.join(args.out, "capacity.csv"))
    export_features(report.model, _all_test(stream), os.path.join(args.out, "features.csv"))
    eio.write_run_json(report, config, os.path.join(args.out, "run.json"))
    eio.save_checkpoint(report.model, os.path.join(args.out, "checkpoint"), seed=config["seed"],
                        config_hash=config.hash, extra={"mode": report.mode})
    print(f"{report.mode} seed={report.seed} avg_acc={report.avg_acc:.4f} -> {args.out}", file=out)
    return EXIT_OK


def _load_for_stream(args):
    """The checkpoint's model plus the stream it was trained on (seed from the checkpoint by default)."""
    model, state = eio.load_checkpoint(args.checkpoint)
    config = eio.load_config(args.config) if args.config else eio.ExperimentConfig.from_dict({})
    seed = args.seed if args.seed is not None else state.get("seed")
    if seed is not None:
        config = config.replace(seed=seed)
    if args.config and state.get("config_hash") not in (None, config.hash):
        warnings.warn(f"checkpoint config hash {state['config_hash']} differs from {config.hash}", stacklevel=2)
    return model, config.build_stream()


def cmd_eval(args, out):
    model, stream = _load_for_stream(args)
    upto = model.task_index or len(stream)
    accs = evaluate(model, [t.test for t in stream.tasks[:upto]])
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["task", "accuracy"])
    for i, a in enumerate(accs, start=1):
        writer.writerow([i, format(float(a), ".9g")])
    writer.writerow(["avg", format(float(np.mean(accs)), ".9g")])
    return EXIT_OK


def cmd_export_features(args, out):
    model, stream = _load_for_stream(args)
    upto = model.task_index or len(stream)
    if args.split == "test":
        data = _all_test(stream, upto)
    else:
        tasks = stream.tasks[:upto]
        data = Dataset(np.concatenate([t.train.features for t in tasks]),
                       np.concatenate([t.train.labels for t in tasks]))
    export_features(model, data, args.out)
    print(f"{len(data)} feature rows -> {args.out}", file=out)
    return EXIT_OK


def cmd_project_capacity(args, out):
    traj = capacity_projection(args.L0, args.ratio, None if args.to_saturation else args.tasks)
    fh = open(args.out, "w", newline="") if args.out else out
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t", "L", "frozen"])
        writer.writerows(traj.rows())
    finally:
        if args.out:
            fh.close()
    return EXIT_OK


def cmd_gradcheck(args, out):
    results = run_suite(seed=args.seed)
    print(format_report(results), file=out)
    return EXIT_OK if all(r.passed for r in results) else EXIT_CONTRACT


def _read_run(path):
    info = eio.read_run_json(os.path.join(path, "run.json"))
    A = eio.read_accuracy_matrix(os.path.join(path, "accuracy_matrix.csv"))
    feats_path = os.path.join(path, "features.csv")
    feats = read_features(feats_path) if os.path.exists(feats_path) else None
    return info, A, feats


def build_report(run_dirs):
    """Rows comparing runs: AvgAcc, per-task forgetting, and dispersion gaps to the joint run.

    Gaps are mean absolute differences between class-pair metric tables
    (see :func:`edd.metrics.dispersion_gap`), so 0 means the run spreads its
    classes exactly as joint training does.
    """
    runs = [(d,) + _read_run(d) for d in run_dirs]
    signatures = {info.get("stream_signature") for _, info, _, _ in runs}
    if len(signatures) > 1:
        raise ContractViolation(f"runs were trained on different streams: {sorted(map(str, signatures))}")
    joint = next((r for r in runs if r[1].get("mode") == "joint"), None)
    reference = None
    if joint is not None and joint[3] is not None:
        reference = class_pair_table(*joint[3])
    T = max(A.shape[1] for _, _, A, _ in runs)
    header = ["run", "mode", "seed", "avg_acc"] + [f"forgetting_task_{i + 1}" for i in range(T - 1)]
    header += [f"gap_{m}" for m in PAIR_METRICS]
    rows, tables = [], {}
    for path, info, A, feats in runs:
        f = forgetting(A) if info.get("mode") != "joint" else np.full(T - 1, np.nan)
        row = [os.path.basename(os.path.normpath(path)), info.get("mode"), info.get("seed"), avg_acc(A)]
        row += list(f) + [np.nan] * (T - 1 - len(f))
        if reference is not None and feats is not None:
            table = class_pair_table(*feats)
            tables[path] = table
            gaps = dispersion_gap(table, reference)
            row += [gaps[m] for m in PAIR_METRICS]
        else:
            row += [np.nan] * len(PAIR_METRICS)
        rows.append(row)
    return header, rows, tables


def cmd_report(args, out):
    header, rows, tables = build_report(args.runs)
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([eio._fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    if args.pairs:
        with open(args.pairs, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["run", "class_c", "class_d"] + list(PAIR_METRICS))
            for path, table in tables.items():
                name = os.path.basename(os.path.normpath(path))
                for (c, d), metrics in sorted(table.items()):
                    w.writerow([name, c, d] + [eio._fmt(metrics[m]) for m in PAIR_METRICS])
    return EXIT_OK


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _ratio(text):
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not 0.0 <= value <= 1.0 or value != value:
        raise argparse.ArgumentTypeError(f"ratio must lie in [0, 1], got {text}")
    return value


def build_parser():
    parser = argparse.ArgumentParser(prog="edd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train through a task stream and write results")
    p.add_argument("--config", help="JSON configuration (defaults fill missing keys)")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_run)

    for name, func, helptext in (("eval", cmd_eval, "accuracy of a checkpoint on every task it has seen"),
                                 ("export-features", cmd_export_features, "write final-layer features as CSV")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint", required=True, help="checkpoint directory")
        p.add_argument("--config", help="configuration describing the stream")
        p.add_argument("--seed", type=int, help="stream seed (default: the checkpoint's)")
        if name == "export-features":
            p.add_argument("--out", required=True)
            p.add_argument("--split", choices=("test", "train"), default="test")
        p.set_defaults(func=func)

    p = sub.add_parser("project-capacity", help="slot counts under the capacity recurrence")
    p.add_argument("--L0", type=_positive_int, required=True)
    p.add_argument("--ratio", type=_ratio, required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--tasks", type=_positive_int)
    group.add_argument("--to-saturation", action="store_true")
    p.add_argument("--out", help="write CSV here instead of stdout")
    p.set_defaults(func=cmd_project_capacity)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward rule")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="compare run directories")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--pairs", help="also write per-class-pair metrics to this CSV")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None, out=None):
    out = out or sys.stdout
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "project-capacity" and args.to_saturation and args.ratio >= 1:
        parser.error("--to-saturation needs a ratio below 1")
    try:
        return args.func(args, out)
    except ContractViolation as exc:
        print(f"edd: error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except (ParseError, IntegrityError, OSError) as exc:
        print(f"edd: error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
