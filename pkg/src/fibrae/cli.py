"""Command-line entry point: train, transport, trace, metrics, oracle-check,
interpolate.

Exit codes: 0 success, 1 usage/configuration error, 2 numerical failure.
FIBRAE_LOG in {error, info, debug} controls verbosity. All outputs are
written atomically (temp file + rename); report commands also render figures
next to their delimited outputs unless --no-figures is given.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys

import numpy as np

from . import data_io, geodesic, metrics, nn, oracle, training
from .geometry import LatentPoint

log = logging.getLogger("fibrae.cli")


class UsageError(Exception):
    """Invalid flags, configuration, or inputs (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _configure_logging():
    level = os.environ.get("FIBRAE_LOG", "error").strip().lower()
    chosen = {"error": logging.ERROR, "info": logging.INFO,
              "debug": logging.DEBUG}.get(level, logging.ERROR)
    logging.basicConfig(stream=sys.stderr, level=chosen,
                        format="%(levelname)s %(name)s: %(message)s")


def _atomic_csv(path, write_rows):
    buf = io.StringIO()
    write_rows(csv.writer(buf))
    data_io.atomic_write_text(path, buf.getvalue())


# -- train ---------------------------------------------------------------------


def _load_dataset(config: data_io.RunConfig) -> data_io.Dataset:
    if config.synthetic:
        syn = dict(config.synthetic)
        return data_io.make_synthetic(
            n_conditions=syn.get("conditions", 3),
            per_condition=syn.get("per_condition", 200),
            dim=syn.get("dim", 20),
            seed=syn.get("seed", config.seed),
            factor_dim=syn.get("factor_dim", 2),
        )
    if not config.dataset:
        raise UsageError("no dataset: set 'dataset' (CSV path) or 'synthetic' in the config")
    if not os.path.exists(config.dataset):
        raise UsageError(f"dataset file not found: {config.dataset}")
    raw = data_io.load_csv(config.dataset, config.condition_column)
    if raw.features.size and (raw.features.min() < 0.0 or raw.features.max() > 1.0):
        log.info("dataset outside [0, 1]; applying min-max normalization")
        return raw.normalized()
    return data_io.Dataset(raw.features, raw.conditions, raw.n_conditions,
                           condition_labels=raw.condition_labels)


def cmd_train(args) -> int:
    config = data_io.load_run_config(args.config) if args.config else data_io.RunConfig()
    for name in ("dataset", "condition_column", "output_dir", "seed"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(config, name, value)
    if args.epochs is not None:
        config.train.epochs = args.epochs
    if args.batch_size is not None:
        config.train.batch_size = args.batch_size
    if args.seed is not None:
        config.train.seed = args.seed

    dataset = _load_dataset(config)
    model_config = config.to_model_config(dataset.dim, dataset.n_conditions)
    model = nn.init_model(model_config, seed=config.seed)
    model.condition_labels = list(dataset.condition_labels)
    model.grl = nn.GradientReversal(config.train.grl_lambda)

    log.info("training on %d samples (%d conditions, dim %d) for %d epochs",
             dataset.size, dataset.n_conditions, dataset.dim, config.train.epochs)
    model, history = training.train(model, dataset, config.train)

    out_dir = config.output_dir
    os.makedirs(out_dir, exist_ok=True)
    model_path = os.path.join(out_dir, "model.fae")
    losses_path = os.path.join(out_dir, "losses.csv")
    data_io.save_model(model, model_path)

    def rows(writer):
        writer.writerow(["epoch", "step", "objective", "value"])
        for epoch, step, objective, value in history:
            writer.writerow([epoch, step, objective, repr(float(value))])

    _atomic_csv(losses_path, rows)
    if not args.no_figures and history:
        from . import figures
        figures.save_loss_curves(history, os.path.join(out_dir, "loss_curves.png"))
    print(f"model: {model_path}")
    print(f"losses: {losses_path}")
    return 0


# -- transport -------------------------------------------------------------------


def _read_fiber_csv(path, fiber_dim):
    """Fiber-coordinate rows from a CSV with columns f_0..f_{m-1}."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise UsageError(f"empty input file: {path}") from None
        wanted = [f"f_{i}" for i in range(fiber_dim)]
        if not all(w in header for w in wanted):
            return None
        cols = [header.index(w) for w in wanted]
        out = [[float(row[c]) for c in cols] for row in reader if row]
    return np.asarray(out, dtype=np.float64).reshape(-1, fiber_dim)


def _input_fibers(args, model) -> np.ndarray:
    fibers = _read_fiber_csv(args.input, model.fiber_dim)
    if fibers is not None:
        return fibers
    # Fall back to dataset mode: encode the rows of the source condition.
    raw = data_io.load_csv(args.input, args.condition_column)
    ds = raw.normalized() if raw.features.size and (
        raw.features.min() < 0.0 or raw.features.max() > 1.0) else raw
    source = model.resolve_condition(args.from_condition)
    # Align the file's label order with the model's stored labels.
    wanted = str(model.condition_labels[source]) if model.condition_labels else str(source)
    mask = np.asarray([str(ds.condition_labels[c]) == wanted for c in ds.conditions])
    if not mask.any():
        raise UsageError(f"dataset has no rows with condition {wanted!r}")
    if ds.dim != model.config.input_dim:
        raise UsageError(f"dataset dimension {ds.dim} does not match model "
                         f"input dimension {model.config.input_dim}")
    return nn.encode(model, ds.features[mask])


def _solver_config(args) -> geodesic.SolverConfig:
    kwargs = {}
    for flag, name in (("depth", "depth"), ("dt", "dt"), ("lambda_reg", "lambda_reg"),
                       ("learning_rate", "learning_rate"),
                       ("max_iterations", "max_iterations"),
                       ("tolerance", "tolerance"), ("optimizer", "optimizer")):
        value = getattr(args, flag, None)
        if value is not None:
            kwargs[name] = value
    return geodesic.SolverConfig(**kwargs)


def cmd_transport(args) -> int:
    model = data_io.load_model(args.model)
    source = model.resolve_condition(args.from_condition)
    target = model.resolve_condition(args.to_condition)
    fibers = _input_fibers(args, model)
    b1 = nn.embed(model, source)
    b2 = nn.embed(model, target)
    config = _solver_config(args)
    decoder = nn.DecoderAdapter(model)
    starts = [LatentPoint(f, b1) for f in fibers]
    jobs = args.jobs if args.jobs is not None else (os.cpu_count() or 1)
    log.info("transporting %d points (%d workers)", len(starts), jobs)
    results = geodesic.correspondence_map(decoder, starts, b2, config, jobs=jobs)

    def rows(writer):
        m = model.fiber_dim
        writer.writerow([f"start_f{i}" for i in range(m)]
                        + [f"end_f{i}" for i in range(m)]
                        + ["energy", "residual", "converged"])
        for p, r in zip(starts, results):
            writer.writerow([repr(float(v)) for v in p.fiber]
                            + [repr(float(v)) for v in r.endpoint.fiber]
                            + [repr(float(r.energy)), repr(float(r.speed_residual)),
                               int(r.converged)])

    _atomic_csv(args.out, rows)
    if not args.no_figures and results:
        from . import figures
        figures.save_transport_map(
            np.stack([p.fiber for p in starts]),
            np.stack([r.endpoint.fiber for r in results]),
            os.path.splitext(args.out)[0] + "_map.png")
    stale = sum(1 for r in results if not r.converged)
    if stale:
        log.warning("%d of %d solves did not meet the stall tolerance", stale, len(results))
    print(f"correspondence: {args.out} ({len(results)} rows)")
    return 0


# -- trace / interpolate -----------------------------------------------------------


def _parse_point(text, dim):
    parts = [p for p in text.replace(";", ",").split(",") if p.strip()]
    if len(parts) != dim:
        raise UsageError(f"--point needs {dim} comma-separated values, got {len(parts)}")
    return np.asarray([float(p) for p in parts])


def _single_transport(args):
    model = data_io.load_model(args.model)
    source = model.resolve_condition(getattr(args, "from"))
    target = model.resolve_condition(args.to)
    fiber = _parse_point(args.point, model.fiber_dim)
    start = LatentPoint(fiber, nn.embed(model, source))
    b2 = nn.embed(model, target)
    result = geodesic.solve_geodesic(nn.DecoderAdapter(model), start, b2, _solver_config(args))
    return model, result


def cmd_trace(args) -> int:
    model, result = _single_transport(args)

    def rows(writer):
        d = result.trace.shape[1]
        writer.writerow(["t"] + [f"z_{i}" for i in range(d)] + ["seg_energy"])
        for k, (t, row) in enumerate(zip(result.times, result.trace)):
            seg = repr(float(result.segment_energies[k])) if k < len(result.segment_energies) else ""
            writer.writerow([repr(float(t))] + [repr(float(v)) for v in row] + [seg])

    _atomic_csv(args.out, rows)
    if args.frames:
        frames = geodesic.interpolate(model, result, args.frames)
        frame_path = os.path.splitext(args.out)[0] + "_frames.csv"

        def frame_rows(writer):
            writer.writerow(["frame"] + [f"x_{i}" for i in range(frames.shape[1])])
            for i, row in enumerate(np.atleast_2d(frames)):
                writer.writerow([i] + [repr(float(v)) for v in row])

        _atomic_csv(frame_path, frame_rows)
        print(f"frames: {frame_path}")
    if not args.no_figures:
        from . import figures
        figures.save_trace_plot(result.times, result.trace, result.segment_energies,
                                model.fiber_dim, os.path.splitext(args.out)[0] + ".png")
    print(f"trace: {args.out} (energy {result.energy:.6g}, "
          f"residual {result.speed_residual:.3g}, converged {result.converged})")
    return 0


def cmd_interpolate(args) -> int:
    model, result = _single_transport(args)
    frames = np.atleast_2d(geodesic.interpolate(model, result, args.frames))

    def rows(writer):
        writer.writerow(["frame"] + [f"x_{i}" for i in range(frames.shape[1])])
        for i, row in enumerate(frames):
            writer.writerow([i] + [repr(float(v)) for v in row])

    _atomic_csv(args.out, rows)
    if not args.no_figures:
        from . import figures
        figures.save_interpolation_strip(frames, os.path.splitext(args.out)[0] + ".png")
    print(f"interpolation: {args.out} ({frames.shape[0]} frames)")
    return 0


# -- metrics ---------------------------------------------------------------------


def cmd_metrics(args) -> int:
    with open(args.points, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise UsageError(f"empty input file: {args.points}") from None
        if args.labels not in header:
            raise UsageError(f"label column '{args.labels}' not found in {header}")
        label_idx = header.index(args.labels)
        points, raw_labels = [], []
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            raw_labels.append(row[label_idx].strip())
            try:
                points.append([float(v) for i, v in enumerate(row) if i != label_idx])
            except ValueError:
                raise UsageError(f"non-numeric feature value at row {line}") from None
    if not points:
        raise UsageError("input file has no data rows")
    ids, _ordered = data_io._dense_reindex(raw_labels)
    cloud = metrics.LabeledCloud(np.asarray(points), ids)
    report = metrics.metrics_report(cloud, perplexity=args.perplexity,
                                    include_per_point=args.per_point)
    report["labels"] = args.labels
    report["perplexity"] = args.perplexity
    data_io.atomic_write_text(args.out, json.dumps(report, indent=2, sort_keys=True) + "\n")
    if not args.no_figures:
        from . import figures
        scores = metrics.lisi(cloud, perplexity=args.perplexity)
        figures.save_metrics_plot(scores, report["ward"],
                                  os.path.splitext(args.out)[0] + ".png")
    print(f"metrics: {args.out}")
    return 0


# -- oracle-check ------------------------------------------------------------------


def cmd_oracle_check(args) -> int:
    try:
        checks = oracle.run_suite(args.suite)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    failed = 0
    for check in checks:
        status = "PASS" if check["passed"] else "FAIL"
        failed += 0 if check["passed"] else 1
        print(f"{status} {args.suite}: {check['name']} ({check['detail']})")
    if failed:
        print(f"{failed} of {len(checks)} checks failed")
        return 2
    print(f"all {len(checks)} checks passed")
    return 0


# -- parser ------------------------------------------------------------------------


def _add_solver_flags(p):
    p.add_argument("--depth", type=int, default=None, help="hat-basis depth (default 6)")
    p.add_argument("--dt", type=float, default=None, help="time step, a negative power of two")
    p.add_argument("--lambda-reg", dest="lambda_reg", type=float, default=None,
                   help="pull toward the naive endpoint (default 0)")
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--max-iterations", type=int, default=None)
    p.add_argument("--tolerance", type=float, default=None)
    p.add_argument("--optimizer", choices=["rmsprop", "gd"], default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fibrae",
                     description="fibered auto-encoders with geodesic transport between fibers")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write archive + loss traces")
    p.add_argument("--config", help="run configuration JSON")
    p.add_argument("--dataset", help="CSV dataset (overrides config)")
    p.add_argument("--condition-column", dest="condition_column", default=None)
    p.add_argument("--output-dir", dest="output_dir", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_train, dataset=None, output_dir=None)

    p = sub.add_parser("transport", help="geodesic correspondence between two fibers")
    p.add_argument("--model", required=True)
    p.add_argument("--from-condition", required=True)
    p.add_argument("--to-condition", required=True)
    p.add_argument("--input", required=True,
                   help="CSV of fiber coordinates (columns f_0..) or a dataset CSV")
    p.add_argument("--condition-column", dest="condition_column", default="condition")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=None, help="worker processes (default: all cores)")
    p.add_argument("--no-figures", action="store_true")
    _add_solver_flags(p)
    p.set_defaults(func=cmd_transport)

    for name, runner, help_text in (
            ("trace", cmd_trace, "export one geodesic path as CSV"),
            ("interpolate", cmd_interpolate, "decode frames along one geodesic")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--model", required=True)
        p.add_argument("--from", required=True)
        p.add_argument("--to", required=True)
        p.add_argument("--point", required=True, help="comma-separated fiber coordinates")
        p.add_argument("--frames", type=int, default=0 if name == "trace" else 8)
        p.add_argument("--out", required=True)
        p.add_argument("--no-figures", action="store_true")
        _add_solver_flags(p)
        p.set_defaults(func=runner)

    p = sub.add_parser("metrics", help="mixing scores and the variance split for labeled points")
    p.add_argument("--points", required=True, help="CSV of coordinates plus a label column")
    p.add_argument("--labels", required=True, help="name of the label column")
    p.add_argument("--perplexity", type=float, default=30.0)
    p.add_argument("--per-point", action="store_true", help="include per-point scores")
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("oracle-check", help="run one analytic self-check suite")
    p.add_argument("--suite", required=True)
    p.set_defaults(func=cmd_oracle_check)

    return parser


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ArithmeticError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
