"""Command-line entry point: ``madpot {gen-data,train,eval,solve,sweep}``.

Exit codes: 0 success, 2 usage or invalid configuration, 3 I/O or parse
failure, 4 numerical infeasibility.  Settings resolve as
flag > config file > built-in default.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from .config import SWEEP_PARAMS, RunConfig, load_config
from .data import generate_dataset, load_samples
from .errors import (
    InfeasibleError,
    InvalidInputError,
    NumericalDegeneracyError,
    ParseError,
    TrainingError,
    UndefinedMetricError,
)
from .losses import label_to_target
from .metrics import EvalReport, pixel_auc, roc_auc
from .model import VISION_MODES, load_params, save_params
from .scoring import VARIANTS
from .training import predict, train
from .transport import SolverConfig, exact_lp_oracle, partial_ot, sinkhorn

__all__ = ["main", "build_parser", "parse_values"]

log = logging.getLogger("madpot")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_INFEASIBLE = 0, 2, 3, 4


class UsageError(Exception):
    """Flag values that parse but make no sense together."""


def fmt(x):
    """17 significant digits, which round-trips any float64."""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return format(float(x), ".17g")


def write_csv(path, header, rows):
    lines = [",".join(header)] + [",".join(row) for row in rows]
    text = "".join(line + "\n" for line in lines)
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8", newline="\n")


def read_csv_matrix(path):
    """Numeric CSV as a 2-D float array."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"{path}: {exc.strerror}") from exc
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rows.append([float(cell) for cell in line.split(",")])
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: not a number ({exc})") from exc
    if not rows:
        raise ParseError(f"{path}: no data")
    if len({len(r) for r in rows}) != 1:
        raise ParseError(f"{path}: rows have different lengths")
    return np.array(rows)


def manifest_path(data):
    p = Path(data)
    return p / "manifest.jsonl" if p.is_dir() else p


def parse_values(text, integer=False):
    """``"a:b:step"`` (inclusive of ``b``) or a comma list; duplicates dropped.

    Returns ``(values, duplicates)``.
    """
    text = text.strip()
    if not text:
        return [], []
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise UsageError(f"range must look like start:stop:step, got {text!r}")
        start, stop, step = (float(p) for p in parts)
        if step <= 0:
            raise UsageError("range step must be positive")
        count = int(math.floor((stop - start) / step + 1e-9)) + 1
        raw = [round(start + i * step, 12) for i in range(max(count, 0))]
    else:
        raw = [float(p) for p in text.split(",") if p.strip()]
    if integer:
        if any(v != int(v) for v in raw):
            raise UsageError("this parameter takes integer values")
        raw = [int(v) for v in raw]
    values, dups = [], []
    for v in raw:
        (dups if v in values else values).append(v)
    return values, dups


# --- shared run helpers ----------------------------------------------------------


def _run_config(args):
    cfg = load_config(args.config)
    overrides = {}
    for flag, key in (
        ("variant", "scoring.variant"),
        ("vision", "train.vision"),
        ("seed", "train.seed"),
        ("epochs", "train.epochs"),
        ("lr", "train.lr"),
        ("lam", "solver.lambda"),
        ("frac", "solver.frac"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    return cfg.with_overrides(overrides) if overrides else cfg


def _progress(epoch, loss):
    log.info("epoch %d loss %.6f", epoch, loss)


def _train_run(samples, run_cfg):
    return train(samples, run_cfg.train, progress=_progress)


def _evaluate(params, scoring, vision, samples, seed):
    images = np.stack([s.image for s in samples])
    scores, maps = predict(params, images, scoring, vision)
    labels = np.array([s.label for s in samples])
    ac = roc_auc(scores, label_to_target(labels))
    with_mask = [i for i, s in enumerate(samples) if s.mask is not None]
    as_auc = None
    if with_mask:
        as_auc = pixel_auc([maps[i] for i in with_mask], [samples[i].mask for i in with_mask], seed=seed)
    return ac, as_auc, scores


# --- commands ----------------------------------------------------------------------


def cmd_gen_data(args):
    spec = load_config(args.config).data
    if args.size is not None:
        spec = RunConfig(data=spec).with_overrides({"data.image_side": args.size}).data
    if args.normal < 0 or args.abnormal < 0:
        raise UsageError("--normal and --abnormal must be nonnegative")
    generate_dataset(spec, args.normal, args.abnormal, args.seed, args.out, with_masks=not args.no_masks)
    print(Path(args.out) / "manifest.jsonl")
    return EXIT_OK


def cmd_train(args):
    run_cfg = _run_config(args)
    samples = load_samples(manifest_path(args.data))
    result = _train_run(samples, run_cfg)
    out = Path(args.out)
    save_params(out, result.params, {"config": run_cfg.to_dict()})
    loss_log = Path(args.loss_log) if args.loss_log else out.with_suffix(".loss.csv")
    write_csv(loss_log, ["epoch", "loss"], [[fmt(i + 1), fmt(v)] for i, v in enumerate(result.epoch_losses)])
    print(f"params={out} loss_log={loss_log} steps={result.steps} final_loss={fmt(result.epoch_losses[-1])}")
    return EXIT_OK


def cmd_eval(args):
    params, run_info = load_params(args.model)
    try:
        run_cfg = RunConfig.from_dict(run_info.get("config", {}))
    except InvalidInputError as exc:
        raise ParseError(f"{args.model}: bad run record: {exc}") from exc
    data = manifest_path(args.data)
    samples = load_samples(data)
    t = run_cfg.train
    start = time.perf_counter()
    ac, as_auc, scores = _evaluate(params, t.scoring, t.vision, samples, t.seed)
    report = EvalReport(
        ac_auc=ac,
        as_auc=as_auc,
        n_images=len(samples),
        variant=t.scoring.variant,
        config={"run": run_cfg.to_dict(), "data": str(data)},
        scores=[{"index": i, "label": s.label, "score": float(v)} for i, (s, v) in enumerate(zip(samples, scores))],
    )
    if args.timing:
        report.timing = {"eval_seconds": time.perf_counter() - start}
    Path(args.report).write_text(report.to_json(), encoding="utf-8")
    summary = f"ac_auc={fmt(ac)}"
    if as_auc is not None:
        summary += f" as_auc={fmt(as_auc)}"
    print(summary)
    return EXIT_OK


def cmd_solve(args):
    c = read_csv_matrix(args.cost)
    alpha = read_csv_matrix(args.alpha).ravel()
    beta = read_csv_matrix(args.beta).ravel()
    if abs(alpha.sum() - beta.sum()) > 1e-9:
        raise InfeasibleError(f"alpha mass {alpha.sum():.12g} != beta mass {beta.sum():.12g}")
    frac = 1.0 if args.mode == "ot" else args.frac
    if args.mode == "lp":
        plan, cost = exact_lp_oracle(c, alpha, frac * beta, frac=frac)
        rows = plan.sum(axis=1)
        row_res = float(np.max(np.maximum(rows - alpha, 0.0)))
        col_res = float(np.max(np.abs(plan.sum(axis=0) - frac * beta)))
        iters, converged = 0, True
    else:
        cfg = SolverConfig(lam=args.lam, max_iter=args.max_iter, early_stop_tol=args.tol, frac=frac)
        if args.mode == "ot":
            tp = sinkhorn(c, alpha, beta, cfg)
        else:
            tp = partial_ot(c, alpha, frac * beta, cfg)
        plan, cost = tp.plan, tp.cost(c)
        row_res, col_res, iters, converged = tp.row_residual, tp.col_residual, tp.iterations, tp.converged
    for row in plan:
        sys.stdout.write(",".join(fmt(v) for v in row) + "\n")
    print(
        f"cost={fmt(cost)} iters={iters} row_res={fmt(row_res)} col_res={fmt(col_res)} "
        f"converged={str(converged).lower()}"
    )
    return EXIT_OK


def cmd_sweep(args):
    name = args.param
    key = SWEEP_PARAMS.get(name, name)
    base = _run_config(args)
    section, _, field_name = key.partition(".")
    doc = base.to_dict()
    if section not in doc or field_name not in doc[section]:
        raise UsageError(f"unknown sweep parameter {name!r}; known: {', '.join(SWEEP_PARAMS)}")
    default = doc[section][field_name]
    integer = isinstance(default, int) and not isinstance(default, bool)
    try:
        values, dups = parse_values(args.values, integer=integer)
    except ValueError as exc:
        raise UsageError(f"bad --values: {exc}") from exc
    if dups:
        log.warning("dropping duplicate sweep values: %s", ", ".join(fmt(v) for v in dups))
    if not values:
        raise UsageError("--values is empty")
    train_samples = load_samples(manifest_path(args.data))
    eval_samples = load_samples(manifest_path(args.eval_data)) if args.eval_data else train_samples
    rows = []
    for value in values:
        run_cfg = base.with_overrides({key: value})
        log.info("sweep %s=%s", key, fmt(value))
        result = _train_run(train_samples, run_cfg)
        t = run_cfg.train
        ac, as_auc, _ = _evaluate(result.params, t.scoring, t.vision, eval_samples, t.seed)
        rows.append([fmt(value), fmt(ac), "" if as_auc is None else fmt(as_auc)])
    write_csv(args.out, ["value", "ac_auc", "as_auc"], rows)
    return EXIT_OK


# --- parser ------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_run_flags(p):
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--vision", choices=VISION_MODES)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--frac", type=float)


def build_parser():
    parser = _Parser(prog="madpot", description="Few-shot anomaly detection with partial optimal transport.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--normal", type=int, default=16)
    p.add_argument("--abnormal", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, help="image side in pixels")
    p.add_argument("--no-masks", action="store_true")
    p.add_argument("--config", help="JSON run configuration (its data section is used)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train and write a params file plus a loss CSV")
    p.add_argument("--data", required=True, help="dataset folder or manifest")
    p.add_argument("--out", required=True, help="params file to write")
    p.add_argument("--loss-log", help="loss CSV (default: <out>.loss.csv)")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a dataset and write a JSON report")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--timing", action="store_true", help="include wall-clock time in the report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("solve", help="solve one transport problem from CSV files")
    p.add_argument("--cost", required=True)
    p.add_argument("--alpha", required=True)
    p.add_argument("--beta", required=True, help="column marginal; pot/lp ship frac of it")
    p.add_argument("--mode", choices=("ot", "pot", "lp"), default="pot")
    p.add_argument("--lambda", dest="lam", type=float, default=SolverConfig.lam)
    p.add_argument("--frac", type=float, default=SolverConfig.frac)
    p.add_argument("--max-iter", type=int, default=SolverConfig.max_iter)
    p.add_argument("--tol", type=float, default=SolverConfig.early_stop_tol)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("sweep", help="train and evaluate once per parameter value")
    p.add_argument("--param", required=True, help=f"one of {', '.join(SWEEP_PARAMS)} or a dotted config key")
    p.add_argument("--values", required=True, help="start:stop:step (inclusive) or a comma list")
    p.add_argument("--data", required=True, help="training set")
    p.add_argument("--eval-data", help="evaluation set (default: the training set)")
    p.add_argument("--out", help="CSV path (default: stdout)")
    _add_run_flags(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, InvalidInputError) as exc:
        print(f"madpot: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ParseError, UndefinedMetricError, OSError) as exc:
        print(f"madpot: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (InfeasibleError, NumericalDegeneracyError, TrainingError) as exc:
        print(f"madpot: error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
