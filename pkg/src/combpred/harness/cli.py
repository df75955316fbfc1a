"""Command-line interface.

Exit codes: 0 ok, 2 validation error, 3 numeric failure, 4 budget exceeded.
Outputs are written atomically and depend only on inputs and ``--seed``;
wall-clock times appear only when ``--timing`` is given.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from ..counting import space_stats
from ..decode import decode
from ..errors import CombiError, ValidationError
from ..formats import (
    dump_json,
    format_structure,
    parse_space,
    read_dataset,
    read_inputs,
    read_json,
    write_json,
    write_text_atomic,
)
from ..online import SgdConfig, sgd_train
from ..partition import estimate_partition, estimate_partition_approx_sampler
from ..ridge import Kernel, NcgConfig, RidgeModel, train_ncg
from ..rng import make_rng
from ..sampling import ExpFamilyModel, UniformSampler, cftp_sample_many
from .experiments import ExperimentConfig, run_experiment

_TRAIN_KEYS = {
    "trainer", "lam", "kernel", "tol", "max_iter", "cg_tol", "loss_scale",
    "p", "tau", "tau_fraction", "passes", "seed",
}


def _emit(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        write_text_atomic(out, text)


def _load_model(path) -> RidgeModel:
    return RidgeModel.from_json(read_json(path))


def _input_row(model: RidgeModel, path, row: int) -> np.ndarray:
    n = None if model.inputs is None else model.inputs.shape[1]
    X = read_inputs(path, n)
    if not 0 <= row < len(X):
        raise ValidationError(f"{path} has {len(X)} rows; --row {row} is out of range")
    return X[row]


def cmd_count(args) -> None:
    space = parse_space(args.space)
    _emit(dump_json(space_stats(space).to_json()), args.out)


def cmd_train(args) -> None:
    cfg = read_json(args.config)
    if not isinstance(cfg, dict):
        raise ValidationError("training config must be a JSON object")
    unknown = set(cfg) - _TRAIN_KEYS
    if unknown:
        raise ValidationError(f"unknown training config keys: {', '.join(sorted(unknown))}")
    data = read_dataset(args.dataset)
    kernel = Kernel.from_dict(cfg.get("kernel", {"kind": "linear"}))
    trainer = cfg.get("trainer", "ncg")
    if trainer == "ncg":
        keys = ("lam", "tol", "max_iter", "cg_tol", "loss_scale")
        model = train_ncg(data, NcgConfig(kernel=kernel, **{k: cfg[k] for k in keys if k in cfg}))
    elif trainer == "sgd":
        if "seed" not in cfg:
            raise ValidationError("sgd training needs a seed in the config")
        keys = ("lam", "p", "tau", "tau_fraction", "passes", "loss_scale")
        model, trace = sgd_train(data, SgdConfig(kernel=kernel, **{k: cfg[k] for k in keys if k in cfg}), seed=cfg["seed"])
        if args.log:
            write_text_atomic(args.log, trace.to_csv())
    else:
        raise ValidationError(f"unknown trainer {trainer!r}; use 'ncg' or 'sgd'")
    write_json(args.out, model.to_json())


def cmd_predict(args) -> None:
    model = _load_model(args.model)
    n = None if model.inputs is None else model.inputs.shape[1]
    X = read_inputs(args.inputs, n)
    rng = make_rng(args.seed)
    lines = []
    for w in model.weights(X):
        y, s, method = decode(model.space, w, rng)
        lines.append(f"{format_structure(model.space, y)}\t{s!r}\t{method}\n")
    _emit("".join(lines), args.out)


def cmd_sample(args) -> None:
    if args.count < 0:
        raise ValidationError("--count must be non-negative")
    space = parse_space(args.space)
    rng = make_rng(args.seed)
    diagnostics = None
    if args.model:
        model = _load_model(args.model)
        if model.space != space:
            raise ValidationError(f"model space {model.space.describe()} differs from {space.describe()}")
        if not args.input:
            raise ValidationError("--model needs --input with the conditioning row")
        x = _input_row(model, args.input, args.row)
        exp_model = ExpFamilyModel.from_scorer(space, model.weights(x)[0])
        res = cftp_sample_many(exp_model, [1.0], args.count, rng, budget=args.budget)
        ys = res.samples
        diagnostics = {"coalescence_steps": {str(k): v for k, v in res.histogram().items()}, "draws": args.count}
    else:
        ys, _ = UniformSampler(space).draw_many(args.count, rng)
    _emit("".join(format_structure(space, y) + "\n" for y in ys), args.out)
    if args.diagnostics:
        write_json(args.diagnostics, diagnostics or {"coalescence_steps": {}, "draws": args.count})


def cmd_estimate_z(args) -> None:
    model = _load_model(args.model)
    x = _input_row(model, args.input, args.row)
    exp_model = ExpFamilyModel.from_scorer(model.space, model.weights(x)[0])
    rng = make_rng(args.seed)
    start = time.perf_counter()
    if args.sampler.startswith("chain:"):
        try:
            steps = int(args.sampler.partition(":")[2])
        except ValueError as exc:
            raise ValidationError(f"bad sampler {args.sampler!r}; use chain:<steps>") from exc
        est = estimate_partition_approx_sampler(exp_model, [1.0], epsilon=args.epsilon, chain_steps=steps, rng=rng, p=args.p)
    elif args.sampler in ("cftp", "exact"):
        est = estimate_partition(
            exp_model, [1.0], epsilon=args.epsilon, sampler=args.sampler, rng=rng, p=args.p, budget=args.budget
        )
    else:
        raise ValidationError(f"unknown sampler {args.sampler!r}; use cftp, exact or chain:<steps>")
    elapsed = time.perf_counter() - start
    out = {
        "Z": est.value if math.isfinite(est.value) else None,
        "log_Z": est.log_value,
        "S": est.samples_per_level,
        "l": est.levels,
        "epsilon": est.epsilon,
        "wall_time": elapsed if args.timing else None,
    }
    _emit(dump_json(out), args.out)


def cmd_experiment(args) -> None:
    config = ExperimentConfig.from_json(read_json(args.config), Path(args.config).parent)
    paths = run_experiment(config)
    for key in sorted(paths):
        print(f"{key}\t{paths[key]}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="combpred", description="Structured prediction over combinatorial output spaces.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("count", help="exact |Y|, psi sum and C for a space")
    p.add_argument("space", help="space spec, e.g. multilabel:d=5")
    p.add_argument("-o", "--out")
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("train", help="fit a ridge model to a dataset file")
    p.add_argument("dataset")
    p.add_argument("config", help="JSON with trainer (ncg|sgd), lam, kernel, ...")
    p.add_argument("-o", "--out", required=True, help="model JSON to write")
    p.add_argument("--log", help="training log CSV (sgd only)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="decode one structure per input row")
    p.add_argument("model")
    p.add_argument("inputs")
    p.add_argument("-o", "--out")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("sample", help="uniform draws, or exact draws from a model's distribution")
    p.add_argument("space")
    p.add_argument("--model")
    p.add_argument("--input", help="input rows file; used with --model")
    p.add_argument("--row", type=int, default=0)
    p.add_argument("-n", "--count", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--budget", type=int, help="step budget for the exact sampler")
    p.add_argument("-o", "--out")
    p.add_argument("--diagnostics", help="JSON file for the coalescence-step histogram")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("estimate-z", help="randomised estimate of the partition function")
    p.add_argument("model")
    p.add_argument("input")
    p.add_argument("--row", type=int, default=0)
    p.add_argument("--epsilon", type=float, default=0.5)
    p.add_argument("--p", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sampler", default="cftp", help="cftp, exact, or chain:<steps>")
    p.add_argument("--budget", type=int)
    p.add_argument("--timing", action="store_true", help="record wall time (output no longer reproducible)")
    p.add_argument("-o", "--out")
    p.set_defaults(func=cmd_estimate_z)

    p = sub.add_parser("experiment", help="run an experiment config")
    p.add_argument("config")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except CombiError as exc:
        print(f"combpred: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
