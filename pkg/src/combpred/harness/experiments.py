"""Desk-scale experiment pipelines: generate data, train, predict, score, write CSV + JSON.

Every experiment is a pure function of its config.  Trials get seeds
``substream(seed, trial)`` and may run in worker processes (capped by
``COMBI_THREADS``); rows are written in trial order, so the CSV bytes do not
depend on the worker count.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .. import __version__, _kernels
from ..decode import decode_exact_small
from ..errors import CombiError, ValidationError
from ..formats import dump_json, write_text_atomic
from ..online import SgdConfig, sgd_train
from ..ridge import Kernel, NcgConfig, RidgeProblem, train_ncg
from ..rng import derive_seed, substream
from .datasets import generate_dicycle_dataset, generate_hierarchy_dataset, planted_multilabel, random_taxonomy
from .losses import eval_policy_cosine, hierarchical_loss, set_losses

log = logging.getLogger(__name__)

EXPERIMENTS = ("multilabel", "hierarchical", "dicycle", "sgd-vs-ncg")


@dataclass
class ExperimentConfig:
    experiment: str
    seed: int
    output: str
    m: int = 200
    m_test: int = 100
    n: int = 5
    sigma_size: int = 5
    # training-set sizes for the dicycle learning curve; defaults to [m]
    sizes: list[int] | None = None
    trials: int = 1
    noise: float = 0.3
    labels_per_instance: int = 1
    best_of: int = 200
    depth: int = 3
    branching: int = 3
    lam: float | None = None
    p: float = 0.1
    tau: int | None = None
    tol: float = 1e-6
    kernel: dict = field(default_factory=lambda: {"kind": "linear"})
    timing: bool = False

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValidationError(f"unknown experiment {self.experiment!r}; choose from {', '.join(EXPERIMENTS)}")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0:
            raise ValidationError("seed must be a non-negative integer")
        for name in ("m", "m_test", "n", "sigma_size", "trials", "labels_per_instance", "best_of", "depth"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ValidationError(f"{name} must be a positive integer, got {value!r}")
        if self.sizes is not None:
            if not self.sizes or any(not isinstance(s, int) or not 1 <= s <= self.m for s in self.sizes):
                raise ValidationError(f"sizes must be integers in 1..m={self.m}")
        if self.lam is not None and not self.lam > 0:
            raise ValidationError("lam must be positive")
        if not self.p > 0 or not self.tol > 0 or self.noise < 0:
            raise ValidationError("p and tol must be positive, noise non-negative")
        Kernel.from_dict(self.kernel)
        if not str(self.output):
            raise ValidationError("output path is required")

    @classmethod
    def from_json(cls, data: dict, base_dir=None) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ValidationError("experiment config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {', '.join(sorted(unknown))}")
        for key in ("experiment", "seed", "output"):
            if key not in data:
                raise ValidationError(f"config is missing {key!r}")
        data = dict(data)
        out = Path(data["output"])
        if base_dir is not None and not out.is_absolute():
            data["output"] = str(Path(base_dir) / out)
        return cls(**data)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def environment_fingerprint(workers: int) -> dict:
    return {
        "package": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "backend": _kernels.backend(),
        "workers": workers,
    }


def worker_count(trials: int) -> int:
    cap = os.environ.get("COMBI_THREADS")
    if cap is not None:
        try:
            limit = int(cap)
        except ValueError as exc:
            raise ValidationError(f"COMBI_THREADS must be an integer, got {cap!r}") from exc
        if limit < 1:
            raise ValidationError("COMBI_THREADS must be >= 1")
    else:
        limit = os.cpu_count() or 1
    return max(1, min(limit, trials))


# single trials; each returns (csv rows, timing rows)


def _num(v) -> str:
    return repr(float(v))


def _ncg(config: ExperimentConfig) -> NcgConfig:
    return NcgConfig(lam=config.lam, kernel=Kernel.from_dict(config.kernel), tol=config.tol)


def _trial_multilabel(config: ExperimentConfig, trial: int):
    rng = substream(config.seed, trial)
    data, _ = planted_multilabel(config.m + config.m_test, config.n, config.sigma_size, config.noise, rng)
    train, test = data.subset(range(config.m)), data.subset(range(config.m, data.m))
    model = train_ncg(train, _ncg(config))
    W = model.weights(test.inputs)
    totals = np.zeros(3)
    for w, ys in zip(W, test.label_sets):
        # unsigned indicators: the argmax switches on every label with positive weight
        z = frozenset(np.flatnonzero(w > 0).tolist())
        totals += set_losses(z, ys[0], d=config.sigma_size, scores=w)
    avg = totals / test.m
    return [[trial, config.m, config.m_test, _num(avg[0]), _num(avg[1]), _num(avg[2])]], []


def _trial_hierarchical(config: ExperimentConfig, trial: int):
    rng = substream(config.seed, trial)
    parents = random_taxonomy(config.depth, config.branching, rng)
    data = generate_hierarchy_dataset(config.m + config.m_test, config.n, parents, config.noise, rng)
    train, test = data.subset(range(config.m)), data.subset(range(config.m, data.m))
    model = train_ncg(train, _ncg(config))
    space = model.space
    zero_one = hamming = hier = 0.0
    for w, ys in zip(model.weights(test.inputs), test.label_sets):
        z, _ = decode_exact_small(space, w)
        pz, py = space.below[z], space.below[ys[0]]
        vz = np.isin(np.arange(space.size), list(pz))
        vy = np.isin(np.arange(space.size), list(py))
        zero_one += float(z != ys[0])
        hamming += float((vz != vy).sum())
        hier += hierarchical_loss(vz, vy, parents)
    k = test.m
    row = [trial, space.size, config.m, config.m_test, _num(100.0 * zero_one / k), _num(hamming / k), _num(hier / k)]
    return [row], []


def _trial_dicycle(config: ExperimentConfig, trial: int):
    rng = substream(config.seed, trial)
    sizes = config.sizes or [config.m]
    split = generate_dicycle_dataset(
        config.n, config.m, config.m_test, config.sigma_size, config.labels_per_instance, rng, config.best_of
    )
    rows = []
    for size in sizes:
        model = train_ncg(split.train.subset(range(size)), _ncg(config))
        rows.append([trial, size, config.m_test, split.best_of, _num(eval_policy_cosine(model, split.test_inputs, split.policy))])
    return rows, []


def _trial_sgd_vs_ncg(config: ExperimentConfig, trial: int):
    rng = substream(config.seed, trial)
    data, _ = planted_multilabel(config.m, config.n, config.sigma_size, config.noise, rng)
    kernel = Kernel.from_dict(config.kernel)
    t0 = time.perf_counter()
    ncg = train_ncg(data, _ncg(config))
    t1 = time.perf_counter()
    sgd, _ = sgd_train(
        data,
        SgdConfig(p=config.p, tau=config.tau, lam=None if config.lam is None else 2.0 * config.lam / data.m, kernel=kernel),
        seed=derive_seed(rng),
    )
    t2 = time.perf_counter()
    problem = RidgeProblem(data.kernel_matrix(kernel), data.y_matrix(), ncg.stats, ncg.lam, ncg.loss_scale)
    f_ncg, f_sgd = problem.objective(ncg.alpha), problem.objective(sgd.alpha)
    log.info("trial %d: NCG objective %.6g in %.3fs, SGD objective %.6g in %.3fs", trial, f_ncg, t1 - t0, f_sgd, t2 - t1)
    tau = config.tau if config.tau is not None else data.m
    row = [trial, data.m, tau, _num(f_ncg), _num(f_sgd), _num(abs(f_sgd - f_ncg) / abs(f_ncg))]
    return [row], [[trial, "ncg", _num(t1 - t0)], [trial, "sgd", _num(t2 - t1)]]


_PIPELINES: dict[str, tuple[list[str], Callable]] = {
    "multilabel": (["trial", "m", "m_test", "zero_one", "hamming", "ranking"], _trial_multilabel),
    "hierarchical": (["trial", "nodes", "m", "m_test", "zero_one_pct", "hamming", "hierarchical"], _trial_hierarchical),
    "dicycle": (["trial", "m", "m_test", "best_of", "cosine"], _trial_dicycle),
    "sgd-vs-ncg": (["trial", "m", "tau", "ncg_objective", "sgd_objective", "relative_gap"], _trial_sgd_vs_ncg),
}


def _run_trial(args):
    config, trial = args
    return _PIPELINES[config.experiment][1](config, trial)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


class _Stage:
    """Tags errors with the pipeline stage and removes files written so far."""

    def __init__(self, written: list[Path]):
        self.written = written
        self.name = "setup"

    def __call__(self, name: str) -> "_Stage":
        self.name = name
        return self

    def __enter__(self):
        return self

    def __exit__(self, kind, exc, tb):
        if exc is None:
            return False
        for path in self.written:
            path.unlink(missing_ok=True)
        message = f"stage {self.name!r} failed: {exc}"
        if isinstance(exc, CombiError):
            raise type(exc)(message) from exc
        raise CombiError(message) from exc


def run_experiment(config: ExperimentConfig) -> dict[str, Path]:
    """Run every trial, then write ``<experiment>.csv`` and ``<experiment>.json`` under ``config.output``."""
    out = Path(config.output)
    written: list[Path] = []
    stage = _Stage(written)
    header, _ = _PIPELINES[config.experiment]
    workers = worker_count(config.trials)
    jobs = [(config, t) for t in range(config.trials)]
    with stage("train-predict-score"):
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(_run_trial, jobs))
        else:
            results = [_run_trial(j) for j in jobs]
    rows = [r for res, _ in results for r in res]
    timings = [r for _, res in results for r in res]
    name = config.experiment
    paths = {"csv": out / f"{name}.csv", "json": out / f"{name}.json"}
    with stage("write"):
        out.mkdir(parents=True, exist_ok=True)
        write_text_atomic(paths["csv"], _csv(header, rows))
        written.append(paths["csv"])
        echo: dict[str, Any] = {"config": config.to_json(), "environment": environment_fingerprint(workers)}
        write_text_atomic(paths["json"], dump_json(echo))
        written.append(paths["json"])
        if config.timing and timings:
            paths["timing"] = out / f"{name}_timing.csv"
            write_text_atomic(paths["timing"], _csv(["trial", "trainer", "wall_seconds"], timings))
            written.append(paths["timing"])
    return paths

