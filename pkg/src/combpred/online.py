"""Stochastic gradient training of the ridge model in its kernel expansion.

Each step sees one example, shrinks every retained coefficient column by
``1 - lam * eta_t`` and appends a new column ``-eta_t * g`` where ``g`` is the
derivative of the example's loss with respect to its score vector
``f = alpha k``.  This is gradient descent in function space on
``(lam / 2) |f|^2 + loss_t(f)``; in the dual parameters it is the
instantaneous gradient preconditioned by the inverse Gram matrix.  Columns
older than ``tau`` steps are dropped.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .counting import EmbeddingStats
from .errors import NumericalError, ValidationError
from .rng import make_rng
from .ridge import Dataset, Kernel, RidgeModel, default_lambda, loss_stats

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e12


def _loss_terms(f, y, stats: EmbeddingStats, scale: float):
    count = stats.count_float
    s1 = float(stats.psi_sum @ f)
    fy = float(y @ f)
    value = 0.5 * float(f @ stats.psi_cov @ f) + s1 + 0.5 * count * fy**2 - count * fy - s1 * fy
    grad = stats.psi_cov @ f + stats.psi_sum + count * fy * y - count * y - fy * stats.psi_sum - s1 * y
    return scale * value, scale * grad


def _loss_curvature(y, stats: EmbeddingStats, scale: float) -> float:
    """Largest eigenvalue of the loss Hessian with respect to the score vector."""
    count = stats.count_float
    d = y.shape[0]
    if d <= 256:
        H = stats.psi_cov + count * np.outer(y, y) - np.outer(stats.psi_sum, y) - np.outer(y, stats.psi_sum)
        return scale * float(np.linalg.eigvalsh(H)[-1])
    ny = float(np.linalg.norm(y))
    return scale * (float(np.linalg.norm(stats.psi_cov, 2)) + count * ny**2 + 2 * float(np.linalg.norm(stats.psi_sum)) * ny)


def _check_shapes(alpha, K, y, stats):
    alpha = np.asarray(alpha, dtype=float)
    K = np.asarray(K, dtype=float)
    d, t = alpha.shape
    if K.shape != (t, t):
        raise ValidationError(f"Gram matrix must be {t} x {t}, got {K.shape}")
    y = np.asarray(y, dtype=float).ravel()
    if y.shape != (d,) or stats.psi_sum.shape != (d,):
        raise ValidationError("label row and statistics must match the embedding dimension")
    return alpha, K, y


def instantaneous_objective(alpha_t, K_t, y_t, stats: EmbeddingStats, lam: float, loss_scale: float = 1.0) -> float:
    """lam tr(alpha K alpha^T) plus the loss of the newest example (last column of K)."""
    alpha, K, y = _check_shapes(alpha_t, K_t, y_t, stats)
    f = alpha @ K[:, -1]
    value, _ = _loss_terms(f, y, stats, loss_scale)
    return float(lam * np.vdot(alpha @ K, alpha) + value)


def instantaneous_gradient(alpha_t, K_t, k, y, stats: EmbeddingStats, lam: float, loss_scale: float = 1.0) -> np.ndarray:
    """Gradient of :func:`instantaneous_objective` with respect to ``alpha_t``."""
    alpha, K, y = _check_shapes(alpha_t, K_t, y, stats)
    k = np.asarray(k, dtype=float).ravel()
    if k.shape != (K.shape[0],):
        raise ValidationError("k must be a column of K")
    _, g = _loss_terms(alpha @ k, y, stats, loss_scale)
    return 2.0 * lam * alpha @ K + np.outer(g, k)


@dataclass
class SgdConfig:
    p: float = 0.1
    # retained columns: an absolute count, or a fraction of m via tau_fraction
    tau: int | None = None
    tau_fraction: float | None = None
    lam: float | None = None
    passes: int = 1
    # cap eta_t at 1 / (lam + curvature of the example's loss) so no single step overshoots
    curvature_clip: bool = True
    kernel: Kernel = field(default_factory=Kernel)
    loss_scale: float | str = 1.0

    def __post_init__(self):
        if not self.p > 0:
            raise ValidationError("p must be positive")
        if self.tau is not None and self.tau < 1:
            raise ValidationError("tau must be >= 1")
        if self.tau_fraction is not None and not 0 < self.tau_fraction <= 1:
            raise ValidationError("tau_fraction must lie in (0, 1]")
        if self.tau is not None and self.tau_fraction is not None:
            raise ValidationError("give tau or tau_fraction, not both")
        if self.lam is not None and not self.lam > 0:
            raise ValidationError("lambda must be positive")
        if self.passes < 1:
            raise ValidationError("passes must be >= 1")

    def horizon(self, m: int) -> int:
        if self.tau is not None:
            return int(self.tau)
        if self.tau_fraction is not None:
            return max(1, int(round(self.tau_fraction * m)))
        return m * self.passes


def default_sgd_lambda(data: Dataset, count: int) -> float:
    """Shrink coefficient whose stationary point is the ridge optimum with the default lambda.

    The ridge objective is ``lam_r |f|^2 + sum_i loss_i``; dividing by m shows
    the per-example objective ``(lam_r / m) |f|^2 + loss_i``, i.e. a shrink
    coefficient of ``2 lam_r / m``.
    """
    return 2.0 * default_lambda(data, count) / data.m


@dataclass
class TrainingLog:
    rows: list[tuple[int, float, float, int]] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["step", "eta", "instantaneous_objective", "active_columns"])
        for step, eta, obj, active in self.rows:
            writer.writerow([step, repr(float(eta)), repr(float(obj)), active])
        return buf.getvalue()


def sgd_train(
    data: Dataset,
    config: SgdConfig | None = None,
    seed: int = 0,
    on_step: Callable[[int, float, np.ndarray, np.ndarray, np.ndarray], None] | None = None,
) -> tuple[RidgeModel, TrainingLog]:
    """Single- or multi-pass SGD over shuffled examples.

    ``on_step(t, eta, columns, owners, grad)`` is called after each update with
    views of the coefficient buffer; ``owners[j]`` is the example behind column
    ``j`` or -1 for an empty slot.
    """
    config = config or SgdConfig()
    stats, scale = loss_stats(data.space, config.loss_scale)
    lam = config.lam if config.lam is not None else default_sgd_lambda(data, stats.count)
    rng = make_rng(seed)
    K = data.kernel_matrix(config.kernel)
    Y = data.y_matrix()
    m, d = Y.shape
    tau = config.horizon(m)
    cap = min(tau, m * config.passes)
    cols = np.zeros((d, cap))
    owner = np.full(cap, -1, dtype=np.int64)
    born = np.full(cap, -1, dtype=np.int64)
    trace = TrainingLog()
    if config.p > 1:
        warnings.warn(f"p = {config.p} > 1 breaks 0 <= 1 - lam*eta_1; clipping eta_1 to 1/lam", stacklevel=2)
    curvature = np.zeros(m)
    if config.curvature_clip:
        curvature = np.array([_loss_curvature(Y[i], stats, scale) * K[i, i] for i in range(m)])
    t = 0
    norm2 = 0.0  # |f|^2 in the kernel's feature space, kept up to date incrementally
    for _ in range(config.passes):
        for e in rng.permutation(m):
            t += 1
            eta = config.p / (lam * t)
            if lam * eta > 1.0:
                eta = 1.0 / lam
            if config.curvature_clip:
                eta = min(eta, 1.0 / (lam + curvature[e]))
            live = owner >= 0
            f = cols[:, live] @ K[owner[live], e]
            loss, g = _loss_terms(f, Y[e], stats, scale)
            value = 0.5 * lam * norm2 + loss
            if not math.isfinite(value) or value > DIVERGENCE_LIMIT:
                raise NumericalError(
                    f"instantaneous objective {value:.3g} at step {t}: step size too large; "
                    f"lower p (now {config.p}) or raise lambda (now {lam:.3g})"
                )
            # the slot of the oldest column; reused once the buffer is full
            slot = (t - 1) % cap
            if owner[slot] >= 0:
                o = owner[slot]
                old = cols[:, slot].copy()
                f_at_o = cols[:, live] @ K[owner[live], o]
                norm2 += -2.0 * float(old @ f_at_o) + float(old @ old) * K[o, o]
                f = f - old * K[o, e]
                cols[:, slot] = 0.0
                owner[slot] = -1
            shrink = 1.0 - lam * eta
            new = -eta * g
            norm2 = shrink**2 * norm2 + 2.0 * shrink * float(new @ f) + float(new @ new) * K[e, e]
            norm2 = max(norm2, 0.0)
            cols *= shrink
            cols[:, slot] = new
            owner[slot] = e
            born[slot] = t
            trace.rows.append((t, eta, value, int((owner >= 0).sum())))
            if on_step is not None:
                on_step(t, eta, cols, owner, g)
    alpha = np.zeros((d, m))
    for slot in np.argsort(born):
        if owner[slot] >= 0:
            alpha[:, owner[slot]] += cols[:, slot]
    model = RidgeModel(
        space=data.space,
        kernel=config.kernel,
        lam=default_lambda(data, stats.count) if config.lam is None else lam * m / 2.0,
        alpha=alpha,
        inputs=data.inputs,
        stats=stats,
        loss_scale=scale,
        fingerprint=data.fingerprint(),
        info={"trainer": "sgd", "steps": t, "tau": tau, "p": config.p, "shrink_lambda": lam},
    )
    return model, trace
