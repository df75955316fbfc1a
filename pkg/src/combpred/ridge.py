"""Structured ridge regression with the quadratic pairwise surrogate.

The model scores a structure by ``f(x, y) = <alpha k(x), psi(y)>`` where
``alpha`` is a ``d x m`` matrix of dual coefficients and ``k(x)`` the kernel
column of ``x`` against the training inputs.  Training never touches the
output space directly: it only needs ``|Y|``, ``Psi = sum psi`` and
``C = sum psi psi^T`` from :mod:`combpred.counting`.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
import scipy.linalg

from .counting import EmbeddingStats, StructureSpace, embed, embed_many, space_stats, to_float
from .errors import NumericalError, ValidationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Kernel:
    """Input kernel: ``linear``, ``polynomial`` ((<a,b> + coef0)^degree) or ``rbf`` (exp(-gamma |a-b|^2))."""

    kind: str = "linear"
    degree: int = 2
    coef0: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        if self.kind not in ("linear", "polynomial", "rbf"):
            raise ValidationError(f"unknown kernel {self.kind!r}")
        if self.kind == "polynomial" and self.degree < 1:
            raise ValidationError("polynomial degree must be >= 1")
        if self.kind == "rbf" and not self.gamma > 0:
            raise ValidationError("rbf bandwidth gamma must be positive")

    def __call__(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        a = np.atleast_2d(np.asarray(a, dtype=float))
        b = np.atleast_2d(np.asarray(b, dtype=float))
        if a.shape[1] != b.shape[1]:
            raise ValidationError(f"input widths differ: {a.shape[1]} vs {b.shape[1]}")
        dots = a @ b.T
        if self.kind == "linear":
            return dots
        if self.kind == "polynomial":
            return (dots + self.coef0) ** self.degree
        sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * dots
        return np.exp(-self.gamma * np.maximum(sq, 0.0))

    def to_dict(self) -> dict:
        if self.kind == "linear":
            return {"kind": "linear"}
        if self.kind == "polynomial":
            return {"kind": "polynomial", "degree": self.degree, "coef0": self.coef0}
        return {"kind": "rbf", "gamma": self.gamma}

    @classmethod
    def from_dict(cls, data: dict) -> "Kernel":
        try:
            return cls(**data)
        except TypeError as exc:
            raise ValidationError(f"bad kernel description {data!r}") from exc


class Dataset:
    """Training examples: inputs (or a precomputed Gram matrix) and positive label sets."""

    def __init__(
        self,
        inputs: np.ndarray | None,
        label_sets: Sequence[Sequence],
        space: StructureSpace,
        gram: np.ndarray | None = None,
    ):
        if inputs is None and gram is None:
            raise ValidationError("need inputs or a Gram matrix")
        self.space = space
        self.label_sets = [[space.check(y) for y in ys] for ys in label_sets]
        if any(len(ys) == 0 for ys in self.label_sets):
            raise ValidationError("every instance needs at least one positive structure")
        m = len(self.label_sets)
        self.inputs = None
        if inputs is not None:
            inputs = np.asarray(inputs, dtype=float)
            if inputs.ndim != 2 or inputs.shape[0] != m:
                raise ValidationError(f"inputs must be {m} x n, got shape {inputs.shape}")
            if not np.all(np.isfinite(inputs)):
                raise ValidationError("inputs contain non-finite values")
            self.inputs = inputs
        self.gram = None
        if gram is not None:
            gram = np.asarray(gram, dtype=float)
            if gram.shape != (m, m):
                raise ValidationError(f"Gram matrix must be {m} x {m}")
            self.gram = gram

    @property
    def m(self) -> int:
        return len(self.label_sets)

    def y_matrix(self) -> np.ndarray:
        """Row i is the sum of psi(y) over the positive structures of instance i."""
        out = np.zeros((self.m, self.space.dim))
        for i, ys in enumerate(self.label_sets):
            for y in ys:
                out[i] += embed(self.space, y, check=False)
        return out

    def label_embeddings(self, i: int) -> np.ndarray:
        return embed_many(self.space, self.label_sets[i], check=False)

    def kernel_matrix(self, kernel: Kernel) -> np.ndarray:
        if self.gram is not None:
            return self.gram
        return kernel(self.inputs, self.inputs)

    def subset(self, idx: Sequence[int]) -> "Dataset":
        idx = list(idx)
        return Dataset(
            None if self.inputs is None else self.inputs[idx],
            [self.label_sets[i] for i in idx],
            self.space,
            None if self.gram is None else self.gram[np.ix_(idx, idx)],
        )

    def fingerprint(self) -> str:
        return input_fingerprint(self.inputs if self.inputs is not None else self.gram)


def input_fingerprint(arr: np.ndarray | None) -> str:
    if arr is None:
        return ""
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    h = hashlib.sha256(repr(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


def default_lambda(data: Dataset, count: int) -> float:
    """|Y| times the average number of positive structures per instance."""
    return to_float(count) * sum(len(ys) for ys in data.label_sets) / data.m


@dataclass
class RidgeModel:
    space: StructureSpace
    kernel: Kernel
    lam: float
    alpha: np.ndarray
    inputs: np.ndarray | None
    stats: EmbeddingStats
    loss_scale: float = 1.0
    fingerprint: str = ""
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.lam > 0:
            raise ValidationError("lambda must be positive")
        self.alpha = np.asarray(self.alpha, dtype=float)
        if self.alpha.shape[0] != self.space.dim:
            raise ValidationError(
                f"alpha has {self.alpha.shape[0]} rows, embedding dimension is {self.space.dim}"
            )
        if self.inputs is not None and self.alpha.shape[1] != len(self.inputs):
            raise ValidationError("alpha columns must match the number of training inputs")

    def kernel_columns(self, x: np.ndarray) -> np.ndarray:
        """Kernel values of each row of ``x`` against the training inputs, shape (m, rows)."""
        if self.inputs is None:
            raise ValidationError("model was trained on a precomputed Gram matrix")
        return self.kernel(self.inputs, np.atleast_2d(x))

    def weights(self, x: np.ndarray) -> np.ndarray:
        """Per-input weight vectors ``alpha k(x)``; one row per input row."""
        return (self.alpha @ self.kernel_columns(x)).T

    def to_json(self) -> dict:
        return {
            "format": "combpred-ridge/1",
            "space": self.space.to_dict(),
            "kernel": self.kernel.to_dict(),
            "lambda": self.lam,
            "loss_scale": self.loss_scale,
            "per_structure": self.stats.per_structure,
            "alpha": {"shape": list(self.alpha.shape), "data": self.alpha.ravel().tolist()},
            "inputs": None if self.inputs is None else self.inputs.tolist(),
            "fingerprint": self.fingerprint,
            "info": self.info,
        }

    @classmethod
    def from_json(cls, data: dict) -> "RidgeModel":
        try:
            space = StructureSpace.from_dict(data["space"])
            shape = tuple(data["alpha"]["shape"])
            alpha = np.asarray(data["alpha"]["data"], dtype=float).reshape(shape)
            inputs = data.get("inputs")
            inputs = None if inputs is None else np.asarray(inputs, dtype=float).reshape(shape[1], -1)
            model = cls(
                space=space,
                kernel=Kernel.from_dict(data["kernel"]),
                lam=float(data["lambda"]),
                alpha=alpha,
                inputs=inputs,
                stats=space_stats(space, per_structure=bool(data.get("per_structure", False))),
                loss_scale=float(data.get("loss_scale", 1.0)),
                fingerprint=data.get("fingerprint", ""),
                info=data.get("info", {}),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed model file: {exc}") from exc
        if inputs is not None and input_fingerprint(inputs) != model.fingerprint:
            raise ValidationError("training-input fingerprint does not match stored inputs")
        return model


class RidgeProblem:
    """Objective, gradient and Hessian-vector product over alpha for fixed data.

    The loss of instance i uses the summed label row ``Y_i`` of the data, so
    for ``|Y_i| = 1`` it is exactly the pairwise surrogate.
    """

    def __init__(self, K: np.ndarray, Y: np.ndarray, stats: EmbeddingStats, lam: float, loss_scale: float = 1.0):
        self.K = np.asarray(K, dtype=float)
        self.Y = np.asarray(Y, dtype=float)
        m, d = self.Y.shape
        if self.K.shape != (m, m):
            raise ValidationError(f"Gram matrix shape {self.K.shape} does not match {m} instances")
        if stats.psi_sum.shape != (d,) or stats.psi_cov.shape != (d, d):
            raise ValidationError("embedding statistics do not match the label dimension")
        self.psi = stats.psi_sum
        self.cov = stats.psi_cov
        self.count = stats.count_float
        self.lam = float(lam)
        self.scale = float(loss_scale)
        self.shape = (d, m)

    def _check(self, a: np.ndarray) -> np.ndarray:
        a = np.asarray(a, dtype=float)
        if a.shape != self.shape:
            raise ValidationError(f"expected a {self.shape} matrix, got {a.shape}")
        return a

    def instance_terms(self, alpha: np.ndarray):
        F = self._check(alpha) @ self.K
        s1 = self.psi @ F
        s2 = np.einsum("ij,ij->j", F, self.cov @ F)
        fi = np.einsum("ji,ij->j", self.Y, F)
        return F, s1, s2, fi

    def row_losses(self, alpha: np.ndarray) -> np.ndarray:
        """Per-instance loss of the summed-row form, before scaling."""
        _, s1, s2, fi = self.instance_terms(alpha)
        return 0.5 * s2 + s1 + 0.5 * self.count * fi**2 - self.count * fi - s1 * fi

    def objective(self, alpha: np.ndarray) -> float:
        alpha = self._check(alpha)
        # overflow shows up as a non-finite value, which callers turn into an error
        with np.errstate(over="ignore", invalid="ignore"):
            reg = self.lam * np.vdot(alpha @ self.K, alpha)
            return float(reg + self.scale * self.row_losses(alpha).sum())

    def gradient(self, alpha: np.ndarray) -> np.ndarray:
        F, s1, _, fi = self.instance_terms(alpha)
        Yt = self.Y.T
        dF = (
            self.cov @ F
            + self.psi[:, None]
            + self.count * Yt * fi
            - self.count * Yt
            - np.outer(self.psi, fi)
            - Yt * s1
        )
        return 2.0 * self.lam * alpha @ self.K + self.scale * dF @ self.K

    def hessian_vector(self, v: np.ndarray) -> np.ndarray:
        v = self._check(v)
        V = v @ self.K
        s1 = self.psi @ V
        fi = np.einsum("ji,ij->j", self.Y, V)
        Yt = self.Y.T
        dV = self.cov @ V + self.count * Yt * fi - np.outer(self.psi, fi) - Yt * s1
        return 2.0 * self.lam * V + self.scale * dV @ self.K


def pairwise_surrogate(f: np.ndarray, stats: EmbeddingStats, labels: np.ndarray) -> float:
    """Quadratic pairwise loss of weight vector ``f`` for one instance.

    Sums ``h(z) - h(y) + (h(z) - h(y))^2 / 2`` over positive ``y`` (rows of
    ``labels``, their embeddings) and every other structure ``z``, using only
    the space statistics and the positive structures themselves.
    """
    labels = np.atleast_2d(labels)
    n = labels.shape[0]
    count = stats.count_float
    s1 = float(stats.psi_sum @ f)
    s2 = float(f @ stats.psi_cov @ f)
    h = labels @ f
    big_f = float(h.sum())
    q = float(h @ h)
    return n * s1 - count * big_f + 0.5 * n * s2 - s1 * big_f + big_f**2 + (0.5 * count - n) * q


def _problem(model: RidgeModel, data: Dataset) -> RidgeProblem:
    return RidgeProblem(data.kernel_matrix(model.kernel), data.y_matrix(), model.stats, model.lam, model.loss_scale)


def surrogate_loss(model: RidgeModel, data: Dataset, i: int, form: str = "pairwise") -> float:
    """Loss of instance ``i``.

    ``form="pairwise"`` is the exact quadratic loss over positive/negative
    pairs; ``form="row"`` is the summed-row variant the matrix objective uses.
    Both agree when instance ``i`` has a single positive structure.
    """
    if not 0 <= i < data.m:
        raise IndexError(f"instance {i} out of range 0..{data.m - 1}")
    K = data.kernel_matrix(model.kernel)
    f = model.alpha @ K[:, i]
    if form == "pairwise":
        return model.loss_scale * pairwise_surrogate(f, model.stats, data.label_embeddings(i))
    if form == "row":
        y = data.label_embeddings(i).sum(axis=0)
        s1, fi = model.stats.psi_sum @ f, y @ f
        c = model.stats.count_float
        return model.loss_scale * float(0.5 * f @ model.stats.psi_cov @ f + s1 + 0.5 * c * fi**2 - c * fi - s1 * fi)
    raise ValidationError(f"unknown loss form {form!r}")


def objective(model: RidgeModel, data: Dataset) -> float:
    return _problem(model, data).objective(model.alpha)


def gradient(model: RidgeModel, data: Dataset) -> np.ndarray:
    return _problem(model, data).gradient(model.alpha)


def hessian_vector(model: RidgeModel, data: Dataset, v: np.ndarray) -> np.ndarray:
    return _problem(model, data).hessian_vector(v)


@dataclass
class NcgConfig:
    lam: float | None = None
    kernel: Kernel = field(default_factory=Kernel)
    tol: float = 1e-6
    max_iter: int = 200
    cg_tol: float = 0.1
    cg_max_iter: int | None = None
    armijo: float = 1e-4
    # "count" divides the loss by |Y|
    loss_scale: float | str = 1.0


def loss_stats(space, loss_scale: float | str) -> tuple[EmbeddingStats, float]:
    """Space statistics and the multiplier the loss is trained with.

    ``loss_scale="count"`` divides the loss by |Y|; this is done inside the
    statistics, in exact arithmetic, so huge spaces never overflow.
    """
    if loss_scale == "count":
        return space_stats(space, per_structure=True), 1.0
    try:
        scale = float(loss_scale)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"loss_scale must be a positive number or 'count', got {loss_scale!r}") from exc
    if not scale > 0:
        raise ValidationError(f"loss_scale must be positive, got {scale}")
    return space_stats(space), scale


def conjugate_gradient(hvp, b: np.ndarray, tol: float, max_iter: int) -> np.ndarray:
    """Solve H x = b by CG until the residual norm drops below ``tol``."""
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = np.vdot(r, r)
    for _ in range(max_iter):
        if math.sqrt(rr) <= tol:
            break
        hp = hvp(p)
        curv = np.vdot(p, hp)
        if curv <= 0:
            # flat or negative direction; keep what we have
            if not x.any():
                x = b.copy()
            break
        step = rr / curv
        x += step * p
        r -= step * hp
        rr_new = np.vdot(r, r)
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x


def minimize_ncg(problem: RidgeProblem, alpha0: np.ndarray, config: NcgConfig) -> tuple[np.ndarray, dict]:
    alpha = np.array(alpha0, dtype=float, copy=True)
    value = problem.objective(alpha)
    if not math.isfinite(value):
        raise NumericalError("objective is not finite at the start; rescale the loss with loss_scale='count'")
    g = problem.gradient(alpha)
    g0 = float(np.linalg.norm(g))
    target = config.tol * max(g0, np.finfo(float).tiny)
    cg_iters = config.cg_max_iter or 10 * alpha.size
    history = [value]
    converged = g0 <= target
    it = 0
    while not converged and it < config.max_iter:
        it += 1
        gnorm = float(np.linalg.norm(g))
        step_dir = conjugate_gradient(problem.hessian_vector, -g, config.cg_tol * gnorm, cg_iters)
        slope = float(np.vdot(g, step_dir))
        if slope >= 0:
            step_dir, slope = -g, -gnorm**2
        t = 1.0
        while True:
            cand = alpha + t * step_dir
            cand_value = problem.objective(cand)
            if not math.isfinite(cand_value):
                raise NumericalError(
                    "objective overflowed during line search; rescale the loss with loss_scale='count'"
                )
            if cand_value <= value + config.armijo * t * slope:
                break
            t *= 0.5
            if t < 1e-12:
                break
        if t < 1e-12:
            log.debug("line search stalled at iteration %d", it)
            break
        alpha, value = cand, cand_value
        history.append(value)
        g = problem.gradient(alpha)
        converged = float(np.linalg.norm(g)) <= target
    info = {
        "converged": bool(converged),
        "iterations": it,
        "grad_norm": float(np.linalg.norm(g)),
        "initial_grad_norm": g0,
        "objective": value,
        "objective_history": history,
    }
    return alpha, info


def train_ncg(data: Dataset, config: NcgConfig | None = None) -> RidgeModel:
    """Newton-CG on the ridge objective, started from alpha = 0."""
    config = config or NcgConfig()
    stats, scale = loss_stats(data.space, config.loss_scale)
    lam = config.lam if config.lam is not None else default_lambda(data, stats.count)
    K = data.kernel_matrix(config.kernel)
    problem = RidgeProblem(K, data.y_matrix(), stats, lam, scale)
    alpha, info = minimize_ncg(problem, np.zeros(problem.shape), config)
    if not info["converged"]:
        log.warning(
            "Newton-CG stopped after %d iterations with gradient norm %.3g",
            info["iterations"],
            info["grad_norm"],
        )
    info.pop("objective_history")
    return RidgeModel(
        space=data.space,
        kernel=config.kernel,
        lam=lam,
        alpha=alpha,
        inputs=data.inputs,
        stats=stats,
        loss_scale=scale,
        fingerprint=data.fingerprint(),
        info={"trainer": "ncg", **info},
    )


def score(model: RidgeModel, x: np.ndarray, y: Any) -> float:
    """f(x, y) = <alpha k(x), psi(y)>."""
    psi = embed(model.space, y)
    return float(model.weights(np.asarray(x, dtype=float).reshape(1, -1))[0] @ psi)


def nystrom_embed(gram: np.ndarray, landmarks: Sequence[int], out_dim: int) -> np.ndarray:
    """Low-dimensional rows whose inner products approximate ``gram``.

    Landmark rows get ``U Lambda^{1/2}`` from the top ``out_dim`` eigenpairs
    of the landmark block; the rest get ``B^T U Lambda^{-1/2}`` where ``B``
    is the landmark-by-rest block.  Rows come back in the original order.
    """
    gram = np.asarray(gram, dtype=float)
    m = gram.shape[0]
    if gram.shape != (m, m):
        raise ValidationError("gram must be square")
    landmarks = np.asarray(landmarks, dtype=np.int64)
    if len(np.unique(landmarks)) != len(landmarks) or landmarks.min(initial=0) < 0 or landmarks.max(initial=0) >= m:
        raise ValidationError("landmarks must be distinct row indices")
    k = len(landmarks)
    if not 1 <= out_dim <= k <= m:
        raise ValidationError(f"need 1 <= out_dim <= landmarks <= m, got {out_dim}, {k}, {m}")
    rest = np.setdiff1d(np.arange(m), landmarks)
    A = gram[np.ix_(landmarks, landmarks)]
    B = gram[np.ix_(landmarks, rest)]
    evals, evecs = scipy.linalg.eigh((A + A.T) / 2)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    usable = int(np.sum(evals > 1e-12))
    if usable < out_dim:
        raise NumericalError(f"landmark block has usable rank {usable}, fewer than out_dim={out_dim}")
    lam_n, u_n = evals[:out_dim], evecs[:, :out_dim]
    out = np.empty((m, out_dim))
    out[landmarks] = u_n * np.sqrt(lam_n)
    out[rest] = B.T @ u_n / np.sqrt(lam_n)
    return out
