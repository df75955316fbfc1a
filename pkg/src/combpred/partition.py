"""Partition-function estimation for ``p(y | x, w)``.

``Z(w | x) = sum_y exp(<phi(x, y), w>)`` is written as ``|Y|`` divided by a
product of ratios ``Z(beta_{i-1} w) / Z(beta_i w)`` along a cooling schedule
``0 = beta_0 < ... < beta_l = 1``.  Each ratio is the mean of
``exp((beta_{i-1} - beta_i) score(y))`` under ``p(. | x, beta_i w)``, so exact
(or nearly exact) samples at each temperature give a randomized estimate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .counting import (
    INDICATOR_FAMILIES,
    EmbeddingStats,
    StructureSpace,
    cardinality,
    embed_many,
    enumerate_small,
    psi_sum,
    space_stats,
)
from .errors import ValidationError
from .rng import derive_seed, make_rng, substream
from .sampling import (
    ExpFamilyModel,
    UniformSampler,
    cftp_many,
    coupling_mixing_bound,
    default_budget,
    run_chains,
)

DEFAULT_LIMIT = 1 << 20


def _check_space(model: ExpFamilyModel, space: StructureSpace | None) -> StructureSpace:
    if space is not None and space != model.space:
        raise ValidationError("space does not match the model")
    return model.space


def exact_scores(model: ExpFamilyModel, x, limit: int = DEFAULT_LIMIT) -> tuple[list, np.ndarray]:
    ys = enumerate_small(model.space, limit)
    return ys, embed_many(model.space, ys, check=False) @ model.input_weights(x)


def exact_partition(model: ExpFamilyModel, x, space: StructureSpace | None = None, limit: int = DEFAULT_LIMIT) -> float:
    """Z by enumeration, summed with ``math.fsum``."""
    _check_space(model, space)
    _, s = exact_scores(model, x, limit)
    return math.fsum(np.exp(s).tolist())


def exact_distribution(model: ExpFamilyModel, x, limit: int = DEFAULT_LIMIT) -> tuple[list, np.ndarray]:
    ys, s = exact_scores(model, x, limit)
    p = np.exp(s - s.max())
    return ys, p / math.fsum(p.tolist())


@dataclass(frozen=True)
class CoolingSchedule:
    betas: tuple[float, ...]
    q: float
    p: int

    @property
    def levels(self) -> int:
        return len(self.betas) - 1

    def gaps(self) -> np.ndarray:
        return np.diff(self.betas)


def _floor(a: float) -> int:
    # 0.9999999999999999 from a rounded norm should count as 1
    k = math.floor(a)
    return int(k + 1) if a - k > 1.0 - 1e-9 else int(k)


def cooling_schedule(R: float, w_norm: float, p: int = 3, fine_tail: bool = False) -> CoolingSchedule:
    """Points ``0, 1/q, ..., p*floor(R|w|)/q, 1`` with ``q = p R |w|``.

    The last gap can exceed ``1/q`` when ``R|w|`` is not an integer;
    ``fine_tail=True`` continues the ``j/q`` grid up to ``floor(q)`` so that
    every gap is at most ``1/q``.
    """
    if p < 3 or int(p) != p:
        raise ValidationError("p must be an integer >= 3")
    p = int(p)
    if R < 0 or w_norm < 0:
        raise ValidationError("R and |w| must be non-negative")
    rw = R * w_norm
    if rw == 0:
        return CoolingSchedule((0.0, 1.0), 0.0, p)
    q = p * rw
    top = _floor(q) if fine_tail else p * _floor(rw)
    pts = [j / q for j in range(top + 1)]
    while len(pts) > 1 and pts[-1] >= 1.0 - 1e-12:
        pts.pop()
    return CoolingSchedule(tuple(pts) + (1.0,), q, p)


def sample_size(epsilon: float, levels: int, p: int) -> int:
    """Draws per level: ceil(65 eps^-2 l exp(2/p))."""
    if not epsilon > 0:
        raise ValidationError("epsilon must be positive")
    return int(math.ceil(65.0 * levels * math.exp(2.0 / p) / epsilon**2))


@dataclass
class ZEstimate:
    value: float
    log_value: float
    epsilon: float
    samples_per_level: int
    levels: int
    schedule: CoolingSchedule
    level_means: list[float] = field(default_factory=list)
    level_rel_var: list[float] = field(default_factory=list)
    depth_histogram: dict[int, int] = field(default_factory=dict)
    note: str = "within (1 +- epsilon) of Z with probability >= 3/4"


# level samplers: (beta, count, rng) -> embedding rows drawn at temperature beta


def _cftp_level(model, x, accept=None, budget=None):
    sampler = UniformSampler(model.space)
    v = model.input_weights(x)
    R = model.feature_bound(x)

    def draw(beta, n, rng, hist):
        bound = beta * model.weight_norm * R
        res = cftp_many(
            lambda psi: beta * (psi @ v),
            bound,
            sampler,
            n,
            rng,
            budget or default_budget(beta * model.weight_norm, R),
            br=bound,
            accept=accept,
        )
        for k, c in res.histogram().items():
            hist[k] = hist.get(k, 0) + c
        return res.embeddings

    return draw


def _exact_level(model, x, accept=None, limit=DEFAULT_LIMIT):
    ys = enumerate_small(model.space, limit)
    psi = embed_many(model.space, ys, check=False)
    if accept is not None:
        psi = psi[accept(ys, psi)]
    s = psi @ model.input_weights(x)

    def draw(beta, n, rng, hist):
        p = np.exp(beta * s - (beta * s).max())
        idx = rng.choice(len(p), size=n, p=p / p.sum())
        return psi[idx]

    return draw


def _chain_level(model, x, steps):
    sampler = UniformSampler(model.space)

    def draw(beta, n, rng, hist):
        m = model.scale(beta)
        states = run_chains(m, x, sampler, n, steps, rng)
        return embed_many(model.space, states, check=False)

    return draw


def _telescope(model, x, schedule, S, draw, rng, base_log_count):
    v = model.input_weights(x)
    log_prod = 0.0
    means, rel_var, hist = [], [], {}
    for i in range(1, len(schedule.betas)):
        b_prev, b_cur = schedule.betas[i - 1], schedule.betas[i]
        psi = draw(b_cur, S, rng, hist)
        f = np.exp((b_prev - b_cur) * (psi @ v))
        mean = math.fsum(f.tolist()) / S
        var = math.fsum(((f - mean) ** 2).tolist()) / max(S - 1, 1)
        means.append(mean)
        rel_var.append(var / mean**2)
        log_prod += math.log(mean)
    log_z = base_log_count - log_prod
    return log_z, means, rel_var, hist


def _estimate(model, x, epsilon, p, draw, rng, fine_tail, samples_per_level, base_count, c=1.0):
    R = model.feature_bound(x)
    schedule = cooling_schedule(R * c, model.weight_norm, p, fine_tail)
    base_log_count = math.log(base_count)
    if schedule.q == 0:
        return ZEstimate(float(base_count), base_log_count, epsilon, 0, 1, schedule, [1.0], [0.0], {})
    S = samples_per_level or sample_size(epsilon, schedule.levels, p)
    log_z, means, rel_var, hist = _telescope(model, x, schedule, S, draw, rng, base_log_count)
    value = math.exp(log_z) if log_z < 709 else math.inf
    return ZEstimate(value, log_z, epsilon, S, schedule.levels, schedule, means, rel_var, dict(sorted(hist.items())))


def estimate_partition(
    model: ExpFamilyModel,
    x,
    space: StructureSpace | None = None,
    epsilon: float = 0.5,
    sampler: str | Callable = "cftp",
    rng=None,
    p: int = 3,
    fine_tail: bool = False,
    samples_per_level: int | None = None,
    budget: int | None = None,
) -> ZEstimate:
    """Telescoping-product estimate of Z with exact samples at each temperature.

    ``sampler`` is ``"cftp"`` (coupling from the past), ``"exact"`` (draws from
    the enumerated distribution; small spaces only) or a callable
    ``(beta, n, rng, histogram) -> embedding rows``.
    """
    _check_space(model, space)
    rng = make_rng(rng)
    if sampler == "cftp":
        draw = _cftp_level(model, x, budget=budget)
    elif sampler == "exact":
        draw = _exact_level(model, x)
    elif callable(sampler):
        draw = sampler
    else:
        raise ValidationError(f"unknown sampler {sampler!r}")
    return _estimate(model, x, epsilon, p, draw, rng, fine_tail, samples_per_level, cardinality(model.space))


def approx_chain_steps(model: ExpFamilyModel, x, epsilon: float, p: int = 3, fine_tail: bool = False) -> int:
    """Chain length giving per-level variation distance eps / (5 l exp(2/p))."""
    R = model.feature_bound(x)
    schedule = cooling_schedule(R, model.weight_norm, p, fine_tail)
    if schedule.q == 0:
        return 1
    target = epsilon / (5.0 * schedule.levels * math.exp(2.0 / p))
    return coupling_mixing_bound(model.weight_norm, R, target)


def estimate_partition_approx_sampler(
    model: ExpFamilyModel,
    x,
    space: StructureSpace | None = None,
    epsilon: float = 0.5,
    chain_steps: int | None = None,
    rng=None,
    p: int = 3,
    fine_tail: bool = False,
    samples_per_level: int | None = None,
) -> ZEstimate:
    """As :func:`estimate_partition`, each draw the final state of a chain of ``chain_steps`` steps.

    Fewer steps than :func:`approx_chain_steps` recommends are allowed but
    void the accuracy guarantee.
    """
    _check_space(model, space)
    rng = make_rng(rng)
    steps = chain_steps if chain_steps is not None else approx_chain_steps(model, x, epsilon, p, fine_tail)
    if steps < 1:
        raise ValidationError("chain_steps must be >= 1")
    draw = _chain_level(model, x, steps)
    return _estimate(model, x, epsilon, p, draw, rng, fine_tail, samples_per_level, cardinality(model.space))


def exact_level_ratios(model: ExpFamilyModel, x, schedule: CoolingSchedule, limit: int = DEFAULT_LIMIT) -> list[float]:
    """Exact ratios Z(beta_{i-1} w) / Z(beta_i w) by enumeration."""
    _, s = exact_scores(model, x, limit)
    out = []
    for b_prev, b_cur in zip(schedule.betas[:-1], schedule.betas[1:]):
        out.append(math.fsum(np.exp(b_prev * s).tolist()) / math.fsum(np.exp(b_cur * s).tolist()))
    return out


def taylor_partition(stats: EmbeddingStats | StructureSpace, w, x, literal: bool = False) -> float:
    """Second-order expansion ``|Y| + sum_y f + 1/2 sum_y f^2`` from the space statistics.

    ``literal=True`` drops the 1/2 on the quadratic term.  Pass a
    :class:`StructureSpace` to have the family checked; statistics passed
    directly are assumed to come from a 0/1 embedding.
    """
    if isinstance(stats, StructureSpace):
        if stats.family not in INDICATOR_FAMILIES or stats.signed:
            raise ValidationError(f"{stats.family} does not have a 0/1 embedding")
        stats = space_stats(stats)
    d = stats.psi_sum.size
    x = np.atleast_1d(np.asarray(x, dtype=float))
    w = np.asarray(w, dtype=float).ravel()
    if w.size != d * x.size:
        raise ValidationError(f"weights must have {d} x {x.size} entries")
    v = w.reshape(d, x.size) @ x
    coef = 1.0 if literal else 0.5
    return math.fsum([stats.count_float, float(stats.psi_sum @ v), coef * float(v @ stats.psi_cov @ v)])


def taylor_remainder_bound(model: ExpFamilyModel, x, limit: int = DEFAULT_LIMIT) -> float:
    """Sum over the space of the Lagrange bound exp(|f|) |f|^3 / 6 on exp(f) - (1 + f + f^2/2)."""
    _, s = exact_scores(model, x, limit)
    a = np.abs(s)
    return math.fsum((np.exp(a) * a**3 / 6.0).tolist())


def hoeffding_sample_size(R: float, G: float, epsilon: float, delta: float) -> int:
    """Draws so that a mean of values in [-RG, RG] is within eps with probability 1 - delta."""
    if not (epsilon > 0 and 0 < delta < 1):
        raise ValidationError("need epsilon > 0 and 0 < delta < 1")
    return int(math.ceil(2.0 * R**2 * G**2 * math.log(2.0 / delta) / epsilon**2))


def hoeffding_gradient_dot(
    model: ExpFamilyModel,
    x,
    z_vec,
    delta: float,
    epsilon: float,
    sampler: str | Callable = "cftp",
    rng=None,
    G: float | None = None,
) -> float:
    """Estimate ``E[<phi(x, y), z>]`` under ``p(y | x, w)`` from exact samples."""
    rng = make_rng(rng)
    z = np.asarray(z_vec, dtype=float).ravel()
    if z.size != model.w.size:
        raise ValidationError("z must live in the feature space of the model")
    G = float(np.linalg.norm(z)) if G is None else float(G)
    R = model.feature_bound(x)
    if G == 0 or R == 0:
        return 0.0
    S = hoeffding_sample_size(R, G, epsilon, delta)
    draw = _cftp_level(model, x) if sampler == "cftp" else _exact_level(model, x) if sampler == "exact" else sampler
    psi = draw(1.0, S, rng, {})
    xv = np.atleast_1d(np.asarray(x, dtype=float))
    proj = z.reshape(model.space.dim, model.n_inputs) @ xv
    return math.fsum((psi @ proj).tolist()) / S


def weight_norm_bound(space: StructureSpace | int, lam: float) -> float:
    """sqrt(ln |Y| / lambda): a bound on the norm of the regularised optimum."""
    if not lam > 0:
        raise ValidationError("lambda must be positive")
    count = cardinality(space) if isinstance(space, StructureSpace) else space
    if isinstance(count, float):
        log_count = math.log(count)
    else:
        log_count = math.log(int(count)) if count > 0 else -math.inf
    if count < 1:
        raise ValidationError("space must be non-empty")
    return math.sqrt(log_count / lam)


def moment_cooling_constant(model: ExpFamilyModel, x, j: int, gamma: float, limit: int = DEFAULT_LIMIT) -> float:
    """max over the restricted support of 1 + ln phi_j / <w, phi>, floored at 1, by enumeration.

    Reference value only: :func:`estimate_moment` keeps ``phi_j`` as a fixed
    per-structure weight, which leaves the per-level ratios in
    ``[exp(-1/p), exp(1/p)]`` with the constant equal to 1.
    """
    ys, s = exact_scores(model, x, limit)
    phi = _feature_values(model, x, j, embed_many(model.space, ys, check=False))
    keep = np.abs(phi) >= gamma
    with np.errstate(divide="ignore", invalid="ignore"):
        c = 1.0 + np.log(np.abs(phi[keep])) / s[keep]
    c = c[np.isfinite(c)]
    return float(max(1.0, c.max(initial=1.0)))


def _feature_values(model, x, j, psi):
    n = model.n_inputs
    a, b = divmod(int(j), n)
    xv = np.atleast_1d(np.asarray(x, dtype=float))
    return psi[:, a] * xv[b]


def estimate_moment(
    model: ExpFamilyModel,
    x,
    j: int,
    epsilon: float = 0.5,
    gamma: float = 1e-12,
    rng=None,
    p: int = 3,
    c: float = 1.0,
    samples_per_level: int | None = None,
) -> float:
    """Estimate ``Z_j / Z = E[phi_j(x, y)]``, the j-th coordinate of the gradient of ln Z.

    ``Z_j = sum_y phi_j exp(<phi, w>)`` over structures with ``|phi_j| >= gamma``
    is telescoped the same way as Z, with proposals restricted to that support
    by rejection.  Its ``beta = 0`` value is ``x_b`` times the first moment of
    embedding coordinate ``a`` (``j = a * n_inputs + b``), so the family needs
    a 0/1 embedding.  Both estimates share their random numbers.
    """
    space = model.space
    if space.family not in INDICATOR_FAMILIES or space.signed:
        raise ValidationError("feature takes both signs on the support; need a 0/1 embedding")
    if not 0 <= j < model.w.size:
        raise ValidationError(f"feature index {j} out of range")
    if c < 1:
        raise ValidationError("cooling constant must be >= 1")
    a, b = divmod(int(j), model.n_inputs)
    xb = float(np.atleast_1d(np.asarray(x, dtype=float))[b])
    if abs(xb) < gamma or xb == 0:
        raise ValidationError("feature is below gamma on every structure")
    base = float(psi_sum(space, exact=True)[a]) * abs(xb)
    if base == 0:
        raise ValidationError("feature is zero on every structure")
    seed = derive_seed(make_rng(rng))
    accept = lambda ys, psi: psi[:, a] > 0.5  # noqa: E731
    whole = _cftp_level(model, x)
    part = _cftp_level(model, x, accept=accept)
    z = _estimate(model, x, epsilon, p, whole, substream(seed, 0), False, samples_per_level, cardinality(space), c)
    zj = _estimate(model, x, epsilon, p, part, substream(seed, 0), False, samples_per_level, base, c)
    if math.isfinite(zj.value) and math.isfinite(z.value) and z.value > 0:
        ratio = zj.value / z.value
    else:
        ratio = math.exp(zj.log_value - z.log_value)
    return math.copysign(ratio, xb)
