"""Uniform samplers, the Metropolis chain with uniform proposals, and exact sampling.

The chain targets ``p(y | x, w)`` proportional to ``exp(<phi(x, y), w>)`` with
``phi(x, y) = psi(y) (x) x``.  It proposes a uniformly random structure and
accepts with ``min(1, exp(score(z) - score(y)))``.  Because the proposal
ignores the current state, every copy of the chain jumps to the same
proposal once the acceptance uniform falls below ``exp(score - max score)``;
:func:`cftp_sample` uses that event to draw exact samples by coupling from
the past.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from . import _kernels
from .counting import (
    StructureSpace,
    _subtree_f,
    binom,
    embed,
    embed_many,
    max_embedding_norm,
    transitive_closure,
    validate_tree,
)
from .errors import BudgetExceededError, ValidationError
from .rng import make_rng, randbelow

# uniform samplers for single structures


def uniform_hypercube(d: int, rng) -> tuple[int, ...]:
    """Uniform vertex of {0, 1}^d as a bit tuple."""
    if d < 1:
        raise ValidationError("hypercube dimension must be >= 1")
    rng = make_rng(rng)
    return tuple(int(b) for b in rng.integers(0, 2, size=d))


def uniform_permutation(d: int, rng) -> tuple[int, ...]:
    """Uniform ranking of 0..d-1 (Fisher-Yates)."""
    if d < 1:
        raise ValidationError("permutation size must be >= 1")
    rng = make_rng(rng)
    return tuple(int(v) for v in rng.permutation(d))


def _cycle_size_table(n: int) -> tuple[list[int], list[int]]:
    sizes = list(range(3, n + 1))
    counts = [binom(n, i) * math.factorial(i - 1) for i in sizes]
    return sizes, counts


def _sattolo_cycle(verts: Sequence[int], rng) -> frozenset:
    k = len(verts)
    perm = list(range(k))
    for i in range(k - 1, 0, -1):
        j = int(rng.integers(0, i))
        perm[i], perm[j] = perm[j], perm[i]
    return frozenset((verts[i], verts[perm[i]]) for i in range(k))


def uniform_cyclic(sigma_size: int, rng) -> frozenset:
    """Uniform directed cycle on a subset (of size >= 3) of ``sigma_size`` elements.

    The subset size is drawn with exact per-size counts, the subset uniformly
    among equal-size subsets, and the cycle by Sattolo's algorithm.
    """
    if sigma_size < 3:
        raise ValidationError("directed cycles need at least three elements")
    rng = make_rng(rng)
    sizes, counts = _cycle_size_table(sigma_size)
    r = randbelow(rng, sum(counts))
    for size, c in zip(sizes, counts):
        if r < c:
            break
        r -= c
    verts = sorted(int(v) for v in rng.choice(sigma_size, size=size, replace=False))
    return _sattolo_cycle(verts, rng)


def uniform_subtree(parents: Sequence[int], include_empty: bool, rng) -> frozenset:
    """Uniform rooted subtree of a tree given as a parent array."""
    parents = validate_tree(parents)
    rng = make_rng(rng)
    f = _subtree_f(parents)
    return _SubtreeSampler(parents, include_empty, f).draw(rng)


class _SubtreeSampler:
    """Top-down coins: a vertex whose parent is present joins with probability 1 - 1/f(v).

    The number of rooted subtrees factorises over children, so these
    independent coins give every subtree the same probability.
    """

    def __init__(self, parents, include_empty, f):
        self.parents = parents
        self.include_empty = include_empty
        self.root = parents.index(-1)
        self.f = f
        order, stack = [], [self.root]
        ch: list[list[int]] = [[] for _ in parents]
        for v, p in enumerate(parents):
            if p >= 0:
                ch[p].append(v)
        while stack:
            v = stack.pop()
            order.append(v)
            stack.extend(reversed(ch[v]))
        self.preorder = order
        self.keep = np.array([(fv - 1) / fv for fv in f])

    def draw_bits(self, n: int, rng) -> np.ndarray:
        u = rng.random((n, len(self.parents)))
        inc = np.zeros((n, len(self.parents)), dtype=bool)
        r = self.root
        inc[:, r] = u[:, r] < self.keep[r] if self.include_empty else True
        for v in self.preorder[1:]:
            inc[:, v] = inc[:, self.parents[v]] & (u[:, v] < self.keep[v])
        return inc

    def draw(self, rng) -> frozenset:
        bits = self.draw_bits(1, rng)[0]
        return frozenset(int(v) for v in np.flatnonzero(bits))


def _bits_to_sets(bits: np.ndarray) -> list[frozenset]:
    return [frozenset(np.flatnonzero(row).tolist()) for row in bits]


class UniformSampler:
    """Exact uniform sampler for a space, with a batched path that also returns embeddings."""

    def __init__(self, space: StructureSpace):
        self.space = space
        fam = space.family
        if fam == "subtrees":
            self._subtrees = _SubtreeSampler(space.parents, space.include_empty, _subtree_f(space.parents))
        if fam in ("multiclass", "ordinal", "poset_regression", "hierarchy"):
            self._table = embed_many(space, list(range(space.size)), check=False)
        if fam == "cliques":
            pairs = np.array(space.features)
            self._pu, self._pv = pairs[:, 0], pairs[:, 1]
        if fam == "permutations":
            pairs = np.array(space.features)
            self._pu, self._pv = pairs[:, 0], pairs[:, 1]
        if fam == "directed_cycles" or fam == "undirected_cycles":
            sizes, counts = _cycle_size_table(space.size)
            self._sizes = sizes
            self._counts = counts
            self._cum = np.cumsum(counts) if sum(counts) < 2**62 else None

    def draw(self, rng) -> Any:
        return self.draw_many(1, rng)[0][0]

    def draw_many(self, n: int, rng) -> tuple[list, np.ndarray]:
        """``n`` independent uniform structures and their embedding matrix."""
        rng = make_rng(rng)
        sp = self.space
        fam = sp.family
        if fam in ("multiclass", "ordinal", "poset_regression", "hierarchy"):
            z = rng.integers(0, sp.size, size=n)
            return z.tolist(), self._table[z]
        if fam in ("multilabel", "cliques"):
            bits = rng.integers(0, 2, size=(n, sp.size), dtype=np.int8)
            ys = _bits_to_sets(bits)
            if fam == "cliques":
                return ys, (bits[:, self._pu] * bits[:, self._pv]).astype(float)
            if sp.signed:
                return ys, 2.0 * bits - 1.0
            return ys, bits.astype(float)
        if fam == "ell_subsets":
            keys = rng.random((n, sp.size))
            chosen = np.argsort(keys, axis=1)[:, : sp.ell]
            bits = np.zeros((n, sp.size), dtype=np.int8)
            np.put_along_axis(bits, chosen, 1, axis=1)
            return _bits_to_sets(bits), bits.astype(float)
        if fam == "subtrees":
            bits = self._subtrees.draw_bits(n, rng)
            return _bits_to_sets(bits), bits.astype(float)
        if fam == "permutations":
            ranks = rng.permuted(np.tile(np.arange(sp.size), (n, 1)), axis=1)
            pos = np.argsort(ranks, axis=1)
            psi = np.where(pos[:, self._pu] < pos[:, self._pv], 1.0, -1.0)
            return [tuple(r) for r in ranks.tolist()], psi
        if fam == "partial_tournaments":
            states = rng.integers(-1, 2, size=(n, sp.dim))
            pairs = sp.features
            ys = [
                frozenset(
                    (u, v) if s == 1 else (v, u) for (u, v), s in zip(pairs, row) if s
                )
                for row in states.tolist()
            ]
            return ys, states.astype(float)
        if fam in ("directed_cycles", "undirected_cycles"):
            ys = [self._draw_cycle(rng) for _ in range(n)]
            if fam == "undirected_cycles":
                ys = [frozenset((min(u, v), max(u, v)) for u, v in y) for y in ys]
            return ys, embed_many(sp, ys, check=False)
        if fam == "posets":
            # uniform over partial tournaments, kept when transitive
            ys = []
            pairs = sp.features
            while len(ys) < n:
                states = rng.integers(-1, 2, size=sp.dim)
                rel = frozenset(
                    (u, v) if s == 1 else (v, u) for (u, v), s in zip(pairs, states.tolist()) if s
                )
                if transitive_closure(rel) == rel:
                    ys.append(rel)
            return ys, embed_many(sp, ys, check=False)
        raise AssertionError(fam)

    def _draw_cycle(self, rng) -> frozenset:
        n = self.space.size
        if self._cum is not None:
            r = int(rng.integers(0, int(self._cum[-1])))
            size = self._sizes[int(np.searchsorted(self._cum, r, side="right"))]
        else:
            r = randbelow(rng, sum(self._counts))
            for size, c in zip(self._sizes, self._counts):
                if r < c:
                    break
                r -= c
        verts = np.sort(rng.choice(n, size=size, replace=False)).tolist()
        return _sattolo_cycle(verts, rng)


# exponential-family model


@dataclass
class ExpFamilyModel:
    """Weights ``w`` of ``p(y | x, w)`` with ``phi(x, y) = psi(y) (x) x``.

    ``w`` is stored flat with the input index varying fastest, so that
    ``w.reshape(d, n) @ x`` gives the weight vector over embedding
    coordinates.  ``R`` and ``B`` bound ``|phi(x, y)|`` and ``|w|``; both
    default to values computed from the space and the weights.
    """

    space: StructureSpace
    w: np.ndarray
    n_inputs: int = 1
    R: float | None = None
    B: float | None = None

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float).ravel()
        if self.w.size != self.space.dim * self.n_inputs:
            raise ValidationError(
                f"weight vector has {self.w.size} entries, expected {self.space.dim} x {self.n_inputs}"
            )
        if not np.all(np.isfinite(self.w)):
            raise ValidationError("weights must be finite")
        if self.B is not None and self.B < np.linalg.norm(self.w) * (1 - 1e-12):
            raise ValidationError("B must bound the weight norm")

    @classmethod
    def from_scorer(cls, space: StructureSpace, w_x: np.ndarray) -> "ExpFamilyModel":
        """Wrap a per-input weight vector (for instance ``alpha k(x)``) with input x = [1]."""
        return cls(space, np.asarray(w_x, dtype=float), n_inputs=1)

    @property
    def weight_norm(self) -> float:
        return float(self.B) if self.B is not None else float(np.linalg.norm(self.w))

    def feature_bound(self, x) -> float:
        if self.R is not None:
            return float(self.R)
        return max_embedding_norm(self.space) * float(np.linalg.norm(self._x(x)))

    def _x(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if x.shape != (self.n_inputs,):
            raise ValidationError(f"input must have {self.n_inputs} entries")
        return x

    def input_weights(self, x) -> np.ndarray:
        return self.w.reshape(self.space.dim, self.n_inputs) @ self._x(x)

    def score(self, x, y) -> float:
        return float(embed(self.space, y) @ self.input_weights(x))

    def scale(self, beta: float) -> "ExpFamilyModel":
        return ExpFamilyModel(
            self.space,
            beta * self.w,
            self.n_inputs,
            R=self.R,
            B=None if self.B is None else abs(beta) * self.B,
        )


@dataclass
class ChainState:
    current: Any
    step: int = 0
    score: float = 0.0
    # number of proposals consumed so far; the replay position in the stream
    rng_cursor: int = 0


def meta_step(state: ChainState, model: ExpFamilyModel, x, uniform_sampler: UniformSampler, rng) -> ChainState:
    """One transition of the chain with uniform proposals."""
    rng = make_rng(rng)
    ys, psi = uniform_sampler.draw_many(1, rng)
    z_score = float(psi[0] @ model.input_weights(x))
    log_u = math.log1p(-rng.random())
    if log_u <= z_score - state.score:
        return ChainState(ys[0], state.step + 1, z_score, state.rng_cursor + 1)
    return ChainState(state.current, state.step + 1, state.score, state.rng_cursor + 1)


def init_state(model: ExpFamilyModel, x, y) -> ChainState:
    return ChainState(y, 0, model.score(x, y), 0)


def _log_uniform(rng, shape) -> np.ndarray:
    # 1 - U lies in (0, 1], so the log is finite
    return np.log1p(-rng.random(shape))


def run_chains(
    model: ExpFamilyModel,
    x,
    sampler: UniformSampler,
    n_chains: int,
    steps: int,
    rng,
    chunk: int = 256,
) -> list:
    """Final states of ``n_chains`` independent chains started at uniform structures."""
    rng = make_rng(rng)
    v = model.input_weights(x)
    ys, psi = sampler.draw_many(n_chains, rng)
    states = list(ys)
    cur = psi @ v
    done = 0
    while done < steps:
        width = min(chunk, steps - done)
        props, ppsi = sampler.draw_many(n_chains * width, rng)
        scores = (ppsi @ v).reshape(n_chains, width)
        log_u = _log_uniform(rng, (n_chains, width))
        idx, cur = _kernels.metropolis_scan(cur, scores, log_u)
        for r in np.flatnonzero(idx >= 0):
            states[r] = props[r * width + idx[r]]
        done += width
    return states


@dataclass
class CftpResult:
    samples: list
    depths: np.ndarray
    embeddings: np.ndarray = field(repr=False, default=None)

    def histogram(self) -> dict[int, int]:
        vals, counts = np.unique(self.depths, return_counts=True)
        return {int(a): int(b) for a, b in zip(vals, counts)}


def default_budget(B: float, R: float) -> int:
    return max(1000, int(math.ceil(100.0 * math.exp(min(2.0 * B * R, 700.0)))))


def cftp_many(
    score_fn: Callable[[np.ndarray], np.ndarray],
    bound: float,
    sampler: UniformSampler,
    n: int,
    rng,
    budget: int,
    br: float | None = None,
    accept: Callable[[list, np.ndarray], np.ndarray] | None = None,
) -> CftpResult:
    """Exact draws from the distribution with log-weights ``score_fn(psi)``.

    ``bound`` must dominate every log-weight.  Row ``r`` keeps a growing list
    of proposals for times -1, -2, ...; the horizon doubles until the row
    contains a coalescing time, and the stored randomness is reused at every
    horizon.  ``accept`` optionally restricts the support: proposals it
    rejects are redrawn (rejection keeps the restricted proposal uniform).
    """
    rng = make_rng(rng)
    props: list[list] = [[] for _ in range(n)]
    embeds: list[list] = [[] for _ in range(n)]
    scores = np.empty((n, 0))
    log_u = np.empty((n, 0))
    live = np.arange(n)
    state_out = np.full(n, -1, dtype=np.int64)
    depth_out = np.full(n, -1, dtype=np.int64)
    horizon = 0
    while live.size:
        extra = max(1, horizon)
        if horizon + extra > budget:
            raise BudgetExceededError(
                f"exact sampler exceeded {budget} steps"
                + (f" (B*R = {br:.3g}, expected steps <= exp(2BR) = {math.exp(2 * br):.3g})" if br is not None else "")
            )
        ys, psi = _draw_restricted(sampler, live.size * extra, rng, accept)
        new_scores = score_fn(psi).reshape(live.size, extra)
        new_u = _log_uniform(rng, (live.size, extra))
        for k, r in enumerate(live):
            props[r].extend(ys[k * extra : (k + 1) * extra])
            embeds[r].extend(psi[k * extra : (k + 1) * extra])
        scores = np.hstack([scores, new_scores])
        log_u = np.hstack([log_u, new_u])
        horizon += extra
        state, depth = _kernels.cftp_resolve(np.ascontiguousarray(scores), np.ascontiguousarray(log_u), bound)
        hit = depth >= 0
        state_out[live[hit]] = state[hit]
        depth_out[live[hit]] = depth[hit]
        live = live[~hit]
        scores = scores[~hit]
        log_u = log_u[~hit]
    samples = [props[r][state_out[r]] for r in range(n)]
    emb = np.array([embeds[r][state_out[r]] for r in range(n)]) if n else np.empty((0, sampler.space.dim))
    return CftpResult(samples, depth_out, emb)


def _draw_restricted(sampler, n, rng, accept):
    ys, psi = sampler.draw_many(n, rng)
    if accept is None:
        return ys, psi
    keep = accept(ys, psi)
    ys = [y for y, k in zip(ys, keep) if k]
    psi = psi[keep]
    tries = 0
    while len(ys) < n:
        tries += 1
        if tries > 10_000:
            raise BudgetExceededError("support restriction rejects almost every proposal")
        more_y, more_psi = sampler.draw_many(n, rng)
        keep = accept(more_y, more_psi)
        ys.extend(y for y, k in zip(more_y, keep) if k)
        psi = np.vstack([psi, more_psi[keep]])
    return ys[:n], psi[:n]


def cftp_sample_many(
    model: ExpFamilyModel,
    x,
    n: int,
    rng,
    sampler: UniformSampler | None = None,
    budget: int | None = None,
) -> CftpResult:
    """``n`` exact draws from ``p(y | x, w)``."""
    sampler = sampler or UniformSampler(model.space)
    v = model.input_weights(x)
    B, R = model.weight_norm, model.feature_bound(x)
    bound = B * R
    budget = budget or default_budget(B, R)
    return cftp_many(lambda psi: psi @ v, bound, sampler, n, rng, budget, br=B * R)


def cftp_sample(model: ExpFamilyModel, x, space: StructureSpace | None = None, uniform_sampler=None, rng=None, budget=None):
    """One exact draw from ``p(y | x, w)``."""
    if space is not None and space != model.space:
        raise ValidationError("space does not match the model")
    return cftp_sample_many(model, x, 1, rng, uniform_sampler, budget).samples[0]


def coupling_mixing_bound(B: float, R: float, epsilon: float) -> int:
    """Steps after which the chain is within total variation ``epsilon`` of its target."""
    if not (B > 0 and R > 0):
        raise ValidationError("B and R must be positive")
    if not 0 < epsilon < 1:
        raise ValidationError("epsilon must lie in (0, 1)")
    stay = 1.0 - math.exp(-2.0 * B * R)
    if stay <= 0.0:
        return 1
    return int(math.ceil(math.log(1.0 / epsilon) / -math.log(stay)))


def meta_transition_matrix(log_weights: np.ndarray) -> np.ndarray:
    """Exact transition matrix of the uniform-proposal chain over an enumerated space."""
    lw = np.asarray(log_weights, dtype=float)
    n = lw.size
    P = np.minimum(1.0, np.exp(lw[None, :] - lw[:, None])) / n
    np.fill_diagonal(P, 0.0)
    np.fill_diagonal(P, 1.0 - P.sum(axis=1))
    return P


# hypercube chain


def mc_cube_step(state: ChainState, log_pi: Callable[[np.ndarray], float], rng) -> ChainState:
    """Pick a coordinate and a bit uniformly; set it with Metropolis acceptance.

    ``state.current`` is a 0/1 tuple; ``state.score`` caches ``log_pi`` of it.
    """
    rng = make_rng(rng)
    bits = np.array(state.current, dtype=np.int8)
    d = bits.size
    i = int(rng.integers(0, d))
    b = int(rng.integers(0, 2))
    log_u = float(_log_uniform(rng, 1)[0])
    if bits[i] == b:
        return ChainState(state.current, state.step + 1, state.score, state.rng_cursor + 1)
    cand = bits.copy()
    cand[i] = b
    cand_score = float(log_pi(cand))
    if log_u <= cand_score - state.score:
        return ChainState(tuple(int(v) for v in cand), state.step + 1, cand_score, state.rng_cursor + 1)
    return ChainState(state.current, state.step + 1, state.score, state.rng_cursor + 1)


def mc_cube_run(weights: np.ndarray, bits0: np.ndarray, steps: int, rng) -> np.ndarray:
    """Run one hypercube chain per row of ``bits0`` for a linear log-density ``<weights, u>``."""
    rng = make_rng(rng)
    bits0 = np.atleast_2d(np.asarray(bits0, dtype=np.int8))
    weights = np.asarray(weights, dtype=float)
    n, d = bits0.shape
    picks = rng.integers(0, d, size=(n, steps))
    values = rng.integers(0, 2, size=(n, steps)).astype(np.int8)
    log_u = _log_uniform(rng, (n, steps))
    return _kernels.mc_cube_run(bits0, weights, picks, values, log_u)


def cube_transition_matrix(log_pi_table: np.ndarray) -> np.ndarray:
    """Exact hypercube-chain transition matrix; state index is the bitmask (bit i is coordinate i)."""
    lp = np.asarray(log_pi_table, dtype=float)
    size = lp.size
    d = size.bit_length() - 1
    if 2**d != size:
        raise ValidationError("table length must be a power of two")
    P = np.zeros((size, size))
    for u in range(size):
        for i in range(d):
            v = u ^ (1 << i)
            # only the proposal (i, new bit) moves; it has probability 1 / (2d)
            P[u, v] = min(1.0, math.exp(lp[v] - lp[u])) / (2 * d)
        P[u, u] = 1.0 - P[u].sum()
    return P
