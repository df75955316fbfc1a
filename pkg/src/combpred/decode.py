"""Decoders for linear scores ``f(y) = <w, psi(y)>`` over exponentially large spaces.

The approximation guarantees are stated relative to the range of ``f``:
a decoder is a z-approximation with factor ``nu`` when its output scores at
least ``(1 - nu) * max f + nu * min f``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable, Iterator, Sequence

import numpy as np

from .counting import (
    DEFAULT_ENUM_LIMIT,
    StructureSpace,
    cardinality,
    embed,
    embed_many,
    enumerate_small,
)
from .errors import ValidationError
from .rng import make_rng
from .sampling import UniformSampler


def as_scorer(w, dim: int) -> np.ndarray:
    """Validate a per-input weight vector over embedding coordinates."""
    w = np.asarray(w, dtype=float).ravel()
    if w.shape != (dim,):
        raise ValidationError(f"scorer has {w.size} weights, embedding dimension is {dim}")
    if not np.all(np.isfinite(w)):
        raise ValidationError("scorer weights must be finite")
    return w


@dataclass
class SiblingSystem:
    """A space with an involution ``sibling`` such that psi(y) + psi(sibling(y)) = c."""

    space: StructureSpace
    sibling: Callable[[Any], Any]
    c: np.ndarray

    @classmethod
    def signed_multilabel(cls, d: int) -> "SiblingSystem":
        space = StructureSpace.multilabel(d, signed=True)
        full = frozenset(range(d))
        return cls(space, lambda y: full - y, np.zeros(d))

    @classmethod
    def permutations(cls, d: int) -> "SiblingSystem":
        space = StructureSpace.permutations(d)
        return cls(space, lambda y: tuple(reversed(y)), np.zeros(space.dim))

    def verify(self, rng=None, n_samples: int = 1000, limit: int = 10_000, tol: float = 1e-12) -> None:
        """Check the sibling conditions on every structure, or on a uniform sample if the space is large."""
        if cardinality(self.space) <= limit:
            ys = enumerate_small(self.space, limit)
        else:
            ys, _ = UniformSampler(self.space).draw_many(n_samples, make_rng(rng))
        c = np.asarray(self.c, dtype=float)
        for y in ys:
            r = self.space.check(self.sibling(y))
            if self.space.check(self.sibling(r)) != y:
                raise ValidationError(f"sibling map is not an involution at {y!r}")
            psi = embed(self.space, y, check=False)
            if np.abs(psi + embed(self.space, r, check=False) - c).max() > tol:
                raise ValidationError(f"psi(y) + psi(sibling(y)) != c at {y!r}")
            if abs(float(c @ psi)) > tol:
                raise ValidationError(f"<c, psi(y)> != 0 at {y!r}")


def decode_sibling(system: SiblingSystem, scorer, rng) -> tuple[Any, float]:
    """Draw a uniform structure and return it or its sibling, whichever scores higher."""
    w = as_scorer(scorer, system.space.dim)
    y = UniformSampler(system.space).draw(make_rng(rng))
    r = system.sibling(y)
    sy = float(embed(system.space, y, check=False) @ w)
    sr = float(embed(system.space, r, check=False) @ w)
    return (y, sy) if sy >= sr else (r, sr)


def independence_blocks(n: int) -> list[list[int]]:
    """Split 0..n-1 into consecutive blocks for the block-exhaustive decoder.

    Uses ``floor(n / log2 n)`` blocks of near-equal size, so one block
    always holds at least a ``log2(n) / n`` share of the optimum's score.
    """
    if n <= 0:
        return []
    if n <= 2:
        return [list(range(n))]
    k = max(1, int(n / math.log2(n)))
    base, extra = divmod(n, k)
    blocks, start = [], 0
    for b in range(k):
        size = base + (1 if b < extra else 0)
        blocks.append(list(range(start, start + size)))
        start += size
    return blocks


def _best_in_block(block: Sequence[int], gain: np.ndarray, member: Callable[[frozenset], bool]):
    best_key, best_set = (0.0, 0), frozenset()
    # depth-first over member subsets; a superset of a non-member is never a member
    stack = [(0, frozenset(), 0.0)]
    while stack:
        pos, cur, val = stack.pop()
        if pos == len(block):
            key = (-val, sum(1 << e for e in cur))
            if key < best_key:
                best_key, best_set = key, cur
            continue
        e = block[pos]
        stack.append((pos + 1, cur, val))
        nxt = cur | {e}
        if member(nxt):
            stack.append((pos + 1, nxt, val + gain[e]))
    return best_set, -best_key[0]


def decode_independence(
    space: StructureSpace | int,
    scorer,
    membership_oracle: Callable[[frozenset], bool] | None = None,
    mu: np.ndarray | None = None,
) -> tuple[frozenset, float]:
    """Block-exhaustive decoder for hereditary set systems over an alphabet of size n.

    ``psi_u(y) = sqrt(mu[u])`` for ``u`` in ``y``.  Each block is searched
    over its member subsets and the best block solution is returned; its
    score is at least ``log2(n) / n`` times the optimum.
    """
    if isinstance(space, StructureSpace):
        if space.family != "multilabel" or space.signed:
            if membership_oracle is None:
                raise ValidationError("non-free systems need a membership oracle")
        n = space.size
    else:
        n = int(space)
    w = as_scorer(scorer, n)
    weight = np.ones(n) if mu is None else np.sqrt(np.asarray(mu, dtype=float))
    if weight.shape != (n,) or np.any(weight < 0):
        raise ValidationError("mu must be a non-negative vector over the alphabet")
    gain = w * weight
    member = membership_oracle or (lambda s: True)
    best_key, best = (0.0, 0), frozenset()
    for block in independence_blocks(n):
        cand, val = _best_in_block(block, gain, member)
        key = (-val, sum(1 << e for e in cand))
        if key < best_key:
            best_key, best = key, cand
    return best, float(sum(gain[e] for e in best))


def enumerate_z_approx(system: SiblingSystem, scorer, nu: float = 0.5, limit: int = DEFAULT_ENUM_LIMIT) -> Iterator[Any]:
    """Walk the space and emit the better of each structure and its sibling, once per pair."""
    if nu < 0.5:
        raise ValidationError("sibling enumeration realizes nu >= 1/2 only")
    w = as_scorer(scorer, system.space.dim)
    ys = enumerate_small(system.space, limit)
    done: set = set()
    for y in ys:
        if y in done:
            continue
        r = system.sibling(y)
        done.add(y)
        done.add(r)
        sy = float(embed(system.space, y, check=False) @ w)
        sr = float(embed(system.space, r, check=False) @ w)
        yield y if sy > sr else r


def decode_exact_small(space: StructureSpace, scorer, limit: int = DEFAULT_ENUM_LIMIT) -> tuple[Any, float]:
    """Exact argmax by enumeration; ties go to the first structure in canonical order."""
    w = as_scorer(scorer, space.dim)
    ys = enumerate_small(space, limit)
    scores = embed_many(space, ys, check=False) @ w
    k = int(np.argmax(scores))
    return ys[k], float(scores[k])


def exact_extremes(space: StructureSpace, scorer, limit: int = DEFAULT_ENUM_LIMIT) -> tuple[float, float]:
    """(max, min) of the score over the whole space."""
    w = as_scorer(scorer, space.dim)
    scores = embed_many(space, enumerate_small(space, limit), check=False) @ w
    return float(scores.max()), float(scores.min())


def decode(space: StructureSpace, scorer, rng=None, limit: int = DEFAULT_ENUM_LIMIT) -> tuple[Any, float, str]:
    """Best available decoder for ``space``: returns (structure, score, method).

    Families whose argmax separates over coordinates are solved exactly;
    small spaces are enumerated; permutations fall back to the sibling
    decoder (a 1/2 z-approximation).
    """
    w = as_scorer(scorer, space.dim)
    fam = space.family
    if fam == "multilabel":
        y = frozenset(np.flatnonzero(w > 0).tolist())
        return y, float(embed(space, y, check=False) @ w), "exact"
    if fam == "ell_subsets":
        # stable sort keeps the lower index on ties
        y = frozenset(np.argsort(-w, kind="stable")[: space.ell].tolist())
        return y, float(embed(space, y, check=False) @ w), "exact"
    if cardinality(space) <= limit:
        y, s = decode_exact_small(space, w, limit)
        return y, s, "exact"
    if fam == "permutations":
        y, s = decode_sibling(SiblingSystem.permutations(space.size), w, rng)
        return y, s, "sibling"
    raise ValidationError(
        f"{space.describe()} has {cardinality(space)} structures and no polynomial decoder; "
        f"raise the enumeration limit above {limit}"
    )
