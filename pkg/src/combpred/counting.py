"""Output-space statistics for combinatorial structure families.

Every family is described by a :class:`StructureSpace`.  Structures are plain
Python values whose shape depends on the family:

* ``multiclass``, ``ordinal``, ``poset_regression``, ``hierarchy``: an ``int``
  naming one element.
* ``multilabel``, ``ell_subsets``, ``cliques``, ``subtrees``: a ``frozenset``
  of element ids (clique vertices, subtree vertices).
* ``permutations``: a tuple ranking, best first.
* ``partial_tournaments``, ``directed_cycles``, ``posets``: a ``frozenset`` of
  ordered pairs ``(u, v)`` meaning ``u`` beats / precedes / is above ``v``.
* ``undirected_cycles``: a ``frozenset`` of edges ``(u, v)`` with ``u < v``.

For each family this module provides the embedding ``psi(y)``, the exact
cardinality ``|Y|``, the first moment ``sum_y psi(y)`` and the second moment
``sum_y psi(y) psi(y)^T``.  Counts are Python integers; the moment vectors
are exact integers internally and converted to float at the boundary.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property
from typing import Any, Callable, Hashable, Iterable, Iterator, Sequence

import numpy as np

from .errors import (
    MembershipError,
    NoClosedFormError,
    SpaceTooLargeError,
    ValidationError,
)

FAMILIES = (
    "multiclass",
    "multilabel",
    "ell_subsets",
    "ordinal",
    "poset_regression",
    "hierarchy",
    "permutations",
    "partial_tournaments",
    "cliques",
    "undirected_cycles",
    "directed_cycles",
    "subtrees",
    "posets",
)

# families whose embedding takes values in {0, 1}
INDICATOR_FAMILIES = frozenset(
    {
        "multiclass",
        "multilabel",
        "ell_subsets",
        "ordinal",
        "poset_regression",
        "hierarchy",
        "cliques",
        "undirected_cycles",
        "subtrees",
    }
)

# families that form an independence system over their feature alphabet
SET_FAMILIES = frozenset({"multilabel", "ell_subsets", "cliques", "subtrees"})

DEFAULT_ENUM_LIMIT = 100_000


def binom(n: int, k: int) -> int:
    """Binomial coefficient that is zero outside ``0 <= k <= n``."""
    if k < 0 or n < 0 or k > n:
        return 0
    return math.comb(n, k)


def _pairs(n: int) -> list[tuple[int, int]]:
    return list(itertools.combinations(range(n), 2))


def _ordered_pairs(n: int) -> list[tuple[int, int]]:
    return [(u, v) for u in range(n) for v in range(n) if u != v]


def validate_tree(parents: Sequence[int]) -> tuple[int, ...]:
    """Check a parent array (root marked by -1) and return it as a tuple."""
    parents = tuple(int(p) for p in parents)
    n = len(parents)
    if n == 0:
        raise ValidationError("tree has no vertices")
    roots = [v for v, p in enumerate(parents) if p == -1]
    if len(roots) != 1:
        raise ValidationError(f"tree must have exactly one root, found {len(roots)}")
    for v, p in enumerate(parents):
        if p != -1 and not 0 <= p < n:
            raise ValidationError(f"vertex {v} has unknown parent {p}")
        if p == v:
            raise ValidationError(f"vertex {v} is its own parent")
    # every vertex must reach the root
    state = [0] * n  # 0 unseen, 1 on stack, 2 reaches root
    state[roots[0]] = 2
    for v in range(n):
        path = []
        u = v
        while state[u] == 0:
            state[u] = 1
            path.append(u)
            u = parents[u]
        if state[u] == 1:
            raise ValidationError("parent array contains a cycle")
        for w in path:
            state[w] = 2
    return parents


def _children(parents: Sequence[int]) -> list[list[int]]:
    ch: list[list[int]] = [[] for _ in parents]
    for v, p in enumerate(parents):
        if p >= 0:
            ch[p].append(v)
    return ch


def _postorder(parents: Sequence[int]) -> list[int]:
    ch = _children(parents)
    root = parents.index(-1)
    order, stack = [], [root]
    while stack:
        v = stack.pop()
        order.append(v)
        stack.extend(ch[v])
    return order[::-1]


def _subtree_f(parents: Sequence[int]) -> list[int]:
    """f(v) = 1 + prod over children f(c); counts rooted subtrees at v plus the empty one."""
    ch = _children(parents)
    f = [0] * len(parents)
    for v in _postorder(parents):
        prod = 1
        for c in ch[v]:
            prod *= f[c]
        f[v] = 1 + prod
    return f


def count_subtrees(parents: Sequence[int]) -> list[int]:
    """f(v) for every vertex: subtrees rooted at v, the empty subtree included.

    The root's entry is the size of the subtree space.
    """
    return _subtree_f(validate_tree(parents))


def transitive_closure(pairs: Iterable[tuple[Any, Any]]) -> frozenset:
    """Transitive closure of a relation given as ordered pairs."""
    succ: dict[Any, set] = {}
    for u, v in pairs:
        succ.setdefault(u, set()).add(v)
    closed = set()
    for u in list(succ):
        seen, stack = set(), list(succ[u])
        while stack:
            w = stack.pop()
            if w in seen:
                continue
            seen.add(w)
            stack.extend(succ.get(w, ()))
        closed.update((u, w) for w in seen)
    return frozenset(closed)


def _check_partial_order(relation: frozenset, what: str = "relation") -> None:
    for u, v in relation:
        if u == v:
            raise ValidationError(f"{what} is not irreflexive at {u!r}")
        if (v, u) in relation:
            raise ValidationError(f"{what} has a cycle through {u!r} and {v!r}")
    if transitive_closure(relation) != relation:
        raise ValidationError(f"{what} is not transitively closed")


@dataclass(frozen=True)
class StructureSpace:
    """A family of structures together with the parameters it needs.

    Use the classmethod constructors rather than building instances by hand.
    """

    family: str
    size: int
    ell: int | None = None
    relation: frozenset | None = None
    parents: tuple[int, ...] | None = None
    signed: bool = False
    include_empty: bool = True

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValidationError(f"unknown family {self.family!r}")
        if not isinstance(self.size, (int, np.integer)) or self.size < 0:
            raise ValidationError("size must be a non-negative integer")
        fam, n = self.family, self.size
        minimum = {
            "multiclass": 1,
            "multilabel": 1,
            "ell_subsets": 1,
            "ordinal": 1,
            "poset_regression": 1,
            "permutations": 1,
            "partial_tournaments": 2,
            "cliques": 2,
            "undirected_cycles": 3,
            "directed_cycles": 3,
            "posets": 1,
        }
        if fam in minimum and n < minimum[fam]:
            raise ValidationError(f"{fam} needs size >= {minimum[fam]}, got {n}")
        if fam == "ell_subsets":
            if self.ell is None or not 0 <= self.ell <= n:
                raise ValidationError(f"ell_subsets needs 0 <= ell <= d, got ell={self.ell}")
        if fam == "poset_regression":
            if self.relation is None:
                raise ValidationError("poset_regression needs a relation")
            for u, v in self.relation:
                if not (0 <= u < n and 0 <= v < n):
                    raise ValidationError(f"poset pair ({u}, {v}) outside 0..{n - 1}")
            _check_partial_order(self.relation, "poset")
        if fam in ("hierarchy", "subtrees"):
            if self.parents is None:
                raise ValidationError(f"{fam} needs a parent array")
            validate_tree(self.parents)
            if len(self.parents) != n:
                raise ValidationError("size must equal the number of tree vertices")
        if self.signed and fam != "multilabel":
            raise ValidationError("signed embedding is only defined for multilabel")

    # constructors

    @classmethod
    def multiclass(cls, d: int) -> "StructureSpace":
        return cls("multiclass", int(d))

    @classmethod
    def multilabel(cls, d: int, signed: bool = False) -> "StructureSpace":
        return cls("multilabel", int(d), signed=bool(signed))

    @classmethod
    def ell_subsets(cls, d: int, ell: int) -> "StructureSpace":
        return cls("ell_subsets", int(d), ell=int(ell))

    @classmethod
    def ordinal(cls, d: int) -> "StructureSpace":
        return cls("ordinal", int(d))

    @classmethod
    def poset_regression(cls, n: int, relation: Iterable[tuple[int, int]]) -> "StructureSpace":
        rel = frozenset((int(u), int(v)) for u, v in relation)
        return cls("poset_regression", int(n), relation=rel)

    @classmethod
    def hierarchy(cls, parents: Sequence[int]) -> "StructureSpace":
        parents = validate_tree(parents)
        return cls("hierarchy", len(parents), parents=parents)

    @classmethod
    def permutations(cls, d: int) -> "StructureSpace":
        return cls("permutations", int(d))

    @classmethod
    def partial_tournaments(cls, n: int) -> "StructureSpace":
        return cls("partial_tournaments", int(n))

    @classmethod
    def cliques(cls, n: int) -> "StructureSpace":
        return cls("cliques", int(n))

    @classmethod
    def undirected_cycles(cls, n: int) -> "StructureSpace":
        return cls("undirected_cycles", int(n))

    @classmethod
    def directed_cycles(cls, n: int) -> "StructureSpace":
        return cls("directed_cycles", int(n))

    @classmethod
    def subtrees(cls, parents: Sequence[int], include_empty: bool = True) -> "StructureSpace":
        parents = validate_tree(parents)
        return cls("subtrees", len(parents), parents=parents, include_empty=bool(include_empty))

    @classmethod
    def posets(cls, n: int) -> "StructureSpace":
        return cls("posets", int(n))

    # feature layout

    @cached_property
    def features(self) -> list:
        """Label of each embedding coordinate, in coordinate order."""
        fam, n = self.family, self.size
        if fam in ("permutations", "partial_tournaments", "cliques", "undirected_cycles", "posets"):
            return _pairs(n)
        if fam == "directed_cycles":
            return _ordered_pairs(n)
        return list(range(n))

    @cached_property
    def feature_index(self) -> dict:
        return {f: i for i, f in enumerate(self.features)}

    @property
    def dim(self) -> int:
        return len(self.features)

    @cached_property
    def above(self) -> list[frozenset]:
        """For element-valued poset families: ``above[i]`` is every z with z >= i."""
        if self.family == "ordinal":
            return [frozenset(range(i, self.size)) for i in range(self.size)]
        rel = self._order_relation
        ups: list[set] = [{i} for i in range(self.size)]
        for z, i in rel:
            ups[i].add(z)
        return [frozenset(s) for s in ups]

    @cached_property
    def below(self) -> list[frozenset]:
        """``below[z]`` is every i with z >= i, i.e. the support of psi(z)."""
        out: list[set] = [set() for _ in range(self.size)]
        for i, zs in enumerate(self.above):
            for z in zs:
                out[z].add(i)
        return [frozenset(s) for s in out]

    @cached_property
    def _order_relation(self) -> frozenset:
        if self.family == "poset_regression":
            return self.relation
        if self.family == "hierarchy":
            pairs = []
            for z in range(self.size):
                a = self.parents[z]
                while a != -1:
                    pairs.append((z, a))
                    a = self.parents[a]
            return frozenset(pairs)
        raise AttributeError("only poset-valued families carry an order")

    @cached_property
    def children(self) -> list[list[int]]:
        return _children(self.parents)

    @cached_property
    def root(self) -> int:
        return self.parents.index(-1)

    def describe(self) -> str:
        """Space-spec string understood by :func:`combpred.formats.parse_space`."""
        fam = self.family
        if fam == "ell_subsets":
            return f"{fam}:d={self.size},l={self.ell}"
        if fam == "multilabel" and self.signed:
            return f"{fam}:d={self.size},signed=1"
        if fam in ("multiclass", "multilabel", "ordinal", "permutations"):
            return f"{fam}:d={self.size}"
        if fam in ("hierarchy", "subtrees"):
            tail = "" if self.include_empty or fam == "hierarchy" else ",include_empty=0"
            return f"{fam}:parents={'/'.join(map(str, self.parents))}{tail}"
        if fam == "poset_regression":
            pairs = ";".join(f"{u}>{v}" for u, v in sorted(self.relation))
            return f"{fam}:N={self.size},relation={pairs}"
        return f"{fam}:N={self.size}"

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"family": self.family, "size": self.size}
        if self.ell is not None:
            out["ell"] = self.ell
        if self.relation is not None:
            out["relation"] = sorted([list(p) for p in self.relation])
        if self.parents is not None:
            out["parents"] = list(self.parents)
        if self.signed:
            out["signed"] = True
        if self.family == "subtrees":
            out["include_empty"] = self.include_empty
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "StructureSpace":
        try:
            rel = data.get("relation")
            par = data.get("parents")
            return cls(
                data["family"],
                int(data["size"]),
                ell=data.get("ell"),
                relation=None if rel is None else frozenset(tuple(p) for p in rel),
                parents=None if par is None else tuple(par),
                signed=bool(data.get("signed", False)),
                include_empty=bool(data.get("include_empty", True)),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"bad space description: {exc}") from exc

    # membership

    def check(self, y) -> Any:
        """Return the canonical form of ``y`` or raise :class:`MembershipError`."""
        fam, n = self.family, self.size
        if fam in ("multiclass", "ordinal", "poset_regression", "hierarchy"):
            if isinstance(y, (bool, np.bool_)) or not isinstance(y, (int, np.integer)):
                raise MembershipError(f"{fam} structures are integers, got {y!r}")
            if not 0 <= y < n:
                raise MembershipError(f"element {y} outside 0..{n - 1}")
            return int(y)
        if fam in SET_FAMILIES:
            try:
                s = frozenset(int(v) for v in y)
            except (TypeError, ValueError) as exc:
                raise MembershipError(f"{fam} structures are sets of ints, got {y!r}") from exc
            if any(not 0 <= v < n for v in s):
                raise MembershipError(f"set {sorted(s)} has elements outside 0..{n - 1}")
            if fam == "ell_subsets" and len(s) != self.ell:
                raise MembershipError(f"expected {self.ell} elements, got {len(s)}")
            if fam == "subtrees":
                if not s:
                    if not self.include_empty:
                        raise MembershipError("empty subtree excluded from this space")
                elif self.root not in s or any(
                    v != self.root and self.parents[v] not in s for v in s
                ):
                    raise MembershipError(f"{sorted(s)} is not a rooted subtree")
            return s
        if fam == "permutations":
            t = tuple(int(v) for v in y)
            if sorted(t) != list(range(n)):
                raise MembershipError(f"{t} is not a ranking of 0..{n - 1}")
            return t
        pairs = self._pair_set(y)
        if fam in ("partial_tournaments", "posets"):
            for u, v in pairs:
                if u == v or (v, u) in pairs:
                    raise MembershipError(f"pair ({u}, {v}) contradicts its reverse")
            if fam == "posets" and transitive_closure(pairs) != pairs:
                raise MembershipError("relation is not transitively closed")
            return pairs
        if fam == "undirected_cycles":
            pairs = frozenset((min(u, v), max(u, v)) for u, v in pairs)
            if any(u == v for u, v in pairs):
                raise MembershipError("self loop in cycle")
            _check_cycle(pairs, directed=False)
            return pairs
        if fam == "directed_cycles":
            _check_cycle(pairs, directed=True)
            return pairs
        raise AssertionError(fam)

    def _pair_set(self, y) -> frozenset:
        try:
            pairs = frozenset((int(u), int(v)) for u, v in y)
        except (TypeError, ValueError) as exc:
            raise MembershipError(f"{self.family} structures are sets of pairs, got {y!r}") from exc
        if any(not (0 <= u < self.size and 0 <= v < self.size) for u, v in pairs):
            raise MembershipError(f"pair outside 0..{self.size - 1}")
        return pairs


def _check_cycle(pairs: frozenset, directed: bool) -> None:
    if len(pairs) < 3:
        raise MembershipError("a cycle needs at least three vertices")
    verts = {v for p in pairs for v in p}
    if len(verts) != len(pairs):
        raise MembershipError("edge set is not a single cycle")
    if directed:
        succ = {}
        for u, v in pairs:
            if u == v or u in succ:
                raise MembershipError("edge set is not a single directed cycle")
            succ[u] = v
        if set(succ.values()) != verts or set(succ) != verts:
            raise MembershipError("edge set is not a single directed cycle")
        start = next(iter(verts))
        u, steps = succ[start], 1
        while u != start:
            u, steps = succ[u], steps + 1
        if steps != len(verts):
            raise MembershipError("edge set splits into several cycles")
        return
    adj: dict[int, list[int]] = {v: [] for v in verts}
    for u, v in pairs:
        adj[u].append(v)
        adj[v].append(u)
    if any(len(a) != 2 for a in adj.values()):
        raise MembershipError("edge set is not a single cycle")
    start = next(iter(verts))
    prev, cur, steps = start, adj[start][0], 1
    while cur != start:
        nxt = adj[cur][0] if adj[cur][0] != prev else adj[cur][1]
        prev, cur, steps = cur, nxt, steps + 1
    if steps != len(verts):
        raise MembershipError("edge set splits into several cycles")


# embedding


def embed(space: StructureSpace, y, check: bool = True) -> np.ndarray:
    """Embedding vector psi(y) as float64."""
    if check:
        y = space.check(y)
    out = np.zeros(space.dim)
    fam = space.family
    if fam == "multiclass":
        out[y] = 1.0
    elif fam == "multilabel":
        if space.signed:
            out[:] = -1.0
        if y:
            out[list(y)] = 1.0
    elif fam in ("ell_subsets", "subtrees"):
        if y:
            out[list(y)] = 1.0
    elif fam == "ordinal":
        out[: y + 1] = 1.0
    elif fam in ("poset_regression", "hierarchy"):
        out[list(space.below[y])] = 1.0
    elif fam == "permutations":
        pos = np.empty(space.size, dtype=np.int64)
        pos[list(y)] = np.arange(space.size)
        for k, (u, v) in enumerate(space.features):
            out[k] = 1.0 if pos[u] < pos[v] else -1.0
    elif fam in ("partial_tournaments", "posets"):
        idx = space.feature_index
        for u, v in y:
            if u < v:
                out[idx[(u, v)]] = 1.0
            else:
                out[idx[(v, u)]] = -1.0
    elif fam == "cliques":
        idx = space.feature_index
        for e in itertools.combinations(sorted(y), 2):
            out[idx[e]] = 1.0
    elif fam == "undirected_cycles":
        idx = space.feature_index
        for e in y:
            out[idx[e]] = 1.0
    elif fam == "directed_cycles":
        idx = space.feature_index
        for u, v in y:
            out[idx[(u, v)]] = 1.0
            out[idx[(v, u)]] = -1.0
    return out


def embed_many(space: StructureSpace, ys: Sequence, check: bool = True) -> np.ndarray:
    """Stack embeddings row-wise; shape ``(len(ys), dim)``."""
    out = np.zeros((len(ys), space.dim))
    for i, y in enumerate(ys):
        out[i] = embed(space, y, check=check)
    return out


def max_embedding_norm(space: StructureSpace) -> float:
    """Largest Euclidean norm of psi(y) over the whole space."""
    fam, n = space.family, space.size
    if fam == "multiclass":
        return 1.0
    if fam in ("multilabel", "ordinal", "subtrees"):
        return math.sqrt(n)
    if fam == "ell_subsets":
        return math.sqrt(space.ell)
    if fam in ("poset_regression", "hierarchy"):
        return math.sqrt(max(len(b) for b in space.below))
    if fam in ("permutations", "partial_tournaments", "posets"):
        return math.sqrt(n * (n - 1) // 2)
    if fam == "cliques":
        return math.sqrt(n * (n - 1) // 2)
    if fam == "undirected_cycles":
        return math.sqrt(n)
    if fam == "directed_cycles":
        return math.sqrt(2 * n)
    raise AssertionError(fam)


# closed forms


def _cycle_sums(n: int) -> tuple[int, int, int]:
    """Cycle counts through one arc, through one 2-path, and through two disjoint edges.

    The first two count directed cycles, the last counts undirected ones.
    """
    through_arc = sum(binom(n - 2, i - 2) * math.factorial(i - 2) for i in range(3, n + 1))
    through_path = sum(binom(n - 3, i - 3) * math.factorial(i - 3) for i in range(3, n + 1))
    # two edges as oriented blocks in a ring with i further vertices
    through_two = sum(binom(n - 4, i) * 2 * math.factorial(i + 1) for i in range(0, n - 3))
    return through_arc, through_path, through_two


def _directed_cycle_count(n: int) -> int:
    return sum(binom(n, i) * math.factorial(i - 1) for i in range(3, n + 1))


def _no_closed_form(space: StructureSpace, what: str):
    raise NoClosedFormError(
        f"no closed form for {what} of {space.family}; "
        "use the partial_tournaments relaxation for statistics over all posets"
    )


def cardinality(space: StructureSpace) -> int:
    """Exact number of structures, as a Python integer."""
    fam, n = space.family, space.size
    if fam in ("multiclass", "ordinal", "poset_regression", "hierarchy"):
        return n
    if fam == "multilabel":
        return 2**n
    if fam == "ell_subsets":
        return binom(n, space.ell)
    if fam == "permutations":
        return math.factorial(n)
    if fam == "partial_tournaments":
        return 3 ** (n * (n - 1) // 2)
    if fam == "cliques":
        return 2**n
    if fam == "directed_cycles":
        return _directed_cycle_count(n)
    if fam == "undirected_cycles":
        return _directed_cycle_count(n) // 2
    if fam == "subtrees":
        total = count_subtrees(space.parents)[space.root]
        return total if space.include_empty else total - 1
    if fam == "posets":
        _no_closed_form(space, "the cardinality")
    raise AssertionError(fam)


def _subtree_containing(space: StructureSpace, f: list[int], verts: Iterable[int]) -> int:
    """Number of non-empty rooted subtrees containing every vertex in ``verts``."""
    closure = set()
    for v in verts:
        while v != -1 and v not in closure:
            closure.add(v)
            v = space.parents[v]
    total = 1
    for a in closure:
        for c in space.children[a]:
            if c not in closure:
                total *= f[c]
    return total


def psi_sum_exact(space: StructureSpace) -> list[int]:
    """First moment sum_y psi(y) as exact integers."""
    fam, n, dim = space.family, space.size, space.dim
    if fam == "multiclass":
        return [1] * n
    if fam == "multilabel":
        return [0] * n if space.signed else [2 ** (n - 1)] * n
    if fam == "ell_subsets":
        return [binom(n - 1, space.ell - 1)] * n
    if fam in ("ordinal", "poset_regression", "hierarchy"):
        return [len(space.above[i]) for i in range(n)]
    if fam in ("permutations", "partial_tournaments", "directed_cycles"):
        return [0] * dim
    if fam == "cliques":
        return [2 ** (n - 2)] * dim
    if fam == "undirected_cycles":
        return [_cycle_sums(n)[0]] * dim
    if fam == "subtrees":
        f = _subtree_f(space.parents)
        return [_subtree_containing(space, f, [v]) for v in range(n)]
    if fam == "posets":
        _no_closed_form(space, "the first moment")
    raise AssertionError(fam)


def psi_cov_exact(space: StructureSpace) -> list[list[int]]:
    """Second moment sum_y psi(y) psi(y)^T as exact integers."""
    fam, n, dim = space.family, space.size, space.dim
    feats = space.features
    cov = [[0] * dim for _ in range(dim)]
    if fam == "multiclass":
        for i in range(n):
            cov[i][i] = 1
    elif fam == "multilabel":
        for a in range(n):
            for b in range(n):
                if space.signed:
                    cov[a][b] = 2**n if a == b else 0
                else:
                    cov[a][b] = 2 ** (n - len({a, b}))
    elif fam == "ell_subsets":
        for a in range(n):
            for b in range(n):
                cov[a][b] = binom(n - len({a, b}), space.ell - len({a, b}))
    elif fam in ("ordinal", "poset_regression", "hierarchy"):
        ab = space.above
        for i in range(n):
            for j in range(n):
                cov[i][j] = len(ab[i] & ab[j])
    elif fam == "permutations":
        total = math.factorial(n)
        third = total // 3 if n >= 3 else 0
        for a, (u, v) in enumerate(feats):
            for b, (s, t) in enumerate(feats):
                if (u, v) == (s, t):
                    cov[a][b] = total
                elif u == s or v == t:
                    cov[a][b] = third
                elif u == t or v == s:
                    cov[a][b] = -third
    elif fam == "partial_tournaments":
        diag = 2 * 3 ** (dim - 1)
        for a in range(dim):
            cov[a][a] = diag
    elif fam == "cliques":
        for a, e in enumerate(feats):
            for b, g in enumerate(feats):
                cov[a][b] = 2 ** (n - len(set(e) | set(g)))
    elif fam == "undirected_cycles":
        arc, path, two = _cycle_sums(n)
        for a, e in enumerate(feats):
            for b, g in enumerate(feats):
                shared = len(set(e) & set(g))
                cov[a][b] = arc if shared == 2 else path if shared == 1 else two
    elif fam == "directed_cycles":
        arc, path, _ = _cycle_sums(n)
        for a, (u, v) in enumerate(feats):
            for b, (s, t) in enumerate(feats):
                if (u, v) == (s, t):
                    cov[a][b] = 2 * arc
                elif (u, v) == (t, s):
                    cov[a][b] = -2 * arc
                elif u == s or v == t:
                    # both arcs leave, or both enter, the shared vertex
                    cov[a][b] = -2 * path
                elif v == s or u == t:
                    cov[a][b] = 2 * path
    elif fam == "subtrees":
        f = _subtree_f(space.parents)
        for a in range(n):
            for b in range(a, n):
                cov[a][b] = cov[b][a] = _subtree_containing(space, f, (a, b))
    elif fam == "posets":
        _no_closed_form(space, "the second moment")
    return cov


def to_float(value) -> float:
    """Convert an exact integer or fraction to float, saturating to +-inf instead of raising."""
    try:
        return float(value)
    except OverflowError:
        return math.inf if value > 0 else -math.inf


def psi_sum(space: StructureSpace, exact: bool = False) -> np.ndarray:
    vals = psi_sum_exact(space)
    if exact:
        return np.array(vals, dtype=object)
    return np.array([to_float(v) for v in vals])


def psi_cov(space: StructureSpace, exact: bool = False) -> np.ndarray:
    vals = psi_cov_exact(space)
    if exact:
        out = np.empty((space.dim, space.dim), dtype=object)
        for i, row in enumerate(vals):
            out[i, :] = row
        return out
    return np.array([[to_float(v) for v in row] for row in vals]).reshape(space.dim, space.dim)


@dataclass
class EmbeddingStats:
    """Cardinality and the first two embedding moments of a space."""

    count: int
    psi_sum: np.ndarray
    psi_cov: np.ndarray
    # True when psi_sum and psi_cov were divided by the true count (then count == 1)
    per_structure: bool = False

    @property
    def count_float(self) -> float:
        return to_float(self.count)

    def to_json(self) -> dict:
        return {
            "count": str(self.count),
            "psi": [float(v) for v in self.psi_sum],
            "C": [[float(v) for v in row] for row in self.psi_cov],
            "per_structure": self.per_structure,
        }

    @classmethod
    def from_json(cls, data: dict) -> "EmbeddingStats":
        try:
            count = int(str(data["count"]))
            psi = np.asarray(data["psi"], dtype=float)
            cov = np.asarray(data["C"], dtype=float).reshape(len(psi), len(psi))
        except (KeyError, ValueError, TypeError) as exc:
            raise ValidationError(f"malformed stats JSON: {exc}") from exc
        return cls(count, psi, cov, bool(data.get("per_structure", False)))


def space_stats(space: StructureSpace, per_structure: bool = False) -> EmbeddingStats:
    """Exact |Y|, psi sum and C as floats.

    With ``per_structure`` the moments are divided by |Y| in exact arithmetic
    before conversion and ``count`` is reported as 1, so spaces like
    ``partial_tournaments:N=40`` (3^780 structures) stay finite.
    """
    if not per_structure:
        return EmbeddingStats(cardinality(space), psi_sum(space), psi_cov(space))
    total = cardinality(space)
    psi = np.array([to_float(Fraction(v, total)) for v in psi_sum_exact(space)])
    cov = np.array([[to_float(Fraction(v, total)) for v in row] for row in psi_cov_exact(space)])
    return EmbeddingStats(1, psi, cov.reshape(space.dim, space.dim), per_structure=True)


# enumeration


def _subtrees_rooted(space: StructureSpace, v: int) -> list[frozenset]:
    options = [[frozenset()] + _subtrees_rooted(space, c) for c in space.children[v]]
    out = []
    for combo in itertools.product(*options):
        out.append(frozenset({v}).union(*combo))
    return out


def _iter_directed_cycles(n: int) -> Iterator[frozenset]:
    for size in range(3, n + 1):
        for verts in itertools.combinations(range(n), size):
            first = verts[0]
            for rest in itertools.permutations(verts[1:]):
                order = (first,) + rest
                yield frozenset(zip(order, order[1:] + order[:1]))


def _iter_posets(n: int) -> Iterator[frozenset]:
    pairs = _pairs(n)
    for states in itertools.product((0, 1, -1), repeat=len(pairs)):
        rel = frozenset(
            (u, v) if s == 1 else (v, u) for (u, v), s in zip(pairs, states) if s
        )
        if transitive_closure(rel) == rel:
            yield rel


def _mask(s: Iterable[int]) -> int:
    return sum(1 << v for v in s)


def enumerate_small(space: StructureSpace, limit: int = DEFAULT_ENUM_LIMIT) -> list:
    """Every structure of the space in canonical order.

    Element families are listed by id, set families by bitmask value (element
    i is bit i), rankings lexicographically, and pair families by their
    sorted pair list.  Raises :class:`SpaceTooLargeError` past ``limit``.
    """
    fam, n = space.family, space.size
    if fam != "posets" and cardinality(space) > limit:
        raise SpaceTooLargeError(
            f"{fam} has {cardinality(space)} structures, limit is {limit}"
        )
    if fam in ("multiclass", "ordinal", "poset_regression", "hierarchy"):
        return list(range(n))
    if fam in ("multilabel", "cliques"):
        return [frozenset(v for v in range(n) if m >> v & 1) for m in range(2**n)]
    if fam == "ell_subsets":
        subsets = [frozenset(c) for c in itertools.combinations(range(n), space.ell)]
        return sorted(subsets, key=_mask)
    if fam == "subtrees":
        found = _subtrees_rooted(space, space.root)
        if space.include_empty:
            found.append(frozenset())
        return sorted(found, key=_mask)
    if fam == "permutations":
        return list(itertools.permutations(range(n)))
    if fam == "partial_tournaments":
        pairs = _pairs(n)
        out = []
        for states in itertools.product((0, 1, -1), repeat=len(pairs)):
            out.append(
                frozenset((u, v) if s == 1 else (v, u) for (u, v), s in zip(pairs, states) if s)
            )
        return sorted(out, key=lambda y: sorted(y))
    if fam == "directed_cycles":
        return sorted(_iter_directed_cycles(n), key=lambda y: sorted(y))
    if fam == "undirected_cycles":
        seen = set()
        for cyc in _iter_directed_cycles(n):
            und = frozenset((min(u, v), max(u, v)) for u, v in cyc)
            seen.add(und)
        return sorted(seen, key=lambda y: sorted(y))
    if fam == "posets":
        out = []
        for rel in _iter_posets(n):
            out.append(rel)
            if len(out) > limit:
                raise SpaceTooLargeError(f"more than {limit} posets on {n} elements")
        return sorted(out, key=lambda y: sorted(y))
    raise AssertionError(fam)


def brute_force_stats(space: StructureSpace, limit: int = DEFAULT_ENUM_LIMIT) -> EmbeddingStats:
    """Moments by explicit enumeration; the reference the closed forms are checked against."""
    ys = enumerate_small(space, limit)
    psi = embed_many(space, ys, check=False).astype(np.int64)
    return EmbeddingStats(len(ys), psi.sum(axis=0), psi.T @ psi)


# poset kernels


@dataclass(frozen=True)
class Poset:
    """A finite partial order: ``(u, v)`` in ``relation`` means u is above v."""

    elements: frozenset
    relation: frozenset

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[Hashable, Hashable]], elements: Iterable | None = None) -> "Poset":
        pairs = list(pairs)
        rel = transitive_closure(pairs)
        elems = frozenset(elements) if elements is not None else frozenset(v for p in pairs for v in p)
        if any(u not in elems or v not in elems for u, v in rel):
            raise ValidationError("relation mentions elements outside the alphabet")
        _check_partial_order(rel, "poset")
        return cls(elems, rel)

    def dual(self) -> "Poset":
        return Poset(self.elements, frozenset((v, u) for u, v in self.relation))

    def n_above(self, u) -> int:
        return sum(1 for a, b in self.relation if b == u)


def poset_kernel(
    kind: str,
    p: Poset,
    q: Poset,
    position_kernel: Callable[[int, int], float] | None = None,
) -> float:
    """Similarity between two partial orders on the same elements.

    ``kind`` is ``"position"`` (sum over elements of a kernel on the number of
    elements above it, product by default), ``"edge"`` (shared pairs) or
    ``"signed_edge"`` (shared pairs minus pairs reversed between the two).
    """
    if p.elements != q.elements:
        raise ValidationError("posets are defined over different element sets")
    if kind == "position":
        kappa = position_kernel or (lambda a, b: float(a * b))
        return float(sum(kappa(p.n_above(u), q.n_above(u)) for u in sorted(p.elements, key=repr)))
    if kind == "edge":
        return float(len(p.relation & q.relation))
    if kind == "signed_edge":
        return float(len(p.relation & q.relation) - len(p.dual().relation & q.relation))
    raise ValidationError(f"unknown poset kernel {kind!r}")
