"""Synthetic stand-ins for the multi-label, taxonomy and dicycle data sets."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ..counting import StructureSpace, embed_many
from ..errors import ValidationError
from ..rng import make_rng
from ..ridge import Dataset
from ..sampling import UniformSampler


def _positive(name: str, value: int) -> int:
    if int(value) != value or value < 1:
        raise ValidationError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def planted_multilabel(m: int, d_features: int, d_labels: int, noise: float, rng) -> tuple[Dataset, np.ndarray]:
    """Multi-label data from a planted linear model, plus the planted weights.

    Recipe: inputs ``x ~ N(0, I)``; raw weights ``U ~ N(0, I)`` of shape
    (d_labels, d_features); label ``l`` uses ``w_l = (u_l + u_{l-1}) / sqrt 2``
    (``w_0 = u_0``), so neighbouring labels are correlated; label ``l`` is
    on when ``<w_l, x> + noise * N(0, 1) > 0``.  With ``noise = 0`` the labels
    are exactly the signs of the planted scores.
    """
    m, d_features, d_labels = (
        _positive("m", m),
        _positive("d_features", d_features),
        _positive("d_labels", d_labels),
    )
    if not noise >= 0:
        raise ValidationError("noise must be non-negative")
    rng = make_rng(rng)
    X = rng.standard_normal((m, d_features))
    U = rng.standard_normal((d_labels, d_features))
    W = U.copy()
    W[1:] = (U[1:] + U[:-1]) / np.sqrt(2.0)
    scores = X @ W.T + noise * rng.standard_normal((m, d_labels))
    labels = [[frozenset(np.flatnonzero(row > 0).tolist())] for row in scores]
    return Dataset(X, labels, StructureSpace.multilabel(d_labels)), W


def generate_multilabel_dataset(m: int, d_features: int, d_labels: int, noise: float, rng) -> Dataset:
    return planted_multilabel(m, d_features, d_labels, noise, rng)[0]


@dataclass(frozen=True)
class DicyclePolicy:
    """Antisymmetric reward matrices; instance x has reward matrix sum_j x_j A[j]."""

    A: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        if A.ndim != 3 or A.shape[1] != A.shape[2]:
            raise ValidationError("policy needs an (n, N, N) array")
        if not np.array_equal(A, -np.transpose(A, (0, 2, 1))):
            raise ValidationError("policy matrices must be antisymmetric")
        object.__setattr__(self, "A", A)

    @classmethod
    def random(cls, n: int, sigma_size: int, rng) -> "DicyclePolicy":
        rng = make_rng(rng)
        upper = rng.uniform(-1.0, 1.0, size=(n, sigma_size, sigma_size))
        upper = np.triu(upper, k=1)
        return cls(upper - np.transpose(upper, (0, 2, 1)))

    @property
    def sigma_size(self) -> int:
        return self.A.shape[1]

    def rewards(self, x: np.ndarray) -> np.ndarray:
        """Reward matrices for the rows of ``x``, shape (rows, N, N)."""
        return np.einsum("ij,jab->iab", np.atleast_2d(x), self.A)

    def pair_vectors(self, x: np.ndarray, space: StructureSpace) -> np.ndarray:
        """Rewards as vectors over the ordered-pair coordinates of ``space``."""
        M = self.rewards(x)
        u, v = np.array(space.features).T
        return M[:, u, v]


class DicycleSplit(NamedTuple):
    train: Dataset
    policy: DicyclePolicy
    test_inputs: np.ndarray
    best_of: int


def generate_dicycle_dataset(
    n: int,
    m: int,
    m_test: int,
    sigma_size: int,
    labels_per_instance: int = 1,
    rng=None,
    K: int = 200,
) -> DicycleSplit:
    """Instances ``x ~ U[0,1]^n`` labelled with high-reward directed cycles.

    Each instance draws ``K`` uniform cycles and keeps the
    ``labels_per_instance`` best distinct ones under its reward matrix.
    Returns the training set, the policy, ``m_test`` fresh test inputs and K.
    """
    n, m, m_test = _positive("n", n), _positive("m", m), _positive("m_test", m_test)
    labels_per_instance, K = _positive("labels_per_instance", labels_per_instance), _positive("K", K)
    if sigma_size < 3:
        raise ValidationError("sigma_size must be >= 3")
    if labels_per_instance > K:
        raise ValidationError("labels_per_instance cannot exceed K")
    rng = make_rng(rng)
    space = StructureSpace.directed_cycles(sigma_size)
    policy = DicyclePolicy.random(n, sigma_size, rng)
    X = rng.uniform(0.0, 1.0, size=(m, n))
    X_test = rng.uniform(0.0, 1.0, size=(m_test, n))
    targets = policy.pair_vectors(X, space)
    sampler = UniformSampler(space)
    labels = []
    for i in range(m):
        ys, psi = sampler.draw_many(K, rng)
        # each arc (u, v) contributes M_uv through psi_(u,v) = 1 and psi_(v,u) = -1
        reward = psi @ targets[i] / 2.0
        chosen: list = []
        for k in np.argsort(-reward, kind="stable"):
            if ys[k] not in chosen:
                chosen.append(ys[k])
            if len(chosen) == labels_per_instance:
                break
        labels.append(chosen)
    return DicycleSplit(Dataset(X, labels, space), policy, X_test, K)


def random_taxonomy(depth: int, branching: int, rng) -> tuple[int, ...]:
    """Parent array of a rooted tree of the given depth; each inner node has 2..branching children."""
    depth, branching = _positive("depth", depth), _positive("branching", branching)
    if branching < 2:
        raise ValidationError("branching must be >= 2")
    rng = make_rng(rng)
    parents = [-1]
    frontier = [0]
    for _ in range(depth):
        nxt = []
        for v in frontier:
            for _ in range(int(rng.integers(2, branching + 1))):
                parents.append(v)
                nxt.append(len(parents) - 1)
        frontier = nxt
    return tuple(parents)


def generate_hierarchy_dataset(
    m: int, d_features: int, parents, noise: float, rng
) -> Dataset:
    """Documents filed under one leaf each.

    Every node gets a prototype ``N(0, I)``; a document of leaf ``v`` is the
    sum of the prototypes on the root-to-``v`` path plus ``noise * N(0, I)``.
    """
    m, d_features = _positive("m", m), _positive("d_features", d_features)
    rng = make_rng(rng)
    space = StructureSpace.hierarchy(parents)
    leaves = [v for v in range(space.size) if not space.children[v]]
    proto = rng.standard_normal((space.size, d_features))
    paths = embed_many(space, list(range(space.size)), check=False)
    leaf_of = rng.choice(leaves, size=m)
    X = paths[leaf_of] @ proto + noise * rng.standard_normal((m, d_features))
    return Dataset(X, [[int(v)] for v in leaf_of], space)
