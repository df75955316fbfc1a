import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from combpred.counting import (
    Poset,
    StructureSpace,
    brute_force_stats,
    cardinality,
    count_subtrees,
    embed,
    embed_many,
    enumerate_small,
    max_embedding_norm,
    poset_kernel,
    psi_cov,
    psi_sum,
    space_stats,
    transitive_closure,
)
from combpred.errors import MembershipError, NoClosedFormError, SpaceTooLargeError, ValidationError


def small_spaces():
    yield StructureSpace.multiclass(5)
    yield StructureSpace.multilabel(4)
    yield StructureSpace.multilabel(3, signed=True)
    yield StructureSpace.ell_subsets(6, 3)
    yield StructureSpace.ordinal(5)
    yield StructureSpace.poset_regression(4, [(0, 1), (1, 2), (0, 2), (3, 2)])
    yield StructureSpace.hierarchy([-1, 0, 0, 1, 1, 2])
    yield StructureSpace.permutations(4)
    yield StructureSpace.partial_tournaments(4)
    yield StructureSpace.cliques(5)
    yield StructureSpace.undirected_cycles(5)
    yield StructureSpace.directed_cycles(5)
    yield StructureSpace.subtrees([-1, 0, 0, 1, 1, 2, 5])
    yield StructureSpace.subtrees([-1, 0, 1], include_empty=False)


SPACES = list(small_spaces())


# cardinality / psi_sum / psi_cov examples


def test_cardinality_examples():
    assert cardinality(StructureSpace.multilabel(3)) == 8
    assert cardinality(StructureSpace.directed_cycles(4)) == 14
    assert cardinality(StructureSpace.ell_subsets(4, 2)) == 6


def test_directed_cycle_count_matches_enumeration():
    for n in range(3, 7):
        space = StructureSpace.directed_cycles(n)
        assert cardinality(space) == len(enumerate_small(space))


def test_psi_sum_examples():
    assert psi_sum(StructureSpace.multilabel(3)).tolist() == [4, 4, 4]
    assert psi_sum(StructureSpace.permutations(3)).tolist() == [0, 0, 0]
    assert psi_sum(StructureSpace.ell_subsets(4, 2)).tolist() == [3, 3, 3, 3]


def test_psi_cov_examples():
    space = StructureSpace.permutations(3)
    C = psi_cov(space)
    idx = space.feature_index
    assert C[idx[(0, 1)], idx[(0, 2)]] == 2
    dic = StructureSpace.directed_cycles(4)
    assert psi_cov(dic)[dic.feature_index[(0, 1)], dic.feature_index[(0, 1)]] == 8
    assert np.array_equal(psi_cov(StructureSpace.multiclass(5)), np.eye(5))


def test_big_counts_stay_exact():
    space = StructureSpace.permutations(20)
    assert cardinality(space) == math.factorial(20)
    assert space_stats(space).count == 2432902008176640000


def test_posets_have_no_closed_form():
    with pytest.raises(NoClosedFormError, match="partial_tournaments"):
        psi_cov(StructureSpace.posets(3))
    with pytest.raises(NoClosedFormError):
        cardinality(StructureSpace.posets(3))


# embeddings


def test_embed_examples():
    assert embed(StructureSpace.multilabel(3), {0, 2}).tolist() == [1, 0, 1]
    # b > a > c with a=0, b=1, c=2
    assert embed(StructureSpace.permutations(3), (1, 0, 2)).tolist() == [-1, 1, 1]
    assert embed(StructureSpace.subtrees([-1, 0]), frozenset()).tolist() == [0, 0]


def test_membership_errors_name_the_condition():
    with pytest.raises(MembershipError, match="ranking"):
        embed(StructureSpace.permutations(3), (0, 0, 1))
    with pytest.raises(MembershipError, match="rooted subtree"):
        embed(StructureSpace.subtrees([-1, 0, 1]), {2})
    with pytest.raises(MembershipError, match="expected 2 elements"):
        embed(StructureSpace.ell_subsets(4, 2), {1})
    with pytest.raises(MembershipError):
        embed(StructureSpace.directed_cycles(4), {(0, 1), (1, 0)})
    with pytest.raises(MembershipError):
        embed(StructureSpace.multiclass(3), 3)


def test_invalid_spaces():
    with pytest.raises(ValidationError):
        StructureSpace.poset_regression(3, [(0, 1), (1, 0)])
    with pytest.raises(ValidationError, match="cycle"):
        StructureSpace.subtrees([1, 2, 1, -1])
    with pytest.raises(ValidationError):
        StructureSpace.ell_subsets(3, 4)
    with pytest.raises(ValidationError):
        StructureSpace("nonsense", 3)


def test_max_embedding_norm_dominates():
    for space in SPACES:
        norms = np.linalg.norm(embed_many(space, enumerate_small(space)), axis=1)
        assert norms.max() == pytest.approx(max_embedding_norm(space))


# enumeration


def test_enumerate_small_examples():
    assert enumerate_small(StructureSpace.multilabel(2)) == [
        frozenset(),
        frozenset({0}),
        frozenset({1}),
        frozenset({0, 1}),
    ]
    assert len(enumerate_small(StructureSpace.permutations(3))) == 6
    assert len(enumerate_small(StructureSpace.directed_cycles(4))) == 14


def test_enumerate_refuses_with_exact_count():
    with pytest.raises(SpaceTooLargeError, match="3628800"):
        enumerate_small(StructureSpace.permutations(10), limit=1000)


@pytest.mark.parametrize("space", SPACES, ids=lambda s: s.describe())
def test_enumeration_is_complete_and_canonical(space):
    ys = enumerate_small(space)
    assert len(ys) == len(set(ys)) == cardinality(space)
    for y in ys:
        assert space.check(y) == y


# count_subtrees


def test_count_subtrees_examples():
    assert count_subtrees([-1]) == [2]
    # path r -> a -> b
    assert count_subtrees([-1, 0, 1]) == [4, 3, 2]
    assert count_subtrees([-1, 0, 0])[0] == 5


def test_count_subtrees_rejects_cycles():
    with pytest.raises(ValidationError, match="cycle"):
        count_subtrees([-1, 2, 1])


@st.composite
def trees(draw, max_size=12):
    n = draw(st.integers(1, max_size))
    return [-1] + [draw(st.integers(0, v - 1)) for v in range(1, n)]


def _rooted_subtrees_by_brute_force(parents):
    n = len(parents)
    found = 0
    for mask in range(1, 2**n):
        verts = {v for v in range(n) if mask >> v & 1}
        if 0 in verts and all(v == 0 or parents[v] in verts for v in verts):
            found += 1
    return found


@settings(max_examples=60, deadline=None)
@given(trees())
def test_count_subtrees_matches_enumeration(parents):
    assert count_subtrees(parents)[0] == 1 + _rooted_subtrees_by_brute_force(parents)


# closed forms against the enumeration oracle


@pytest.mark.parametrize("space", SPACES, ids=lambda s: s.describe())
def test_closed_forms_equal_brute_force(space):
    exact = space_stats(space)
    brute = brute_force_stats(space)
    assert exact.count == brute.count
    assert np.array_equal(exact.psi_sum, brute.psi_sum)
    assert np.array_equal(exact.psi_cov, brute.psi_cov)


family_params = st.one_of(
    st.builds(StructureSpace.multilabel, st.integers(1, 8)),
    st.builds(StructureSpace.multiclass, st.integers(1, 8)),
    st.builds(StructureSpace.ordinal, st.integers(1, 8)),
    st.integers(1, 8).flatmap(lambda d: st.builds(StructureSpace.ell_subsets, st.just(d), st.integers(0, d))),
    st.builds(StructureSpace.permutations, st.integers(1, 5)),
    st.builds(StructureSpace.partial_tournaments, st.integers(2, 4)),
    st.builds(StructureSpace.cliques, st.integers(2, 8)),
    st.builds(StructureSpace.directed_cycles, st.integers(3, 6)),
    st.builds(StructureSpace.undirected_cycles, st.integers(3, 6)),
    st.builds(StructureSpace.subtrees, trees(9), st.booleans()),
    st.builds(StructureSpace.hierarchy, trees(9)),
)


@settings(max_examples=80, deadline=None)
@given(family_params)
def test_stats_property(space):
    exact = space_stats(space)
    brute = brute_force_stats(space)
    assert exact.count == brute.count
    assert np.array_equal(exact.psi_sum, brute.psi_sum)
    assert np.array_equal(exact.psi_cov, brute.psi_cov)
    C = exact.psi_cov
    assert np.array_equal(C, C.T)
    if C.size:
        assert np.linalg.eigvalsh(C).min() >= -1e-9 * max(1.0, np.abs(C).max())
    if space.family in ("permutations", "directed_cycles", "partial_tournaments"):
        assert not exact.psi_sum.any()


@st.composite
def posets(draw, max_size=5):
    n = draw(st.integers(1, max_size))
    # a random linear extension order, keeping a random subset of its pairs
    order = draw(st.permutations(range(n)))
    pairs = [(order[i], order[j]) for i, j in itertools.combinations(range(n), 2) if draw(st.booleans())]
    return n, transitive_closure(pairs)


@settings(max_examples=40, deadline=None)
@given(posets())
def test_poset_regression_stats_property(nrel):
    n, rel = nrel
    space = StructureSpace.poset_regression(n, rel)
    exact, brute = space_stats(space), brute_force_stats(space)
    assert np.array_equal(exact.psi_sum, brute.psi_sum)
    assert np.array_equal(exact.psi_cov, brute.psi_cov)


def test_stats_json_round_trip():
    stats = space_stats(StructureSpace.partial_tournaments(30))
    data = stats.to_json()
    assert data["count"] == str(3 ** (30 * 29 // 2))
    back = type(stats).from_json(data)
    assert back.count == stats.count


# poset kernels


def test_poset_kernel_examples():
    a, b, c = "abc"
    chain = Poset.from_pairs([(a, b), (b, c), (a, c)])
    assert poset_kernel("edge", chain, chain) == 3
    ab = Poset.from_pairs([(a, b)], elements="ab")
    ba = Poset.from_pairs([(b, a)], elements="ab")
    assert poset_kernel("signed_edge", ab, ba) == -1
    x = Poset.from_pairs([(a, b)], elements="abc")
    y = Poset.from_pairs([(b, c)], elements="abc")
    assert poset_kernel("edge", x, y) == 0


def test_poset_kernel_position_and_errors():
    p = Poset.from_pairs([(0, 1), (1, 2)])
    # elements above: 0 -> 0, 1 -> 1, 2 -> 2
    assert poset_kernel("position", p, p) == 0 + 1 + 4
    with pytest.raises(ValidationError, match="different element sets"):
        poset_kernel("edge", p, Poset.from_pairs([(0, 1)]))


def test_poset_kernels_are_positive_semidefinite():
    space = StructureSpace.posets(3)
    ps = [Poset.from_pairs(rel, elements=range(3)) for rel in enumerate_small(space)]
    for kind in ("position", "edge", "signed_edge"):
        G = np.array([[poset_kernel(kind, p, q) for q in ps] for p in ps])
        assert np.linalg.eigvalsh(G).min() > -1e-9
