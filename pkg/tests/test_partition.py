import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from combpred.counting import StructureSpace, embed_many, enumerate_small, space_stats
from combpred.errors import SpaceTooLargeError, ValidationError
from combpred.partition import (
    approx_chain_steps,
    cooling_schedule,
    estimate_moment,
    estimate_partition,
    estimate_partition_approx_sampler,
    exact_distribution,
    exact_level_ratios,
    exact_partition,
    hoeffding_gradient_dot,
    hoeffding_sample_size,
    moment_cooling_constant,
    sample_size,
    taylor_partition,
    taylor_remainder_bound,
    weight_norm_bound,
)
from combpred.sampling import ExpFamilyModel

UNIT_X = [1 / math.sqrt(3)]


def _unit_model(seed=0):
    """Multilabel d=3 with |phi| <= 1 (input scaled by 1/sqrt(3)) and |w| = 1."""
    w = np.random.default_rng(seed).standard_normal(3)
    return ExpFamilyModel(StructureSpace.multilabel(3), w / np.linalg.norm(w))


# exact oracle


def test_exact_partition_examples():
    space = StructureSpace.multilabel(2)
    assert exact_partition(ExpFamilyModel(space, np.zeros(2)), [1.0]) == 4
    assert exact_partition(ExpFamilyModel(space, [math.log(2), 0.0]), [1.0]) == pytest.approx(6.0, rel=1e-15)
    big = StructureSpace.permutations(12)
    with pytest.raises(SpaceTooLargeError):
        exact_partition(ExpFamilyModel(big, np.zeros(66)), [1.0], limit=1000)


def test_exact_partition_monotone_in_positive_features():
    space = StructureSpace.multilabel(3)
    w = np.array([0.2, -0.1, 0.4])
    base = exact_partition(ExpFamilyModel(space, w), [1.0])
    for j in range(3):
        up = w.copy()
        up[j] += 0.1
        assert exact_partition(ExpFamilyModel(space, up), [1.0]) > base


def test_exact_distribution_sums_to_one():
    _, p = exact_distribution(_unit_model(), UNIT_X)
    assert math.fsum(p) == pytest.approx(1.0, abs=1e-15)


# cooling schedule


def test_schedule_example():
    sched = cooling_schedule(2.5, 1.0, p=3)
    assert sched.q == 7.5
    assert sched.betas == tuple(j / 7.5 for j in range(7)) + (1.0,)
    assert sched.levels == 7
    assert cooling_schedule(1.0, 0.0).betas == (0.0, 1.0)
    with pytest.raises(ValidationError):
        cooling_schedule(1.0, 1.0, p=2)


@settings(max_examples=80, deadline=None)
@given(st.floats(0.01, 20.0), st.integers(3, 6), st.booleans())
def test_schedule_invariants(rw, p, fine):
    sched = cooling_schedule(rw, 1.0, p, fine_tail=fine)
    b = np.array(sched.betas)
    assert b[0] == 0 and b[-1] == 1
    assert np.all(np.diff(b) > 0)
    gaps = np.diff(b)
    assert np.all(gaps[:-1] <= 1 / sched.q + 1e-12)
    if fine:
        assert gaps[-1] <= 1 / sched.q + 1e-12


def test_sample_size():
    assert sample_size(0.5, 3, 3) == math.ceil(65 * 4 * 3 * math.exp(2 / 3))


# estimators


def test_zero_weights_give_count():
    model = ExpFamilyModel(StructureSpace.permutations(5), np.zeros(10))
    for est in (
        estimate_partition(model, [1.0], rng=0),
        estimate_partition_approx_sampler(model, [1.0], rng=0),
    ):
        assert est.value == 120
        assert est.levels == 1


def test_telescoping_identity():
    for space in (StructureSpace.multilabel(6), StructureSpace.permutations(5), StructureSpace.directed_cycles(5)):
        w = np.random.default_rng(1).standard_normal(space.dim)
        model = ExpFamilyModel(space, w)
        sched = cooling_schedule(model.feature_bound([1.0]), model.weight_norm, 3)
        ratios = exact_level_ratios(model, [1.0], sched)
        z = exact_partition(model, [1.0])
        assert math.prod(ratios) * z == pytest.approx(len(enumerate_small(space)), rel=1e-9)
        assert all(math.exp(-1 / 3) <= r <= math.exp(1 / 3) for r in ratios)


def test_level_samples_stay_in_range():
    model = _unit_model(2)
    est = estimate_partition(model, UNIT_X, sampler="exact", rng=3, samples_per_level=500)
    assert all(math.exp(-1 / 3) <= m <= math.exp(1 / 3) for m in est.level_means)


def test_relative_variance_bound():
    model = _unit_model(4)
    est = estimate_partition(model, UNIT_X, epsilon=0.5, rng=5)
    S = est.samples_per_level
    for rv in est.level_rel_var:
        # a crude standard error for the relative variance of a bounded variable
        assert rv <= math.exp(2 / 3) + 3 * math.sqrt(2 / (S - 1)) * max(rv, 1e-3)


def test_fpras_success_rate_small():
    model = _unit_model(0)
    exact = exact_partition(model, UNIT_X)
    ok = 0
    for seed in range(20):
        est = estimate_partition(model, UNIT_X, epsilon=0.5, rng=seed)
        assert est.samples_per_level == sample_size(0.5, est.levels, 3)
        ok += (1 - 0.5) * exact <= est.value <= (1 + 0.5) * exact
    assert ok >= 15


def test_approx_sampler_success_rate_small():
    model = _unit_model(0)
    exact = exact_partition(model, UNIT_X)
    steps = approx_chain_steps(model, UNIT_X, 0.5)
    ok = sum(
        0.5 * exact <= estimate_partition_approx_sampler(model, UNIT_X, epsilon=0.5, chain_steps=steps, rng=s).value <= 1.5 * exact
        for s in range(20)
    )
    assert ok >= 14


def test_estimator_determinism_and_errors():
    model = _unit_model(0)
    a = estimate_partition(model, UNIT_X, rng=7, samples_per_level=200)
    b = estimate_partition(model, UNIT_X, rng=7, samples_per_level=200)
    assert a.value == b.value
    with pytest.raises(ValidationError):
        estimate_partition(model, UNIT_X, sampler="bogus")
    with pytest.raises(ValidationError):
        estimate_partition(model, UNIT_X, space=StructureSpace.multilabel(4))
    with pytest.raises(ValidationError):
        estimate_partition_approx_sampler(model, UNIT_X, chain_steps=0)


# Taylor approximation


def test_taylor_zero_weights_is_count():
    space = StructureSpace.multilabel(5)
    assert taylor_partition(space, np.zeros(5), [1.0]) == exact_partition(ExpFamilyModel(space, np.zeros(5)), [1.0])


def test_taylor_worked_example():
    space = StructureSpace.multilabel(2)
    w = np.array([0.1, -0.1])
    exact = (1 + math.exp(0.1)) * (1 + math.exp(-0.1))
    assert exact_partition(ExpFamilyModel(space, w), [1.0]) == pytest.approx(exact, rel=1e-14)
    approx = taylor_partition(space, w, [1.0])
    assert approx == pytest.approx(4.01, rel=1e-14)
    assert abs(approx - exact) / exact <= 0.005
    assert taylor_partition(space, w, [1.0], literal=True) == pytest.approx(4.02, rel=1e-14)


@pytest.mark.parametrize(
    "space",
    [StructureSpace.multilabel(4), StructureSpace.ell_subsets(6, 2), StructureSpace.subtrees([-1, 0, 0, 1]), StructureSpace.cliques(4)],
    ids=lambda s: s.describe(),
)
def test_taylor_within_remainder_bound(space):
    rng = np.random.default_rng(8)
    for _ in range(10):
        w = rng.standard_normal(space.dim)
        psi = embed_many(space, enumerate_small(space))
        w = w / np.abs(psi @ w).max() * rng.uniform(0.2, 1.0)
        model = ExpFamilyModel(space, w)
        exact = exact_partition(model, [1.0])
        err = abs(taylor_partition(space, w, [1.0]) - exact)
        assert err <= taylor_remainder_bound(model, [1.0]) + 1e-12


def test_taylor_rejects_signed_families():
    with pytest.raises(ValidationError):
        taylor_partition(StructureSpace.permutations(3), np.zeros(3), [1.0])
    with pytest.raises(ValidationError):
        taylor_partition(StructureSpace.multilabel(3, signed=True), np.zeros(3), [1.0])
    stats = space_stats(StructureSpace.multilabel(2))
    assert taylor_partition(stats, [0.1, -0.1], [1.0]) == pytest.approx(4.01)


# Hoeffding gradient estimate


def test_hoeffding_sample_size():
    assert hoeffding_sample_size(1, 1, 0.1, 0.05) == 738
    assert hoeffding_sample_size(1, 1, 0.1, 0.05) == math.ceil(2 * math.log(40) / 0.01)


def test_hoeffding_orthogonal_direction():
    space = StructureSpace.multilabel(2)
    model = ExpFamilyModel(space, [0.3, 0.1], n_inputs=1)
    assert hoeffding_gradient_dot(model, [1.0], np.zeros(2), 0.05, 0.1, rng=0) == 0.0


def test_hoeffding_concentration_small():
    space = StructureSpace.multilabel(2)
    x = [1 / math.sqrt(2)]
    model = ExpFamilyModel(space, [0.6, -0.4])
    z = np.array([0.8, 0.6])
    ys, p = exact_distribution(model, x)
    truth = float(p @ (embed_many(space, ys) @ z) * x[0])
    fails = sum(abs(hoeffding_gradient_dot(model, x, z, 0.05, 0.1, rng=s) - truth) > 0.1 for s in range(100))
    assert fails <= 5


# moments and norm bounds


def test_moment_at_zero_weights():
    model = ExpFamilyModel(StructureSpace.multilabel(3), np.zeros(3))
    assert estimate_moment(model, [1.0], 0, rng=0) == 0.5


def test_moment_of_constant_feature():
    # every 2-subset of a 2-element alphabet holds both elements
    model = ExpFamilyModel(StructureSpace.ell_subsets(2, 2), [0.4, -0.3])
    assert estimate_moment(model, [1.0], 1, rng=0, samples_per_level=300) == pytest.approx(1.0, rel=1e-12)


def test_moment_accuracy_small():
    space = StructureSpace.multilabel(2)
    model = ExpFamilyModel(space, [0.3, -0.2])
    ys, p = exact_distribution(model, [1.0])
    truth = float(p @ embed_many(space, ys)[:, 0])
    ok = sum(abs(estimate_moment(model, [1.0], 0, epsilon=0.5, rng=s) - truth) <= 0.1 * truth for s in range(20))
    assert ok >= 14


def test_moment_validation():
    with pytest.raises(ValidationError):
        estimate_moment(ExpFamilyModel(StructureSpace.permutations(3), np.zeros(3)), [1.0], 0)
    with pytest.raises(ValidationError):
        estimate_moment(ExpFamilyModel(StructureSpace.multilabel(3), np.zeros(3)), [1.0], 5)
    assert moment_cooling_constant(ExpFamilyModel(StructureSpace.multilabel(3), [0.5, 0.1, 0.2]), [1.0], 0, 0.5) >= 1.0


def test_weight_norm_bound():
    assert weight_norm_bound(math.e, 1.0) == pytest.approx(1.0, rel=1e-15)
    assert weight_norm_bound(StructureSpace.multilabel(10), 1.0) == pytest.approx(2.6328, abs=5e-5)
    assert weight_norm_bound(1024, 2.0) < weight_norm_bound(1024, 1.0)
    with pytest.raises(ValidationError):
        weight_norm_bound(10, 0.0)
