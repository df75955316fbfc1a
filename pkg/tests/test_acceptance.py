"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

Tolerances are pinned here rather than derived at run time so a regression
cannot silently loosen them.
"""

import itertools
import json
import math
import time
from collections import Counter

import numpy as np
import pytest
from scipy.stats import chisquare

from combpred.counting import (
    StructureSpace,
    brute_force_stats,
    cardinality,
    embed,
    embed_many,
    enumerate_small,
    psi_cov,
    psi_cov_exact,
    psi_sum,
    psi_sum_exact,
    space_stats,
)
from combpred.decode import SiblingSystem, decode_independence, decode_sibling
from combpred.formats import write_dataset
from combpred.harness import cli
from combpred.harness.datasets import planted_multilabel
from combpred.harness.experiments import ExperimentConfig, run_experiment
from combpred.online import SgdConfig, sgd_train
from combpred.partition import (
    estimate_partition,
    exact_distribution,
    exact_partition,
    hoeffding_gradient_dot,
    hoeffding_sample_size,
    sample_size,
    taylor_partition,
    taylor_remainder_bound,
)
from combpred.ridge import Dataset, Kernel, NcgConfig, RidgeModel, RidgeProblem, surrogate_loss, train_ncg
from combpred.rng import make_rng, substream
from combpred.sampling import (
    ExpFamilyModel,
    cftp_sample_many,
    uniform_cyclic,
    uniform_hypercube,
    uniform_permutation,
    uniform_subtree,
)

# pinned tolerances
REAL_REL = 1e-12
GRAD_REL = 1e-5
HVP_REL = 1e-4
OBJ_REL = 1e-10
DOUBLE_SUM_REL = 1e-9
TOY_ABS = 1e-8
SGD_GAP = 0.20
CHI2_ALPHA = 0.01
MIN_EXPECTED = 50
FPRAS_EPS = 0.5
FPRAS_P = 3
FPRAS_MIN_OK = 70
TAYLOR_EXAMPLE_ABS = 0.02
HOEFFDING_DELTA = 0.05
HOEFFDING_EPS = 0.1
HOEFFDING_SLACK = 0.02
CHI2_SEED = 6


@pytest.fixture
def report(capsys):
    def emit(number, title, ok, detail=""):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} [{number:2d}] {title}" + (f": {detail}" if detail else ""))
        assert ok, detail

    return emit


def _random_tree(n, rng):
    return [-1] + [int(rng.integers(0, v)) for v in range(1, n)]


def _counting_spaces():
    for d in range(1, 15):
        yield StructureSpace.multilabel(d)
        for ell in range(d + 1):
            yield StructureSpace.ell_subsets(d, ell)
    for d in range(1, 8):
        yield StructureSpace.permutations(d)
    for n in range(3, 8):
        yield StructureSpace.directed_cycles(n)
    for n in range(2, 15):
        yield StructureSpace.cliques(n)
    for n in range(2, 6):
        yield StructureSpace.partial_tournaments(n)
    rng = np.random.default_rng(0)
    for n in range(1, 13):
        yield StructureSpace.subtrees(_random_tree(n, rng))
        yield StructureSpace.subtrees([-1] + [0] * (n - 1), include_empty=False)
        yield StructureSpace.subtrees([-1] + list(range(n - 1)))


def test_01_counting_matches_enumeration(report):
    start = time.perf_counter()
    bad = []
    spaces = list(_counting_spaces())
    for space in spaces:
        ref = brute_force_stats(space, limit=200_000)
        exact_ok = (
            cardinality(space) == ref.count
            and psi_sum_exact(space) == ref.psi_sum.tolist()
            and psi_cov_exact(space) == ref.psi_cov.tolist()
        )
        s, c = psi_sum(space), psi_cov(space)
        real_ok = np.allclose(s, ref.psi_sum, rtol=REAL_REL, atol=0) and np.allclose(c, ref.psi_cov, rtol=REAL_REL, atol=0)
        if not (exact_ok and real_ok):
            bad.append(space.describe())
    elapsed = time.perf_counter() - start
    report(1, "counting oracle equivalence", not bad and elapsed <= 60, f"{len(spaces)} spaces, {len(bad)} mismatches {bad[:3]}, {elapsed:.1f}s")


def _random_data(space, m, rng, k=1):
    ys = enumerate_small(space)
    X = rng.standard_normal((m, 3))
    labels = [[ys[j] for j in rng.choice(len(ys), size=k, replace=False)] for _ in range(m)]
    return Dataset(X, labels, space)


GRAD_SPACES = [
    StructureSpace.multiclass(4),
    StructureSpace.multilabel(4),
    StructureSpace.ell_subsets(5, 2),
    StructureSpace.permutations(4),
    StructureSpace.directed_cycles(4),
    StructureSpace.undirected_cycles(5),
    StructureSpace.cliques(3),
    StructureSpace.subtrees([-1, 0, 0, 1, 1]),
    StructureSpace.hierarchy([-1, 0, 0, 1]),
    StructureSpace.partial_tournaments(3),
]


def test_02_gradient_and_hessian(report):
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    worst_g = worst_h = 0.0
    kernels = [Kernel(), Kernel("rbf"), Kernel("polynomial", degree=2, coef0=1.0)]
    for trial in range(20):
        space = GRAD_SPACES[trial % len(GRAD_SPACES)]
        data = _random_data(space, int(rng.integers(2, 6)), rng, k=int(rng.integers(1, 3)))
        problem = RidgeProblem(data.kernel_matrix(kernels[trial % 3]), data.y_matrix(), space_stats(space), 0.2 + rng.random())
        alpha = 0.5 * rng.standard_normal(problem.shape)
        fd = np.zeros_like(alpha)
        h = 1e-5
        for idx in np.ndindex(alpha.shape):
            e = np.zeros_like(alpha)
            e[idx] = h
            fd[idx] = (problem.objective(alpha + e) - problem.objective(alpha - e)) / (2 * h)
        worst_g = max(worst_g, np.linalg.norm(problem.gradient(alpha) - fd) / max(1.0, np.linalg.norm(fd)))
        v = rng.standard_normal(problem.shape)
        fd_hv = (problem.gradient(alpha + h * v) - problem.gradient(alpha - h * v)) / (2 * h)
        worst_h = max(worst_h, np.linalg.norm(problem.hessian_vector(v) - fd_hv) / max(1.0, np.linalg.norm(fd_hv)))
    elapsed = time.perf_counter() - start
    ok = worst_g <= GRAD_REL and worst_h <= HVP_REL and elapsed <= 30
    report(2, "gradient and Hessian-vector vs finite differences", ok, f"grad {worst_g:.2e}, hvp {worst_h:.2e}, {elapsed:.1f}s")


def test_03_objective_identities(report):
    rng = np.random.default_rng(3)
    worst_obj = worst_sum = 0.0
    spaces = GRAD_SPACES + [StructureSpace.permutations(6), StructureSpace.multilabel(10), StructureSpace.ell_subsets(11, 3)]
    for space in spaces:
        assert cardinality(space) <= 2000
        data = _random_data(space, 4, rng)
        model = RidgeModel(space, Kernel(), 0.37, 0.3 * rng.standard_normal((space.dim, 4)), data.inputs, space_stats(space))
        K = data.kernel_matrix(model.kernel)
        problem = RidgeProblem(K, data.y_matrix(), model.stats, model.lam)
        losses = [surrogate_loss(model, data, i) for i in range(data.m)]
        total = model.lam * np.trace(model.alpha @ K @ model.alpha.T) + math.fsum(losses)
        worst_obj = max(worst_obj, abs(problem.objective(model.alpha) - total) / abs(total))
        ys = enumerate_small(space)
        H = embed_many(space, ys)
        for i in range(data.m):
            h = H @ (model.alpha @ K[:, i])
            hy = float(embed(space, data.label_sets[i][0]) @ (model.alpha @ K[:, i]))
            diff = np.delete(h, ys.index(data.label_sets[i][0])) - hy
            ref = math.fsum((diff + 0.5 * diff**2).tolist())
            worst_sum = max(worst_sum, abs(losses[i] - ref) / max(abs(ref), 1e-300))
    ok = worst_obj <= OBJ_REL and worst_sum <= DOUBLE_SUM_REL
    report(3, "objective identities", ok, f"aggregate {worst_obj:.2e}, double sum {worst_sum:.2e}")


def test_04_trainers(report):
    start = time.perf_counter()
    toy = Dataset(np.array([[1.0]]), [[0]], StructureSpace.multiclass(2))
    alpha = train_ncg(toy, NcgConfig(lam=1.0, tol=1e-12)).alpha.ravel()
    toy_err = float(np.abs(alpha - [0.25, -0.25]).max())
    gaps = []
    for seed in range(5):
        data, _ = planted_multilabel(200, 5, 5, 0.1, seed)
        ncg = train_ncg(data, NcgConfig(tol=1e-8))
        sgd, _ = sgd_train(data, SgdConfig(tau=data.m), seed=seed)
        problem = RidgeProblem(data.kernel_matrix(Kernel()), data.y_matrix(), ncg.stats, ncg.lam)
        f_ncg, f_sgd = problem.objective(ncg.alpha), problem.objective(sgd.alpha)
        gaps.append(abs(f_sgd - f_ncg) / abs(f_ncg))
    elapsed = time.perf_counter() - start
    ok = toy_err <= TOY_ABS and max(gaps) <= SGD_GAP and elapsed <= 60
    report(4, "trainer optimality", ok, f"toy error {toy_err:.1e}, SGD gaps {[round(g, 3) for g in gaps]}, {elapsed:.1f}s")


def _hereditary(n, rng):
    gens = [frozenset(np.flatnonzero(rng.random(n) < 0.6).tolist()) for _ in range(int(rng.integers(1, 6)))]
    return lambda s: any(s <= g for g in gens)


def test_05_z_approximation(report):
    rng = np.random.default_rng(5)
    violations = Counter()
    checked = 0
    for system in (SiblingSystem.signed_multilabel(10), SiblingSystem.permutations(6), SiblingSystem.permutations(7), SiblingSystem.signed_multilabel(13)):
        assert cardinality(system.space) <= 10**4
        psi = embed_many(system.space, enumerate_small(system.space))
        W = rng.standard_normal((system.space.dim, 1000))
        S = psi @ W
        for j in range(1000):
            _, s = decode_sibling(system, W[:, j], rng)
            # exact extrema come from one batched product; the decoder's own dot product may differ in the last bit
            if s < 0.5 * S[:, j].max() + 0.5 * S[:, j].min() - 1e-12 * np.abs(S[:, j]).max():
                violations[system.space.describe()] += 1
            checked += 1
    for n in (4, 8, 12):
        subsets = [frozenset(c) for k in range(n + 1) for c in itertools.combinations(range(n), k)]
        nu = 1 - math.log2(n) / n
        for _ in range(10):
            member = _hereditary(n, rng)
            rows = [s for s in subsets if member(s)]
            ind = np.zeros((len(rows), n))
            for i, s in enumerate(rows):
                ind[i, list(s)] = 1
            for _ in range(100):
                w = rng.standard_normal(n)
                y, s = decode_independence(n, w, member)
                vals = ind @ w
                if not member(y) or s < (1 - nu) * vals.max() + nu * min(0.0, vals.min()) - 1e-12:
                    violations[f"independence n={n}"] += 1
                checked += 1
    report(5, "z-approximation guarantees", not violations, f"{checked} scorers, violations {dict(violations)}")


def _chi2(draws, support, probs=None):
    counts = Counter(draws)
    if not set(counts) <= set(support):
        return 0.0
    observed = np.array([counts.get(y, 0) for y in support], dtype=float)
    probs = np.full(len(support), 1 / len(support)) if probs is None else np.asarray(probs)
    expected = probs * len(draws)
    assert expected.min() >= MIN_EXPECTED
    return chisquare(observed, expected).pvalue


def test_06_sampler_exactness(report):
    start = time.perf_counter()
    cases = []
    for d in range(1, 5):
        support = [tuple((k >> i) & 1 for i in range(d)) for k in range(2**d)]
        cases.append((f"hypercube d={d}", lambda rng, n, d=d: [uniform_hypercube(d, rng) for _ in range(n)], support, None))
    for d in range(1, 5):
        support = enumerate_small(StructureSpace.permutations(d))
        cases.append((f"permutations d={d}", lambda rng, n, d=d: [uniform_permutation(d, rng) for _ in range(n)], support, None))
    for k in range(3, 6):
        support = enumerate_small(StructureSpace.directed_cycles(k))
        cases.append((f"dicycles N={k}", lambda rng, n, k=k: [uniform_cyclic(k, rng) for _ in range(n)], support, None))
    for parents in ([-1], [-1, 0], [-1, 0, 1], [-1, 0, 0, 1], [-1, 0, 0, 0, 0], [-1, 0, 1, 2, 3, 4], [-1, 0, 0, 1, 1, 2]):
        support = enumerate_small(StructureSpace.subtrees(parents))
        cases.append((f"subtrees n={len(parents)}", lambda rng, n, t=parents: [uniform_subtree(t, True, rng) for _ in range(n)], support, None))
    space = StructureSpace.multilabel(3)
    for w in ([0.3, -0.2, 0.1], [1.0, -1.0, 0.5], [-0.8, -0.4, 1.2]):
        model = ExpFamilyModel.from_scorer(space, np.array(w))
        ys, p = exact_distribution(model, [1.0])
        cases.append((f"cftp w={w}", lambda rng, n, m=model: cftp_sample_many(m, [1.0], n, rng).samples, ys, p))
    pvals = {}
    # one independent substream per test; a correct sampler still fails each test with
    # probability 0.01, so the 20-test family passes for about 82% of base seeds (32/40 measured)
    for k, (name, draw, support, probs) in enumerate(cases):
        n = int(math.ceil(60 / (min(probs) if probs is not None else 1 / len(support))))
        pvals[name] = _chi2(draw(substream(CHI2_SEED, k), n), support, probs)
    elapsed = time.perf_counter() - start
    low = {k: round(v, 4) for k, v in pvals.items() if v <= CHI2_ALPHA}
    report(6, "sampler exactness (chi-square)", not low and elapsed <= 120, f"{len(pvals)} tests, min p {min(pvals.values()):.3f}, rejected {low}, {elapsed:.1f}s")


def test_07_cftp_expected_time(report):
    space = StructureSpace.multiclass(6)
    w = np.zeros(6)
    w[0] = -1.0
    model = ExpFamilyModel.from_scorer(space, w)
    assert model.weight_norm == 1.0 and model.feature_bound([1.0]) == 1.0
    depths = cftp_sample_many(model, [1.0], 10_000, make_rng(7)).depths
    se = depths.std(ddof=1) / math.sqrt(depths.size)
    bound = math.e**2 + 2 * se
    report(7, "CFTP mean coalescence time with B=R=1", depths.mean() <= bound, f"mean {depths.mean():.3f} <= {bound:.3f}")


def _unit_model(seed):
    w = np.random.default_rng(seed).standard_normal(3)
    return ExpFamilyModel(StructureSpace.multilabel(3), w / np.linalg.norm(w))


UNIT_X = [1 / math.sqrt(3)]


def test_08_fpras(report):
    start = time.perf_counter()
    model = _unit_model(8)
    exact = exact_partition(model, UNIT_X)
    ok = var_bad = 0
    for seed in range(100):
        est = estimate_partition(model, UNIT_X, epsilon=FPRAS_EPS, p=FPRAS_P, rng=seed)
        assert est.samples_per_level == sample_size(FPRAS_EPS, est.levels, FPRAS_P)
        ok += (1 - FPRAS_EPS) * exact <= est.value <= (1 + FPRAS_EPS) * exact
        S = est.samples_per_level
        for rv in est.level_rel_var:
            # standard error of a sample variance ratio, taken as rv * sqrt(2 / (S - 1))
            var_bad += rv > math.exp(2 / FPRAS_P) + 3 * math.sqrt(2 / (S - 1)) * max(rv, 1e-3)
    elapsed = time.perf_counter() - start
    passed = ok >= FPRAS_MIN_OK and var_bad == 0 and elapsed <= 300
    report(8, "FPRAS contract", passed, f"{ok}/100 within (1 +- {FPRAS_EPS}), variance violations {var_bad}, {elapsed:.1f}s")


def test_09_taylor(report):
    rng = np.random.default_rng(9)
    worst = 0.0
    over = 0
    for space in (StructureSpace.multilabel(4), StructureSpace.multilabel(6), StructureSpace.ell_subsets(6, 2), StructureSpace.cliques(4), StructureSpace.subtrees([-1, 0, 0, 1, 1])):
        psi = embed_many(space, enumerate_small(space))
        for _ in range(20):
            w = rng.standard_normal(space.dim)
            w *= rng.uniform(0.1, 1.0) / np.abs(psi @ w).max()
            model = ExpFamilyModel(space, w)
            exact = exact_partition(model, [1.0])
            rel = abs(taylor_partition(space, w, [1.0]) - exact) / exact
            over += rel > taylor_remainder_bound(model, [1.0]) / exact + 1e-15
            worst = max(worst, rel)
    space = StructureSpace.multilabel(2)
    w = np.array([0.1, -0.1])
    example_err = abs(taylor_partition(space, w, [1.0]) - exact_partition(ExpFamilyModel(space, w), [1.0]))
    ok = over == 0 and example_err <= TAYLOR_EXAMPLE_ABS
    report(9, "Taylor partition approximation", ok, f"remainder violations {over}, worst rel {worst:.2e}, worked example error {example_err:.4f}")


def test_10_hoeffding(report):
    start = time.perf_counter()
    space = StructureSpace.multilabel(2)
    x = [1 / math.sqrt(2)]
    model = ExpFamilyModel(space, [0.6, -0.4])
    z = np.array([0.8, 0.6])
    ys, p = exact_distribution(model, x)
    truth = float(p @ (embed_many(space, ys) @ z) * x[0])
    S = hoeffding_sample_size(1.0, 1.0, HOEFFDING_EPS, HOEFFDING_DELTA)
    fails = sum(
        abs(hoeffding_gradient_dot(model, x, z, HOEFFDING_DELTA, HOEFFDING_EPS, rng=s) - truth) > HOEFFDING_EPS for s in range(500)
    )
    rate = fails / 500
    elapsed = time.perf_counter() - start
    report(10, "Hoeffding gradient estimate", rate <= HOEFFDING_DELTA + HOEFFDING_SLACK, f"S={S}, failure rate {rate:.3f}, {elapsed:.1f}s")


def test_11_dicycle_trend(report, tmp_path):
    start = time.perf_counter()
    config = ExperimentConfig.from_json(
        {"experiment": "dicycle", "seed": 11, "output": str(tmp_path), "trials": 5, "n": 15, "sigma_size": 10, "m": 400, "m_test": 500, "sizes": [50, 400]}
    )
    lines = run_experiment(config)["csv"].read_text().splitlines()[1:]
    cos = {}
    for line in lines:
        trial, m, _, _, c = line.split(",")
        cos[(int(trial), int(m))] = float(c)
    rising = [cos[(t, 400)] > cos[(t, 50)] for t in range(5)]
    elapsed = time.perf_counter() - start
    detail = ", ".join(f"{cos[(t, 50)]:.3f}->{cos[(t, 400)]:.3f}" for t in range(5))
    report(11, "dicycle policy cosine rises with m", all(rising) and elapsed <= 600, f"{sum(rising)}/5 seeds ({detail}), {elapsed:.1f}s")


def _cli_runs(root):
    """Every subcommand with fixed seeds; returns the result files it wrote."""
    root.mkdir(exist_ok=True)
    data, _ = planted_multilabel(30, 3, 3, 0.2, 12)
    write_dataset(root / "train.txt", data)
    (root / "ncg.json").write_text(json.dumps({"trainer": "ncg"}))
    (root / "sgd.json").write_text(json.dumps({"trainer": "sgd", "seed": 3}))
    (root / "exp.json").write_text(json.dumps({"experiment": "multilabel", "seed": 4, "output": "exp", "m": 30, "m_test": 20, "n": 3, "sigma_size": 3, "trials": 2}))
    r = str(root)
    runs = [
        ["count", "permutations:d=4", "-o", f"{r}/count.json"],
        ["train", f"{r}/train.txt", f"{r}/ncg.json", "-o", f"{r}/ncg_model.json"],
        ["train", f"{r}/train.txt", f"{r}/sgd.json", "-o", f"{r}/sgd_model.json", "--log", f"{r}/sgd_log.csv"],
        ["predict", f"{r}/ncg_model.json", f"{r}/train.txt", "-o", f"{r}/pred.txt"],
        ["sample", "multilabel:d=3", "--model", f"{r}/ncg_model.json", "--input", f"{r}/train.txt", "-n", "50", "--seed", "5", "-o", f"{r}/samples.txt", "--diagnostics", f"{r}/diag.json"],
        ["sample", "directed_cycles:N=5", "-n", "20", "--seed", "6", "-o", f"{r}/uniform.txt"],
        ["estimate-z", f"{r}/ncg_model.json", f"{r}/train.txt", "--seed", "7", "-o", f"{r}/z.json"],
        ["experiment", f"{r}/exp.json"],
    ]
    codes = [cli.main(argv) for argv in runs]
    outputs = ["count.json", "ncg_model.json", "sgd_model.json", "sgd_log.csv", "pred.txt", "samples.txt", "diag.json", "uniform.txt", "z.json"]
    files = [root / name for name in outputs] + sorted((root / "exp").iterdir())
    return codes, {str(p.relative_to(root)): p.read_bytes() for p in files}


def test_12_cli_determinism(report, tmp_path, monkeypatch):
    monkeypatch.setenv("COMBI_THREADS", "1")
    codes_a, files_a = _cli_runs(tmp_path)
    codes_b, files_b = _cli_runs(tmp_path)
    differing = [k for k in files_a if files_a[k] != files_b.get(k)]
    ok = set(codes_a) == {0} and codes_a == codes_b and files_a.keys() == files_b.keys() and not differing and len(files_a) >= 11
    report(12, "CLI determinism", ok, f"exit codes {codes_a}, {len(files_a)} files, differing {differing}")
