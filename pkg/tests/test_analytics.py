import json
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.stats import ortho_group

from bertswin.analytics import (EmbeddingLabel, EmbeddingSet, bca_bootstrap_ci, dice, effective_rank,
                                geometric_views, labels_to_grid, mann_whitney_u, pearson_sim, percentile_ci,
                                probe_head_train, probe_report_json, probe_report_text, probe_suite,
                                wilcoxon_signed_rank)
from bertswin.errors import ContractError

from oracles import mwu_enumeration, wilcoxon_enumeration

vec = arrays(np.float64, 12, elements=st.floats(-100, 100))


# ---------------------------------------------------------------------------
# Pearson similarity
# ---------------------------------------------------------------------------

def test_pearson_examples():
    u = np.array([1.0, 2.0, 3.0, 5.0])
    assert pearson_sim(u, u) == pytest.approx(1.0)
    assert pearson_sim(u, -2 * u + 3) == pytest.approx(-1.0)
    assert pearson_sim([1, 2, 3], [1, 3, 2]) == pytest.approx(0.5, abs=1e-15)


def test_pearson_degenerate():
    assert math.isnan(pearson_sim([2.0, 2.0], [5.0, 5.0]))
    assert pearson_sim([2.0, 2.0], [1.0, 5.0]) == 0.0
    with pytest.raises(ContractError):
        pearson_sim([1.0], [1.0])


@given(vec, vec, st.floats(1e-3, 1e3), st.floats(-1e3, 1e3))
def test_pearson_positive_affine_invariance(u, v, a, b):
    assume(np.std(u) > 1e-3 and np.std(v) > 1e-3)
    assert abs(pearson_sim(a * u + b, v) - pearson_sim(u, v)) <= 1e-12
    assert abs(pearson_sim(u, a * v + b) - pearson_sim(u, v)) <= 1e-12


# ---------------------------------------------------------------------------
# effective rank
# ---------------------------------------------------------------------------

def isotropic_sample(d, n_per_axis=1):
    """Points +-e_i: the population covariance is exactly (2/n) I."""
    eye = np.eye(d)
    return np.concatenate([eye, -eye] * n_per_axis)


def test_effective_rank_isotropic():
    for d in (1, 2, 5, 16):
        assert abs(effective_rank(isotropic_sample(d)) - d) <= 1e-8


def test_effective_rank_two_equal_eigenvalues():
    X = np.zeros((4, 6))
    X[:, :2] = isotropic_sample(2)
    assert effective_rank(X) == pytest.approx(2.0, abs=1e-12)


def test_effective_rank_vs_dense_eigensolver():
    X = np.random.default_rng(0).normal(size=(10, 6))
    cov = np.cov(X, rowvar=False, bias=True)
    lam = np.linalg.eig(cov)[0].real          # general solver, independent of the symmetric one
    p = lam[lam > 1e-14] / lam[lam > 1e-14].sum()
    assert abs(effective_rank(X) - np.exp(-(p * np.log(p)).sum())) <= 1e-8


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(2, 8))
def test_effective_rank_rotation_invariant_and_bounded(seed, d):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(12, d)) * rng.uniform(0.1, 3, size=d)
    Q = ortho_group.rvs(d, random_state=seed)
    r = effective_rank(X)
    assert abs(effective_rank(X @ Q) - r) <= 1e-8
    assert 1.0 - 1e-12 <= r <= d + 1e-12


def test_effective_rank_errors():
    with pytest.raises(ContractError):
        effective_rank(np.ones((5, 3)))
    with pytest.raises(ContractError):
        effective_rank(np.ones((1, 3)))


# ---------------------------------------------------------------------------
# rank tests
# ---------------------------------------------------------------------------

def test_mwu_examples():
    u, p = mann_whitney_u([1, 2], [3, 4])
    assert u == 0 and p == pytest.approx(1 / 3)
    u, p = mann_whitney_u([1, 2, 3], [1, 2, 3])
    assert p == pytest.approx(1.0)


def test_mwu_large_shift_significant():
    rng = np.random.default_rng(0)
    _, p = mann_whitney_u(rng.normal(size=60), rng.normal(size=60) + 2.0)
    assert p < 0.001


def test_wilcoxon_examples():
    w, p = wilcoxon_signed_rank([1, 2, 3, 4, 5])
    assert w == 0 and p == pytest.approx(2 / 32)
    w, p = wilcoxon_signed_rank([1.5, -1.5, 2.5, -2.5, 4.0, -4.0])
    assert p == pytest.approx(1.0)
    with pytest.raises(ContractError):
        wilcoxon_signed_rank([1, 2, 0, 0, 3, 4])


def rank_tests_vs_enumeration(seed=0, reps=2):
    """Worst absolute difference (U or W, p) against enumeration for every size up to 12."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for rep in range(reps):
        for na in range(1, 12):
            for nb in range(1, 13 - na):
                a = rng.integers(0, 6, na) if rep % 2 else rng.normal(size=na)
                b = rng.integers(0, 6, nb) + 1 if rep % 2 else rng.normal(size=nb) + 0.5
                u, p = mann_whitney_u(a, b)
                ue, pe = mwu_enumeration(list(a), list(b))
                worst = max(worst, abs(u - ue), abs(p - pe))
        for n in range(5, 13):
            d = rng.integers(-4, 5, n).astype(float) if rep % 2 else rng.normal(size=n) + 0.3
            if np.count_nonzero(d) < 5:
                continue
            w, p = wilcoxon_signed_rank(d)
            we, pe = wilcoxon_enumeration(list(d))
            worst = max(worst, abs(w - we), abs(p - pe))
    return worst


def test_rank_tests_match_enumeration():
    assert rank_tests_vs_enumeration(reps=2) <= 1e-12


def test_wilcoxon_n10_random_pairs_exact():
    rng = np.random.default_rng(7)
    d = rng.normal(size=10) - rng.normal(size=10)
    assert wilcoxon_signed_rank(d) == pytest.approx(wilcoxon_enumeration(list(d)), abs=1e-12)


def _normal_branch_p(test, *args):
    import bertswin.analytics as A
    old = A.EXACT_LIMIT
    A.EXACT_LIMIT = 0
    try:
        return test(*args)[1]
    finally:
        A.EXACT_LIMIT = old


def test_normal_approximation_at_boundary():
    # approximation vs enumeration at the n = 12 boundary, where the p-value is not tiny
    rng = np.random.default_rng(3)
    checked = 0
    for _ in range(200):
        a, b = rng.normal(size=6), rng.normal(size=6) + rng.uniform(0, 1.5)
        exact = mann_whitney_u(a, b)[1]
        if exact < 0.05:
            continue
        approx = _normal_branch_p(mann_whitney_u, a, b)
        assert abs(approx - exact) <= 0.10 * exact
        d = rng.normal(size=12) + rng.uniform(0, 0.8)
        exact_w = wilcoxon_signed_rank(d)[1]
        if exact_w >= 0.05:
            assert abs(_normal_branch_p(wilcoxon_signed_rank, d) - exact_w) <= 0.10 * exact_w
        checked += 1
    assert checked > 50


# ---------------------------------------------------------------------------
# bootstrap
# ---------------------------------------------------------------------------

def test_bca_constant_collapses():
    assert bca_bootstrap_ci(np.full(20, 0.7), n_boot=999) == (0.7, 0.7)


def test_bca_deterministic_and_ordered():
    x = np.random.default_rng(0).exponential(size=30)
    a = bca_bootstrap_ci(x, n_boot=999, seed=4)
    assert a == bca_bootstrap_ci(x, n_boot=999, seed=4)
    assert a[0] <= a[1]


def bca_coverage(n_draws=100, n=40, n_boot=9999, seed=0):
    """Draws from a skewed continuous law whose CI brackets the sample median."""
    rng = np.random.default_rng(seed)
    hits = 0
    for i in range(n_draws):
        x = rng.exponential(size=n)
        lo, hi = bca_bootstrap_ci(x, np.median, n_boot=n_boot, seed=i)
        hits += lo <= np.median(x) <= hi
    return hits


def test_bca_brackets_statistic():
    assert bca_coverage(n_draws=20, n_boot=1999) >= 19


def test_bca_matches_percentile_on_symmetric_case():
    z = np.random.default_rng(5).normal(size=40)
    x = np.concatenate([z, -z])                  # symmetric: no bias, zero jackknife skew
    bca = bca_bootstrap_ci(x, np.mean, n_boot=9999, seed=1)
    pct = percentile_ci(x, np.mean, n_boot=9999, seed=1)
    width = pct[1] - pct[0]
    assert abs(bca[0] - pct[0]) < 0.05 * width and abs(bca[1] - pct[1]) < 0.05 * width


def test_bca_needs_ten_samples():
    with pytest.raises(ContractError):
        bca_bootstrap_ci(np.arange(5.0))


# ---------------------------------------------------------------------------
# probe suite
# ---------------------------------------------------------------------------

def synthetic_set(n_phantoms, dim, rng, identical=False):
    vecs, labels = [], []
    for p in range(n_phantoms):
        base = rng.normal(size=dim)
        for lab in (EmbeddingLabel(p, "right", "orig"), EmbeddingLabel(p, "left", "mirror"),
                    EmbeddingLabel(p, "right", "mirror"), EmbeddingLabel(p, "right", "geo:flip0"),
                    EmbeddingLabel(p, "right", "geo:scale")):
            vecs.append(np.ones(dim) * np.arange(dim) if identical else base + 0.3 * rng.normal(size=dim))
            labels.append(lab)
    return EmbeddingSet(np.array(vecs), labels)


def test_probe_suite_identical_embeddings_all_one():
    E = synthetic_set(5, 8, np.random.default_rng(0), identical=True)
    for r in probe_suite(E, n_boot=199):
        assert np.allclose(r.samples, 1.0)


def test_probe_suite_random_inter_patient_near_zero():
    rng = np.random.default_rng(1)
    n, dim = 120, 64
    E = EmbeddingSet(rng.normal(size=(n + 3, dim)),
                     [EmbeddingLabel(i, "right", "orig") for i in range(n)]
                     + [EmbeddingLabel(0, "left", "mirror"), EmbeddingLabel(0, "right", "mirror"),
                        EmbeddingLabel(0, "right", "geo:flip0")])
    by = {r.name: r for r in probe_suite(E, n_boot=199)}
    assert abs(by["Inter-Patient"].median) < 0.2


def test_probe_suite_deterministic_and_reports():
    E = synthetic_set(6, 10, np.random.default_rng(2))
    a, b = probe_suite(E, seed=3, n_boot=499), probe_suite(E, seed=3, n_boot=499)
    assert probe_report_json(a) == probe_report_json(b)       # text compare: NaN CIs on short lists
    assert [r.name for r in a] == ["Geometric Invariance", "Inter-Patient", "Intra-Patient", "Symmetry"]
    geo = a[0].extra
    assert set(geo["per_transform_median"]) == {"flip0", "scale"}
    lines = probe_report_json(a).splitlines()
    assert len(lines) == 4 and json.loads(lines[2])["name"] == "Intra-Patient"
    assert "Symmetry" in probe_report_text(a, dim=10, r_eff=3.0)


def test_probe_suite_missing_pairing():
    E = EmbeddingSet(np.eye(3), [EmbeddingLabel(i, "right", "orig") for i in range(3)])
    with pytest.raises(ContractError, match="Geometric Invariance"):
        probe_suite(E, n_boot=99)


def test_geometric_views():
    vol = np.random.default_rng(0).normal(size=(4, 4, 4))
    views = geometric_views(vol, 0, 1)
    assert set(views) == {"flip0", "flip1", "rot90", "rot180", "scale", "shift"}
    ratio = views["scale"] / vol
    assert 0.9 <= ratio.flat[0] <= 1.1 and np.allclose(ratio, ratio.flat[0])
    assert np.array_equal(views["rot180"], vol[:, ::-1, ::-1])


# ---------------------------------------------------------------------------
# Dice and probe heads
# ---------------------------------------------------------------------------

def test_dice_examples():
    a = np.array([1, 1, 1, 1, 0, 0, 0, 0], bool)
    b = np.array([1, 1, 0, 0, 1, 1, 0, 0], bool)
    assert dice(a, a) == 1.0
    assert dice(a, ~a) == 0.0
    assert dice(a, b) == 0.5
    assert dice(np.zeros(3, bool), np.zeros(3, bool)) == 1.0
    with pytest.raises(ContractError):
        dice(a, a[:4])


@given(arrays(np.bool_, 20), arrays(np.bool_, 20))
def test_dice_symmetric(a, b):
    assert dice(a, b) == dice(b, a)
    assert 0.0 <= dice(a, b) <= 1.0


def test_labels_to_grid_majority():
    lab = np.zeros((4, 4, 4), int)
    lab[:2, :2, :2] = 1
    lab[2:, 2:, 2:] = 2
    lab[2:, 2:, 2] = 0               # 4 of 8 voxels: tie between 0 and 2 goes to 0
    grid = labels_to_grid(lab, 2)
    assert grid.tolist() == [1, 0, 0, 0, 0, 0, 0, 0]


def test_probe_head_constant_background():
    X = np.random.default_rng(0).normal(size=(50, 4))
    res = probe_head_train(X, np.zeros(50, int), steps=200, lr=1e-2)
    assert res.dice[0] == 1.0


@pytest.mark.parametrize("head", ["linear", "two_layer"])
def test_probe_head_separable(head):
    rng = np.random.default_rng(2)
    y = rng.integers(0, 3, 300)
    centres = np.array([[4.0, 0, 0, 0], [0, 4.0, 0, 0], [0, 0, 4.0, 0]])
    X = centres[y] + 0.3 * rng.normal(size=(300, 4))
    yv = rng.integers(0, 3, 100)
    Xv = centres[yv] + 0.3 * rng.normal(size=(100, 4))
    res = probe_head_train(X, y, head=head, steps=200, val_features=Xv, val_labels=yv, lr=1e-2)
    assert min(res.dice.values()) > 0.99
    assert res.losses[-1] < res.losses[0]


def test_probe_head_shape_mismatch():
    with pytest.raises(ContractError):
        probe_head_train(np.zeros((5, 3)), np.zeros(4, int), steps=1)
    with pytest.raises(ContractError):
        probe_head_train(np.zeros((5, 3)), np.zeros(5, int), head="mlp3", steps=1)
