import math

import mpmath
import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from meltmon.errors import (
    DimensionMismatch,
    EmptyKernel,
    InsufficientSamples,
    LengthMismatch,
    MissingPartIds,
    UnknownLabelString,
)
from meltmon.mmht import (
    UNKNOWN,
    DefectMap,
    KernelSpec,
    build_layer_kernel,
    build_part_kernels,
    build_square_kernels,
    calibrate_unknown_floor,
    classify_kernels,
    classify_layer,
    confusion_matrix,
    kernel_log_likelihood,
    log_likelihood_point,
    point_log_likelihoods,
    posteriors,
    unknown_log_likelihood,
)
from meltmon.process_models import ModelSet, ProcessModel
from meltmon.sensor_data import StrikeSegmentedStream
from meltmon.simulator import ProcessSpec, exact_model, simulate_strikes

from _scenarios import NORMAL, bulk_specs, random_spd, train_set


def const_model(mean, cov, label="m", k_T=3) -> ProcessModel:
    mean = np.atleast_1d(np.asarray(mean, float))
    cov = np.atleast_2d(np.asarray(cov, float))
    S = mean.size
    return ProcessModel(label, k_T, np.tile(mean, (k_T, 1)), np.tile(cov, (k_T, 1, 1)), mean, cov,
                        np.full(k_T + 1, 100))


# --- independent dense-math oracle (explicit determinant and adjugate) ---------

def _det(A):
    n = len(A)
    if n == 1:
        return A[0][0]
    if n == 2:
        return A[0][0] * A[1][1] - A[0][1] * A[1][0]
    return (A[0][0] * (A[1][1] * A[2][2] - A[1][2] * A[2][1])
            - A[0][1] * (A[1][0] * A[2][2] - A[1][2] * A[2][0])
            + A[0][2] * (A[1][0] * A[2][1] - A[1][1] * A[2][0]))


def _inv(A):
    n = len(A)
    d = _det(A)
    if n == 1:
        return [[1.0 / d]]
    if n == 2:
        return [[A[1][1] / d, -A[0][1] / d], [-A[1][0] / d, A[0][0] / d]]
    inv = [[0.0] * 3 for _ in range(3)]
    for i in range(3):
        for j in range(3):
            minor = [[A[r][c] for c in range(3) if c != i] for r in range(3) if r != j]
            inv[i][j] = (-1) ** (i + j) * _det(minor) / d
    return inv


def oracle_loglik(x, mu, cov):
    S = len(x)
    A = [[float(cov[i][j]) for j in range(S)] for i in range(S)]
    Ai = _inv(A)
    d = [float(x[i] - mu[i]) for i in range(S)]
    quad = sum(d[i] * Ai[i][j] * d[j] for i in range(S) for j in range(S))
    return -0.5 * (S * math.log(2 * math.pi) + math.log(_det(A)) + quad)


def test_point_loglik_analytic_values():
    assert log_likelihood_point([0.0], const_model([0.0], [[1.0]]), 1) == pytest.approx(-0.9189385332046727, abs=1e-15)
    v = log_likelihood_point([1.0, 1.0], const_model([0.0, 0.0], np.eye(2)), 5)
    assert v == pytest.approx(-math.log(2 * math.pi) - 1, abs=1e-14)
    assert v == pytest.approx(-2.8378770664093453, abs=1e-14)


def test_point_loglik_matches_dense_oracle():
    rng = np.random.default_rng(42)
    for S in (1, 2, 3):
        for _ in range(50):
            cov = random_spd(rng, S)
            mu = rng.normal(size=S)
            x = mu + rng.normal(size=S) * 2
            got = log_likelihood_point(x, const_model(mu, cov), 2)
            assert got == pytest.approx(oracle_loglik(x, mu, cov), rel=1e-10)


def test_point_loglik_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        log_likelihood_point([1.0, 2.0, 3.0], const_model([0.0, 0.0], np.eye(2)), 1)


def test_kernel_loglik_product_law():
    m = const_model([0.1, 0.3], [[1.0, 0.2], [0.2, 0.5]])
    x = np.array([[0.4, -0.2]])
    single = log_likelihood_point(x[0], m, 2)
    assert kernel_log_likelihood(x, [2], m) == single
    assert kernel_log_likelihood(np.repeat(x, 3, axis=0), [2, 2, 2], m) == pytest.approx(3 * single, rel=1e-12)
    with pytest.raises(EmptyKernel):
        kernel_log_likelihood(np.zeros((0, 2)), [], m)


def test_kernel_loglik_brute_force_mixed_k():
    ms, _ = train_set(bulk_specs()[:1])
    m = ms.models[0]
    rng = np.random.default_rng(9)
    X = rng.normal(0.8, 0.1, size=(50, 2))
    k = rng.integers(1, 120, size=50)
    brute = sum(log_likelihood_point(X[i], m, int(k[i])) for i in range(50))
    assert kernel_log_likelihood(X, k, m) == pytest.approx(brute, rel=1e-9)


def test_unknown_loglik():
    assert unknown_log_likelihood(1, -2.5) == -2.5
    assert unknown_log_likelihood(100, -2.5) == -250.0
    with pytest.raises(EmptyKernel):
        unknown_log_likelihood(0, -1.0)


def test_posteriors_identical_models_tie():
    m1 = const_model([0.0], [[1.0]], "a")
    m2 = const_model([0.0], [[1.0]], "b")
    ms = ModelSet.build([m1, m2], -1e6)
    c = posteriors(np.array([[0.3], [-0.1]]), [1, 2], ms)
    np.testing.assert_allclose(c.posteriors, [0.5, 0.5, 0.0], atol=1e-12)
    assert c.map_index == 0 and c.map_label == "a"


def test_posteriors_match_exact_bayes_rule():
    mu, cov = np.array([0.2, -0.1]), np.array([[0.5, 0.1], [0.1, 0.3]])
    m = const_model(mu, cov, "only")
    floor = -3.0
    ms = ModelSet.build([m], floor, priors=[0.7, 0.3])
    X = np.array([[0.3, 0.0], [0.1, -0.4], [0.6, 0.2]])
    c = posteriors(X, [1, 2, 9], ms)
    # oracle: high-precision direct evaluation with densities, not logs
    mpmath.mp.dps = 50
    det = mpmath.mpf(cov[0, 0]) * cov[1, 1] - mpmath.mpf(cov[0, 1]) * cov[1, 0]
    inv = [[cov[1, 1] / det, -cov[0, 1] / det], [-cov[1, 0] / det, cov[0, 0] / det]]
    like = mpmath.mpf(1)
    for x in X:
        d = [mpmath.mpf(x[0]) - mu[0], mpmath.mpf(x[1]) - mu[1]]
        q = sum(d[i] * inv[i][j] * d[j] for i in range(2) for j in range(2))
        like *= mpmath.exp(-q / 2) / (2 * mpmath.pi * mpmath.sqrt(det))
    unk = mpmath.exp(3 * mpmath.mpf(floor))
    pm, pu = like * mpmath.mpf(0.7), unk * mpmath.mpf(0.3)
    expected = [float(pm / (pm + pu)), float(pu / (pm + pu))]
    np.testing.assert_allclose(c.posteriors, expected, rtol=1e-12)
    assert c.posteriors[0] > c.posteriors[1]


def test_far_process_is_unknown():
    ms, training = train_set(bulk_specs())
    sigma = 0.02
    far = NORMAL.shifted("far")
    far = ProcessSpec("far", tuple(np.array(NORMAL.amplitude) + 10 * sigma), NORMAL.offset, NORMAL.tau,
                      NORMAL.sigma, NORMAL.rho)
    hits = 0
    for t in range(100):
        s = simulate_strikes(far, 1, 60, seed=500 + t).stream
        hits += posteriors(s.intensity, s.k, ms).is_unknown
    assert hits >= 95


def test_posterior_errors():
    ms = ModelSet.build([const_model([0.0, 0.0], np.eye(2))], -5.0)
    with pytest.raises(EmptyKernel):
        posteriors(np.zeros((0, 2)), [], ms)
    with pytest.raises(DimensionMismatch):
        posteriors(np.zeros((3, 3)), [1, 2, 3], ms)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100.0))
def test_map_invariant_under_prior_rescaling(seed, scale):
    rng = np.random.default_rng(seed)
    models = [const_model(rng.normal(size=2), random_spd(rng, 2), f"m{i}") for i in range(3)]
    w = rng.uniform(0.1, 1.0, size=4)
    X = rng.normal(size=(int(rng.integers(1, 30)), 2))
    k = np.ones(X.shape[0], dtype=int)
    a = posteriors(X, k, ModelSet.build(models, -4.0, priors=w))
    b = posteriors(X, k, ModelSet.build(models, -4.0, priors=w * scale))
    assert a.map_index == b.map_index
    shifted = a.log_posteriors + rng.normal() * 100
    assert int(np.argmax(shifted)) == a.map_index
    assert abs(np.exp(a.log_posteriors).sum() - 1) < 1e-9


@pytest.mark.parametrize("N", [1, 1000, 1_000_000])
def test_posteriors_sum_to_one_large_kernels(N):
    ms, _ = train_set(bulk_specs())
    s = simulate_strikes(NORMAL, max(1, N // 1000), min(N, 1000), seed=N).stream
    c = classify_kernels(s, [build_layer_kernel(s)], ms)[0]
    assert abs(np.exp(c.log_posteriors).sum() - 1.0) < 1e-9


def test_kernel_loglik_additive_over_partitions():
    ms, _ = train_set(bulk_specs()[:1])
    m = ms.models[0]
    s = simulate_strikes(NORMAL, 20, 100, seed=3).stream
    rng = np.random.default_rng(1)
    mask = rng.random(len(s)) < 0.4
    whole = kernel_log_likelihood(s.intensity, s.k, m)
    parts = (kernel_log_likelihood(s.intensity[mask], s.k[mask], m)
             + kernel_log_likelihood(s.intensity[~mask], s.k[~mask], m))
    assert whole == pytest.approx(parts, rel=1e-9)


def test_classification_permutation_invariant():
    ms, _ = train_set(bulk_specs())
    s = simulate_strikes(bulk_specs()[3], 5, 80, seed=8).stream
    perm = np.random.default_rng(2).permutation(len(s))
    a = posteriors(s.intensity, s.k, ms)
    b = posteriors(s.intensity[perm], s.k[perm], ms)
    assert a.map_index == b.map_index
    np.testing.assert_allclose(a.log_posteriors, b.log_posteriors, atol=1e-9)


def test_steady_only_kernel_cannot_separate_transient_models():
    a = NORMAL
    b = ProcessSpec("slow", NORMAL.amplitude, NORMAL.offset, (4.0, 4.0), NORMAL.sigma, NORMAL.rho)
    ma, mb = exact_model(a, 45), exact_model(b.shifted("slow"), 45)
    s = simulate_strikes(a, 10, 200, seed=1).stream
    steady = s.k > 45
    la = kernel_log_likelihood(s.intensity[steady], s.k[steady], ma)
    lb = kernel_log_likelihood(s.intensity[steady], s.k[steady], mb)
    assert abs(la - lb) <= 1e-12 * abs(la)


# --- kernels ------------------------------------------------------------------

def _layer(x, y, part=None):
    n = len(x)
    return StrikeSegmentedStream(np.zeros(n), np.arange(1, n + 1), x, y, np.ones((n, 1)), part_id=part)


def test_square_single_cell():
    s = _layer([1.0, 1.1, 1.2], [2.0, 2.05, 2.1])
    ks = build_square_kernels(s, 0.39)
    assert len(ks) == 1 and ks[0].indices.tolist() == [0, 1, 2]


def test_square_boundary_goes_to_higher_cell():
    s = _layer([0.0, 0.5, 1.0, 2.0], [0.0, 0.0, 0.0, 0.0])
    ks = build_square_kernels(s, 0.5)
    owner = {int(i): kern.cell for kern in ks for i in kern.indices}
    assert owner[1] == (1, 0)
    assert owner[2] == (2, 0)
    assert owner[3] == (3, 0)  # on the far edge: last cell


def test_square_matches_point_in_box_oracle():
    rng = np.random.default_rng(12)
    x, y = rng.uniform(0, 10, 1000) + 5, rng.uniform(0, 10, 1000) + 5
    s = _layer(x, y)
    side = 0.39
    ks = build_square_kernels(s, side)
    x0, y0 = x.min(), y.min()
    nx, ny = math.ceil((x.max() - x0) / side), math.ceil((y.max() - y0) / side)
    expected = {}
    for i in range(nx):
        for j in range(ny):
            lo_x, hi_x = x0 + i * side, x0 + (i + 1) * side
            lo_y, hi_y = y0 + j * side, y0 + (j + 1) * side
            in_x = (x >= lo_x) & ((x < hi_x) | (i == nx - 1))
            in_y = (y >= lo_y) & ((y < hi_y) | (j == ny - 1))
            members = np.flatnonzero(in_x & in_y)
            if members.size:
                expected[(i, j)] = members.tolist()
    got = {kern.cell: sorted(kern.indices.tolist()) for kern in ks}
    assert got == expected
    assert sum(len(v) for v in got.values()) == 1000


def test_part_kernels_groupby_oracle():
    rng = np.random.default_rng(3)
    part = rng.choice([4, 9, 2], size=200)
    s = _layer(rng.uniform(0, 5, 200), rng.uniform(0, 5, 200), part)
    ks = build_part_kernels(s)
    assert [k.part_id for k in ks] == [2, 4, 9]
    groups = pd.Series(np.arange(200)).groupby(part).apply(list).to_dict()
    assert {k.part_id: k.indices.tolist() for k in ks} == groups
    with pytest.raises(MissingPartIds):
        build_part_kernels(_layer([1.0], [1.0]))


def test_empty_layer():
    ms, _ = train_set(bulk_specs()[:1])
    empty = StrikeSegmentedStream([], [], [], [], np.zeros((0, 2)))
    dm = classify_layer(empty, ms, KernelSpec("square"))
    assert isinstance(dm, DefectMap) and dm.label_index.size == 0
    assert classify_layer(empty, ms, KernelSpec("layer")) == []
    with pytest.raises(EmptyKernel):
        posteriors(empty.intensity, empty.k, ms)


def test_classify_threads_do_not_change_output():
    ms, _ = train_set(bulk_specs())
    s = simulate_strikes(bulk_specs()[2], 30, 100, seed=6, spacing_mm=0.05).stream
    a = classify_layer(s, ms, KernelSpec("square", 0.39), threads=1)
    b = classify_layer(s, ms, KernelSpec("square", 0.39), threads=4)
    np.testing.assert_array_equal(a.label_index, b.label_index)
    for ca, cb in zip(a.classifications, b.classifications):
        np.testing.assert_array_equal(ca.log_posteriors, cb.log_posteriors)


def test_defect_map_exports(tmp_path):
    ms, _ = train_set(bulk_specs())
    s = simulate_strikes(NORMAL, 10, 60, seed=6, spacing_mm=0.05, origin=(3.0, 3.0)).stream
    dm = classify_layer(s, ms, KernelSpec("square", 0.39))
    dm.to_csv(tmp_path / "m.csv")
    rows = (tmp_path / "m.csv").read_text().splitlines()
    assert rows[0] == "i,j,x_center_mm,y_center_mm,label,margin"
    assert len(rows) == 1 + dm.grid.nx * dm.grid.ny
    assert all(r.split(",")[4] in ("normal", "NO_DATA") for r in rows[1:])
    dm.to_pgm(tmp_path / "m.pgm")
    pgm = (tmp_path / "m.pgm").read_text().splitlines()
    assert pgm[0] == "P2" and pgm[2] == f"{dm.grid.nx} {dm.grid.ny}"
    assert len(pgm) == 4 + dm.grid.ny


# --- unknown floor calibration -----------------------------------------------

def _oracle_quantile(values, q):
    v = sorted(values)
    pos = q * (len(v) - 1)
    lo = math.floor(pos)
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (pos - lo) * (v[hi] - v[lo])


def test_calibrate_matches_sort_oracle():
    tr = simulate_strikes(NORMAL, 40, 100, seed=2).stream
    ms, _ = train_set([NORMAL])
    m = ms.models[0]
    ll = point_log_likelihoods(tr.intensity, tr.k, m)
    for q in (0.001, 0.01, 0.2, 0.5):
        assert calibrate_unknown_floor(tr, m, q) == pytest.approx(_oracle_quantile(ll.tolist(), q), rel=1e-12)
    assert calibrate_unknown_floor(tr, m, 0.5) == pytest.approx(np.median(ll), rel=1e-12)


def test_calibrate_constant_data():
    m = const_model([1.0], [[0.04]])
    n = 2000
    s = StrikeSegmentedStream(np.zeros(n), np.arange(1, n + 1), np.zeros(n), np.zeros(n), np.full((n, 1), 1.2))
    assert calibrate_unknown_floor(s, m, 0.001) == pytest.approx(log_likelihood_point([1.2], m, 1), rel=1e-12)
    with pytest.raises(InsufficientSamples):
        calibrate_unknown_floor(s.select(np.arange(100)), m, 0.001)
    with pytest.raises(ValueError):
        calibrate_unknown_floor(s, m, 0.7)


def test_calibrated_floor_keeps_normal_kernels_normal():
    ms, _ = train_set(bulk_specs())
    hits = 0
    for t in range(1000):
        s = simulate_strikes(NORMAL, 1, 40, seed=10_000 + t).stream
        hits += posteriors(s.intensity, s.k, ms).map_label == "normal"
    assert hits >= 990


# --- confusion matrix ---------------------------------------------------------

def test_confusion_perfect_and_single_column():
    labels = ["a", "b", UNKNOWN]
    truth = ["a", "b", "a", UNKNOWN]
    cm = confusion_matrix(truth, truth, labels)
    np.testing.assert_array_equal(cm.rates, np.eye(3))
    assert cm.accuracy == 1.0
    cm = confusion_matrix(["b"] * 4, truth, labels)
    assert cm.counts[:, 1].sum() == 4 and cm.counts[:, [0, 2]].sum() == 0


def test_confusion_random_vs_tally():
    rng = np.random.default_rng(0)
    labels = ["n", "p", "s", UNKNOWN]
    pred = rng.choice(labels, 300).tolist()
    truth = rng.choice(labels, 300).tolist()
    cm = confusion_matrix(pred, truth, labels)
    for i, t in enumerate(labels):
        for j, p in enumerate(labels):
            assert cm.counts[i, j] == sum(1 for a, b in zip(truth, pred) if a == t and b == p)
    assert cm.accuracy == pytest.approx(np.trace(cm.counts) / 300)


def test_confusion_errors():
    with pytest.raises(LengthMismatch):
        confusion_matrix(["a"], [], ["a"])
    with pytest.raises(UnknownLabelString):
        confusion_matrix(["zz"], ["a"], ["a"])
