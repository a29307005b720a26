import numpy as np
import pytest

from meltmon.errors import DataError, EmptyBuild, EmptyRegion, FootprintOutsideEnvelope
from meltmon.simulator import (
    AnomalySpec,
    BuildSpec,
    LaserParams,
    PartSpec,
    ProcessSpec,
    _rng,
    inject_local_anomaly,
    load_build_spec,
    read_truth_csv,
    simulate_build,
    simulate_strikes,
    synthetic_defect_scores,
    write_truth_csv,
)

from _scenarios import NORMAL

CONFIG = __import__("pathlib").Path(__file__).resolve().parents[1] / "configs" / "bulk_shift_build.ini"


def square(x0, y0, side):
    return ((x0, y0), (x0 + side, y0), (x0 + side, y0 + side), (x0, y0 + side))


def small_build(seed=11, layers=1, process=NORMAL, anomalies=()):
    parts = (PartSpec(1, square(1.0, 1.0, 2.0), process), PartSpec(2, square(4.0, 1.0, 2.0), process))
    return BuildSpec(parts, seed=seed, layers=layers, anomalies=anomalies)


def test_noise_free_limit_equals_generating_mean():
    spec = ProcessSpec("z", (1.0, 0.6), (0.2, 0.1), (8.0, 5.0), (1e-12, 1e-12), 0.3)
    b = simulate_strikes(spec, 3, 100, seed=1).stream
    a, off, tau = np.array([1.0, 0.6]), np.array([0.2, 0.1]), np.array([8.0, 5.0])
    expected = off + a * (1 - np.exp(-b.k[:, None] / tau))
    np.testing.assert_allclose(b.intensity, expected, atol=1e-6)


def test_bulk_shift_maps():
    a0 = np.array(NORMAL.amplitude)
    a, b, tau = NORMAL.shifted("p", power_shift=0.1).shape()
    np.testing.assert_allclose(a, a0 * 1.1)
    a, b, tau = NORMAL.shifted("s", speed_shift=0.1).shape()
    np.testing.assert_allclose(a, a0 / 1.1)
    np.testing.assert_allclose(tau, np.array(NORMAL.tau) * 1.1)
    h = NORMAL.shifted("h", hatch_shift=0.2)
    np.testing.assert_array_equal(h.mean_at([1, 50]), NORMAL.mean_at([1, 50]))


def test_same_seed_bit_identical():
    a, b = simulate_build(small_build()), simulate_build(small_build())
    np.testing.assert_array_equal(a.stream.intensity, b.stream.intensity)
    np.testing.assert_array_equal(a.stream.x_mm, b.stream.x_mm)
    np.testing.assert_array_equal(a.truth, b.truth)
    c = simulate_build(small_build(seed=12))
    assert not np.array_equal(a.stream.intensity, c.stream.intensity)


def test_layer_streams_do_not_depend_on_layer_count():
    one = simulate_build(small_build(layers=1)).stream
    three = simulate_build(small_build(layers=3)).stream
    first = three.select(three.layer == 0)
    np.testing.assert_array_equal(one.intensity, first.intensity)


def test_fixed_k_statistics_within_five_standard_errors():
    n, k = 100_000, 5
    X = NORMAL.draw(np.full(n, k), _rng(77, 1, 2))
    mu = NORMAL.mean_at([k])[0]
    cov = NORMAL.covariance()
    se_mean = np.sqrt(np.diag(cov) / n)
    assert np.all(np.abs(X.mean(axis=0) - mu) < 5 * se_mean)
    C = np.cov(X, rowvar=False)
    se_cov = np.sqrt((np.outer(np.diag(cov), np.diag(cov)) + cov ** 2) / n)
    assert np.all(np.abs(C - cov) < 5 * se_cov)


def test_build_layout():
    b = simulate_build(small_build(layers=2))
    s = b.stream
    assert set(np.unique(s.part_id)) == {1, 2}
    assert set(np.unique(s.layer)) == {0, 1}
    inside1 = (s.x_mm >= 1) & (s.x_mm <= 3) & (s.y_mm >= 1) & (s.y_mm <= 3)
    assert np.all(inside1 == (s.part_id == 1))
    # hatch lines at spacing 0.1 mm, samples at speed / rate
    ys = np.unique(s.y_mm[s.part_id == 1])
    np.testing.assert_allclose(np.diff(ys), 0.1, atol=1e-9)
    strike0 = s.x_mm[s.strike_id == s.strike_id[0]]
    np.testing.assert_allclose(np.abs(np.diff(strike0)), 1000 / 60000, rtol=1e-9)
    assert np.all(b.truth == "normal")


def test_hatch_shift_changes_line_spacing():
    b = simulate_build(small_build(process=NORMAL.shifted("hatch+20%", hatch_shift=0.2))).stream
    ys = np.unique(b.y_mm[b.part_id == 1])
    np.testing.assert_allclose(np.diff(ys), 0.12, atol=1e-9)


def test_build_errors():
    with pytest.raises(EmptyBuild):
        simulate_build(BuildSpec((), seed=1))
    bad = BuildSpec((PartSpec(1, square(249.0, 1.0, 2.0), NORMAL),), seed=1)
    with pytest.raises(FootprintOutsideEnvelope):
        simulate_build(bad)
    with pytest.raises(DataError):
        ProcessSpec("x", (1.0,), (0.0,), (0.0,), (0.1,))


def test_anomaly_empty_region():
    b = simulate_build(small_build())
    with pytest.raises(EmptyRegion):
        inject_local_anomaly(b, (100.0, 100.0, 101.0, 101.0), NORMAL.shifted("hot", power_shift=0.5), seed=1)


def test_anomaly_full_region_matches_full_anomaly_build():
    hot = NORMAL.shifted("hot", power_shift=0.5)
    base = simulate_build(small_build())
    injected = inject_local_anomaly(base, (0.0, 0.0, 250.0, 250.0), hot, seed=1)
    full = simulate_build(small_build(process=hot))
    np.testing.assert_array_equal(injected.truth, full.truth)
    np.testing.assert_array_equal(injected.stream.k, full.stream.k)
    np.testing.assert_array_equal(injected.stream.x_mm, full.stream.x_mm)
    # same law, different draws: per-channel means agree within 5 standard errors
    se = np.array(hot.sigma) / np.sqrt(len(full.stream))
    diff = injected.stream.intensity.mean(axis=0) - full.stream.intensity.mean(axis=0)
    assert np.all(np.abs(diff) < 5 * np.sqrt(2) * se)


def test_anomaly_partial_region_matches_point_in_rectangle_oracle():
    hot = NORMAL.shifted("hot", power_shift=0.5)
    base = simulate_build(small_build())
    region = (1.5, 1.2, 4.5, 2.0)
    out = inject_local_anomaly(base, region, hot, seed=1)
    expected = sum(1 for x, y in zip(base.stream.x_mm, base.stream.y_mm)
                   if region[0] <= x <= region[2] and region[1] <= y <= region[3])
    assert (out.truth == "hot").sum() == expected > 0
    untouched = out.truth == "normal"
    np.testing.assert_array_equal(out.stream.intensity[untouched], base.stream.intensity[untouched])
    # build-level anomalies go through the same path
    spec = small_build(anomalies=(AnomalySpec(region, hot),))
    np.testing.assert_array_equal(simulate_build(spec).truth, out.truth)


def test_truth_csv_roundtrip(tmp_path):
    b = simulate_build(small_build())
    write_truth_csv(b, tmp_path / "t.csv")
    np.testing.assert_array_equal(read_truth_csv(tmp_path / "t.csv"), b.truth)


def test_synthetic_defect_scores():
    nominal = LaserParams(200.0, 1000.0, 0.0, 0.1)
    laser = [nominal, LaserParams(240.0, 1000.0, 0.0, 0.1), LaserParams(160.0, 1000.0, 0.0, 0.12)]
    a = synthetic_defect_scores(laser, nominal, seed=3, noise=0.0)
    assert a["pore"][1] > a["pore"][0] == pytest.approx(0.01)
    assert a["lack_of_fusion"][2] > a["lack_of_fusion"][0]
    b = synthetic_defect_scores(laser, nominal, seed=3)
    for v in b.values():
        assert np.all((v >= 0) & (v <= 1))
    assert all(np.array_equal(b[k], synthetic_defect_scores(laser, nominal, seed=3)[k]) for k in b)


def test_load_example_config():
    spec = load_build_spec(CONFIG)
    assert spec.layers == 3 and len(spec.parts) == 15
    labels = [p.label for p in spec.processes()]
    assert labels[0] == "normal" and "power+10%" in labels
    assert spec.parts[0].process.power_shift in (0.0, 0.1, -0.1)


def test_config_requires_seed(tmp_path):
    p = tmp_path / "b.ini"
    p.write_text("[build]\nlayers = 1\n")
    with pytest.raises(DataError):
        load_build_spec(p)
    p.write_text("[build]\nseed = 1\n[part 1]\nprocess = ghost\nfootprint = 0,0 1,0 1,1\n")
    with pytest.raises(DataError):
        load_build_spec(p)
