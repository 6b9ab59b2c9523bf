import json
import math
from statistics import NormalDist

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from trmflow import metrics
from trmflow.errors import DataError, DimensionError
from trmflow.pipeline import baseline_last_value

positive = arrays(np.float64, st.integers(1, 30), elements=st.floats(0.01, 10.0))


def test_rmse_examples():
    a = np.array([[0.0, 0.0], [3.0, 4.0]])
    assert metrics.rmse(a, a) == 0.0
    assert metrics.rmse(a + 0.1, a) == pytest.approx(0.1, rel=1e-12)
    assert metrics.rmse(a, np.zeros((2, 2))) == 2.5
    with pytest.raises(DimensionError):
        metrics.rmse(a, np.zeros(4))


def test_mape_examples():
    assert metrics.mape([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert metrics.mape([1.1, 1.8], [1.0, 2.0]) == pytest.approx(10.0, rel=1e-12)
    value, used, excluded = metrics.mape_counted([1.1, 5.0, 1.8], [1.0, 0.0, 2.0])
    assert value == pytest.approx(10.0, rel=1e-12) and (used, excluded) == (2, 1)
    with pytest.raises(DataError):
        metrics.mape([1.0], [0.0])


@given(positive, st.floats(0.1, 10.0), st.integers(0, 2**31 - 1))
def test_permutation_and_scaling(truth, k, seed):
    rng = np.random.default_rng(seed)
    pred = truth * rng.uniform(0.5, 1.5, truth.shape)
    perm = rng.permutation(truth.size)
    assert metrics.rmse(pred[perm], truth[perm]) == pytest.approx(metrics.rmse(pred, truth), rel=1e-12)
    assert metrics.mape(pred[perm], truth[perm]) == pytest.approx(metrics.mape(pred, truth), rel=1e-12)
    assert metrics.rmse(k * pred, k * truth) == pytest.approx(k * metrics.rmse(pred, truth), rel=1e-12)
    assert metrics.mape(k * pred, k * truth) == pytest.approx(metrics.mape(pred, truth), rel=1e-12)


def test_horizon_mape_examples():
    rng = np.random.default_rng(0)
    truth = rng.uniform(0.05, 0.3, (2, 3, 4))
    assert all(v == 0 for v in metrics.horizon_mape(truth, truth).values())
    pred = truth * rng.uniform(0.8, 1.2, truth.shape)
    h1 = metrics.horizon_mape(pred, truth, horizons=[1])[1]
    assert h1 == metrics.mape(np.vstack([pred[0, 0], pred[1, 0]]), np.vstack([truth[0, 0], truth[1, 0]]))
    cols = metrics.horizon_mape(pred, truth, columns=[1, 3])
    assert cols[2] == metrics.mape(pred[:, 1, [1, 3]], truth[:, 1, [1, 3]])
    with pytest.raises(DataError):
        metrics.horizon_mape(pred, truth, horizons=[4])
    with pytest.raises(DataError):
        metrics.horizon_mape(pred, truth, horizons=[0])


def test_horizon_mape_on_constant_baseline():
    past = np.full((3, 5, 2), 0.2)
    truth = np.full((3, 4, 2), 0.2)
    assert all(v == 0 for v in metrics.horizon_mape(baseline_last_value(past, 4), truth).values())


@given(st.integers(0, 2**31 - 1))
def test_sample_weighted_horizons_equal_overall(seed):
    rng = np.random.default_rng(seed)
    truth = rng.uniform(0.05, 0.3, (5, 4, 3))
    pred = truth + rng.normal(0, 0.02, truth.shape)
    per_h = metrics.horizon_mape(pred, truth)
    # with no exclusions each horizon holds the same number of entries
    assert np.mean(list(per_h.values())) == pytest.approx(metrics.mape(pred, truth), rel=1e-12)


def test_per_interface_examples():
    rng = np.random.default_rng(1)
    truth = rng.uniform(0.05, 0.3, (4, 3, 5))
    assert np.all(metrics.per_interface_mape(truth, truth) == 0)
    pred = truth.copy()
    pred[:, :, 2] *= 1.1
    got = metrics.per_interface_mape(pred, truth)
    assert np.flatnonzero(got).tolist() == [2]
    assert got[2] == pytest.approx(10.0, rel=1e-12)
    noisy = truth * rng.uniform(0.9, 1.1, truth.shape)
    expected = [metrics.mape(noisy[..., j], truth[..., j]) for j in range(5)]
    np.testing.assert_array_equal(metrics.per_interface_mape(noisy, truth), expected)


def test_smoothing_examples():
    m = np.random.default_rng(2).uniform(0, 1, 50)
    s = metrics.smoothing_stats(m, m)
    assert s.bias == 0 and s.sd == 0 and all(v == 0 for v in s.quantiles.values())
    alt = metrics.smoothing_stats(m + np.tile([1.0, -1.0], 25), m)
    assert alt.bias == pytest.approx(0.0, abs=1e-14)
    assert alt.sd == pytest.approx(1.0, rel=1e-12)
    assert sum(alt.hist_counts) == 50 and len(alt.hist_edges) == 31
    with pytest.raises(DataError):
        metrics.smoothing_stats([1.0], [1.0])


@pytest.mark.parametrize("p,z", [(0.5, 0.0), (0.975, 1.959963984540054), (0.001, -3.090232306167813)])
def test_inverse_normal_accuracy(p, z):
    assert abs(NormalDist().inv_cdf(p) - z) <= 4.5e-4
    n = 1000
    i = round(p * n + 0.5)
    assert metrics.normal_quantiles(n)[i - 1] == pytest.approx(NormalDist().inv_cdf((i - 0.5) / n))


def test_normal_quantiles_symmetric():
    q = metrics.normal_quantiles(101)
    np.testing.assert_allclose(q, -q[::-1], atol=1e-12)
    assert q[50] == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_qq_of_normal_sample_hugs_diagonal(seed):
    x = np.random.default_rng(seed).standard_normal(10_000)
    s = metrics.smoothing_stats(x, np.zeros_like(x), qq_points=None)
    theo, emp = np.array(s.qq).T
    # the outermost order statistics have sd ~0.3, so the band applies to the central 99%
    n = theo.size
    central = slice(int(0.005 * n), n - int(0.005 * n))
    assert np.max(np.abs(emp[central] - theo[central])) < 0.15


def test_qq_thinning():
    x = np.random.default_rng(0).standard_normal(1000)
    s = metrics.smoothing_stats(x, np.zeros_like(x), qq_points=200)
    assert len(s.qq) == 200
    assert s.qq[0][1] == pytest.approx((np.sort(x)[0] - x.mean()) / x.std())


def _report(tmp_path=None):
    rng = np.random.default_rng(3)
    truth = rng.uniform(0.05, 0.3, (6, 3, 5))
    pred = truth * rng.uniform(0.9, 1.1, (6, 3, 6))[..., :5]
    pred = np.concatenate([pred, rng.uniform(0.05, 0.3, (6, 3, 1))], axis=2)
    measured = rng.uniform(0.05, 0.3, (6, 4, 3))
    return metrics.build_report(
        pred,
        truth,
        truth_columns=[0, 1, 2, 3, 4],
        observed=[0, 2, 4],
        hidden=[1, 3],
        baseline=truth[:, :, [0, 2, 4]] * 1.2,
        smoothed=measured + 0.01,
        measured=measured,
        clipped=2,
    )


def test_build_report_fields():
    r = _report()
    assert r.interface_tags == ["observed", "hidden", "observed", "hidden", "observed", "none"]
    assert r.per_interface_mape[5] is None and len(r.per_interface_mape) == 6
    assert r.baseline_mape == pytest.approx(20.0, rel=1e-12)
    assert r.smoothing.bias == pytest.approx(0.01, rel=1e-9)
    assert r.observed_mape == r.mape and r.hidden_mape > 0
    assert set(r.horizon_mape) == {1, 2, 3} and r.n_windows == 6 and r.clipped == 2
    with pytest.raises(DataError):
        metrics.build_report(np.zeros((1, 1, 3)), np.ones((1, 1, 1)), [0], observed=[1])


def test_report_json_round_trip(tmp_path):
    r = _report()
    again = metrics.EvalReport.from_json(r.to_json())
    assert again == r
    assert again.to_json() == r.to_json()
    path = tmp_path / "report.json"
    r.write(path)
    assert json.loads(path.read_text())["horizon_mape"]["1"] == r.horizon_mape[1]


def test_report_tables(tmp_path):
    _report().write_tables(tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["histogram.csv", "per_horizon.csv", "per_interface.csv", "qq.csv"]
    lines = (tmp_path / "per_interface.csv").read_text().splitlines()
    assert lines[0] == "interface,tag,mape" and len(lines) == 7
    assert lines[-1].startswith("5,none,")


def test_report_rejects_nan():
    r = _report()
    r.rmse = math.nan
    with pytest.raises(ValueError):
        r.to_json()
