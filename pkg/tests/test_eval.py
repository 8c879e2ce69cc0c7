import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nrvm import evaluation as ev
from nrvm.metrics import Normalizer


def report(all_, clean, dist, fp="x"):
    return ev.EvalReport({"all": all_, "clean": clean, "distorted": dist}, {}, [], [], fp)


def test_prediction_error_normalizes():
    assert ev.prediction_error(0.3, 0.1) == pytest.approx(0.2)
    assert ev.prediction_error(0.03, 0.01, Normalizer(0.02)) == pytest.approx(1.0)
    np.testing.assert_allclose(ev.prediction_error([1, 2], [2, 2]), [1, 0])


def test_report_partitions_and_curve():
    errors = [0.1, 0.3, 0.2, 0.0]
    labels = [0.5, 1.2, 0.0, 0.0]
    natural = [False, False, True, True]
    r = ev.report_from_errors(errors, labels, natural, "fp", "lab")
    assert r.means == pytest.approx({"all": 0.15, "clean": 0.1, "distorted": 0.2})
    assert r.counts == {"all": 4, "clean": 2, "distorted": 2}
    assert r.sorted_error == sorted(errors)
    assert len(r.response_curve) == ev.RESPONSE_BINS
    centre, first = r.response_curve[0]
    assert centre == pytest.approx(0.015) and first == pytest.approx(0.1)  # two clean patches at response 0
    assert sum(v is not None for _, v in r.response_curve) == 3


def test_report_with_empty_partition_and_long_curve():
    r = ev.report_from_errors(np.linspace(0, 1, 1000), np.zeros(1000), np.zeros(1000, bool), curve_points=50)
    assert r.mean("clean") is None and len(r.sorted_error) == 50
    assert r.sorted_error[0] == 0.0 and r.sorted_error[-1] == 1.0


def test_compare_strategies_pattern():
    full, nonat, nobal = report(0.1, 0.05, 0.15), report(0.2, 0.3, 0.1), report(0.12, 0.04, 0.2)
    v = ev.compare_strategies(full, nonat, nobal)
    assert v.full_best_all and v.nobalance_best_clean and v.nonatural_best_distorted and v.table_pattern


def test_compare_strategies_ties_fail():
    full, nonat, nobal = report(0.1, 0.05, 0.15), report(0.2, 0.3, 0.1), report(0.12, 0.05, 0.2)
    v = ev.compare_strategies(full, nonat, nobal)
    assert not v.nobalance_beats_full_clean and not v.table_pattern
    v = ev.compare_strategies(report(0.1, None, 0.15), nonat, nobal)
    assert not v.nobalance_best_clean


def test_compare_strategies_rejects_mixed_test_sets():
    with pytest.raises(ValueError):
        ev.compare_strategies(report(0, 0, 0, "a"), report(0, 0, 0, "b"), report(0, 0, 0, "a"))


@given(st.lists(st.floats(-10, 10), min_size=3, max_size=30), st.floats(0.1, 5), st.floats(-3, 3))
def test_pearson_affine_invariance(xs, a, b):
    x = np.array(xs)
    if np.ptp(x) < 1e-3:
        return
    assert ev.pearson_r(x, a * x + b) == pytest.approx(1.0, abs=1e-9)
    assert ev.pearson_r(x, -a * x + b) == pytest.approx(-1.0, abs=1e-9)


def test_pearson_errors_and_reference():
    r = np.random.default_rng(0)
    x, y = r.normal(size=50), r.normal(size=50)
    assert ev.pearson_r(x, y) == pytest.approx(np.corrcoef(x, y)[0, 1], abs=1e-12)
    with pytest.raises(ValueError):
        ev.pearson_r([1, 2], [1, 2, 3])
    with pytest.raises(ValueError):
        ev.pearson_r([1, 1, 1], [1, 2, 3])


def test_perceptual_fit_recovers_affine_map(rng):
    pred = rng.uniform(0, 1, (20, 20))
    user = 0.7 * pred + 0.1
    fit = ev.fit_perceptualization(user, pred)
    assert (fit.a, fit.b, fit.r) == pytest.approx((0.7, 0.1, 1.0))
    np.testing.assert_allclose(fit.apply(pred), user)
    with pytest.raises(ValueError):
        ev.fit_perceptualization(user, np.ones((20, 20)))


def test_leave_one_out_is_zero_for_a_shared_affine_law(rng):
    preds = [rng.uniform(0, 1, (8, 8)) for _ in range(4)]
    users = [0.5 * p + 0.2 for p in preds]
    assert ev.leave_one_out_error(users, preds) < 1e-12


def test_shift_right_replicates_edge():
    img = np.linspace(0, 1, 12).reshape(1, 4, 3)
    s = ev.shift_right(img, 2)
    np.testing.assert_array_equal(s[0, 2:], img[0, :2])
    np.testing.assert_array_equal(s[0, :2], np.repeat(img[0, :1], 2, axis=0))
    np.testing.assert_array_equal(ev.shift_right(img, 0), img)


def test_curve_csv_roundtrip(tmp_path):
    pts = [(0.1, 0.2), (0.3, None), (0.5, 1 / 3)]
    ev.write_curve_csv(tmp_path / "c.csv", pts)
    assert ev.read_curve_csv(tmp_path / "c.csv") == [(0.1, 0.2), (0.5, 1 / 3)]


def test_table_rows_and_report_file(tmp_path):
    reps = {"full": report(0.1, None, 0.2)}
    rows = ev.table_rows(reps)
    assert rows[1].split() == ["full", "0.100", "n/a", "0.200"]
    v = ev.compare_strategies(report(0.1, 0.05, 0.15), report(0.2, 0.3, 0.1), report(0.12, 0.04, 0.2))
    ev.write_report(tmp_path / "r.json", reps, v)
    import json

    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc["verdicts"]["table_pattern"] is True
