import numpy as np
import pytest

from deformmvs.metrics import (EvalReport, evaluate, mean_report, parse_report_table,
                               report_table)


def test_perfect_prediction():
    gt = np.full((4, 4), 10.0)
    rep = evaluate(gt, gt, np.ones((4, 4), bool), 0.1)
    assert rep.mae == 0.0
    assert rep.acc_06m == 1.0 and rep.acc_3interval == 1.0 and rep.completeness == 1.0
    assert rep.n_valid == 16


def test_hand_enumerated_four_pixel_example():
    gt = np.array([[10.0, 10.0, 10.0, 10.0]])
    pred = np.array([[10.0, 10.0, 10.0, 11.0]])  # errors 0,0,0,1.0
    rep = evaluate(pred, gt, np.ones_like(gt, bool), 0.1)
    # 1.0 < 100 * 0.1 so it stays in the MAE average
    assert rep.mae == 0.25
    assert rep.acc_06m == 0.75
    assert rep.acc_3interval == 0.75  # threshold 0.3


def test_hundred_interval_exclusion_rule():
    gt = np.array([[10.0, 10.0]])
    pred = np.array([[10.0, 1010.0]])  # error 1000 >= 100 * 0.1
    rep = evaluate(pred, gt, np.ones_like(gt, bool), 0.1)
    assert rep.mae == 0.0  # outlier excluded from the average only
    assert rep.acc_06m == 0.5 and rep.acc_3interval == 0.5


def test_strict_threshold_boundary_fails():
    # values chosen so the errors are exactly representable
    gt = np.array([[0.0]])
    pred = np.array([[0.6]])
    rep = evaluate(pred, gt, np.ones_like(gt, bool), 0.05)
    assert rep.acc_06m == 0.0  # exactly 0.6 is not < 0.6
    gt2 = np.array([[2.0]])
    pred2 = np.array([[2.75]])  # error exactly 3 * 0.25
    rep2 = evaluate(pred2, gt2, np.ones_like(gt2, bool), 0.25)
    assert rep2.acc_3interval == 0.0


def test_translation_invariance():
    rng = np.random.default_rng(70)
    gt = rng.uniform(5, 50, (6, 6))
    pred = gt + rng.normal(0, 0.3, (6, 6))
    mask = rng.random((6, 6)) > 0.2
    a = evaluate(pred, gt, mask, 0.25)
    b = evaluate(pred + 13.7, gt + 13.7, mask, 0.25)
    assert a.mae == pytest.approx(b.mae, abs=1e-12)
    assert a.acc_06m == b.acc_06m and a.acc_3interval == b.acc_3interval


def test_nonfinite_prediction_hits_completeness_and_accuracy():
    gt = np.full((1, 4), 10.0)
    pred = np.array([[10.0, np.nan, 10.0, np.inf]])
    rep = evaluate(pred, gt, np.ones_like(gt, bool), 0.1)
    assert rep.completeness == 0.5
    assert rep.acc_06m == 0.5


def test_evaluate_rejects_empty_mask_and_bad_interval():
    gt = np.ones((2, 2))
    with pytest.raises(ValueError, match="valid"):
        evaluate(gt, gt, np.zeros((2, 2), bool), 0.1)
    with pytest.raises(ValueError, match="interval"):
        evaluate(gt, gt, np.ones((2, 2), bool), 0.0)


def test_report_table_single_row():
    rep = EvalReport(0.1, 0.9, 0.8, 1.0, 100)
    text = report_table([rep], ["s0"])
    lines = text.strip().splitlines()
    assert lines[0] == "scene,mae,acc06,acc3i,comp"
    assert len(lines) == 2  # no mean row for a single report


def test_report_table_mean_of_identical_reports():
    rep = EvalReport(0.1, 0.9, 0.8, 1.0, 100)
    text = report_table([rep, rep], ["a", "b"])
    lines = text.strip().splitlines()
    assert lines[-1].startswith("mean,")
    assert lines[-1].split(",")[1:] == lines[1].split(",")[1:]


def test_report_table_round_trips_bit_exactly():
    rng = np.random.default_rng(71)
    reports = [EvalReport(float(rng.uniform(0, 1)), float(rng.uniform(0, 1)),
                          float(rng.uniform(0, 1)), 1.0, 10) for _ in range(3)]
    text = report_table(reports, ["x", "y", "z"])
    names, parsed = parse_report_table(text)
    again = report_table(parsed, names, include_mean=False)
    assert again == text


def test_mean_report():
    a = EvalReport(0.2, 0.8, 0.6, 1.0, 10)
    b = EvalReport(0.4, 0.6, 0.8, 0.5, 30)
    m = mean_report([a, b])
    assert m.mae == pytest.approx(0.3)
    assert m.n_valid == 40
