import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from trajbench.errors import DataError, RangeError
from trajbench.metrics import MetricsReport, PredictionPair, ade, fde, mark_step, rmse_curve


def loop_ade(pred, truth):
    total, count = 0.0, 0
    for i in range(pred.shape[0]):
        for t in range(pred.shape[1]):
            total += math.hypot(truth[i, t, 0] - pred[i, t, 0], truth[i, t, 1] - pred[i, t, 1])
            count += 1
    return total / count


def loop_fde(pred, truth):
    n = pred.shape[0]
    return sum(math.hypot(*(truth[i, -1] - pred[i, -1])) for i in range(n)) / n


def loop_rmse(pred, truth, step):
    n = pred.shape[0]
    sq = sum((truth[i, step - 1, 0] - pred[i, step - 1, 0]) ** 2 + (truth[i, step - 1, 1] - pred[i, step - 1, 1]) ** 2 for i in range(n))
    return math.sqrt(sq / n)


def random_pair(rng, n, h, fps=5.0):
    truth = rng.normal(size=(n, h, 2)) * 10
    return PredictionPair(truth + rng.normal(size=truth.shape) * 2, truth, "meter", fps)


def test_three_four_five_case():
    # first step exact, final step off by a 3-4-5 triangle
    pred = np.zeros((1, 2, 2))
    truth = np.array([[[0.0, 0.0], [3.0, 4.0]]])
    pair = PredictionPair(pred, truth)
    assert ade(pair) == 2.5
    assert fde(pair) == 5.0


def test_two_vehicle_final_errors():
    pred = np.zeros((2, 5, 2))
    truth = np.zeros((2, 5, 2))
    truth[0, -1] = [3.0, 0.0]
    truth[1, -1] = [0.0, 4.0]
    pair = PredictionPair(pred, truth, fps=1.0)
    assert fde(pair) == 3.5
    assert rmse_curve(pair, marks=(5,))[5] == math.sqrt(12.5)


def test_brute_force_agreement_on_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n, h = rng.integers(1, 9), 25
        pair = random_pair(rng, n, h)
        assert abs(ade(pair) - loop_ade(pair.pred, pair.truth)) <= 1e-12
        assert abs(fde(pair) - loop_fde(pair.pred, pair.truth)) <= 1e-12
        for m, v in rmse_curve(pair).items():
            assert abs(v - loop_rmse(pair.pred, pair.truth, int(m * 5))) <= 1e-12


def test_mark_to_step_mapping():
    assert mark_step(1, 5, 25) == 5
    assert mark_step(5, 5, 25) == 25
    assert mark_step(0.5, 10, 25) == 5
    with pytest.raises(RangeError):
        mark_step(6, 5, 25)
    with pytest.raises(RangeError):
        mark_step(0.1, 5, 25)


def test_default_marks_are_one_to_five_seconds():
    pair = random_pair(np.random.default_rng(1), 3, 25)
    assert list(rmse_curve(pair)) == [1, 2, 3, 4, 5]


@given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 1000))
def test_metric_ordering_and_zero_on_perfect(n, h, seed):
    rng = np.random.default_rng(seed)
    pair = random_pair(rng, n, h)
    # the largest per-step error bounds the mean
    d = np.linalg.norm(pair.truth - pair.pred, axis=2)
    assert 0 <= ade(pair) <= d.max() + 1e-12
    perfect = PredictionPair(pair.truth, pair.truth)
    assert ade(perfect) == 0.0 and fde(perfect) == 0.0


@given(st.integers(0, 1000))
def test_rmse_bounds_mean_displacement_at_step(seed):
    rng = np.random.default_rng(seed)
    pair = random_pair(rng, 4, 25)
    d = np.linalg.norm(pair.truth - pair.pred, axis=2)
    for m, v in rmse_curve(pair).items():
        assert v >= d[:, int(m * 5) - 1].mean() - 1e-12


def test_pair_validation():
    with pytest.raises(DataError):
        PredictionPair(np.zeros((1, 2, 2)), np.zeros((1, 3, 2)))
    with pytest.raises(DataError):
        PredictionPair(np.zeros((2, 2)), np.zeros((2, 2)))
    with pytest.raises(DataError):
        PredictionPair(np.zeros((1, 2, 2)), np.zeros((1, 2, 2)), unit="feet")


def test_report_csv_and_json_round_trip():
    pair = random_pair(np.random.default_rng(2), 3, 25)
    rep = MetricsReport.from_pair(pair)
    lines = rep.to_csv().splitlines()
    assert lines[0] == "ade,fde,rmse@1s,rmse@2s,rmse@3s,rmse@4s,rmse@5s"
    assert [float(v) for v in lines[1].split(",")] == rep.row()
    back = MetricsReport.from_dict(rep.to_dict())
    assert back == rep
