import numpy as np
import pytest

from deformmvs.autodiff import Tensor
from deformmvs.cameras import CameraModel
from deformmvs.planes import (DepthHypothesis, ProbabilityVolume, centered_planes,
                              deform_range, discretize, hypothesis_variance,
                              initial_hypothesis, loguniform_planes, regress_depth,
                              uniform_planes)


def hyp_from(vals, stage=2):
    return DepthHypothesis(Tensor(np.asarray(vals, dtype=np.float64)), stage)


def prob_from(vals):
    return ProbabilityVolume(Tensor(np.asarray(vals, dtype=np.float64)))


def test_regress_one_hot_picks_plane():
    hyp = hyp_from([[[1.0]], [[2.0]], [[3.0]]])
    prob = prob_from([[[0.0]], [[1.0]], [[0.0]]])
    assert regress_depth(hyp, prob).data[0, 0] == 2.0


def test_regress_expectation():
    hyp = hyp_from([[[1.0]], [[2.0]]])
    prob = prob_from([[[0.25]], [[0.75]]])
    np.testing.assert_allclose(regress_depth(hyp, prob).data, [[1.75]])


def test_regress_uniform_over_symmetric_planes():
    c = 10.0
    hyp = hyp_from([[[c - 3.0]], [[c - 1.0]], [[c + 1.0]], [[c + 3.0]]])
    prob = prob_from(np.full((4, 1, 1), 0.25))
    np.testing.assert_allclose(regress_depth(hyp, prob).data, [[c]], atol=1e-12)


def test_regress_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        regress_depth(hyp_from([[[1.0]], [[2.0]]]), prob_from([[[1.0]]]))


def test_variance_point_mass_is_zero():
    hyp = hyp_from([[[1.0]], [[2.0]], [[3.0]]])
    prob = prob_from([[[0.0]], [[1.0]], [[0.0]]])
    d = regress_depth(hyp, prob)
    assert hypothesis_variance(hyp, prob, d).data[0, 0] == 0.0


def test_variance_two_point():
    hyp = hyp_from([[[1.0]], [[3.0]]])
    prob = prob_from([[[0.5]], [[0.5]]])
    d = regress_depth(hyp, prob)
    assert d.data[0, 0] == 2.0
    np.testing.assert_allclose(hypothesis_variance(hyp, prob, d).data, [[1.0]])


def test_variance_never_negative():
    rng = np.random.default_rng(20)
    for _ in range(50):
        d = rng.integers(2, 9)
        planes = np.sort(rng.uniform(1, 50, (d, 2, 2)), axis=0)
        planes += np.arange(d)[:, None, None] * 1e-3  # ensure strict increase
        p = rng.uniform(0.01, 1, (d, 2, 2))
        p /= p.sum(axis=0)
        hyp, prob = hyp_from(planes), prob_from(p)
        depth = regress_depth(hyp, prob)
        sigma = hypothesis_variance(hyp, prob, depth)
        assert (sigma.data >= 0).all()


def test_deform_range_floor_rule():
    depth = Tensor(np.full((2, 2), 50.0))
    sigma = Tensor(np.zeros((2, 2)))
    lower, upper = deform_range(depth, sigma, eta=3.0, sigma_min=0.2)
    np.testing.assert_allclose(upper.data - lower.data, 2 * 3.0 * 0.2)


def test_deform_range_direct():
    lower, upper = deform_range(Tensor([[100.0]]), Tensor([[2.0]]), eta=3.0)
    assert lower.data[0, 0] == 94.0 and upper.data[0, 0] == 106.0


def test_deform_range_contains_depth():
    rng = np.random.default_rng(21)
    depth = Tensor(rng.uniform(5, 50, (3, 3)))
    sigma = Tensor(rng.uniform(0, 4, (3, 3)))
    lower, upper = deform_range(depth, sigma, eta=2.0, sigma_min=0.1)
    assert (lower.data <= depth.data).all() and (depth.data <= upper.data).all()


def test_deform_range_rejects_bad_eta():
    with pytest.raises(ValueError, match="eta"):
        deform_range(Tensor([[1.0]]), Tensor([[1.0]]), eta=0.0)


def test_deform_range_half_width_cap():
    depth = Tensor([[50.0, 50.0]])
    sigma = Tensor([[0.4, 8.0]])  # one confident pixel, one diffuse
    lower, upper = deform_range(depth, sigma, eta=3.0, half_width_cap=5.0)
    half = (upper.data - lower.data) / 2
    np.testing.assert_allclose(half, [[1.2, 5.0]])


def test_centered_exact_offsets():
    # half-width 1, 8 planes: upward offsets 2/20, 6/20, 12/20, 20/20
    d = Tensor([[10.0]])
    planes = centered_planes(Tensor([[9.0]]), Tensor([[11.0]]), d, 8)
    up = planes.data[4:, 0, 0] - 10.0
    np.testing.assert_allclose(up, [0.1, 0.3, 0.6, 1.0], atol=1e-12)
    down = 10.0 - planes.data[:4, 0, 0]
    np.testing.assert_allclose(down, [1.0, 0.6, 0.3, 0.1], atol=1e-12)
    gaps = np.diff(planes.data[4:, 0, 0])
    np.testing.assert_allclose(gaps, [0.2, 0.3, 0.4], atol=1e-12)


def test_centered_endpoints_attained():
    d = Tensor([[25.0]])
    planes = centered_planes(Tensor([[22.0]]), Tensor([[28.0]]), d, 8)
    assert planes.data[0, 0, 0] == 22.0
    assert planes.data[-1, 0, 0] == 28.0


def test_uniform_planes_spacing():
    planes = uniform_planes(Tensor([[0.0]]), Tensor([[1.0]]), 5)
    np.testing.assert_allclose(planes.data[:, 0, 0], [0.0, 0.25, 0.5, 0.75, 1.0], atol=1e-15)


def test_loguniform_gaps_geometric():
    planes = loguniform_planes(Tensor([[1.0]]), Tensor([[16.0]]), 5)
    vals = planes.data[:, 0, 0]
    np.testing.assert_allclose(vals, [1.0, 2.0, 4.0, 8.0, 16.0], atol=1e-12)
    ratios = vals[1:] / vals[:-1]
    np.testing.assert_allclose(ratios, 2.0, atol=1e-12)


def test_discretize_schemes_monotone_and_bounded():
    rng = np.random.default_rng(22)
    for _ in range(1000):
        depth = rng.uniform(5, 100)
        sigma = rng.uniform(0.05, 5)
        eta = rng.choice([1.0, 2.0, 3.0, 5.0])
        count = int(rng.choice([4, 8, 16, 32, 48]))
        lower = Tensor([[max(depth - eta * sigma, 0.01)]])
        upper = Tensor([[depth + eta * sigma]])
        dep = Tensor([[depth]])
        for scheme in ("uniform", "loguniform", "centered"):
            hyp = discretize(lower, upper, dep, count, scheme, stage=2)
            vals = hyp.planes.data[:, 0, 0]
            assert (np.diff(vals) > 0).all()
            assert vals[0] >= lower.data[0, 0] - 1e-9
            assert vals[-1] <= upper.data[0, 0] + 1e-9
            if scheme == "centered":
                # symmetric about the center when the range is unclipped
                if depth - eta * sigma > 0.01:
                    np.testing.assert_allclose(vals[::-1] - depth, depth - vals,
                                               atol=1e-9 * max(1.0, depth))
                    assert abs(vals[-1] - (depth + eta * sigma)) < 1e-9
                    assert abs(vals[0] - (depth - eta * sigma)) < 1e-9


def test_discretize_first_differences_by_scheme():
    lower, upper, dep = Tensor([[10.0]]), Tensor([[20.0]]), Tensor([[15.0]])
    ud = discretize(lower, upper, dep, 8, "uniform", 2).planes.data[:, 0, 0]
    np.testing.assert_allclose(np.diff(ud), np.diff(ud)[0], atol=1e-12)
    sid = discretize(lower, upper, dep, 8, "loguniform", 2).planes.data[:, 0, 0]
    r = np.diff(sid)
    np.testing.assert_allclose(r[1:] / r[:-1], (upper.data[0, 0] / lower.data[0, 0]) ** (1 / 7),
                               atol=1e-9)
    clid = discretize(lower, upper, dep, 8, "centered", 2).planes.data[:, 0, 0]
    up_gaps = np.diff(clid[4:])
    assert (np.diff(up_gaps) > 0).all()
    second = np.diff(up_gaps)
    np.testing.assert_allclose(second, second[0], atol=1e-9)  # linear gap growth


def test_discretize_rejects_bad_inputs():
    with pytest.raises(ValueError, match="below"):
        discretize(Tensor([[2.0]]), Tensor([[2.0]]), Tensor([[2.0]]), 8, "uniform", 2)
    with pytest.raises(ValueError, match="even"):
        discretize(Tensor([[1.0]]), Tensor([[2.0]]), Tensor([[1.5]]), 7, "centered", 2)
    with pytest.raises(ValueError, match="unknown interval scheme"):
        discretize(Tensor([[1.0]]), Tensor([[2.0]]), Tensor([[1.5]]), 8, "geometric", 2)


def make_cam(num_planes=48, depth_min=5.0, interval=1.0):
    K = np.array([[100.0, 0, 32], [0, 100.0, 24], [0, 0, 1.0]])
    return CameraModel(K, np.eye(4), depth_min, interval, num_planes)


def test_initial_hypothesis_direct():
    hyp = initial_hypothesis(make_cam(), 2, 3, 48)
    vals = hyp.planes.data[:, 0, 0]
    np.testing.assert_allclose(vals, np.arange(5.0, 53.0), atol=1e-12)
    assert hyp.stage == 1


def test_initial_hypothesis_resample_keeps_endpoints():
    hyp = initial_hypothesis(make_cam(num_planes=48), 1, 1, 16)
    vals = hyp.planes.data[:, 0, 0]
    assert vals[0] == 5.0 and vals[-1] == 52.0
    assert len(vals) == 16


def test_initial_hypothesis_shared_across_pixels():
    hyp = initial_hypothesis(make_cam(), 4, 5, 8)
    p = hyp.planes.data
    assert (p == p[:, :1, :1]).all()


def test_hypothesis_validation():
    with pytest.raises(ValueError, match="increasing"):
        hyp_from([[[2.0]], [[1.0]]])
    with pytest.raises(ValueError, match="positive"):
        hyp_from([[[0.0]], [[1.0]]])
    with pytest.raises(ValueError, match="sum to 1"):
        prob_from([[[0.5]], [[0.4]]])
