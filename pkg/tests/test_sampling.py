import numpy as np
import pytest

from deformmvs import autodiff as ad
from deformmvs.autodiff import Tensor, backward
from deformmvs.cameras import CameraModel
from deformmvs.sampling import (OffsetField2D, OffsetField3D, SamplerParams,
                                anchor_pattern, bilinear_sample, predict_offsets_2d,
                                predict_offsets_3d, pss_aggregate)

from helpers import check_gradients


def test_bilinear_integer_coordinate_is_exact_gather():
    rng = np.random.default_rng(30)
    feat = Tensor(rng.uniform(-1, 1, (3, 5, 6)))
    out = bilinear_sample(feat, Tensor([[2.0, 3.0]]))
    np.testing.assert_array_equal(out.data[:, 0], feat.data[:, 3, 2])


def test_bilinear_center_of_four_pixels():
    feat = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    out = bilinear_sample(feat, Tensor([0.5, 0.5]))
    np.testing.assert_allclose(out.data, [2.5])


def test_bilinear_coordinate_gradient_on_ramp():
    h, w = 5, 6
    ramp = 0.7 * np.arange(w)[None, :] + 0.3 * np.arange(h)[:, None]
    feat = Tensor(ramp[None])
    coords = Tensor(np.array([1.5, 1.5]), requires_grad=True)
    tape = backward(bilinear_sample(feat, coords).sum())
    np.testing.assert_allclose(tape.grad(coords), [0.7, 0.3], atol=1e-12)


def test_bilinear_out_of_bounds_contributes_zero():
    feat = Tensor(np.ones((2, 4, 4)))
    out = bilinear_sample(feat, Tensor([[-5.0, 1.0], [1.0, 10.0], [-0.5, 0.0]]))
    np.testing.assert_array_equal(out.data[:, 0], 0.0)
    np.testing.assert_array_equal(out.data[:, 1], 0.0)
    np.testing.assert_allclose(out.data[:, 2], 0.5)  # half in, half out


def test_bilinear_invalid_mask_returns_zero():
    feat = Tensor(np.ones((1, 4, 4)))
    coords = Tensor([[1.0, 1.0], [2.0, 2.0]])
    out = bilinear_sample(feat, coords, valid_mask=np.array([False, True]))
    np.testing.assert_array_equal(out.data[0], [0.0, 1.0])


def test_bilinear_gradients_match_fd():
    rng = np.random.default_rng(31)
    feat = rng.uniform(-1, 1, (2, 6, 6))
    coords = rng.uniform(0.8, 4.1, (3, 4, 2))
    w = rng.uniform(0.5, 1.5, (2, 3, 4))
    check_gradients(
        lambda f, c: ad.mul(bilinear_sample(f, c), Tensor(w)).sum(),
        [feat, coords], rel_tol=1e-4)


def make_params(rng=None, c=2, p=2, zero=False, clamp_px=4.0, clamp_z=1.0,
                offsets_3d=True, offsets_2d=True, n_src=2, anchor=0.0):
    def init(shape):
        if zero or rng is None:
            return Tensor(np.zeros(shape), requires_grad=True)
        return Tensor(rng.normal(0, 0.3, shape), requires_grad=True)

    return SamplerParams(
        off3_w=init((3, 2 * c, 3, 3)), off3_b=init((3,)),
        off2_w=init((3 * p, 2 * c, 3, 3)), off2_b=init((3 * p,)),
        view_w=init((1, 2 * c, 3, 3)), view_b=init((1,)),
        num_points=p, clamp_px=clamp_px, clamp_z=clamp_z,
        offsets_3d=offsets_3d, offsets_2d=offsets_2d,
        anchors=[np.full((p, 2), anchor) for _ in range(n_src)])


def test_zero_conv_weights_give_zero_offsets():
    rng = np.random.default_rng(32)
    ref = Tensor(rng.uniform(-1, 1, (2, 4, 4)))
    src = Tensor(rng.uniform(-1, 1, (2, 4, 4)))
    off = predict_offsets_3d(ref, src, make_params(zero=True))
    np.testing.assert_array_equal(off.values.data, 0.0)
    assert off.values.shape == (3, 4, 4)


def test_offsets_3d_gradients_flow():
    rng = np.random.default_rng(33)
    ref = rng.uniform(-1, 1, (2, 4, 4))
    src = rng.uniform(-1, 1, (2, 4, 4))
    w = rng.normal(0, 0.3, (3, 4, 3, 3))

    def build(rt, st, wt):
        p = make_params(zero=True)
        p.off3_w = wt
        return predict_offsets_3d(rt, st, p).values.sum()

    check_gradients(build, [ref, src, w], rel_tol=1e-4)


def test_offsets_2d_degenerate_uniform():
    rng = np.random.default_rng(34)
    ref = Tensor(rng.uniform(-1, 1, (2, 4, 4)))
    src = Tensor(rng.uniform(-1, 1, (2, 4, 4)))
    params = make_params(zero=True, p=3)
    off, weights = predict_offsets_2d(ref, src, params)
    np.testing.assert_array_equal(off.values.data, 0.0)
    np.testing.assert_allclose(weights.data, 1.0 / 3.0, atol=1e-12)


def test_point_weights_sum_to_one():
    rng = np.random.default_rng(35)
    ref = Tensor(rng.uniform(-1, 1, (2, 4, 4)))
    src = Tensor(rng.uniform(-1, 1, (2, 4, 4)))
    _, weights = predict_offsets_2d(ref, src, make_params(rng=rng, p=4))
    np.testing.assert_allclose(weights.data.sum(axis=0), 1.0, atol=1e-6)


def test_kernel_anchor_stencil():
    anchors = anchor_pattern("kernel", 9, 1.0, seed=0, stage=1, view=0)
    expected = {(dx, dy) for dx in (-1, 0, 1) for dy in (-1, 0, 1)}
    assert {tuple(a) for a in anchors} == expected
    with pytest.raises(ValueError, match="9 points"):
        anchor_pattern("kernel", 4, 1.0, 0, 1, 0)


def test_random_anchor_seeded_and_single_point_centered():
    a1 = anchor_pattern("random", 5, 1.0, seed=7, stage=2, view=1)
    a2 = anchor_pattern("random", 5, 1.0, seed=7, stage=2, view=1)
    np.testing.assert_array_equal(a1, a2)
    a3 = anchor_pattern("random", 5, 1.0, seed=7, stage=2, view=2)
    assert not np.array_equal(a1, a3)
    assert np.abs(a1).max() <= 1.0
    np.testing.assert_array_equal(anchor_pattern("random", 1, 1.0, 7, 1, 0), [[0.0, 0.0]])


def nadir_cam(f=50.0, cx=3.0, cy=3.0, tx=0.0):
    K = np.array([[f, 0, cx], [0, f, cy], [0, 0, 1.0]])
    T = np.eye(4)
    T[0, 3] = -tx
    return CameraModel(K, T, depth_min=5.0, depth_interval=1.0)


def test_pss_degenerate_passthrough():
    # one source, identical cameras, zero params, single sample point:
    # output is the source feature itself, bit-exact
    rng = np.random.default_rng(36)
    src = Tensor(rng.uniform(-1, 1, (2, 6, 6)))
    ref = Tensor(rng.uniform(-1, 1, (2, 6, 6)))
    cam = nadir_cam()
    params = make_params(zero=True, p=1, n_src=1)
    depth = Tensor(np.full((6, 6), 10.0))
    out = pss_aggregate(ref, [src], cam, [cam], depth, params)
    assert np.abs(out.data - src.data).max() <= 1e-12


def test_pss_needs_a_source():
    cam = nadir_cam()
    with pytest.raises(ValueError, match="at least 2 views"):
        pss_aggregate(Tensor(np.zeros((1, 4, 4))), [], cam, [], Tensor(np.full((4, 4), 8.0)),
                      make_params(zero=True, c=1))


def test_pss_one_hot_view_weight_ignores_other_views():
    # craft features so the view-weight logits saturate on source 0
    c, h, w = 2, 6, 6
    rng = np.random.default_rng(37)
    ref = Tensor(rng.uniform(-1, 1, (c, h, w)))
    fav = Tensor(np.full((c, h, w), 1.0))
    other_a = Tensor(rng.uniform(-1, 1, (c, h, w)))
    other_b = Tensor(rng.uniform(-1, 1, (c, h, w)))
    params = make_params(zero=True, p=1, n_src=2)
    vw = np.zeros((1, 2 * c, 3, 3))
    vw[0, c:, 1, 1] = 40.0  # logit = 40 * sum of source channels
    params.view_w = Tensor(vw)
    cam = nadir_cam()
    depth = Tensor(np.full((h, w), 10.0))
    out_a = pss_aggregate(ref, [fav, other_a], cam, [cam, cam], depth, params)
    out_b = pss_aggregate(ref, [fav, other_b], cam, [cam, cam], depth, params)
    np.testing.assert_allclose(out_a.data, out_b.data, atol=1e-10)
    np.testing.assert_allclose(out_a.data, fav.data, atol=1e-10)


def test_pss_output_is_convex_combination():
    rng = np.random.default_rng(38)
    c, h, w = 2, 12, 12
    ref = Tensor(rng.uniform(-1, 1, (c, h, w)))
    srcs = [Tensor(rng.uniform(-1, 1, (c, h, w))) for _ in range(2)]
    params = make_params(rng=rng, p=3, clamp_px=1.0, n_src=2, anchor=0.5)
    cam = nadir_cam(f=100.0, cx=5.5, cy=5.5)
    depth = Tensor(np.full((h, w), 10.0))
    out = pss_aggregate(ref, srcs, cam, [cam, cam], depth, params)
    lo = min(s.data.min() for s in srcs)
    hi = max(s.data.max() for s in srcs)
    inner = out.data[:, 3:-3, 3:-3]
    assert inner.min() >= lo - 1e-9 and inner.max() <= hi + 1e-9


def test_pss_end_to_end_gradients_match_fd():
    rng = np.random.default_rng(39)
    c, h, w = 2, 6, 6
    ref = rng.uniform(-1, 1, (c, h, w))
    s1 = rng.uniform(-1, 1, (c, h, w))
    s2 = rng.uniform(-1, 1, (c, h, w))
    o3 = rng.normal(0, 0.2, (3, 2 * c, 3, 3))
    o2 = rng.normal(0, 0.2, (6, 2 * c, 3, 3))
    vw = rng.normal(0, 0.2, (1, 2 * c, 3, 3))
    weight = rng.uniform(0.5, 1.5, (c, h, w))
    cam0 = nadir_cam(f=40.0, cx=2.5, cy=2.5)
    cam1 = nadir_cam(f=40.0, cx=2.5, cy=2.5, tx=0.4)

    def build(rt, s1t, s2t, o3t, o2t, vwt):
        params = make_params(zero=True, p=2, n_src=2, anchor=0.3)
        params.off3_w, params.off2_w, params.view_w = o3t, o2t, vwt
        depth = Tensor(np.full((h, w), 8.0))
        out = pss_aggregate(rt, [s1t, s2t], cam0, [cam0, cam1], depth, params)
        return ad.mul(out, Tensor(weight)).sum()

    check_gradients(build, [ref, s1, s2, o3, o2, vw], rel_tol=1e-3, step=1e-6)


def test_trained_offsets_dodge_corrupted_patch():
    # one source equals the reference except a corrupted square; fitting the
    # aggregate to the reference should move samples away from the square
    rng = np.random.default_rng(40)
    c, h, w = 2, 10, 10
    base = rng.uniform(-1, 1, (c, h, w))
    src = base.copy()
    src[:, 3:7, 3:7] = 5.0  # occluder: features unrelated to the reference
    ref_t, src_t = Tensor(base), Tensor(src)
    cam = nadir_cam(f=80.0, cx=4.5, cy=4.5)
    depth = Tensor(np.full((h, w), 10.0))
    params = make_params(zero=True, p=4, n_src=1, clamp_px=4.0)
    params.anchors = [anchor_pattern("random", 4, 1.0, 3, 1, 0)]
    lr = 0.05
    leaves = [params.off2_w, params.off2_b]
    for step in range(80):
        out = pss_aggregate(ref_t, [src_t], cam, [cam], depth, params)
        diff = ad.sub(out, ref_t)
        loss = ad.mul(diff, diff).mean()
        tape = backward(loss)
        new = []
        for t in leaves:
            g = tape.grad(t)
            new.append(Tensor(t.data - lr * g, requires_grad=True))
        params.off2_w, params.off2_b = new
        leaves = new
    _, info = pss_aggregate(ref_t, [src_t], cam, [cam], depth, params, return_info=True)
    disp = np.linalg.norm(info["points"][0] - info["anchor"][0][None], axis=-1)
    occluded = disp[:, 4:6, 4:6]
    assert occluded.mean() > 0.5  # samples pushed off the corrupted square
