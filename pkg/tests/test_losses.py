import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from posefree.errors import DimensionMismatch
from posefree.geometry import Pose, random_rotation, relative_pose, rot_x, rotation_to_rot6d
from posefree.imaging import DepthMap
from posefree.losses import (HUBER_DELTA, LAMBDA_TRI, LossReport, geodesic_rot6d,
                             geodesic_rot6d_grad, grad_check, huber, huber_grad, loss_img,
                             loss_match, loss_pose, loss_tri, total_loss, translation_l2,
                             translation_l2_grad)
from posefree.matching import ConfidenceMask, FlowField
from posefree.synth import gt_warp_mask, make_scene, render_gt, v_trajectory

seeds = st.integers(0, 2**31 - 1)


@pytest.fixture(scope="module")
def truth():
    """Noiseless 128 px triplet with exact depth, poses and flows."""
    sc = make_scene(7, "textured_plane", 2000, "smooth")
    c1, ct, c2 = v_trajectory(3, 128, 128, baseline=0.4)
    i1, i2 = render_gt(sc, c1)[0], render_gt(sc, c2)[0]
    _, depth_t = render_gt(sc, ct)
    f12, m12 = gt_warp_mask(sc, c1, c2)
    f21, m21 = gt_warp_mask(sc, c2, c1)
    return dict(c1=c1, ct=ct, c2=c2, i1=i1, i2=i2, depth_t=depth_t, f12=f12, f21=f21,
                m12=ConfidenceMask(m12), m21=ConfidenceMask(m21),
                p1t=relative_pose(ct.pose, c1.pose), p2t=relative_pose(ct.pose, c2.pose),
                p21=relative_pose(c1.pose, c2.pose),
                coords=np.argwhere(depth_t.valid)[:, ::-1].astype(np.float64))


def tri(t, flow=None, mask=None, depth=None):
    return loss_tri(depth or t["depth_t"], t["p1t"], t["p2t"], t["c1"].k, t["c2"].k,
                    flow or t["f12"], mask or t["m12"], t["coords"], t["ct"].k)


# -- loss_img -------------------------------------------------------------------


def test_img_identical_zero(rng):
    a = rng.uniform(size=(8, 8, 3))
    assert loss_img(a, a) == 0.0


def test_img_constant_offset(rng):
    a = rng.uniform(size=(8, 8, 3)) * 0.8
    assert abs(loss_img(a + 0.1, a) - 0.1) <= 1e-12


def test_img_brute_force(rng):
    a, b = rng.uniform(size=(5, 6, 3)), rng.uniform(size=(5, 6, 3))
    mask = rng.uniform(size=(5, 6)) < 0.5
    total, n = 0.0, 0
    for y, x in zip(*np.nonzero(mask)):
        for ch in range(3):
            total += abs(a[y, x, ch] - b[y, x, ch])
            n += 1
    assert abs(loss_img(a, b, mask) - total / n) <= 1e-12
    assert loss_img(a, b, np.zeros((5, 6), bool)) == 0.0


def test_img_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        loss_img(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


# -- loss_match -----------------------------------------------------------------


def test_match_gt_flow_near_zero(truth):
    t = truth
    assert loss_match(t["f12"], t["f21"], t["m12"], t["m21"], t["i1"], t["i2"]) < 1e-3


def test_match_empty_masks_zero(truth):
    t = truth
    empty = ConfidenceMask(np.zeros((128, 128), bool))
    assert loss_match(t["f12"], t["f21"], empty, empty, t["i1"], t["i2"]) == 0.0


def test_match_monotone_in_corruption(truth):
    t = truth
    losses = []
    for eps in (0.0, 2.0, 4.0, 8.0):
        f12 = FlowField(t["f12"].data + [eps, 0.0])
        f21 = FlowField(t["f21"].data + [eps, 0.0])
        losses.append(loss_match(f12, f21, t["m12"], t["m21"], t["i1"], t["i2"]))
    assert all(a < b for a, b in zip(losses, losses[1:]))


def test_match_symmetric(truth):
    t = truth
    a = loss_match(t["f12"], t["f21"], t["m12"], t["m21"], t["i1"], t["i2"])
    b = loss_match(t["f21"], t["f12"], t["m21"], t["m12"], t["i2"], t["i1"])
    assert a == b


def test_match_upsamples_feature_flow(rng):
    img = rng.uniform(size=(16, 16, 3))
    zero = FlowField(np.zeros((4, 4, 2)), 4)
    full = ConfidenceMask(np.ones((4, 4), bool), 4)
    assert loss_match(zero, zero, full, full, img, img) <= 1e-12


# -- loss_pose ------------------------------------------------------------------


def test_pose_equal_zero(rng):
    p = Pose(random_rotation(rng), rng.normal(size=3))
    assert loss_pose(p, p) == (0.0, 0.0)


def test_pose_rotation_30_degrees():
    l_rot, l_trans = loss_pose(Pose(rot_x(math.radians(30)), np.zeros(3)), Pose.identity())
    assert abs(l_rot - math.pi / 6) <= 1e-12 and l_trans == 0.0


def test_pose_translation_offset():
    l_rot, l_trans = loss_pose(Pose(np.eye(3), [0.3, 0, 0]), Pose.identity())
    assert l_rot == 0.0 and abs(l_trans - 0.09) <= 1e-15


@given(seeds)
def test_pose_losses_nonnegative(seed):
    rng = np.random.default_rng(seed)
    a = Pose(random_rotation(rng), rng.normal(size=3))
    b = Pose(random_rotation(rng), rng.normal(size=3))
    l_rot, l_trans = loss_pose(a, b)
    assert 0 <= l_rot <= math.pi + 1e-12 and l_trans >= 0


# -- loss_tri -------------------------------------------------------------------


def test_tri_zero_at_truth(truth):
    assert tri(truth) < 1e-6


def parallel_rig(depth=4.0, baseline=0.5, size=32):
    """Constant depth, pure x-translation: the exact flow is constant ``-fx * 2b / d``."""
    k = v_trajectory(3, size, size)[0].k
    p1t = Pose(np.eye(3), [baseline, 0.0, 0.0])
    p2t = Pose(np.eye(3), [-baseline, 0.0, 0.0])
    dm = DepthMap(np.full((size, size), depth), np.ones((size, size), bool))
    flow = np.tile([-k.fx * 2 * baseline / depth, 0.0], (size, size, 1))
    coords = np.argwhere(np.ones((size, size)))[:, ::-1].astype(np.float64)
    return dm, p1t, p2t, k, flow, coords


@pytest.mark.parametrize("eps,expected", [(0.0, 0.0), (0.5, 0.125), (-0.5, 0.125),
                                          (3.0, HUBER_DELTA * (3.0 - 0.5 * HUBER_DELTA))])
def test_tri_huber_closed_form(eps, expected):
    dm, p1t, p2t, k, flow, coords = parallel_rig()
    mask = ConfidenceMask(np.ones(flow.shape[:2], bool))
    shifted = FlowField(flow + [eps, 0.0])
    got = loss_tri(dm, p1t, p2t, k, k, shifted, mask, coords, k)
    assert abs(got - expected) <= 1e-9


def test_tri_empty_mask(truth):
    assert tri(truth, mask=ConfidenceMask(np.zeros((128, 128), bool))) == 0.0


def test_tri_drops_invalid_depth(truth):
    d = truth["depth_t"]
    none_valid = DepthMap(d.depth, np.zeros_like(d.valid))
    assert tri(truth, depth=none_valid) == 0.0


# -- total_loss -----------------------------------------------------------------


def test_lambda_default():
    assert LAMBDA_TRI == 0.01
    assert total_loss(0, 0, 0, 0, 1.0).lambda_tri == 0.01


def test_total_zero():
    assert total_loss(0.0, 0.0, 0.0, 0.0, 0.0).l_total == 0.0


def test_total_arithmetic():
    # parts (img, match, pose, tri) = (1, 2, 3, 4); pose split as rot 1 + trans 2
    rep = total_loss(1.0, 2.0, 1.0, 2.0, 4.0, 0.01)
    assert abs(rep.l_total - 6.04) <= 1e-12 and rep.l_pose == 3.0


@given(st.lists(st.floats(0, 1e3), min_size=5, max_size=5), st.floats(0, 1))
def test_decomposition_identity(parts, lam):
    rep = total_loss(*parts, lam)
    expect = rep.l_img + rep.l_match + rep.l_pose + rep.lambda_tri * rep.l_tri
    assert abs(rep.l_total - expect) <= 1e-12


def test_report_json_roundtrip():
    rep = total_loss(0.1, 0.2, 0.3, 0.4, 0.5)
    assert LossReport.from_json(rep.to_json()) == rep


# -- gradients ------------------------------------------------------------------


def test_grad_check_quadratic_exact(rng):
    x = rng.normal(size=7)
    assert grad_check(lambda v: float(v @ v), x, 2 * x, h=1e-5) < 1e-8


def test_huber_closed_form_gradient():
    r = np.array([0.5])
    assert np.array_equal(huber_grad(r), r)
    assert grad_check(lambda v: float(np.sum(huber(v))), r, huber_grad(r)) < 1e-8


def test_huber_values():
    assert np.allclose(huber(np.array([0.0, 0.5, -1.0, 3.0])), [0.0, 0.125, 0.5, 2.5])


def test_geodesic_gradient_100_points():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(100):
        x, R = rng.normal(size=6), random_rotation(rng)
        worst = max(worst, grad_check(lambda v: geodesic_rot6d(v, R), x, geodesic_rot6d_grad(x, R)))
    assert worst <= 1e-4


def test_geodesic_gradient_not_differentiable_at_zero():
    with pytest.raises(ValueError):
        geodesic_rot6d_grad(rotation_to_rot6d(np.eye(3)), np.eye(3))


def test_translation_gradient_100_points():
    rng = np.random.default_rng(12)
    for _ in range(100):
        t, g = rng.normal(size=3), rng.normal(size=3)
        assert grad_check(lambda v: translation_l2(v, g), t, translation_l2_grad(t, g)) <= 1e-4


def test_huber_gradient_100_points():
    rng = np.random.default_rng(13)
    r = rng.uniform(-3, 3, size=100)
    r = np.where(np.abs(np.abs(r) - 1.0) < 1e-3, r + 0.01, r)
    assert grad_check(lambda v: float(np.sum(huber(v))), r, huber_grad(r)) <= 1e-4
