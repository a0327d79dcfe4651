"""Named invariant checks run by ``posefree check``.

Each check returns ``(ok, detail)``. They are small, seeded and quick, so
the whole suite runs in a few seconds on one core.
"""

from __future__ import annotations

import math
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import Config
from .correlation import build_cost_volume
from .errors import PosefreeError
from .geometry import (Pose, compose, epipolar_distance, epipolar_line, fundamental_from_pose,
                       geodesic_distance, random_pose, random_rotation, relative_pose,
                       rot6d_to_rotation, rot_x, rotation_to_rot6d)
from .imaging import DepthMap
from .losses import (geodesic_rot6d, geodesic_rot6d_grad, grad_check, huber, huber_grad,
                     loss_match, loss_pose, loss_tri, total_loss, translation_l2,
                     translation_l2_grad)
from .matching import ConfidenceMask, FlowField, cyclic_mask
from .pipeline import WEIGHT_FILES, PipelineState
from .pyramid import FeatureMap
from .synth import gt_flow, gt_warp_mask, make_scene, render_gt, v_trajectory

N_CASES = 100


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str

    def to_json(self) -> dict:
        return {"name": self.name, "ok": bool(self.ok), "detail": self.detail}


def check_rot6d_roundtrip():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(N_CASES):
        R = random_rotation(rng)
        worst = max(worst, float(np.abs(rot6d_to_rotation(rotation_to_rot6d(R)) - R).max()))
    return worst <= 1e-9, f"max error {worst:.2e}"


def check_geodesic_known():
    d = math.degrees(geodesic_distance(rot_x(math.radians(30)), rot_x(math.radians(75))))
    return abs(d - 45.0) <= 1e-9, f"{d!r} deg"


def check_compose_matrix():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(N_CASES):
        a, b = random_pose(rng), random_pose(rng)
        worst = max(worst, float(np.abs(compose(a, b).matrix - a.matrix @ b.matrix).max()))
    return worst <= 1e-12, f"max error {worst:.2e}"


def check_epipolar_constraint():
    rng = np.random.default_rng(2)
    scene_cams = v_trajectory(3, 64, 64, baseline=0.5, converge=1.0)
    c1, c2 = scene_cams[0], scene_cams[2]
    p21 = relative_pose(c1.pose, c2.pose)
    F = fundamental_from_pose(p21, c1.k, c2.k)
    pts = rng.uniform([-1, -1, 3], [1, 1, 6], size=(N_CASES, 3))
    x1 = c1.pose.apply(pts)
    x2 = c2.pose.apply(pts)
    uv1 = x1[:, :2] / x1[:, 2:] * [c1.k.fx, c1.k.fy] + [c1.k.cx, c1.k.cy]
    uv2 = x2[:, :2] / x2[:, 2:] * [c2.k.fx, c2.k.fy] + [c2.k.cx, c2.k.cy]
    worst = float(epipolar_distance(uv2, epipolar_line(F, uv1)).max())
    return worst <= 1e-6, f"max distance {worst:.2e} px"


def check_cost_volume_oracle():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(4, 5, 8))
    b = rng.normal(size=(4, 5, 8))
    a /= np.linalg.norm(a, axis=-1, keepdims=True)
    b /= np.linalg.norm(b, axis=-1, keepdims=True)
    c = build_cost_volume(FeatureMap(a, 4), FeatureMap(b, 4)).data
    worst = 0.0
    for i, j, k, l in np.ndindex(4, 5, 4, 5):
        worst = max(worst, abs(c[i, j, k, l] - float(np.dot(a[i, j], b[k, l]))))
    return worst <= 1e-12, f"max error {worst:.2e}"


def check_grad_rot6d():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(N_CASES):
        x, R = rng.normal(size=6), random_rotation(rng)
        worst = max(worst, grad_check(lambda v: geodesic_rot6d(v, R), x, geodesic_rot6d_grad(x, R)))
    return worst <= 1e-4, f"max relative error {worst:.2e}"


def check_grad_translation():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(N_CASES):
        t, g = rng.normal(size=3), rng.normal(size=3)
        worst = max(worst, grad_check(lambda v: translation_l2(v, g), t, translation_l2_grad(t, g)))
    return worst <= 1e-4, f"max relative error {worst:.2e}"


def check_grad_huber():
    rng = np.random.default_rng(6)
    r = rng.uniform(-3, 3, size=N_CASES)
    r = r[np.abs(np.abs(r) - 1.0) > 1e-3]  # the kink is not differentiable
    worst = grad_check(lambda v: float(np.sum(huber(v))), r, huber_grad(r))
    return worst <= 1e-4, f"max relative error {worst:.2e}"


def check_loss_zero_at_truth():
    sc = make_scene(7, "textured_plane", 2000, "smooth")
    rig = v_trajectory(3, 128, 128, baseline=0.4)
    c1, ct, c2 = rig[0], rig[1], rig[2]
    i1, _ = render_gt(sc, c1)
    i2, _ = render_gt(sc, c2)
    _, depth_t = render_gt(sc, ct)
    f12, m12 = gt_warp_mask(sc, c1, c2)
    f21, m21 = gt_warp_mask(sc, c2, c1)
    p21 = relative_pose(c1.pose, c2.pose)
    p1t = relative_pose(ct.pose, c1.pose)
    p2t = relative_pose(ct.pose, c2.pose)
    l_rot, l_trans = loss_pose(p21, p21)
    l_m = loss_match(f12, f21, ConfidenceMask(m12, 1), ConfidenceMask(m21, 1), i1, i2)
    coords = np.argwhere(depth_t.valid)[:, ::-1].astype(np.float64)
    l_t = loss_tri(DepthMap(depth_t.depth, depth_t.valid), p1t, p2t, c1.k, c2.k, f12,
                   ConfidenceMask(m12, 1), coords, ct.k)
    rep = total_loss(0.0, l_m, l_rot, l_trans, l_t)
    ident = abs(rep.l_total - (rep.l_img + rep.l_match + rep.l_pose + rep.lambda_tri * rep.l_tri))
    ok = l_rot + l_trans == 0 and l_t < 1e-6 and l_m < 1e-3 and ident <= 1e-12
    return ok, f"l_pose={l_rot + l_trans:.1e} l_tri={l_t:.2e} l_match={l_m:.2e} identity={ident:.1e}"


def check_mask_monotone(tau: float):
    """Masks shrink as tau shrinks; tau = 0 must yield an empty but valid mask."""
    rng = np.random.default_rng(8)
    fwd = FlowField(rng.normal(scale=2.0, size=(12, 12, 2)), 4)
    bwd = FlowField(-fwd.data + rng.normal(scale=0.8, size=(12, 12, 2)), 4)
    taus = sorted({0.0, 0.5, 1.0, 2.0, 4.0, float(tau)})
    masks = [cyclic_mask(fwd, bwd, t).data for t in taus]
    nested = all(np.all(a <= b) for a, b in zip(masks, masks[1:]))
    empty_at_zero = not masks[0].any()
    return nested and empty_at_zero, f"taus {taus}, sizes {[int(m.sum()) for m in masks]}"


def check_weights(cfg: Config):
    """Load every blob in ``weights_dir`` (or round-trip seeded ones); one result per file."""
    results = []
    if cfg.weights_dir:
        wd = Path(cfg.weights_dir)
        for key, fname in WEIGHT_FILES.items():
            path = wd / fname
            if not path.exists():
                continue
            try:
                _load_one(key, path)
                results.append(CheckResult(f"weights.{key}", True, f"{fname} loaded"))
            except (PosefreeError, OSError) as exc:
                results.append(CheckResult(f"weights.{key}", False, f"{fname}: {exc}"))
        if not results:
            results.append(CheckResult("weights.present", False, f"no weight blobs in {wd}"))
        return results
    state = PipelineState.from_config(cfg)
    with tempfile.TemporaryDirectory() as tmp:
        state.save_weights(tmp)
        again = PipelineState.from_config(cfg.with_overrides(weights_dir=tmp))
    same = all(np.array_equal(a, again.head.tensors[k]) for k, a in state.head.tensors.items())
    results.append(CheckResult("weights.roundtrip", same, "seeded blobs saved and reloaded"))
    return results


def _load_one(key: str, path: Path):
    from .correlation import AggregatorParams
    from .posehead import PoseHeadParams
    from .pyramid import PyramidParams
    from .renderer import RendererParams

    loader = {"pyramid": PyramidParams.load, "aggregator": AggregatorParams.load,
              "head": PoseHeadParams.load, "renderer": RendererParams.load}[key]
    return loader(path)


CHECKS = {
    "geometry.rot6d_roundtrip": check_rot6d_roundtrip,
    "geometry.geodesic_known": check_geodesic_known,
    "geometry.compose_matrix": check_compose_matrix,
    "geometry.epipolar_constraint": check_epipolar_constraint,
    "correlation.cost_volume_oracle": check_cost_volume_oracle,
    "losses.grad_rot6d": check_grad_rot6d,
    "losses.grad_translation": check_grad_translation,
    "losses.grad_huber": check_grad_huber,
    "losses.zero_at_truth": check_loss_zero_at_truth,
}


def run_checks(cfg: Config) -> list:
    out = []
    for name, fn in CHECKS.items():
        out.append(_run(name, fn))
    out.append(_run("matching.mask_monotone", lambda: check_mask_monotone(cfg.tau)))
    try:
        out.extend(check_weights(cfg))
    except (PosefreeError, OSError) as exc:
        out.append(CheckResult("weights.load", False, str(exc)))
    return out


def _run(name, fn) -> CheckResult:
    try:
        ok, detail = fn()
    except Exception as exc:  # a crashing check is a failing check
        return CheckResult(name, False, f"{type(exc).__name__}: {exc}")
    return CheckResult(name, bool(ok), detail)
