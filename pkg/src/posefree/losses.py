"""Training objectives and finite-difference gradient verification."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DimensionMismatch, ResolutionMismatch
from .geometry import Intrinsics, Pose, geodesic_distance, pixel_rays, rot6d_to_rotation
from .imaging import DepthMap, bilinear_sample, masked_ssim_map, warp_image
from .matching import ConfidenceMask, FlowField, upsample_flow, upsample_mask
from .renderer import feature_coords

LAMBDA_TRI = 0.01
HUBER_DELTA = 1.0


@dataclass
class LossReport:
    l_img: float
    l_match: float
    l_rot: float
    l_trans: float
    l_pose: float
    l_tri: float
    lambda_tri: float
    l_total: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "LossReport":
        return cls(**json.loads(text))


def loss_img(rendered, target, mask=None) -> float:
    """Mean absolute color difference over (masked) pixels."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise DimensionMismatch(f"{rendered.shape} != {target.shape}")
    diff = np.abs(rendered - target)
    if mask is None:
        return float(diff.mean())
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return 0.0
    return float(diff[mask].mean())


def _full_res(flow: FlowField, mask: ConfidenceMask, shape):
    h, w = shape
    if flow.shape != (h, w):
        flow = upsample_flow(flow, h, w)
    if mask.shape != (h, w):
        mask = upsample_mask(mask, h, w)
    if flow.shape != (h, w) or mask.shape != (h, w):
        raise ResolutionMismatch("flow/mask cannot be brought to image resolution")
    return flow, mask


def _match_term(src, dst, flow: FlowField, mask: ConfidenceMask) -> float:
    m = mask.data
    if not m.any():
        return 0.0
    warped = warp_image(src, flow)
    smap = masked_ssim_map(warped, dst, m)
    return float(np.mean(1.0 - smap[m]))


def loss_match(flow_1: FlowField, flow_2: FlowField, mask_1: ConfidenceMask,
               mask_2: ConfidenceMask, i1, i2) -> float:
    """Confidence-masked warped SSIM loss, symmetric in the two views.

    ``flow_1``/``mask_1`` live on the I1 grid and point into I2 (so I2 is
    warped onto I1); ``flow_2``/``mask_2`` are the reverse. Each direction
    is averaged over its confident pixels and the two are added. Coarser
    flows and masks are upsampled first.
    """
    i1 = np.asarray(i1, dtype=np.float64)
    i2 = np.asarray(i2, dtype=np.float64)
    flow_1, mask_1 = _full_res(flow_1, mask_1, i1.shape[:2])
    flow_2, mask_2 = _full_res(flow_2, mask_2, i2.shape[:2])
    return _match_term(i2, i1, flow_1, mask_1) + _match_term(i1, i2, flow_2, mask_2)


def loss_pose(est: Pose, gt: Pose):
    """``(l_rot, l_trans)``: geodesic angle (rad) and squared translation error."""
    return geodesic_distance(est.R, gt.R), float(np.sum((est.t - gt.t) ** 2))


def huber(r, delta: float = HUBER_DELTA):
    a = np.abs(r)
    return np.where(a <= delta, 0.5 * a * a, delta * (a - 0.5 * delta))


def huber_grad(r, delta: float = HUBER_DELTA):
    return np.clip(r, -delta, delta)


def _project(k: Intrinsics, pose: Pose, pts):
    x = pose.apply(pts)
    z = x[..., 2]
    zs = np.where(z > 1e-9, z, 1.0)
    uv = np.stack([k.fx * x[..., 0] / zs + k.cx, k.fy * x[..., 1] / zs + k.cy], axis=-1)
    return uv, z > 1e-9


def _flow_lookup(flow: FlowField, xy):
    """Flow in pixels at continuous full-resolution pixel coordinates."""
    cell = feature_coords(xy, flow.stride)
    val, oob = bilinear_sample(flow.data, cell)
    return val * flow.stride, oob


def _mask_lookup(mask: ConfidenceMask, xy):
    """True only where all four bilinear neighbours are confident."""
    cell = feature_coords(xy, mask.stride)
    h, w = mask.shape
    x, y = cell[..., 0], cell[..., 1]
    inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    x0 = np.clip(np.floor(x).astype(int), 0, w - 1)
    y0 = np.clip(np.floor(y).astype(int), 0, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    m = mask.data
    return inside & m[y0, x0] & m[y0, x1] & m[y1, x0] & m[y1, x1]


def loss_tri(depth: DepthMap, p_1t: Pose, p_2t: Pose, k1: Intrinsics, k2: Intrinsics,
             flow_21: FlowField, mask: ConfidenceMask, coords, k_t: Intrinsics | None = None,
             delta: float = HUBER_DELTA) -> float:
    """Triplet consistency between rendered depth, poses and flow.

    Target pixels ``coords`` are lifted with ``depth`` and projected into
    view 1 (``i1``) and view 2 (``i2``). ``flow_21`` (on the I1 grid) carries
    ``i1`` to ``i2_hat``; the loss is the mean over confident samples of the
    Huber penalty on ``i2_hat - i2``, summed over both coordinates. Samples
    with invalid depth or behind a camera are dropped.
    """
    k_t = k_t or k1
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    ix = np.clip(np.round(coords[:, 0]).astype(int), 0, depth.shape[1] - 1)
    iy = np.clip(np.round(coords[:, 1]).astype(int), 0, depth.shape[0] - 1)
    d = depth.depth[iy, ix]
    keep = depth.valid[iy, ix]
    pts = pixel_rays(k_t, coords) * np.where(keep, d, 1.0)[:, None]
    i1, front1 = _project(k1, p_1t, pts)
    i2, front2 = _project(k2, p_2t, pts)
    keep &= front1 & front2
    f, oob = _flow_lookup(flow_21, i1)
    conf = keep & ~oob & _mask_lookup(mask, i1)
    if not conf.any():
        return 0.0
    r = (i1 + f) - i2
    return float(np.sum(huber(r[conf], delta)) / conf.sum())


def total_loss(l_img: float, l_match: float, l_rot: float, l_trans: float, l_tri: float,
               lambda_tri: float = LAMBDA_TRI) -> LossReport:
    l_pose = l_rot + l_trans
    total = l_img + l_match + l_pose + lambda_tri * l_tri
    return LossReport(float(l_img), float(l_match), float(l_rot), float(l_trans), float(l_pose),
                      float(l_tri), float(lambda_tri), float(total))


# -- analytic gradients and their verification ----------------------------------------


def geodesic_rot6d(x, R_gt) -> float:
    """Geodesic rotation loss as a function of the 6D parameters."""
    return geodesic_distance(rot6d_to_rotation(x), R_gt)


def geodesic_rot6d_grad(x, R_gt) -> np.ndarray:
    """Gradient of :func:`geodesic_rot6d` by back-propagating through Gram-Schmidt."""
    x = np.asarray(x, dtype=np.float64)
    R_gt = np.asarray(R_gt, dtype=np.float64)
    a, b = x[:3], x[3:]
    na = np.linalg.norm(a)
    c1 = a / na
    bp = b - np.dot(c1, b) * c1
    nb = np.linalg.norm(bp)
    c2 = bp / nb
    R = np.stack([c1, c2, np.cross(c1, c2)], axis=1)
    cos = (np.trace(R.T @ R_gt) - 1.0) / 2.0
    if abs(cos) >= 1.0:
        raise ValueError("geodesic loss is not differentiable at 0 or pi")
    dR = -0.5 / np.sqrt(1.0 - cos * cos) * R_gt
    g1, g2, g3 = dR[:, 0], dR[:, 1], dR[:, 2]
    g1 = g1 + np.cross(c2, g3)
    g2 = g2 + np.cross(g3, c1)
    g_bp = (g2 - c2 * np.dot(c2, g2)) / nb
    g_b = g_bp - c1 * np.dot(c1, g_bp)
    g1 = g1 - (np.dot(c1, b) * g_bp + b * np.dot(c1, g_bp))
    g_a = (g1 - c1 * np.dot(c1, g1)) / na
    return np.concatenate([g_a, g_b])


def translation_l2(t_est, t_gt) -> float:
    return float(np.sum((np.asarray(t_est) - np.asarray(t_gt)) ** 2))


def translation_l2_grad(t_est, t_gt) -> np.ndarray:
    return 2.0 * (np.asarray(t_est, dtype=np.float64) - np.asarray(t_gt, dtype=np.float64))


def grad_check(f, x, grad, h: float = 1e-5) -> float:
    """Max over coordinates of ``|central difference - grad| / max(1, |grad|)``."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    worst = 0.0
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        fd = (f(x + e) - f(x - e)) / (2 * h)
        worst = max(worst, abs(fd - grad.flat[i]) / max(1.0, abs(grad.flat[i])))
    return worst
