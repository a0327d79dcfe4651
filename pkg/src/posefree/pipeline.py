"""Wiring of the full model: parameters, pair estimation, rendering, scoring."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .config import Config
from .correlation import AggregatorParams, build_cost_volume
from .errors import DegenerateInput, DegenerateRatio
from .evaluation import PairRecord, classify, frame_skip_select, overlap_score, pair_overlap_from_matcher
from .geometry import Pose, geodesic_distance, relative_pose, translation_angular_error
from .imaging import mse, psnr, ssim
from .losses import LossReport, loss_img, loss_match, loss_pose, loss_tri, total_loss
from .matching import ConfidenceMask, cyclic_mask, flow_from_cost, upsample_flow, upsample_mask
from .posehead import PoseEstimate, PoseHeadParams, estimate_pose
from .pyramid import FeatureMap, PyramidParams, l2_normalize
from .renderer import ContextView, RendererParams, render_image, sample_pixels

log = logging.getLogger(__name__)

WEIGHT_FILES = {
    "pyramid": "pyramid.bin",
    "aggregator": "aggregator.bin",
    "head": "posehead.bin",
    "renderer": "renderer.bin",
}


@dataclass
class PipelineState:
    config: Config
    pyramid: PyramidParams
    aggregator: AggregatorParams
    head: PoseHeadParams
    renderer: RendererParams

    @classmethod
    def from_config(cls, config: Config) -> "PipelineState":
        """Seeded parameters, replaced by blobs found in ``config.weights_dir``."""
        mode = "oracle" if config.oracle_scoring else "learned"
        pyramid = PyramidParams(config.pyramid_seed, config.channels, config.feature_mode,
                                config.levels)
        aggregator = AggregatorParams(config.seed, config.agg_dk, config.agg_mix)
        head = PoseHeadParams(config.head_seed)
        renderer = RendererParams(config.renderer_seed, mode,
                                  oracle_temperature=config.oracle_temperature)
        if config.weights_dir:
            wd = Path(config.weights_dir)
            if (wd / WEIGHT_FILES["pyramid"]).exists():
                pyramid = PyramidParams.load(wd / WEIGHT_FILES["pyramid"])
            if (wd / WEIGHT_FILES["aggregator"]).exists():
                aggregator = AggregatorParams.load(wd / WEIGHT_FILES["aggregator"])
            if (wd / WEIGHT_FILES["head"]).exists():
                head = PoseHeadParams.load(wd / WEIGHT_FILES["head"])
            if (wd / WEIGHT_FILES["renderer"]).exists():
                renderer = RendererParams.load(wd / WEIGHT_FILES["renderer"], mode)
                renderer.oracle_temperature = config.oracle_temperature
        return cls(config, pyramid, aggregator, head, renderer)

    def save_weights(self, directory) -> None:
        wd = Path(directory)
        wd.mkdir(parents=True, exist_ok=True)
        self.pyramid.save(wd / WEIGHT_FILES["pyramid"])
        self.aggregator.save(wd / WEIGHT_FILES["aggregator"])
        self.head.save(wd / WEIGHT_FILES["head"])
        self.renderer.save(wd / WEIGHT_FILES["renderer"])

    def estimate(self, i1, i2) -> PoseEstimate:
        return estimate_pose(i1, i2, self)


def render_target(state: PipelineState, i1, i2, k1, k2, k_t, size, p_1t: Pose,
                  est: PoseEstimate | None, p_21_gt: Pose | None = None,
                  teacher_forcing: bool | None = None, near=None, far=None, pixels=None):
    """Render the target view from the two contexts.

    ``teacher_forcing`` (default: the config flag) swaps the estimated
    relative pose for ``p_21_gt``.
    """
    cfg = state.config
    tf = cfg.teacher_forcing if teacher_forcing is None else teacher_forcing
    feats = (est.d1, est.d2) if est is not None else (None, None)
    p_21 = est.pose if est is not None else p_21_gt
    return render_image(ContextView(i1, k1, feats[0]), ContextView(i2, k2, feats[1]), k_t,
                        size[0], size[1], p_1t, p_21, state.renderer,
                        near if near is not None else cfg.near,
                        far if far is not None else cfg.far, cfg.samples,
                        teacher_forcing=tf, p_21_gt=p_21_gt, pixels=pixels)


MATCH_RADIUS = 2  # neighbourhood of pooled cells per descriptor
MIN_SIMILARITY = 0.8
MIN_CELL_STD = 0.01


def context_descriptors(img, stride: int, radius: int = MATCH_RADIUS):
    """Descriptors from a ``(2r+1)^2`` window of average-pooled cells.

    Returns ``(features, textured)``; ``textured`` is False for cells whose
    own pixels are flat, which carry no evidence of a correspondence.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w, c = img.shape
    cells = img.reshape(h // stride, stride, w // stride, stride, c)
    textured = cells.std(axis=(1, 3, 4)) > MIN_CELL_STD
    pooled = np.pad(cells.mean(axis=(1, 3)), ((radius, radius), (radius, radius), (0, 0)),
                    mode="edge")
    win = sliding_window_view(pooled, (2 * radius + 1, 2 * radius + 1), axis=(0, 1))
    d = win.reshape(h // stride, w // stride, -1)
    d = d - d.mean(axis=-1, keepdims=True)
    return l2_normalize(d), textured


def matcher_flows(i1, i2, stride: int = 4, tau: float = 2.0):
    """Flows and confidence masks of the overlap matcher, both directions, full resolution.

    A cell is confident when it is textured, its best similarity exceeds
    :data:`MIN_SIMILARITY` and the forward-backward cycle closes within
    ``tau`` cells.
    """
    d1, t1 = context_descriptors(i1, stride)
    d2, t2 = context_descriptors(i2, stride)
    c = build_cost_volume(FeatureMap(d1, stride), FeatureMap(d2, stride))
    fwd = flow_from_cost(c, stride=stride)
    bwd = flow_from_cost(c.T, stride=stride)
    m = c.matrix
    ok1 = t1 & (m.max(axis=1).reshape(t1.shape) > MIN_SIMILARITY)
    ok2 = t2 & (m.max(axis=0).reshape(t2.shape) > MIN_SIMILARITY)
    m_fwd = ConfidenceMask(cyclic_mask(fwd, bwd, tau).data & ok1, stride)
    m_bwd = ConfidenceMask(cyclic_mask(bwd, fwd, tau).data & ok2, stride)
    h, w = np.shape(i1)[:2]
    return (upsample_flow(fwd, h, w), upsample_flow(bwd, h, w),
            upsample_mask(m_fwd, h, w), upsample_mask(m_bwd, h, w))


def matcher_overlap(i1, i2, stride: int = 4, tau: float = 2.0):
    """``(o12, o21)`` from the patch matcher's confident fractions."""
    return pair_overlap_from_matcher(*matcher_flows(i1, i2, stride, tau))


def pair_losses(state: PipelineState, i1, i2, it, k1, k2, k_t, p_1t, p_21_gt, est: PoseEstimate,
                rendered, depth, teacher_forcing: bool) -> LossReport:
    """Full objective for one triplet; ``it`` only enters the image loss."""
    cfg = state.config
    p_21 = p_21_gt if teacher_forcing else est.pose
    p_2t = p_21 @ p_1t
    l_rot, l_trans = loss_pose(est.pose, p_21_gt)
    l_im = loss_img(rendered, it, depth.valid)
    l_m = loss_match(est.flow, est.flow_bwd, est.mask, est.mask_bwd, i1, i2)
    coords = sample_pixels(depth.shape[0], depth.shape[1], cfg.rays, cfg.seed)
    l_t = loss_tri(depth, p_1t, p_2t, k1, k2, est.flow, est.mask, coords, k_t, cfg.huber_delta)
    return total_loss(l_im, l_m, l_rot, l_trans, l_t, cfg.lambda_tri)


def evaluate_scene(state: PipelineState, scene, name: str, oracle_overlap=None) -> PairRecord:
    """Run the frame-skip protocol on one scene directory."""
    cfg = state.config
    size = cfg.image_size
    a, t, b = frame_skip_select(len(scene))
    i1, k1 = scene.load_image(a, size)
    i2, k2 = scene.load_image(b, size)
    f1, ft, f2 = scene.frames[a], scene.frames[t], scene.frames[b]
    k_t = scene.intrinsics(t, size, reference=a)
    p_21_gt = relative_pose(f1.pose, f2.pose)
    p_1t = relative_pose(ft.pose, f1.pose)
    est = state.estimate(i1, i2)
    rec = {"rot_err_deg": math.degrees(geodesic_distance(est.pose.R, p_21_gt.R)),
           "trans_abs_m": float(np.linalg.norm(est.pose.t - p_21_gt.t))}
    try:
        rec["trans_ang_deg"] = translation_angular_error(est.pose.t, p_21_gt.t)
    except DegenerateInput:
        rec["trans_ang_deg"] = math.nan
    near = scene.meta.get("near", cfg.near)
    far = scene.meta.get("far", cfg.far)
    img, _ = render_target(state, i1, i2, k1, k2, k_t, (size, size), p_1t, est, p_21_gt,
                           near=near, far=far)
    if scene.has_image(t):
        target, _ = scene.load_image(t, size)
        rec.update(psnr=psnr(img, target), ssim=ssim(img, target), mse=mse(img, target))
    o12, o21 = matcher_overlap(i1, i2, cfg.overlap_stride, cfg.tau)
    try:
        ov = overlap_score(o12, o21)
    except DegenerateRatio:
        log.warning("%s: matcher found no confident overlap", name)
        ov = 1e-9
    split = classify(ov, cfg.small_max, cfg.large_min).value
    return PairRecord(name, f1.frame_id, ft.frame_id, f2.frame_id, ov, split, o12=o12, o21=o21,
                      oracle_overlap=math.nan if oracle_overlap is None else oracle_overlap,
                      **rec)

