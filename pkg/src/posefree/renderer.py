"""Attention rendering along epipolar lines.

Every target ray gets ``S`` depth candidates. Each candidate is projected
into both context views, where pixel-aligned features and colors are
gathered. A scoring function of the two views' feature agreement gives a
softmax over candidates; color and expected depth are the weighted sums.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .correlation import softmax
from .errors import AllOccluded, BadRange, CorruptWeights
from .geometry import Intrinsics, Pose, compose, pixel_grid, pixel_rays
from .imaging import DepthMap, bilinear_sample
from .pyramid import FeatureMap
from .weights import as_float32_exact, load_blob, save_blob

DEFAULT_SAMPLES = 64
DEFAULT_RAYS = 192
PATCH_RADIUS = 2


@dataclass
class ContextView:
    image: np.ndarray
    k: Intrinsics
    features: FeatureMap | None = None


@dataclass
class RayBatch:
    k_t: Intrinsics
    p_1t: Pose
    p_2t: Pose
    pixels: np.ndarray  # (R, 2)
    near: float = 0.1
    far: float = 20.0
    n_samples: int = DEFAULT_SAMPLES

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64).reshape(-1, 2)
        if not 0 < self.near < self.far:
            raise BadRange(f"need 0 < near < far, got {self.near}, {self.far}")
        if self.n_samples < 2:
            raise BadRange("at least two samples per ray")


@dataclass
class EpipolarSampleSet:
    """Candidates of ``R`` rays: arrays indexed ``[view, ray, sample, ...]``."""

    depths: np.ndarray  # (R, S)
    pixels: np.ndarray  # (2, R, S, 2)
    features: np.ndarray  # (2, R, S, c)
    colors: np.ndarray  # (2, R, S, 3)
    in_bounds: np.ndarray  # (2, R, S)

    def ray(self, r: int) -> "EpipolarSampleSet":
        return EpipolarSampleSet(self.depths[r : r + 1], self.pixels[:, r : r + 1],
                                 self.features[:, r : r + 1], self.colors[:, r : r + 1],
                                 self.in_bounds[:, r : r + 1])


@dataclass
class RendererParams:
    """Scoring and gating weights.

    ``oracle`` mode scores candidates by negative squared distance between
    the two views' color-patch descriptors, which needs no training.
    """

    seed: int = 0
    mode: str = "learned"
    hidden: int = 32
    oracle_temperature: float = 2e-3
    tensors: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.mode not in ("learned", "oracle"):
            raise ValueError(f"unknown renderer mode {self.mode!r}")

    def learned_weights(self, c: int) -> dict:
        if f"c{c}.w1" not in self.tensors:
            rng = np.random.default_rng([self.seed, 3, c])
            self.tensors[f"c{c}.w1"] = as_float32_exact(
                rng.normal(scale=np.sqrt(1.0 / c), size=(2 * c, self.hidden)))
            self.tensors[f"c{c}.b1"] = as_float32_exact(rng.normal(scale=0.1, size=self.hidden))
            self.tensors[f"c{c}.w2"] = as_float32_exact(
                rng.normal(scale=np.sqrt(2.0 / self.hidden), size=self.hidden))
            self.tensors[f"c{c}.gate"] = as_float32_exact(
                rng.normal(scale=np.sqrt(1.0 / c), size=2 * c))
        return {k: self.tensors[f"c{c}.{k}"] for k in ("w1", "b1", "w2", "gate")}

    def save(self, path) -> None:
        save_blob(path, self.tensors, seed=self.seed,
                  meta={"kind": "renderer", "hidden": self.hidden,
                        "oracle_temperature": self.oracle_temperature})

    @classmethod
    def load(cls, path, mode: str = "learned") -> "RendererParams":
        tensors, header = load_blob(path)
        meta = header.get("meta", {})
        if meta.get("kind") != "renderer":
            raise CorruptWeights(f"{path}: not a renderer weight blob")
        return cls(seed=header.get("seed") or 0, mode=mode, hidden=meta["hidden"],
                   oracle_temperature=meta["oracle_temperature"], tensors=dict(tensors))


def sample_depths(near: float, far: float, n: int = DEFAULT_SAMPLES, stratified: bool = False,
                  seed: int | None = 0, rng: np.random.Generator | None = None) -> np.ndarray:
    """Bin midpoints of ``[near, far]``, or one uniform draw per bin when stratified."""
    if not 0 <= near < far:
        raise BadRange(f"need near < far, got {near}, {far}")
    if n < 1:
        raise BadRange("need at least one sample")
    step = (far - near) / n
    if not stratified:
        return near + (np.arange(n) + 0.5) * step
    rng = rng if rng is not None else np.random.default_rng(seed)
    return near + (np.arange(n) + rng.uniform(0.0, 1.0, size=n)) * step


def feature_coords(xy: np.ndarray, stride: int) -> np.ndarray:
    """Continuous pixel coordinates to cell coordinates of a ``stride`` map."""
    return (xy - (stride - 1) / 2.0) / stride


def patch_descriptor(image: np.ndarray, xy: np.ndarray, radius: int = PATCH_RADIUS) -> np.ndarray:
    """Colors on a ``(2r+1)^2`` grid around ``xy``, flattened to ``(..., 3(2r+1)^2)``."""
    offs = np.arange(-radius, radius + 1, dtype=np.float64)
    oy, ox = np.meshgrid(offs, offs, indexing="ij")
    grid = np.stack([ox.ravel(), oy.ravel()], axis=-1)
    pts = xy[..., None, :] + grid
    vals, _ = bilinear_sample(image, pts)
    return vals.reshape(*xy.shape[:-1], -1)


def _project_candidates(rays: RayBatch, depths: np.ndarray, pose: Pose, k: Intrinsics):
    pts_t = pixel_rays(rays.k_t, rays.pixels)[:, None, :] * depths[..., None]
    pts = pose.apply(pts_t)
    z = pts[..., 2]
    front = z > 1e-9
    zs = np.where(front, z, 1.0)
    uv = np.stack([k.fx * pts[..., 0] / zs + k.cx, k.fy * pts[..., 1] / zs + k.cy], axis=-1)
    return np.where(front[..., None], uv, np.nan), front


def epipolar_gather(rays: RayBatch, ctx1: ContextView, ctx2: ContextView, mode: str = "learned",
                    depths: np.ndarray | None = None) -> EpipolarSampleSet:
    """Project every depth candidate into both contexts and gather there.

    Candidates behind a context camera or outside its image are flagged
    out of bounds; their gathered values are border-clamped placeholders.
    """
    n_rays = len(rays.pixels)
    if depths is None:
        depths = sample_depths(rays.near, rays.far, rays.n_samples)
    depths = np.broadcast_to(np.asarray(depths, dtype=np.float64), (n_rays, np.shape(depths)[-1]))
    pix, feats, cols, inb = [], [], [], []
    for ctx, pose in ((ctx1, rays.p_1t), (ctx2, rays.p_2t)):
        uv, front = _project_candidates(rays, depths, pose, ctx.k)
        col, oob = bilinear_sample(ctx.image, uv)
        if mode == "oracle":
            feat = patch_descriptor(ctx.image, np.where(np.isfinite(uv), uv, 0.0))
        else:
            f = ctx.features
            feat, _ = bilinear_sample(f.data, feature_coords(np.where(np.isfinite(uv), uv, 0.0), f.stride))
        pix.append(uv)
        feats.append(feat)
        cols.append(col)
        inb.append(front & ~oob)
    return EpipolarSampleSet(depths.copy(), np.stack(pix), np.stack(feats), np.stack(cols),
                             np.stack(inb))


def score_candidates(samples: EpipolarSampleSet, params: RendererParams):
    """Per-candidate ``(score, gate)``; the gate is view 1's share of the color."""
    f1, f2 = samples.features
    if params.mode == "oracle":
        dist = np.mean((f1 - f2) ** 2, axis=-1)
        return -dist / params.oracle_temperature, np.full(dist.shape, 0.5)
    tw = params.learned_weights(f1.shape[-1])
    agree = np.concatenate([f1 * f2, np.abs(f1 - f2)], axis=-1)
    hidden = np.maximum(agree @ tw["w1"] + tw["b1"], 0.0)
    score = hidden @ tw["w2"]
    gate = 1.0 / (1.0 + np.exp(-(np.concatenate([f1, f2], axis=-1) @ tw["gate"])))
    return score, gate


def composite(samples: EpipolarSampleSet, score: np.ndarray, gate: np.ndarray):
    """Masked softmax over candidates and the weighted color/depth.

    Candidates seen by both views are preferred; a ray with none falls back
    to candidates seen by either view with uniform weights.

    Returns:
        ``(colors (R, 3), depth (R,), weights (R, S), valid (R,))``.
    """
    in1, in2 = samples.in_bounds
    both = in1 & in2
    has_both = both.any(axis=1, keepdims=True)
    mask = np.where(has_both, both, in1 | in2)
    valid = mask.any(axis=1)
    logits = np.where(has_both, score, 0.0)
    logits = np.where(mask, logits, -np.inf)
    logits = np.where(valid[:, None], logits, 0.0)
    w = softmax(logits, axis=1)
    w = np.where(valid[:, None], w, 0.0)
    g1 = gate * in1
    g2 = (1.0 - gate) * in2
    norm = np.where(g1 + g2 > 0, g1 + g2, 1.0)
    c1, c2 = samples.colors
    mixed = (g1[..., None] * c1 + g2[..., None] * c2) / norm[..., None]
    color = np.sum(w[..., None] * mixed, axis=1)
    depth = np.sum(w * samples.depths, axis=1)
    return color, depth, w, valid


def render_rays(samples: EpipolarSampleSet, params: RendererParams):
    score, gate = score_candidates(samples, params)
    return composite(samples, score, gate)


def render_pixel(samples: EpipolarSampleSet, params: RendererParams):
    """Color and expected depth of a single ray's candidates."""
    color, depth, _, valid = render_rays(samples, params)
    if not valid[0]:
        raise AllOccluded("no candidate is visible in either context view")
    return color[0], float(depth[0])


def sample_pixels(height: int, width: int, n_rays: int = DEFAULT_RAYS, seed: int = 0) -> np.ndarray:
    """Random distinct integer pixels for loss evaluation."""
    rng = np.random.default_rng(seed)
    idx = rng.choice(height * width, size=min(n_rays, height * width), replace=False)
    return np.stack([idx % width, idx // width], axis=-1).astype(np.float64)


def render_image(ctx1: ContextView, ctx2: ContextView, k_t: Intrinsics, height: int, width: int,
                 p_1t: Pose, p_21: Pose, params: RendererParams, near: float = 0.1,
                 far: float = 20.0, n_samples: int = DEFAULT_SAMPLES,
                 teacher_forcing: bool = False, p_21_gt: Pose | None = None,
                 pixels: np.ndarray | None = None, chunk: int = 1024):
    """Render the target view from two contexts.

    The view-2 pose comes from ``P_{2<-t} = P_{2<-1} P_{1<-t}``. With
    ``teacher_forcing`` the ground-truth ``p_21_gt`` replaces the estimate.

    Returns:
        ``(image, depth_map)``; pixels with no visible candidate are black
        and invalid. When ``pixels`` is given only those rays are rendered
        and flat ``(R, 3)`` / ``(R,)`` arrays plus a validity flag come back.
    """
    if teacher_forcing:
        if p_21_gt is None:
            raise ValueError("teacher forcing needs the ground-truth relative pose")
        p_21 = p_21_gt
    p_2t = compose(p_21, p_1t)
    flat = pixels is not None
    pix = (np.asarray(pixels, dtype=np.float64).reshape(-1, 2) if flat
           else pixel_grid(height, width).reshape(-1, 2))
    depths = sample_depths(near, far, n_samples)
    colors = np.zeros((len(pix), 3))
    dvals = np.zeros(len(pix))
    valid = np.zeros(len(pix), dtype=bool)
    for start in range(0, len(pix), chunk):
        sl = slice(start, start + chunk)
        rays = RayBatch(k_t, p_1t, p_2t, pix[sl], near, far, n_samples)
        samples = epipolar_gather(rays, ctx1, ctx2, params.mode, depths)
        colors[sl], dvals[sl], _, valid[sl] = render_rays(samples, params)
    if flat:
        return colors, dvals, valid
    image = np.clip(colors.reshape(height, width, 3), 0.0, 1.0)
    return image, DepthMap(np.where(valid, dvals, 0.0).reshape(height, width),
                           valid.reshape(height, width))
