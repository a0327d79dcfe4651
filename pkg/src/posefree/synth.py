"""Synthetic scenes with exact ground truth.

Two kinds of geometry are supported. Point clouds are rendered by
z-buffered square splats. Textured rectangles (``textured_plane`` and
``layered`` scenes) are ray-cast analytically, so depth, flow and
visibility are exact at any continuous pixel position; their ``points``
are samples of the surfaces kept for serialization and bounds checks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyView, ZeroOverlap
from .evaluation import overlap_score
from .geometry import Intrinsics, Pose, compose, invert, pixel_grid, pixel_rays, rot_x, rot_y
from .imaging import DepthMap, bilinear_sample
from .matching import FlowField

BBOX = np.array([[-4.0, 4.0], [-4.0, 4.0], [1.0, 8.0]])
SMOOTH_BAND = (0.4, 1.6)  # cycles per metre
RICH_BAND = (1.5, 5.0)
N_WAVES = 8
COVIS_RTOL = 0.01


@dataclass
class Texture:
    """Per-channel sum of plane waves over surface coordinates ``(s, t)``."""

    freqs: np.ndarray  # (3, K, 2) cycles per metre
    phases: np.ndarray  # (3, K)
    amps: np.ndarray  # (3, K)
    base: np.ndarray  # (3,)

    @classmethod
    def random(cls, rng: np.random.Generator, band=SMOOTH_BAND, n_waves: int = N_WAVES):
        mag = rng.uniform(*band, size=(3, n_waves))
        ang = rng.uniform(0, np.pi, size=(3, n_waves))
        freqs = np.stack([mag * np.cos(ang), mag * np.sin(ang)], axis=-1)
        amps = rng.uniform(0.5, 1.0, size=(3, n_waves))
        amps *= 0.42 / amps.sum(axis=1, keepdims=True)
        return cls(freqs, rng.uniform(0, 2 * np.pi, size=(3, n_waves)), amps,
                   rng.uniform(0.45, 0.55, size=3))

    def __call__(self, st: np.ndarray) -> np.ndarray:
        st = np.asarray(st, dtype=np.float64)
        arg = 2 * np.pi * np.einsum("...d,ckd->...ck", st, self.freqs) + self.phases
        return self.base + np.sum(self.amps * np.sin(arg), axis=-1)

    def to_json(self) -> dict:
        return {k: np.asarray(getattr(self, k)).tolist() for k in ("freqs", "phases", "amps", "base")}

    @classmethod
    def from_json(cls, obj) -> "Texture":
        return cls(*(np.asarray(obj[k], dtype=np.float64) for k in ("freqs", "phases", "amps", "base")))


@dataclass
class TexturedPlane:
    """Rectangle ``origin + s*u + t*v`` with ``|s| <= half[0]``, ``|t| <= half[1]``."""

    origin: np.ndarray
    u: np.ndarray
    v: np.ndarray
    half: tuple
    texture: Texture

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.u, self.v)

    def point(self, st) -> np.ndarray:
        st = np.asarray(st, dtype=np.float64)
        return self.origin + st[..., :1] * self.u + st[..., 1:2] * self.v

    def to_json(self) -> dict:
        return {"origin": self.origin.tolist(), "u": self.u.tolist(), "v": self.v.tolist(),
                "half": list(self.half), "texture": self.texture.to_json()}

    @classmethod
    def from_json(cls, obj) -> "TexturedPlane":
        return cls(np.asarray(obj["origin"], float), np.asarray(obj["u"], float),
                   np.asarray(obj["v"], float), tuple(obj["half"]), Texture.from_json(obj["texture"]))


@dataclass
class Scene:
    points: np.ndarray
    colors: np.ndarray
    kind: str = "points"
    planes: list = field(default_factory=list)
    seed: int = 0
    bbox: np.ndarray = field(default_factory=lambda: BBOX.copy())

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if len(self.points) < 1 or not np.all(np.isfinite(self.points)):
            raise ValueError("scene needs at least one finite point")

    def save(self, directory) -> None:
        """``scene.json`` plus ``points.bin`` (little-endian float64 rows x, y, z, r, g, b)."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        meta = {"kind": self.kind, "seed": self.seed, "bbox": self.bbox.tolist(),
                "n_points": len(self.points), "planes": [p.to_json() for p in self.planes]}
        (directory / "scene.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
        np.concatenate([self.points, self.colors], axis=1).astype("<f8").tofile(directory / "points.bin")

    @classmethod
    def load(cls, directory) -> "Scene":
        directory = Path(directory)
        meta = json.loads((directory / "scene.json").read_text())
        blob = np.fromfile(directory / "points.bin", dtype="<f8").reshape(meta["n_points"], 6)
        return cls(blob[:, :3], blob[:, 3:], meta["kind"],
                   [TexturedPlane.from_json(p) for p in meta["planes"]], meta["seed"],
                   np.asarray(meta["bbox"]))


@dataclass(frozen=True)
class Camera:
    k: Intrinsics
    pose: Pose  # world -> camera
    width: int
    height: int

    @property
    def center(self) -> np.ndarray:
        return -self.pose.R.T @ self.pose.t


def default_intrinsics(width: int, height: int, fov_deg: float = 60.0) -> Intrinsics:
    f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
    return Intrinsics(f, f, (width - 1) / 2.0, (height - 1) / 2.0)


def look_camera(position, yaw: float = 0.0, pitch: float = 0.0, k: Intrinsics = None,
                width: int = 64, height: int = 64) -> Camera:
    """Camera at ``position`` looking down +z, turned by yaw (about y) then pitch (about x)."""
    cam_to_world = rot_y(yaw) @ rot_x(pitch)
    R = cam_to_world.T
    pose = Pose(R, -R @ np.asarray(position, dtype=np.float64))
    return Camera(k or default_intrinsics(width, height), pose, width, height)


@dataclass
class CameraRig:
    cameras: list
    frame_ids: list = None

    def __post_init__(self):
        if self.frame_ids is None:
            self.frame_ids = list(range(len(self.cameras)))

    def __len__(self):
        return len(self.cameras)

    def __getitem__(self, i) -> Camera:
        return self.cameras[i]


def make_rig(n_frames: int, width: int, height: int, step=(0.1, 0.0, 0.0),
             yaw_step: float = 0.0, fov_deg: float = 60.0, start=(0.0, 0.0, 0.0)) -> CameraRig:
    """Linear trajectory: frame ``i`` sits at ``start + i * step`` with yaw ``i * yaw_step``."""
    k = default_intrinsics(width, height, fov_deg)
    start = np.asarray(start, dtype=np.float64)
    step = np.asarray(step, dtype=np.float64)
    cams = [look_camera(start + i * step, yaw=i * yaw_step, k=k, width=width, height=height)
            for i in range(n_frames)]
    return CameraRig(cams)


def v_trajectory(n_frames: int, width: int, height: int, baseline: float = 0.5,
                 pullback: float = 0.6, converge: float = 1.0, look_depth: float = 4.0,
                 pitch_deg: float = 0.0, fov_deg: float = 60.0, center: int | None = None) -> CameraRig:
    """Frames on a V around ``center``: the apex looks forward, the arms sit back.

    Frame ``center + s`` is at ``x = baseline * s / center`` and
    ``z = -pullback * |s| / center``. With ``converge = 1`` every camera
    turns to face the point ``(0, 0, look_depth)``; 0 keeps them parallel.
    Pulling the arms back lets the two outer frames jointly cover the
    apex frustum, which is what view synthesis of the apex needs.
    """
    if n_frames < 3:
        raise ValueError("need at least three frames")
    k = default_intrinsics(width, height, fov_deg)
    c = n_frames // 2 if center is None else center
    cams = []
    for i in range(n_frames):
        s = (i - c) / max(c, 1)
        pos = np.array([baseline * s, 0.0, -pullback * abs(s)])
        yaw = -converge * np.arctan2(pos[0], look_depth - pos[2])
        cams.append(look_camera(pos, yaw=yaw, pitch=np.radians(pitch_deg) * s, k=k,
                                width=width, height=height))
    return CameraRig(cams)


# -- scene generation ---------------------------------------------------------------


def _tilted_plane(rng, depth, half, band, max_tilt_deg=15.0) -> TexturedPlane:
    tilt = np.radians(rng.uniform(-max_tilt_deg, max_tilt_deg, size=2))
    R = rot_y(tilt[0]) @ rot_x(tilt[1])
    return TexturedPlane(np.array([rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), depth]),
                         R[:, 0].copy(), R[:, 1].copy(), tuple(half), Texture.random(rng, band))


def _plane_samples(rng, plane: TexturedPlane, n: int):
    st = rng.uniform(-1, 1, size=(n, 2)) * np.asarray(plane.half)
    return plane.point(st), np.clip(plane.texture(st), 0, 1)


def make_scene(seed: int, kind: str = "points", n: int = 2000, texture: str = "smooth") -> Scene:
    """Deterministic scene inside :data:`BBOX`.

    ``kind`` is ``points`` (random colored points), ``textured_plane`` (one
    tilted wall) or ``layered`` (a wall partly hidden by a nearer panel).
    ``texture`` chooses the wave band: ``smooth`` or ``rich``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    band = {"smooth": SMOOTH_BAND, "rich": RICH_BAND}[texture]
    if kind == "points":
        lo, hi = BBOX[:, 0] + [1.0, 1.0, 1.0], BBOX[:, 1] - [1.0, 1.0, 1.0]
        pts = rng.uniform(lo, hi, size=(n, 3))
        return Scene(pts, rng.uniform(0, 1, size=(n, 3)), "points", [], seed)
    if kind == "textured_plane":
        planes = [_tilted_plane(rng, rng.uniform(3.5, 4.5), (3.0, 3.0), band)]
    elif kind == "layered":
        back = _tilted_plane(rng, rng.uniform(4.5, 5.0), (3.0, 3.0), band, 10.0)
        front = _tilted_plane(rng, rng.uniform(2.2, 2.6), (0.5, 0.5), band, 10.0)
        planes = [back, front]
    else:
        raise ValueError(f"unknown scene kind {kind!r}")
    counts = np.full(len(planes), n // len(planes))
    counts[: n % len(planes)] += 1
    samples = [_plane_samples(rng, p, max(int(c), 1)) for p, c in zip(planes, counts)]
    pts = np.concatenate([s[0] for s in samples])
    cols = np.concatenate([s[1] for s in samples])
    return Scene(pts, cols, kind, planes, seed)


# -- rendering ------------------------------------------------------------------------


def raycast(scene: Scene, cam: Camera, xy):
    """Nearest plane hit behind continuous pixels ``xy`` of shape ``(..., 2)``.

    Returns ``(depth, color, hit)``; depth is the camera z-coordinate.
    """
    xy = np.asarray(xy, dtype=np.float64)
    d_cam = pixel_rays(cam.k, xy)
    d_world = d_cam @ cam.pose.R  # R^T d for row vectors
    c = cam.center
    depth = np.full(xy.shape[:-1], np.inf)
    color = np.zeros(xy.shape[:-1] + (3,))
    for plane in scene.planes:
        n = plane.normal
        denom = d_world @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = np.where(np.abs(denom) > 1e-12, (plane.origin - c) @ n / denom, np.inf)
        hit = c + lam[..., None] * d_world
        rel = hit - plane.origin
        st = np.stack([rel @ plane.u, rel @ plane.v], axis=-1)
        inside = (np.abs(st[..., 0]) <= plane.half[0]) & (np.abs(st[..., 1]) <= plane.half[1])
        better = inside & (lam > 0) & (lam < depth)
        depth = np.where(better, lam, depth)
        color = np.where(better[..., None], np.clip(plane.texture(st), 0, 1), color)
    hit = np.isfinite(depth)
    return np.where(hit, depth, 0.0), color, hit


def _splat(scene: Scene, cam: Camera, radius: int):
    """z-buffered square splats; returns depth, color, valid and winning point index."""
    h, w = cam.height, cam.width
    xc = cam.pose.apply(scene.points)
    z = xc[:, 2]
    front = z > 1e-9
    uv = np.full((len(z), 2), np.nan)
    uv[front, 0] = cam.k.fx * xc[front, 0] / z[front] + cam.k.cx
    uv[front, 1] = cam.k.fy * xc[front, 1] / z[front] + cam.k.cy
    ids = np.flatnonzero(front)
    px = np.round(uv[ids]).astype(np.int64)
    offs = np.arange(-radius, radius + 1)
    oy, ox = np.meshgrid(offs, offs, indexing="ij")
    sx = (px[:, 0:1] + ox.ravel()).ravel()
    sy = (px[:, 1:2] + oy.ravel()).ravel()
    sid = np.repeat(ids, ox.size)
    ok = (sx >= 0) & (sx < w) & (sy >= 0) & (sy < h)
    sx, sy, sid = sx[ok], sy[ok], sid[ok]
    flat = sy * w + sx
    order = np.lexsort((sid, z[sid], flat))
    flat, sid = flat[order], sid[order]
    first = np.ones(len(flat), dtype=bool)
    first[1:] = flat[1:] != flat[:-1]
    winner = np.full(h * w, -1, dtype=np.int64)
    winner[flat[first]] = sid[first]
    winner = winner.reshape(h, w)
    valid = winner >= 0
    depth = np.where(valid, z[np.maximum(winner, 0)], 0.0)
    color = np.where(valid[..., None], scene.colors[np.maximum(winner, 0)], 0.0)
    return depth, color, valid, winner


def render_gt(scene: Scene, cam: Camera, splat_radius: int = 1):
    """Ground-truth image and depth map; background is black and invalid."""
    if scene.planes:
        depth, color, valid = raycast(scene, cam, pixel_grid(cam.height, cam.width))
    else:
        depth, color, valid, _ = _splat(scene, cam, splat_radius)
    if not valid.any():
        raise EmptyView("camera sees no part of the scene")
    return color, DepthMap(depth, valid)


def _reproject(cam1: Camera, cam2: Camera, xy, depth):
    rel = compose(cam2.pose, invert(cam1.pose))
    x1 = pixel_rays(cam1.k, xy) * depth[..., None]
    x2 = rel.apply(x1)
    z2 = x2[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack([cam2.k.fx * x2[..., 0] / z2 + cam2.k.cx,
                       cam2.k.fy * x2[..., 1] / z2 + cam2.k.cy], axis=-1)
    return uv, z2


def _in_frame(cam: Camera, uv, eps: float = 1e-9):
    # eps absorbs roundoff of border pixels that reproject onto themselves
    return ((uv[..., 0] >= -eps) & (uv[..., 0] <= cam.width - 1 + eps)
            & (uv[..., 1] >= -eps) & (uv[..., 1] <= cam.height - 1 + eps))


def gt_flow(scene: Scene, cam1: Camera, cam2: Camera, splat_radius: int = 1):
    """Flow ``F_{2<-1}`` on the view-1 grid and its covisibility mask.

    A pixel is covisible when its surface point lands inside view 2 and the
    depth seen there agrees within 1 % (plane scenes re-cast the exact ray;
    point scenes read the nearest z-buffer pixel).
    """
    xy = pixel_grid(cam1.height, cam1.width)
    _, depth1 = render_gt(scene, cam1, splat_radius)
    d = np.where(depth1.valid, depth1.depth, 1.0)
    uv, z2 = _reproject(cam1, cam2, xy, d)
    ok = depth1.valid & (z2 > 0) & np.all(np.isfinite(uv), axis=-1)
    uv = np.where(ok[..., None], uv, 0.0)
    ok &= _in_frame(cam2, uv)
    if scene.planes:
        seen, _, hit = raycast(scene, cam2, uv)
    else:
        seen_map, _, valid2, _ = _splat(scene, cam2, splat_radius)
        iy = np.clip(np.round(uv[..., 1]).astype(int), 0, cam2.height - 1)
        ix = np.clip(np.round(uv[..., 0]).astype(int), 0, cam2.width - 1)
        seen, hit = seen_map[iy, ix], valid2[iy, ix]
    covis = ok & hit & (np.abs(seen - z2) <= COVIS_RTOL * np.abs(z2))
    flow = np.where(covis[..., None], uv - xy, 0.0)
    return FlowField(flow, 1), covis


def gt_warp_mask(scene: Scene, cam1: Camera, cam2: Camera, splat_radius: int = 1):
    """Covisible pixels whose whole bilinear footprint in view 2 lies on the surface.

    Warping view 2 onto view 1 with the ground-truth flow is then limited
    only by interpolation of the texture, never by mixing in background.
    """
    flow, covis = gt_flow(scene, cam1, cam2, splat_radius)
    _, depth2 = render_gt(scene, cam2, splat_radius)
    cover, _ = bilinear_sample(depth2.valid.astype(np.float64)[..., None],
                               pixel_grid(cam1.height, cam1.width) + flow.data)
    return flow, covis & (cover[..., 0] >= 1.0 - 1e-12)


def gt_flow_at(scene: Scene, cam1: Camera, cam2: Camera, xy):
    """Exact flow at continuous view-1 pixels of a plane scene, NaN where not hit."""
    depth, _, hit = raycast(scene, cam1, xy)
    uv, _ = _reproject(cam1, cam2, np.asarray(xy, dtype=np.float64), np.where(hit, depth, 1.0))
    return np.where(hit[..., None], uv - np.asarray(xy, dtype=np.float64), np.nan)


def overlap_oracle(scene: Scene, cam1: Camera, cam2: Camera):
    """Directed covisible fractions and their combined overlap score."""
    _, c12 = gt_flow(scene, cam1, cam2)
    _, c21 = gt_flow(scene, cam2, cam1)
    o12, o21 = float(c12.mean()), float(c21.mean())
    if o12 <= 0 or o21 <= 0:
        raise ZeroOverlap("views share no covisible pixels")
    return o12, o21, overlap_score(o12, o21)
