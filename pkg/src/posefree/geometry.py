"""Rigid transforms, pinhole cameras and two-view epipolar geometry.

Conventions: column vectors, right-handed frames, and a pose ``P_{b<-a}``
maps coordinates expressed in frame ``a`` into frame ``b``
(``x_b = R x_a + t``). Continuous pixel coordinates put pixel centers on
integers, so ``project(K, I, (0, 0, 1))`` lands on ``(cx, cy)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCamera, DegenerateInput

_EPS = 1e-12


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise DegenerateInput(f"focal lengths must be positive, got {self.fx}, {self.fy}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def inverse(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    def scaled(self, factor: float) -> "Intrinsics":
        """Intrinsics for an image resized by ``factor`` (pixel centers on integers)."""
        return Intrinsics(
            self.fx * factor,
            self.fy * factor,
            (self.cx + 0.5) * factor - 0.5,
            (self.cy + 0.5) * factor - 0.5,
        )


POSE_ROT_TOL = 1e-5  # camera files often carry only ~6 significant digits


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``x -> R x + t``."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.R, dtype=np.float64).reshape(3, 3)
        t = np.array(self.t, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise DegenerateInput("pose contains non-finite values")
        if not is_rotation(R, POSE_ROT_TOL):
            raise DegenerateInput("pose rotation is not in SO(3)")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m

    def apply(self, x) -> np.ndarray:
        """Transform points of shape (3,) or (N, 3)."""
        x = np.asarray(x, dtype=np.float64)
        return x @ self.R.T + self.t

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def to_json(self) -> dict:
        return {"R": [float(v) for v in self.R.ravel()], "t": [float(v) for v in self.t]}

    @classmethod
    def from_json(cls, obj: dict) -> "Pose":
        return cls(np.reshape(obj["R"], (3, 3)), obj["t"])

    def __repr__(self) -> str:
        return f"Pose(R={self.R.tolist()}, t={self.t.tolist()})"


def compose(p_ab: Pose, p_bc: Pose) -> Pose:
    """Pose ``P_{a<-c} = P_{a<-b} P_{b<-c}``."""
    return Pose(p_ab.R @ p_bc.R, p_ab.R @ p_bc.t + p_ab.t)


def invert(p: Pose) -> Pose:
    return Pose(p.R.T, -p.R.T @ p.t)


def relative_pose(world_to_a: Pose, world_to_b: Pose) -> Pose:
    """``P_{b<-a}`` from two world-to-camera extrinsics."""
    return compose(world_to_b, invert(world_to_a))


def is_rotation(R, tol: float = 1e-9) -> bool:
    R = np.asarray(R, dtype=np.float64)
    return bool(
        np.max(np.abs(R.T @ R - np.eye(3))) <= tol and abs(np.linalg.det(R) - 1.0) <= tol
    )


def skew(v) -> np.ndarray:
    x, y, z = np.asarray(v, dtype=np.float64).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rot_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def axis_angle(axis, angle: float) -> np.ndarray:
    """Rodrigues formula."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = skew(axis)
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotation via a normalized random quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def random_pose(rng: np.random.Generator, scale: float = 1.0) -> Pose:
    return Pose(random_rotation(rng), rng.normal(scale=scale, size=3))


# -- 6D rotation parametrization ---------------------------------------------


def rot6d_to_rotation(r6) -> np.ndarray:
    """Gram-Schmidt map from two 3-vectors ``(a, b)`` to a rotation.

    ``r6`` has shape ``(..., 6)``; the first three entries become the first
    column direction, the orthogonalized last three the second column.
    """
    r6 = np.asarray(r6, dtype=np.float64)
    a, b = r6[..., :3], r6[..., 3:6]
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    if np.any(na <= _EPS):
        raise DegenerateInput("first 6D column has (near) zero norm")
    c1 = a / na
    b_perp = b - np.sum(c1 * b, axis=-1, keepdims=True) * c1
    nb = np.linalg.norm(b_perp, axis=-1, keepdims=True)
    if np.any(nb <= _EPS * np.maximum(1.0, np.linalg.norm(b, axis=-1, keepdims=True))):
        raise DegenerateInput("6D columns are (near) parallel")
    c2 = b_perp / nb
    c3 = np.cross(c1, c2)
    return np.stack([c1, c2, c3], axis=-1)


def rotation_to_rot6d(R) -> np.ndarray:
    """First two columns, concatenated as ``(a, b)``."""
    R = np.asarray(R, dtype=np.float64)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


# -- errors between poses ----------------------------------------------------


def geodesic_distance(r1, r2) -> float:
    """Angle in radians of the relative rotation ``r1^T r2``."""
    c = (np.trace(np.asarray(r1).T @ np.asarray(r2)) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def translation_angular_error(t1, t2) -> float:
    """Angle in degrees between two translation directions."""
    t1 = np.asarray(t1, dtype=np.float64)
    t2 = np.asarray(t2, dtype=np.float64)
    n1, n2 = np.linalg.norm(t1), np.linalg.norm(t2)
    if n1 <= _EPS or n2 <= _EPS:
        raise DegenerateInput("translation direction undefined for near-zero vectors")
    c = np.clip(np.dot(t1, t2) / (n1 * n2), -1.0, 1.0)
    return float(np.degrees(np.arccos(c)))


# -- pinhole camera -----------------------------------------------------------


def project(k: Intrinsics, p: Pose, x, allow_behind: bool = False):
    """Transform points by ``p`` and project them with ``k``.

    Returns ``(uv, depth)`` with shapes ``(..., 2)`` and ``(...)``. Points with
    non-positive depth raise :class:`BehindCamera` unless ``allow_behind``, in
    which case their pixel coordinates are NaN.
    """
    xc = p.apply(x)
    z = xc[..., 2]
    if not allow_behind and np.any(z <= 0):
        raise BehindCamera("point has non-positive depth after transformation")
    with np.errstate(divide="ignore", invalid="ignore"):
        safe = np.where(z > 0, z, np.nan)
        u = k.fx * xc[..., 0] / safe + k.cx
        v = k.fy * xc[..., 1] / safe + k.cy
    return np.stack([u, v], axis=-1), z


def unproject(k: Intrinsics, pixel, depth) -> np.ndarray:
    """Camera-frame point at z-depth ``depth`` behind ``pixel``."""
    pixel = np.asarray(pixel, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise BehindCamera("unproject needs positive depth")
    x = (pixel[..., 0] - k.cx) / k.fx
    y = (pixel[..., 1] - k.cy) / k.fy
    return np.stack([x * depth, y * depth, depth + 0.0 * x], axis=-1)


def pixel_rays(k: Intrinsics, pixel) -> np.ndarray:
    """Camera-frame ray directions with unit z-component."""
    pixel = np.asarray(pixel, dtype=np.float64)
    x = (pixel[..., 0] - k.cx) / k.fx
    y = (pixel[..., 1] - k.cy) / k.fy
    return np.stack([x, y, np.ones_like(x)], axis=-1)


def pixel_grid(h: int, w: int) -> np.ndarray:
    """``(h, w, 2)`` array of integer pixel coordinates ``(x, y)``."""
    ys, xs = np.mgrid[0:h, 0:w]
    return np.stack([xs, ys], axis=-1).astype(np.float64)


# -- epipolar geometry --------------------------------------------------------


def essential_from_pose(p: Pose) -> np.ndarray:
    """``E = [t]x R`` for ``p = P_{2<-1}``, so that ``x2^T E x1 = 0``."""
    if np.linalg.norm(p.t) <= _EPS:
        raise DegenerateInput("essential matrix undefined for zero translation")
    return skew(p.t) @ p.R


def fundamental_from_pose(p: Pose, k1: Intrinsics, k2: Intrinsics) -> np.ndarray:
    return k2.inverse.T @ essential_from_pose(p) @ k1.inverse


def epipolar_line(m, pixel, k1: Intrinsics | None = None, k2: Intrinsics | None = None):
    """Line ``(a, b, c)`` in image 2 with ``a^2 + b^2 = 1``.

    ``m`` is a fundamental matrix, or an essential matrix when both
    intrinsics are given. ``pixel`` may be ``(2,)`` or ``(N, 2)``.
    """
    m = np.asarray(m, dtype=np.float64)
    if k1 is not None and k2 is not None:
        m = k2.inverse.T @ m @ k1.inverse
    pixel = np.asarray(pixel, dtype=np.float64)
    xh = np.concatenate([pixel, np.ones(pixel.shape[:-1] + (1,))], axis=-1)
    line = xh @ m.T
    norm = np.linalg.norm(line[..., :2], axis=-1, keepdims=True)
    if np.any(norm <= _EPS):
        raise DegenerateInput("pixel coincides with the epipole")
    return line / norm


def epipolar_distance(pixel, line) -> np.ndarray | float:
    """Unsigned point-to-line distance in pixels (line need not be normalized)."""
    pixel = np.asarray(pixel, dtype=np.float64)
    line = np.asarray(line, dtype=np.float64)
    num = np.abs(line[..., 0] * pixel[..., 0] + line[..., 1] * pixel[..., 1] + line[..., 2])
    d = num / np.hypot(line[..., 0], line[..., 1])
    return float(d) if np.ndim(d) == 0 else d
