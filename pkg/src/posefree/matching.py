"""Dense flow from cost volumes and forward-backward consistency masks."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .correlation import CostVolume, interp_matrix, matching_distribution
from .errors import DimensionMismatch, ResolutionMismatch
from .imaging import bilinear_sample

FLO_MAGIC = 202021.25


@dataclass
class FlowField:
    """``data[y, x] = (dx, dy)`` displacements measured in cells of ``stride`` pixels.

    ``stride == 1`` means full image resolution.
    """

    data: np.ndarray
    stride: int = 1

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != 2:
            raise DimensionMismatch(f"flow must be (h, w, 2), got {self.data.shape}")

    @property
    def shape(self):
        return self.data.shape[:2]

    @property
    def resolution(self) -> str:
        return "full" if self.stride == 1 else "feature"

    def targets(self) -> np.ndarray:
        """Absolute target coordinates ``i + flow(i)``."""
        h, w = self.shape
        ys, xs = np.mgrid[0:h, 0:w]
        return np.stack([xs + self.data[..., 0], ys + self.data[..., 1]], axis=-1)


@dataclass
class ConfidenceMask:
    data: np.ndarray
    stride: int = 1

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=bool)

    @property
    def shape(self):
        return self.data.shape

    def mean(self) -> float:
        return float(self.data.mean())


def flow_from_cost(c: CostVolume, mode: str = "argmax", temperature: float = 1.0,
                   stride: int = 1) -> FlowField:
    """Flow from every source cell to its best-scoring target cell.

    ``argmax`` breaks ties toward the smallest row-major target index;
    ``soft_argmax`` takes the expected target under the softmax of the row.
    """
    (h1, w1), (h2, w2) = c.src_shape, c.dst_shape
    ys, xs = np.mgrid[0:h1, 0:w1]
    if mode == "argmax":
        j = np.argmax(c.matrix, axis=1).reshape(h1, w1)
        tx, ty = (j % w2).astype(np.float64), (j // w2).astype(np.float64)
    elif mode == "soft_argmax":
        prob = matching_distribution(c, temperature)
        gy, gx = np.mgrid[0:h2, 0:w2]
        tx = (prob @ gx.ravel().astype(np.float64)).reshape(h1, w1)
        ty = (prob @ gy.ravel().astype(np.float64)).reshape(h1, w1)
    else:
        raise ValueError(f"unknown flow mode {mode!r}")
    return FlowField(np.stack([tx - xs, ty - ys], axis=-1), stride)


def cyclic_residual(f_fwd: FlowField, f_bwd: FlowField):
    """``||F_fwd(i) + F_bwd(i + F_fwd(i))||`` and an in-bounds flag per pixel."""
    if f_fwd.stride != f_bwd.stride:
        raise ResolutionMismatch("forward and backward flows use different strides")
    tgt = f_fwd.targets()
    back, oob = bilinear_sample(f_bwd.data, tgt)
    return np.linalg.norm(f_fwd.data + back, axis=-1), ~oob


def cyclic_mask(f_fwd: FlowField, f_bwd: FlowField, tau: float = 2.0) -> ConfidenceMask:
    """1 where the forward-backward cycle closes within ``tau`` (flow units).

    Forward targets leaving the other image are marked 0.
    """
    res, inside = cyclic_residual(f_fwd, f_bwd)
    return ConfidenceMask(inside & (res < tau), f_fwd.stride)


def upsample_flow(f: FlowField, h: int, w: int) -> FlowField:
    """Bilinear upsampling with displacements rescaled to the new resolution."""
    sh, sw = f.shape
    if h < sh or w < sw:
        raise ResolutionMismatch("upsample target smaller than source")
    if (h, w) == (sh, sw):
        return FlowField(f.data.copy(), f.stride)
    my, mx = interp_matrix(h, sh), interp_matrix(w, sw)
    data = np.einsum("ai,bj,ijc->abc", my, mx, f.data)
    data[..., 0] *= w / sw
    data[..., 1] *= h / sh
    return FlowField(data, max(1, int(round(f.stride * sw / w))))


def upsample_mask(m: ConfidenceMask, h: int, w: int) -> ConfidenceMask:
    """Nearest-neighbour upsampling by an integer factor."""
    sh, sw = m.shape
    if h % sh or w % sw:
        raise ResolutionMismatch("mask upsampling needs integer factors")
    data = np.repeat(np.repeat(m.data, h // sh, axis=0), w // sw, axis=1)
    return ConfidenceMask(data, max(1, m.stride * sw // w))


# -- Middlebury .flo ------------------------------------------------------------


def write_flo(path, f: FlowField) -> None:
    h, w = f.shape
    with open(Path(path), "wb") as fh:
        np.array([FLO_MAGIC], dtype="<f4").tofile(fh)
        np.array([w, h], dtype="<i4").tofile(fh)
        f.data.astype("<f4").tofile(fh)


def read_flo(path, stride: int = 1) -> FlowField:
    with open(Path(path), "rb") as fh:
        magic = np.fromfile(fh, dtype="<f4", count=1)
        if magic.size != 1 or magic[0] != FLO_MAGIC:
            raise DimensionMismatch(f"{path}: not a .flo file")
        w, h = np.fromfile(fh, dtype="<i4", count=2)
        data = np.fromfile(fh, dtype="<f4", count=int(w) * int(h) * 2)
    return FlowField(data.reshape(int(h), int(w), 2).astype(np.float64), stride)
