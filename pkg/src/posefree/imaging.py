"""Images, bilinear sampling, flow warping and image-quality metrics.

Images are plain ``(h, w, 3)`` float64 arrays in ``[0, 1]``. Pixel centers
sit on integer coordinates and coordinates are ``(x, y)`` ordered.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy.ndimage import correlate1d

from .errors import BadDimensions, DimensionMismatch

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
PSNR_CAP = 99.0


@dataclass
class DepthMap:
    depth: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.depth.shape != self.valid.shape:
            raise DimensionMismatch("depth and validity shapes differ")
        if np.any(self.depth[self.valid] <= 0):
            raise ValueError("valid depth entries must be positive")

    @property
    def shape(self):
        return self.depth.shape


def check_image(img, min_side: int = 8) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise BadDimensions(f"expected (h, w, 3) image, got {img.shape}")
    if min(img.shape[:2]) < min_side:
        raise BadDimensions(f"image sides must be >= {min_side}, got {img.shape[:2]}")
    if np.any(img < 0) or np.any(img > 1) or not np.all(np.isfinite(img)):
        raise ValueError("image values must lie in [0, 1]")
    return img


def _same_shape(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"shape {a.shape} != {b.shape}")
    return a, b


def bilinear_sample(img, xy):
    """Sample ``img`` at continuous coordinates.

    Args:
        img: ``(h, w)`` or ``(h, w, c)`` array.
        xy: ``(..., 2)`` array of ``(x, y)`` coordinates.

    Returns:
        ``(values, oob)``: values of shape ``(...)`` or ``(..., c)`` and a
        boolean out-of-bounds flag. Out-of-bounds or non-finite coordinates
        are clamped to the nearest border pixel.
    """
    img = np.asarray(img)
    xy = np.asarray(xy, dtype=np.float64)
    h, w = img.shape[:2]
    x, y = xy[..., 0], xy[..., 1]
    finite = np.isfinite(x) & np.isfinite(y)
    x = np.where(finite, x, 0.0)
    y = np.where(finite, y, 0.0)
    oob = ~finite | (x < 0) | (x > w - 1) | (y < 0) | (y > h - 1)
    x = np.clip(x, 0, w - 1)
    y = np.clip(y, 0, h - 1)
    x0 = np.minimum(np.floor(x).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.intp), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    if img.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy, oob


def warp_image(src, flow, return_oob: bool = False):
    """Backward warp: ``out[i] = src(i + flow[i])``.

    ``flow`` is a ``(h, w, 2)`` array or anything with a ``.data`` attribute
    holding one (a :class:`~posefree.matching.FlowField` at full resolution).
    """
    data = getattr(flow, "data", flow)
    data = np.asarray(data, dtype=np.float64)
    src = np.asarray(src, dtype=np.float64)
    if data.shape[:2] != src.shape[:2]:
        raise DimensionMismatch(f"flow {data.shape[:2]} does not match image {src.shape[:2]}")
    ys, xs = np.mgrid[0 : data.shape[0], 0 : data.shape[1]]
    coords = np.stack([xs + data[..., 0], ys + data[..., 1]], axis=-1)
    out, oob = bilinear_sample(src, coords)
    return (out, oob) if return_oob else out


# -- metrics ------------------------------------------------------------------


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _blur(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    x = correlate1d(x, g, axis=0, mode="reflect")
    return correlate1d(x, g, axis=1, mode="reflect")


def ssim_map(a, b) -> np.ndarray:
    """Per-pixel SSIM averaged over channels, ``(h, w)``.

    Local statistics use an 11x11 Gaussian window (sigma 1.5) with mirrored
    borders, so the map has the image's size.
    """
    a, b = _same_shape(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    g = gaussian_window()
    maps = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _blur(x, g), _blur(y, g)
        sxx = _blur(x * x, g) - mx * mx
        syy = _blur(y * y, g) - my * my
        sxy = _blur(x * y, g) - mx * my
        num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
        den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
        maps.append(num / den)
    return np.mean(maps, axis=0)


def ssim(a, b) -> float:
    return float(np.mean(ssim_map(a, b)))


def masked_ssim_map(warped, target, mask) -> np.ndarray:
    """SSIM map after replacing masked-out pixels of ``warped`` by ``target``.

    Windows straddling the mask border then only see valid warped content.
    """
    warped, target = _same_shape(warped, target)
    m = np.asarray(mask, dtype=bool)
    if m.shape != warped.shape[:2]:
        raise DimensionMismatch("mask does not match image")
    composite = np.where(m[..., None], warped, target)
    return ssim_map(composite, target)


def mse(a, b) -> float:
    a, b = _same_shape(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b) -> float:
    """PSNR in dB for unit dynamic range, capped at 99 dB."""
    err = mse(a, b)
    if err < 1e-10:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / err)))


def masked_psnr(a, b, mask) -> float:
    a, b = _same_shape(a, b)
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise ValueError("empty mask")
    err = float(np.mean((a[m] - b[m]) ** 2))
    if err < 1e-10:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / err)))


# -- file I/O -----------------------------------------------------------------


def read_png(path) -> np.ndarray:
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def to_uint8(img) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0, 1) * 255.0).astype(np.uint8)


def write_png(path, img) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        img = to_uint8(img)
    PILImage.fromarray(img).save(Path(path))


def write_mask_png(path, mask) -> None:
    PILImage.fromarray(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)).save(
        Path(path)
    )


def read_mask_png(path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.asarray(im.convert("L")) > 127


DEPTH_PNG_SCALE = 1000.0  # millimetres per stored unit


def write_depth_png(path, depth: DepthMap, scale: float = DEPTH_PNG_SCALE) -> None:
    """16-bit PNG; invalid pixels store 0, valid ones ``round(depth * scale)``."""
    q = np.where(depth.valid, np.round(depth.depth * scale), 0)
    q = np.clip(q, 0, 65535).astype(np.uint16)
    PILImage.fromarray(q).save(Path(path))


def read_depth_png(path, scale: float = DEPTH_PNG_SCALE) -> DepthMap:
    with PILImage.open(path) as im:
        q = np.asarray(im).astype(np.float64)
    valid = q > 0
    return DepthMap(np.where(valid, q / scale, 0.0), valid)
