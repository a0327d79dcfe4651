"""Deterministic multi-level feature extraction.

Two backbones are available. ``conv`` is a fixed, seeded three-stage strided
convolution stack with ReLU (strides 4, 8 and 16 relative to the input).
``patch`` flattens non-overlapping image patches at the same strides, which
makes matching tests independent of any learned weights. Every cell of
every level is L2-normalized so dot products between cells are cosines.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import BadDimensions, CorruptWeights
from .weights import as_float32_exact, load_blob, save_blob

DEFAULT_CHANNELS = (64, 96, 128)
# (kernel, stride, padding) of each stage, fine to coarse
STAGES = ((8, 4, 2), (4, 2, 1), (4, 2, 1))


@dataclass
class FeatureMap:
    data: np.ndarray  # (h, w, c)
    stride: int = 1  # input pixels per cell

    @property
    def h(self) -> int:
        return self.data.shape[0]

    @property
    def w(self) -> int:
        return self.data.shape[1]

    @property
    def c(self) -> int:
        return self.data.shape[2]

    @property
    def tokens(self) -> np.ndarray:
        return self.data.reshape(self.h * self.w, self.c)


@dataclass
class FeaturePyramid:
    levels: list  # FeatureMap, coarse to fine

    def __post_init__(self):
        if not self.levels:
            raise BadDimensions("pyramid needs at least one level")
        sizes = [lv.h for lv in self.levels]
        if any(b <= a for a, b in zip(sizes, sizes[1:])):
            raise BadDimensions(f"level sizes must increase coarse to fine, got {sizes}")

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i) -> FeatureMap:
        return self.levels[i]

    @property
    def finest(self) -> FeatureMap:
        return self.levels[-1]


@dataclass
class PyramidParams:
    seed: int = 0
    channels: tuple = DEFAULT_CHANNELS
    mode: str = "conv"
    n_levels: int = 3
    weights: dict = field(default=None, repr=False)

    def __post_init__(self):
        if self.mode not in ("conv", "patch"):
            raise ValueError(f"unknown pyramid mode {self.mode!r}")
        if not 1 <= self.n_levels <= len(STAGES):
            raise ValueError(f"n_levels must be in 1..{len(STAGES)}")
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) != len(STAGES):
            raise ValueError("one channel count per stage expected")
        if self.mode == "conv" and self.weights is None:
            self.weights = init_conv_weights(self.seed, self.channels)

    @property
    def strides(self) -> list:
        """Strides of the emitted levels, coarse to fine."""
        out = np.cumprod([stride for _, stride, _ in STAGES]).tolist()
        return out[::-1][-self.n_levels :]

    def save(self, path) -> None:
        save_blob(path, self.weights or {}, seed=self.seed,
                  meta={"kind": "pyramid", "mode": self.mode, "channels": list(self.channels),
                        "n_levels": self.n_levels})

    @classmethod
    def load(cls, path) -> "PyramidParams":
        tensors, header = load_blob(path)
        meta = header.get("meta", {})
        if meta.get("kind") != "pyramid":
            raise CorruptWeights(f"{path}: not a pyramid weight blob")
        params = cls(seed=header.get("seed") or 0, channels=tuple(meta["channels"]),
                     mode=meta["mode"], n_levels=meta["n_levels"], weights=tensors or None)
        if params.mode == "conv":
            _check_conv_shapes(params.weights, params.channels)
        return params


def init_conv_weights(seed: int, channels=DEFAULT_CHANNELS) -> dict:
    rng = np.random.default_rng(seed)
    weights, cin = {}, 3
    for i, ((k, _, _), cout) in enumerate(zip(STAGES, channels)):
        fan_in = cin * k * k
        weights[f"stage{i}.weight"] = as_float32_exact(
            rng.normal(scale=np.sqrt(2.0 / fan_in), size=(cout, cin, k, k))
        )
        weights[f"stage{i}.bias"] = as_float32_exact(rng.normal(scale=0.1, size=cout))
        cin = cout
    return weights


def _check_conv_shapes(weights: dict, channels) -> None:
    cin = 3
    for i, ((k, _, _), cout) in enumerate(zip(STAGES, channels)):
        w = weights.get(f"stage{i}.weight")
        b = weights.get(f"stage{i}.bias")
        if w is None or b is None or w.shape != (cout, cin, k, k) or b.shape != (cout,):
            raise CorruptWeights(f"stage{i} weights missing or mis-shaped")
        cin = cout


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int, pad: int):
    """Strided 2D convolution of an ``(h, w, c)`` map via im2col."""
    cout, cin, k, _ = weight.shape
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(0, 1))[::stride, ::stride]
    ho, wo = win.shape[:2]
    cols = win.reshape(ho * wo, cin * k * k)
    out = cols @ weight.reshape(cout, cin * k * k).T + bias
    return out.reshape(ho, wo, cout)


def l2_normalize(x: np.ndarray) -> np.ndarray:
    """Unit-normalize along the last axis; null vectors become the uniform unit vector."""
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    uniform = np.full(x.shape[-1], 1.0 / np.sqrt(x.shape[-1]))
    return np.where(n > 1e-12, x / np.where(n > 1e-12, n, 1.0), uniform)


def patch_features(img: np.ndarray, stride: int) -> np.ndarray:
    """Mean-centered, unit-normalized flattened ``stride x stride`` patches."""
    h, w, c = img.shape
    p = img.reshape(h // stride, stride, w // stride, stride, c).transpose(0, 2, 1, 3, 4)
    p = p.reshape(h // stride, w // stride, stride * stride * c)
    p = p - p.mean(axis=-1, keepdims=True)
    return l2_normalize(p)


def extract_pyramid(img, params: PyramidParams) -> FeaturePyramid:
    """Feature levels at strides 16/8/4 (coarse to fine) of ``img``."""
    img = np.asarray(img, dtype=np.float64)
    coarsest = params.strides[0]
    h, w = img.shape[:2]
    if h % coarsest or w % coarsest:
        raise BadDimensions(f"image size {h}x{w} not divisible by coarsest stride {coarsest}")
    wanted = set(params.strides)
    if params.mode == "patch":
        return FeaturePyramid([FeatureMap(patch_features(img, s), s) for s in params.strides])
    levels = {}
    x, stride = img - 0.5, 1
    for i, (k, s, pad) in enumerate(STAGES):
        x = np.maximum(
            conv2d(x, params.weights[f"stage{i}.weight"], params.weights[f"stage{i}.bias"], s, pad),
            0.0,
        )
        stride *= s
        if stride in wanted:
            levels[stride] = FeatureMap(l2_normalize(x), stride)
    return FeaturePyramid([levels[s] for s in params.strides])
