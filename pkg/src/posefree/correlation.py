"""All-pairs cost volumes, joint cost/feature aggregation and level fusion."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ChannelMismatch, CorruptWeights, EmptyInput, ShapeMismatch
from .pyramid import FeatureMap, FeaturePyramid, l2_normalize
from .weights import as_float32_exact, load_blob, save_blob


@dataclass
class CostVolume:
    """``data[y1, x1, y2, x2]`` scores between cells of two maps."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 4:
            raise ShapeMismatch(f"cost volume must be 4D, got {self.data.shape}")

    @property
    def src_shape(self):
        return self.data.shape[:2]

    @property
    def dst_shape(self):
        return self.data.shape[2:]

    @property
    def matrix(self) -> np.ndarray:
        h1, w1, h2, w2 = self.data.shape
        return self.data.reshape(h1 * w1, h2 * w2)

    @classmethod
    def from_matrix(cls, m, src_shape, dst_shape) -> "CostVolume":
        return cls(np.asarray(m).reshape(*src_shape, *dst_shape))

    @property
    def T(self) -> "CostVolume":
        return CostVolume(self.data.transpose(2, 3, 0, 1))

    def save(self, path) -> None:
        save_blob(path, {"cost": self.data}, meta={"kind": "cost_volume"})

    @classmethod
    def load(cls, path) -> "CostVolume":
        tensors, header = load_blob(path)
        if header.get("meta", {}).get("kind") != "cost_volume":
            raise CorruptWeights(f"{path}: not a cost volume blob")
        return cls(tensors["cost"])


def build_cost_volume(d1: FeatureMap, d2: FeatureMap) -> CostVolume:
    """Pairwise dot products of unit features, i.e. cosine similarities."""
    if d1.c != d2.c:
        raise ChannelMismatch(f"channel counts differ: {d1.c} vs {d2.c}")
    return CostVolume.from_matrix(d1.tokens @ d2.tokens.T, (d1.h, d1.w), (d2.h, d2.w))


# -- aggregation ----------------------------------------------------------------


@dataclass
class LevelAttention:
    wq: np.ndarray  # (n_tokens + c, d_k)
    wk: np.ndarray  # (n_tokens + c, d_k)
    mix: float  # 0 keeps values untouched, 1 uses the attention output only


@dataclass
class AggregatorParams:
    """Single-head self-attention weights, one set per (token count, channels).

    Weights for a level are derived deterministically from ``seed`` and the
    level's shape on first use, or come from a loaded blob.
    """

    seed: int = 0
    d_k: int = 32
    mix: float = 0.1
    levels: dict = field(default_factory=dict, repr=False)

    def level(self, n_tokens: int, c: int) -> LevelAttention:
        key = (int(n_tokens), int(c))
        if key not in self.levels:
            rng = np.random.default_rng([self.seed, *key])
            width = n_tokens + c
            scale = 1.0 / np.sqrt(width)
            self.levels[key] = LevelAttention(
                as_float32_exact(rng.normal(scale=scale, size=(width, self.d_k))),
                as_float32_exact(rng.normal(scale=scale, size=(width, self.d_k))),
                self.mix,
            )
        return self.levels[key]

    @classmethod
    def identity(cls) -> "AggregatorParams":
        """Pass-through configuration: no mixing between tokens."""
        return cls(mix=0.0)

    def save(self, path) -> None:
        tensors = {}
        for (n, c), lv in sorted(self.levels.items()):
            tensors[f"level_{n}_{c}.wq"] = lv.wq
            tensors[f"level_{n}_{c}.wk"] = lv.wk
        save_blob(path, tensors, seed=self.seed,
                  meta={"kind": "aggregator", "d_k": self.d_k, "mix": self.mix})

    @classmethod
    def load(cls, path) -> "AggregatorParams":
        tensors, header = load_blob(path)
        meta = header.get("meta", {})
        if meta.get("kind") != "aggregator":
            raise CorruptWeights(f"{path}: not an aggregator weight blob")
        params = cls(seed=header.get("seed") or 0, d_k=meta["d_k"], mix=meta["mix"])
        for name, wq in tensors.items():
            if not name.endswith(".wq"):
                continue
            _, n, c = name[: -len(".wq")].split("_")
            wk = tensors.get(name[:-3] + ".wk")
            if wk is None or wk.shape != wq.shape or wq.shape[0] != int(n) + int(c):
                raise CorruptWeights(f"{path}: inconsistent tensors for level {n}x{c}")
            params.levels[(int(n), int(c))] = LevelAttention(wq, wk, params.mix)
        return params


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def self_attention(tokens: np.ndarray, lv: LevelAttention) -> np.ndarray:
    """Attention over rows of ``tokens`` whose values are the tokens themselves."""
    if lv.mix == 0.0:
        return tokens.copy()
    q = tokens @ lv.wq
    k = tokens @ lv.wk
    attn = softmax(q @ k.T / np.sqrt(q.shape[1]), axis=1)
    return (1.0 - lv.mix) * tokens + lv.mix * (attn @ tokens)


def aggregate(c: CostVolume, d1: FeatureMap, d2: FeatureMap, p: AggregatorParams):
    """Refine a cost volume jointly with both feature maps.

    Each 2D location of ``[C, D1]`` (and of ``[C^T, D2]``) is one token; the
    refined volume is ``phi([C, D1]) + phi([C^T, D2])^T``, which is
    transpose-consistent by construction.

    Returns:
        ``(cost, d1, d2)`` with unchanged shapes; features re-normalized.
    """
    n1, n2 = d1.h * d1.w, d2.h * d2.w
    if c.src_shape != (d1.h, d1.w) or c.dst_shape != (d2.h, d2.w):
        raise ShapeMismatch("cost volume does not match feature maps")
    if n1 != n2 or d1.c != d2.c:
        raise ShapeMismatch("aggregation needs equally sized maps")
    lv = p.level(n1, d1.c)
    m = c.matrix
    out1 = self_attention(np.concatenate([m, d1.tokens], axis=1), lv)
    out2 = self_attention(np.concatenate([m.T, d2.tokens], axis=1), lv)
    refined = out1[:, :n2] + out2[:, :n1].T
    f1 = FeatureMap(l2_normalize(out1[:, n2:]).reshape(d1.data.shape), d1.stride)
    f2 = FeatureMap(l2_normalize(out2[:, n1:]).reshape(d2.data.shape), d2.stride)
    return CostVolume.from_matrix(refined, c.src_shape, c.dst_shape), f1, f2


def matching_distribution(c: CostVolume, temperature: float) -> np.ndarray:
    """Row-stochastic ``(n_src, n_dst)`` map: softmax of each source row."""
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    return softmax(c.matrix / temperature, axis=1)


def condition_features(d_other: FeatureMap, attn: np.ndarray, shape=None) -> FeatureMap:
    """Probability-weighted average of ``d_other`` for every source cell."""
    attn = np.asarray(attn, dtype=np.float64)
    if attn.shape[1] != d_other.h * d_other.w:
        raise ShapeMismatch("attention columns must match the other map's cells")
    h, w = shape if shape is not None else (d_other.h, d_other.w)
    if attn.shape[0] != h * w:
        raise ShapeMismatch("attention rows must match the source cells")
    return FeatureMap((attn @ d_other.tokens).reshape(h, w, d_other.c), d_other.stride)


def interleave(c: CostVolume, d1: FeatureMap, d2: FeatureMap, p: AggregatorParams,
               n_interleave: int = 2, temperature: float | None = None):
    """``(aggregate -> condition) x n_interleave`` then a closing aggregate.

    The two branch sum of each aggregate is halved before the next stage so
    scores stay on the cosine scale.
    """
    t = temperature if temperature is not None else 1.0 / np.sqrt(d1.c)
    for _ in range(n_interleave):
        c, d1, d2 = aggregate(c, d1, d2, p)
        c = CostVolume(0.5 * c.data)
        p12 = matching_distribution(c, t)
        p21 = matching_distribution(c.T, t)
        c1 = condition_features(d2, p12, (d1.h, d1.w))
        c2 = condition_features(d1, p21, (d2.h, d2.w))
        d1 = FeatureMap(l2_normalize(d1.data + c1.data), d1.stride)
        d2 = FeatureMap(l2_normalize(d2.data + c2.data), d2.stride)
    c, d1, d2 = aggregate(c, d1, d2, p)
    return CostVolume(0.5 * c.data), d1, d2


# -- fusion ---------------------------------------------------------------------


def interp_matrix(dst: int, src: int) -> np.ndarray:
    """``(dst, src)`` linear interpolation weights with pixel-center alignment."""
    m = np.zeros((dst, src))
    pos = np.clip((np.arange(dst) + 0.5) * src / dst - 0.5, 0, src - 1)
    lo = np.minimum(np.floor(pos).astype(int), max(src - 2, 0))
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    rows = np.arange(dst)
    np.add.at(m, (rows, lo), 1 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def resample_cost(c: CostVolume, shape) -> CostVolume:
    """Bilinear resampling over both coordinate pairs to ``(H, W, H, W)``."""
    H, W = shape
    if c.src_shape == (H, W) and c.dst_shape == (H, W):
        return c
    out = c.data
    for axis, size in enumerate((H, W, H, W)):
        m = interp_matrix(size, out.shape[axis])
        out = np.moveaxis(np.tensordot(m, out, axes=(1, axis)), 0, axis)
    return CostVolume(out)


def fuse_levels(costs) -> CostVolume:
    """Mean of all levels after resampling to the finest level's grid."""
    costs = list(costs)
    if not costs:
        raise EmptyInput("no cost volumes to fuse")
    finest = max(costs, key=lambda cv: cv.src_shape[0] * cv.src_shape[1]).src_shape
    total = np.zeros(finest + finest)
    for cv in costs:
        total += resample_cost(cv, finest).data
    return CostVolume(total / len(costs))


def correlate_pyramids(pyr1: FeaturePyramid, pyr2: FeaturePyramid, p: AggregatorParams,
                       n_interleave: int = 2, temperature: float | None = None):
    """Per-level cost construction and refinement followed by fusion.

    Returns ``(fused_cost, levels)`` where ``levels`` holds the refined
    ``(cost, d1, d2)`` of every level, coarse to fine.
    """
    if len(pyr1) != len(pyr2):
        raise ShapeMismatch("pyramids have different depths")
    levels = []
    for f1, f2 in zip(pyr1.levels, pyr2.levels):
        c = build_cost_volume(f1, f2)
        levels.append(interleave(c, f1, f2, p, n_interleave, temperature))
    return fuse_levels([lv[0] for lv in levels]), levels
