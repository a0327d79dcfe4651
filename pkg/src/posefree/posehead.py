"""Relative pose regression from the fused cost volume.

The essential-matrix stage adds sinusoidal positional encodings to the
tokens of both images, turns the fused cost volume into pairwise weights
with a dual softmax, and pools token pairs bilinearly. An MLP maps the
pooled vector to a 6D rotation and a metric translation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .correlation import CostVolume, correlate_pyramids, softmax
from .errors import CorruptWeights, ShapeMismatch
from .geometry import Pose, rot6d_to_rotation
from .matching import ConfidenceMask, FlowField, cyclic_mask, flow_from_cost
from .pyramid import FeatureMap, extract_pyramid
from .weights import as_float32_exact, load_blob, save_blob

IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


def dual_softmax(a, temperature: float = 1.0) -> np.ndarray:
    """``softmax_rows(a / T) * softmax_cols(a / T)``, elementwise."""
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    z = np.asarray(a, dtype=np.float64) / temperature
    return softmax(z, axis=1) * softmax(z, axis=0)


def positional_encoding(h: int, w: int, n_freqs: int = 16) -> np.ndarray:
    """``(h*w, 4*n_freqs)`` sin/cos features of normalized cell centers.

    Frequencies are spaced geometrically from one cycle per image up to the
    grid's Nyquist rate.
    """
    ys, xs = np.mgrid[0:h, 0:w]
    u = ((xs + 0.5) / w * 2 - 1).ravel()
    v = ((ys + 0.5) / h * 2 - 1).ravel()
    top = max(min(h, w) / 2.0, 1.0)
    freqs = np.pi * top ** (np.arange(n_freqs) / max(n_freqs - 1, 1))
    ang_u = u[:, None] * freqs
    ang_v = v[:, None] * freqs
    return np.concatenate([np.sin(ang_u), np.cos(ang_u), np.sin(ang_v), np.cos(ang_v)], axis=1)


@dataclass
class PoseHeadParams:
    seed: int = 0
    n_freqs: int = 16
    d_pool: int = 16
    hidden: int = 256
    temperature: float = 0.1
    use_pe: bool = True
    tensors: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.tensors:
            self.tensors = self._init_mlp()

    def _init_mlp(self) -> dict:
        rng = np.random.default_rng([self.seed, 1])
        d_in = self.d_pool * self.d_pool
        t = {
            "mlp.w1": rng.normal(scale=np.sqrt(2.0 / d_in), size=(d_in, self.hidden)),
            "mlp.b1": np.zeros(self.hidden),
            "mlp.w2": rng.normal(scale=np.sqrt(2.0 / self.hidden), size=(self.hidden, self.hidden)),
            "mlp.b2": np.zeros(self.hidden),
            "mlp.w3": rng.normal(scale=0.01 / np.sqrt(self.hidden), size=(self.hidden, 9)),
            "mlp.b3": np.concatenate([IDENTITY_6D, np.zeros(3)]),
        }
        return {k: as_float32_exact(v) for k, v in t.items()}

    def token_weights(self, c: int) -> dict:
        """Per-channel-count projections (positional encoding and pooling)."""
        if f"proj{c}.u" not in self.tensors:
            rng = np.random.default_rng([self.seed, 2, c])
            n_pe = 4 * self.n_freqs
            self.tensors[f"proj{c}.pe"] = as_float32_exact(
                rng.normal(scale=1.0 / np.sqrt(n_pe), size=(n_pe, c)))
            self.tensors[f"proj{c}.u"] = as_float32_exact(
                rng.normal(scale=1.0 / np.sqrt(c), size=(c, self.d_pool)))
            self.tensors[f"proj{c}.v"] = as_float32_exact(
                rng.normal(scale=1.0 / np.sqrt(c), size=(c, self.d_pool)))
        return {k: self.tensors[f"proj{c}.{k}"] for k in ("pe", "u", "v")}

    def save(self, path) -> None:
        save_blob(path, self.tensors, seed=self.seed,
                  meta={"kind": "posehead", "n_freqs": self.n_freqs, "d_pool": self.d_pool,
                        "hidden": self.hidden, "temperature": self.temperature,
                        "use_pe": self.use_pe})

    @classmethod
    def load(cls, path) -> "PoseHeadParams":
        tensors, header = load_blob(path)
        meta = header.get("meta", {})
        if meta.get("kind") != "posehead":
            raise CorruptWeights(f"{path}: not a pose-head weight blob")
        d_in, hidden = meta["d_pool"] ** 2, meta["hidden"]
        expected = {"mlp.w1": (d_in, hidden), "mlp.b1": (hidden,), "mlp.w2": (hidden, hidden),
                    "mlp.b2": (hidden,), "mlp.w3": (hidden, 9), "mlp.b3": (9,)}
        for name, shape in expected.items():
            if name not in tensors or tensors[name].shape != shape:
                raise CorruptWeights(f"{path}: tensor {name} missing or mis-shaped")
        return cls(seed=header.get("seed") or 0, n_freqs=meta["n_freqs"], d_pool=meta["d_pool"],
                   hidden=hidden, temperature=meta["temperature"], use_pe=meta["use_pe"],
                   tensors=dict(tensors))


def essential_module(c_fused: CostVolume, d1: FeatureMap, d2: FeatureMap,
                     p: PoseHeadParams) -> np.ndarray:
    """Pooled ``d_pool**2`` vector from cost-weighted token pairs.

    ``pooled = (T1 U)^T W (T2 V) / n`` with ``W`` the dual softmax of the
    fused volume and ``T1``, ``T2`` the position-encoded tokens.
    """
    if c_fused.src_shape != (d1.h, d1.w) or c_fused.dst_shape != (d2.h, d2.w):
        raise ShapeMismatch("fused cost volume must match the feature grids")
    if d1.c != d2.c:
        raise ShapeMismatch("feature maps have different channel counts")
    tw = p.token_weights(d1.c)
    t1, t2 = d1.tokens, d2.tokens
    if p.use_pe:
        t1 = t1 + positional_encoding(d1.h, d1.w, p.n_freqs) @ tw["pe"]
        t2 = t2 + positional_encoding(d2.h, d2.w, p.n_freqs) @ tw["pe"]
        # zero features must pool to zero, positions alone carry no content
        t1 = np.where(np.any(d1.tokens != 0, axis=1, keepdims=True), t1, 0.0)
        t2 = np.where(np.any(d2.tokens != 0, axis=1, keepdims=True), t2, 0.0)
    weights = dual_softmax(c_fused.matrix, p.temperature)
    pooled = (t1 @ tw["u"]).T @ weights @ (t2 @ tw["v"])
    return pooled.ravel() / t1.shape[0]


def mlp_forward(feature, p: PoseHeadParams) -> np.ndarray:
    t = p.tensors
    h = np.maximum(np.asarray(feature, dtype=np.float64) @ t["mlp.w1"] + t["mlp.b1"], 0.0)
    h = np.maximum(h @ t["mlp.w2"] + t["mlp.b2"], 0.0)
    return h @ t["mlp.w3"] + t["mlp.b3"]


def regress_pose(feature, p: PoseHeadParams) -> Pose:
    out = mlp_forward(feature, p)
    return Pose(rot6d_to_rotation(out[:6]), out[6:9])


@dataclass
class PoseEstimate:
    """Front-half outputs for one ordered pair ``(I1, I2)``.

    ``flow``/``mask`` live on the I1 grid and point into I2 (``F_{2<-1}``,
    ``M_{2<-1}``); ``flow_bwd``/``mask_bwd`` are the reverse direction. All
    four share the finest feature stride.
    """

    pose: Pose
    flow: FlowField
    mask: ConfidenceMask
    flow_bwd: FlowField
    mask_bwd: ConfidenceMask
    cost: CostVolume
    d1: FeatureMap
    d2: FeatureMap


def estimate_pose(i1, i2, state) -> PoseEstimate:
    """Pyramid -> cost volumes -> aggregation -> fusion -> flow, mask and pose.

    ``state`` is a :class:`~posefree.pipeline.PipelineState`.
    """
    pyr1 = extract_pyramid(i1, state.pyramid)
    pyr2 = extract_pyramid(i2, state.pyramid)
    fused, levels = correlate_pyramids(pyr1, pyr2, state.aggregator,
                                       state.config.n_interleave, state.config.temperature)
    _, d1, d2 = levels[-1]
    stride = pyr1.finest.stride
    fwd = flow_from_cost(fused, state.config.flow_mode, _soft_t(state, d1), stride)
    bwd = flow_from_cost(fused.T, state.config.flow_mode, _soft_t(state, d1), stride)
    # tau is configured in feature cells
    m_fwd = cyclic_mask(fwd, bwd, state.config.tau)
    m_bwd = cyclic_mask(bwd, fwd, state.config.tau)
    pose = regress_pose(essential_module(fused, d1, d2, state.head), state.head)
    return PoseEstimate(pose, fwd, m_fwd, bwd, m_bwd, fused, d1, d2)


def _soft_t(state, d: FeatureMap) -> float:
    t = state.config.temperature
    return t if t is not None else 1.0 / np.sqrt(d.c)
