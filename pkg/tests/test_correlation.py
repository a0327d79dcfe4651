import numpy as np
import pytest
from hypothesis import given, strategies as st

from posefree.correlation import (AggregatorParams, CostVolume, aggregate, build_cost_volume,
                                  condition_features, correlate_pyramids, fuse_levels,
                                  interleave, matching_distribution, resample_cost)
from posefree.errors import ChannelMismatch, EmptyInput, ShapeMismatch
from posefree.pyramid import FeatureMap, PyramidParams, extract_pyramid, l2_normalize, patch_features


def unit_map(rng, h, w, c):
    return FeatureMap(l2_normalize(rng.normal(size=(h, w, c))), 4)


seeds = st.integers(0, 2**31 - 1)


# -- build_cost_volume ----------------------------------------------------------


def test_self_volume_diagonal(rng):
    d = unit_map(rng, 5, 6, 32)
    m = build_cost_volume(d, d).matrix
    assert np.allclose(np.diag(m), 1.0, atol=1e-12)
    off = np.where(np.eye(30, dtype=bool), -np.inf, m)
    assert np.all(np.diag(m) > off.max(axis=1))


def test_orthogonal_sets_give_zero():
    eye = np.eye(8)
    d1 = FeatureMap(eye[:4].reshape(2, 2, 8))
    d2 = FeatureMap(eye[4:].reshape(2, 2, 8))
    assert np.all(build_cost_volume(d1, d2).data == 0.0)


def test_brute_force_oracle(rng):
    d1, d2 = unit_map(rng, 3, 4, 7), unit_map(rng, 4, 3, 7)
    c = build_cost_volume(d1, d2).data
    oracle = np.zeros((3, 4, 4, 3))
    for i, j, k, l in np.ndindex(oracle.shape):
        oracle[i, j, k, l] = sum(d1.data[i, j, q] * d2.data[k, l, q] for q in range(7))
    assert np.abs(c - oracle).max() <= 1e-12


def test_channel_mismatch(rng):
    with pytest.raises(ChannelMismatch):
        build_cost_volume(unit_map(rng, 2, 2, 3), unit_map(rng, 2, 2, 4))


@given(seeds)
def test_transpose_exact_and_bounded(seed):
    rng = np.random.default_rng(seed)
    d1, d2 = unit_map(rng, 3, 3, 5), unit_map(rng, 3, 3, 5)
    c12, c21 = build_cost_volume(d1, d2), build_cost_volume(d2, d1)
    assert np.array_equal(c12.T.data, c21.data)
    assert np.all(np.abs(c12.data) <= 1 + 1e-6)


def test_translated_patches_argmax():
    rng = np.random.default_rng(5)
    img = rng.uniform(size=(64, 80, 3))
    s, shift = 4, 3
    a = FeatureMap(patch_features(img[:, : 64], s), s)
    b = FeatureMap(patch_features(img[:, shift * s: shift * s + 64], s), s)
    j = np.argmax(build_cost_volume(a, b).matrix, axis=1).reshape(16, 16)
    # cell x in a is cell x - shift in b, covisible when x >= shift
    ys, xs = np.mgrid[0:16, 0:16]
    cov = xs >= shift
    ok = j[cov] == (ys * 16 + xs - shift)[cov]
    assert ok.mean() >= 0.95


def test_cost_volume_blob_roundtrip(tmp_path, rng):
    c = build_cost_volume(unit_map(rng, 2, 3, 4), unit_map(rng, 2, 3, 4))
    c.save(tmp_path / "c.bin")
    assert np.allclose(CostVolume.load(tmp_path / "c.bin").data, c.data, atol=1e-7)


# -- aggregate ------------------------------------------------------------------


def test_identity_aggregation_doubles(rng):
    d1, d2 = unit_map(rng, 4, 4, 8), unit_map(rng, 4, 4, 8)
    c = build_cost_volume(d1, d2)
    out, f1, f2 = aggregate(c, d1, d2, AggregatorParams.identity())
    assert np.allclose(out.data, 2 * c.data, atol=1e-12)
    assert np.allclose(f1.data, d1.data, atol=1e-12)
    assert np.allclose(f2.data, d2.data, atol=1e-12)


@given(seeds)
def test_aggregate_transpose_symmetry(seed):
    rng = np.random.default_rng(seed)
    d1, d2 = unit_map(rng, 3, 4, 6), unit_map(rng, 3, 4, 6)
    c = build_cost_volume(d1, d2)
    p = AggregatorParams(seed=seed % 100, d_k=8, mix=0.5)
    fwd = aggregate(c, d1, d2, p)[0]
    rev = aggregate(c.T, d2, d1, p)[0]
    assert np.array_equal(rev.data, fwd.T.data)


def test_aggregate_deterministic_and_shapes(rng):
    d1, d2 = unit_map(rng, 4, 4, 8), unit_map(rng, 4, 4, 8)
    c = build_cost_volume(d1, d2)
    a = aggregate(c, d1, d2, AggregatorParams(seed=3))
    b = aggregate(c, d1, d2, AggregatorParams(seed=3))
    for x, y, ref in zip(a, b, (c, d1, d2)):
        assert np.array_equal(x.data, y.data)
        assert x.data.shape == ref.data.shape
        assert np.all(np.isfinite(x.data))


def test_aggregate_shape_mismatch(rng):
    d1, d2 = unit_map(rng, 4, 4, 8), unit_map(rng, 4, 4, 8)
    c = build_cost_volume(d1, unit_map(rng, 3, 4, 8))
    with pytest.raises(ShapeMismatch):
        aggregate(c, d1, d2, AggregatorParams())


def test_aggregator_blob_roundtrip(tmp_path, rng):
    d1, d2 = unit_map(rng, 3, 3, 4), unit_map(rng, 3, 3, 4)
    c = build_cost_volume(d1, d2)
    p = AggregatorParams(seed=2, d_k=4, mix=0.3)
    ref = aggregate(c, d1, d2, p)[0]
    p.save(tmp_path / "a.bin")
    again = AggregatorParams.load(tmp_path / "a.bin")
    assert np.array_equal(aggregate(c, d1, d2, again)[0].data, ref.data)


def test_interleave_preserves_symmetry_and_shapes(rng):
    d1, d2 = unit_map(rng, 3, 3, 6), unit_map(rng, 3, 3, 6)
    c = build_cost_volume(d1, d2)
    p = AggregatorParams(seed=1, d_k=4, mix=0.2)
    out, f1, f2 = interleave(c, d1, d2, p, n_interleave=2)
    assert out.data.shape == c.data.shape
    assert np.all(np.isfinite(out.data))
    assert np.abs(np.linalg.norm(f1.data, axis=-1) - 1).max() <= 1e-9


# -- matching_distribution ------------------------------------------------------


def test_uniform_row():
    p = matching_distribution(CostVolume(np.zeros((2, 2, 3, 3))), 0.5)
    assert np.allclose(p, 1 / 9, atol=1e-15)


def test_peaked_row_closed_form():
    row = np.full(16, -10.0)
    row[5] = 10.0
    p = matching_distribution(CostVolume(row.reshape(1, 1, 4, 4)), 1.0)
    expected = 1.0 / (1.0 + 15 * np.exp(-20.0))
    assert p[0, 5] > 0.999
    assert abs(p[0, 5] - expected) <= 1e-12


def test_high_temperature_limit(rng):
    c = CostVolume(rng.uniform(-1, 1, size=(3, 3, 3, 3)))
    p = matching_distribution(c, 1e6)
    assert np.abs(p - 1 / 9).max() < 1e-4


@given(seeds, st.floats(1e-3, 1e3), st.floats(0, 1e4))
def test_rows_stochastic_with_extreme_logits(seed, temperature, scale):
    rng = np.random.default_rng(seed)
    c = CostVolume(rng.normal(size=(3, 3, 3, 3)) * scale)
    p = matching_distribution(c, temperature)
    assert np.all(np.isfinite(p)) and np.all(p >= 0)
    assert np.abs(p.sum(axis=1) - 1).max() <= 1e-9


def test_temperature_must_be_positive():
    with pytest.raises(ValueError):
        matching_distribution(CostVolume(np.zeros((1, 1, 1, 1))), 0.0)


# -- condition_features ---------------------------------------------------------


def test_one_hot_attention(rng):
    d = unit_map(rng, 2, 3, 4)
    attn = np.zeros((6, 6))
    attn[:, 4] = 1.0
    out = condition_features(d, attn)
    assert np.array_equal(out.data, np.broadcast_to(d.data[1, 1], (2, 3, 4)))


def test_uniform_attention_is_mean(rng):
    d = unit_map(rng, 2, 3, 4)
    out = condition_features(d, np.full((6, 6), 1 / 6))
    assert np.allclose(out.data, d.tokens.mean(axis=0), atol=1e-12)


@given(seeds)
def test_condition_matches_matmul_and_is_convex(seed):
    rng = np.random.default_rng(seed)
    d = FeatureMap(rng.normal(size=(3, 2, 5)))
    attn = matching_distribution(CostVolume(rng.normal(size=(2, 2, 3, 2)) * 3), 1.0)
    out = condition_features(d, attn, (2, 2))
    oracle = np.array([[sum(attn[i, j] * d.tokens[j, q] for j in range(6)) for q in range(5)]
                       for i in range(4)])
    assert np.abs(out.tokens - oracle).max() <= 1e-12
    lo, hi = d.tokens.min(axis=0), d.tokens.max(axis=0)
    assert np.all(out.tokens >= lo - 1e-12) and np.all(out.tokens <= hi + 1e-12)


def test_condition_shape_mismatch(rng):
    with pytest.raises(ShapeMismatch):
        condition_features(unit_map(rng, 2, 2, 3), np.full((4, 5), 0.2))


# -- fuse_levels ----------------------------------------------------------------


def test_single_level_identity(rng):
    c = CostVolume(rng.normal(size=(3, 3, 3, 3)))
    assert np.array_equal(fuse_levels([c]).data, c.data)


def test_identical_volumes(rng):
    c = CostVolume(rng.normal(size=(3, 3, 3, 3)))
    assert np.allclose(fuse_levels([c, CostVolume(c.data.copy())]).data, c.data, atol=1e-15)


@given(st.floats(-1, 1), st.floats(-1, 1))
def test_constant_fields(k, m):
    coarse = CostVolume(np.full((2, 2, 2, 2), k))
    fine = CostVolume(np.full((4, 4, 4, 4), m))
    out = fuse_levels([coarse, fine])
    assert out.data.shape == (4, 4, 4, 4)
    assert np.abs(out.data - (k + m) / 2).max() <= 1e-12


def test_resample_is_separable_bilinear(rng):
    c = CostVolume(rng.normal(size=(2, 2, 2, 2)))
    up = resample_cost(c, (4, 4))
    # pixel-center alignment: fine cell 0 sits at coarse coordinate -0.25, clamped to 0
    assert np.isclose(up.data[0, 0, 0, 0], c.data[0, 0, 0, 0])
    assert np.isclose(up.data[1, 0, 0, 0], 0.75 * c.data[0, 0, 0, 0] + 0.25 * c.data[1, 0, 0, 0])


def test_fuse_empty():
    with pytest.raises(EmptyInput):
        fuse_levels([])


def test_correlate_pyramids_finest_grid(rng):
    img = rng.uniform(size=(64, 64, 3))
    pp = PyramidParams(seed=0)
    fused, levels = correlate_pyramids(extract_pyramid(img, pp), extract_pyramid(img, pp),
                                       AggregatorParams(seed=0))
    assert fused.data.shape == (16, 16, 16, 16)
    assert len(levels) == 3
    assert np.all(np.isfinite(fused.data))
