import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from posefree.errors import DegenerateRatio, TooShort
from posefree.evaluation import (LARGE_MIN, METRICS, SMALL_MAX, OverlapSplit, PairRecord,
                                 classify, frame_skip_select, lower_median, overlap_score,
                                 pair_overlap_from_matcher, read_records_csv, summarize,
                                 summarize_values, write_records_csv, write_report_json,
                                 write_summary_csv)
from posefree.matching import ConfidenceMask
from posefree.pipeline import matcher_overlap
from posefree.synth import make_scene, overlap_oracle, render_gt, v_trajectory

ratios = st.floats(1e-6, 1.0)


# -- frame_skip_select ----------------------------------------------------------


@pytest.mark.parametrize("total,expected", [(150, (0, 50, 100)), (90, (0, 30, 60)),
                                            (3, (0, 1, 2)), (99, (0, 33, 66)),
                                            (100, (0, 33, 66)), (101, (0, 50, 100)), (1000, (0, 50, 100))])
def test_frame_skip(total, expected):
    assert frame_skip_select(total) == expected


@given(st.integers(3, 5000))
def test_frame_skip_rule(total):
    a, t, b = frame_skip_select(total)
    n = 50 if total > 100 else total // 3
    assert (a, t, b) == (0, n, 2 * n) and b < total


@pytest.mark.parametrize("total", [0, 1, 2])
def test_frame_skip_too_short(total):
    with pytest.raises(TooShort):
        frame_skip_select(total)


# -- overlap_score / classify ---------------------------------------------------


def test_overlap_examples():
    assert overlap_score(1.0, 1.0) == 1.0
    assert abs(overlap_score(0.5, 0.5) - 1 / 3) <= 1e-15
    assert classify(overlap_score(1.0, 1.0)) is OverlapSplit.LARGE
    assert classify(overlap_score(0.5, 0.5)) is OverlapSplit.SMALL


def test_thresholds():
    assert (SMALL_MAX, LARGE_MIN) == (0.5, 0.75)


@pytest.mark.parametrize("value,split", [(0.8, "Large"), (0.6, "Medium"), (0.4, "Small"),
                                         (0.5, "Medium"), (0.75, "Medium"),
                                         (0.75 + 1e-12, "Large"), (0.5 - 1e-12, "Small")])
def test_classify_probes(value, split):
    assert classify(value).value == split


@given(ratios, ratios)
def test_overlap_symmetric_and_bounded(a, b):
    ov = overlap_score(a, b)
    assert ov == overlap_score(b, a)
    assert 0 < ov <= min(a, b) * (1 + 1e-12)


@given(st.floats(0, 1), st.floats(0, 1))
def test_classify_monotone(a, b):
    lo, hi = sorted((a, b))
    assert classify(lo).rank <= classify(hi).rank


@pytest.mark.parametrize("a,b", [(0.0, 0.5), (0.5, -0.1), (0.0, 0.0)])
def test_degenerate_ratio(a, b):
    with pytest.raises(DegenerateRatio):
        overlap_score(a, b)


def test_classify_rejects_bad_thresholds():
    with pytest.raises(ValueError):
        classify(0.5, 0.8, 0.7)


# -- pair_overlap_from_matcher --------------------------------------------------


def test_matcher_ratios_trivial():
    full = ConfidenceMask(np.ones((4, 4), bool))
    half = ConfidenceMask(np.arange(16).reshape(4, 4) % 2 == 0)
    assert pair_overlap_from_matcher(None, None, full, full) == (1.0, 1.0)
    assert pair_overlap_from_matcher(None, None, half, full) == (0.5, 1.0)


@pytest.mark.parametrize("seed,baseline", [(1, 0.1), (2, 0.55), (3, 1.4), (5, 0.55)])
def test_matcher_overlap_near_oracle(seed, baseline):
    sc = make_scene(seed, "textured_plane", 2000, "smooth")
    rig = v_trajectory(3, 128, 128, baseline=baseline, pullback=0.6, converge=0.0)
    c1, c2 = rig[0], rig[2]
    _, _, truth = overlap_oracle(sc, c1, c2)
    o12, o21 = matcher_overlap(render_gt(sc, c1)[0], render_gt(sc, c2)[0])
    assert abs(overlap_score(o12, o21) - truth) <= 0.05


# -- summarize ------------------------------------------------------------------


def record(i, split="Large", **metrics):
    ov = {"Small": 0.3, "Medium": 0.6, "Large": 0.9}[split]
    return PairRecord(f"s{i}", 0, 1, 2, ov, split, **metrics)


def test_single_record():
    s = summarize([record(0, rot_err_deg=4.0)])
    for key in ("overall", "Large"):
        m = s[key]["rot_err_deg"]
        assert (m.avg, m.median, m.std, m.count) == (4.0, 4.0, 0.0, 1)
    assert "Small" not in s and "Medium" not in s


def test_closed_form_three_values():
    m = summarize_values([1.0, 2.0, 3.0])
    assert m.avg == 2.0 and m.median == 2.0
    assert abs(m.std - math.sqrt(2 / 3)) <= 1e-15


def test_lower_median_even():
    assert lower_median([4.0, 1.0, 3.0, 2.0]) == 2.0


def test_nan_values_skipped():
    m = summarize_values([1.0, math.nan, 3.0])
    assert m.count == 2 and m.avg == 2.0
    assert math.isnan(summarize_values([math.nan]).avg)


def brute_summary(values):
    v = sorted(values)
    n = len(v)
    avg = sum(v) / n
    std = math.sqrt(sum((x - avg) ** 2 for x in v) / n)
    return avg, v[(n - 1) // 2], std


def test_1000_records_match_oracle():
    rng = np.random.default_rng(21)
    splits = rng.choice(["Small", "Medium", "Large"], size=1000)
    recs = [record(i, str(s), **{m: float(rng.gamma(2.0, 3.0)) for m in METRICS})
            for i, s in enumerate(splits)]
    out = summarize(recs)
    for name in ("overall", "Small", "Medium", "Large"):
        members = [r for r in recs if name == "overall" or r.split == name]
        for m in METRICS:
            avg, med, std = brute_summary([getattr(r, m) for r in members])
            got = out[name][m]
            assert abs(got.avg - avg) <= 1e-9 and got.median == med
            assert abs(got.std - std) <= 1e-9
            assert got.std >= 0 and min(getattr(r, m) for r in members) <= got.median


@given(st.lists(st.floats(0, 100), min_size=1, max_size=30), st.randoms())
def test_permutation_invariant(values, rnd):
    recs = [record(i, "Medium", psnr=v) for i, v in enumerate(values)]
    shuffled = list(recs)
    rnd.shuffle(shuffled)
    a, b = summarize(recs)["overall"]["psnr"], summarize(shuffled)["overall"]["psnr"]
    assert (a.avg, a.median, a.std) == (b.avg, b.median, b.std)


def test_record_rejects_bad_overlap():
    with pytest.raises(ValueError):
        PairRecord("s", 0, 1, 2, 0.0, "Small")


# -- report files ---------------------------------------------------------------


def test_records_csv_roundtrip(tmp_path):
    recs = [record(0, "Small", rot_err_deg=1.5, psnr=math.nan), record(1, "Large", mse=1e-7)]
    write_records_csv(tmp_path / "r.csv", recs)
    back = read_records_csv(tmp_path / "r.csv")
    assert len(back) == 2 and back[0].rot_err_deg == 1.5 and math.isnan(back[0].psnr)
    assert back[1].mse == 1e-7 and back[1].split == "Large" and back[1].i2 == 2


def test_report_files_deterministic(tmp_path):
    recs = [record(i, s, psnr=float(i)) for i, s in enumerate(["Small", "Large", "Large"])]
    for name in ("a", "b"):
        d = tmp_path / name
        d.mkdir()
        summary = summarize(recs)
        write_summary_csv(d / "summary.csv", summary)
        write_report_json(d / "report.json", recs, summary, {"config": {"seed": 0}})
    for f in ("summary.csv", "report.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    text = (tmp_path / "a" / "report.json").read_text()
    assert "NaN" not in text and '"Medium"' not in text.split('"summary"')[1]
