"""Evaluation protocol: frame selection, overlap splits and metric summaries."""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import DegenerateRatio, TooShort

SMALL_MAX = 0.5
LARGE_MIN = 0.75
METRICS = ("rot_err_deg", "trans_ang_deg", "trans_abs_m", "psnr", "ssim", "mse")


class OverlapSplit(str, enum.Enum):
    SMALL = "Small"
    MEDIUM = "Medium"
    LARGE = "Large"

    @property
    def rank(self) -> int:
        return {"Small": 0, "Medium": 1, "Large": 2}[self.value]


def frame_skip_select(total_frames: int):
    """``(0, N, 2N)`` with ``N = 50`` when frame 100 exists, else ``N = total // 3``."""
    if total_frames < 3:
        raise TooShort(f"need at least 3 frames, got {total_frames}")
    # exactly 100 frames would make 2N = 100 one past the end, so fall back to a third
    n = 50 if total_frames > 100 else total_frames // 3
    return 0, n, 2 * n


def overlap_score(o12: float, o21: float) -> float:
    """Intersection over union from the two directed covisible ratios."""
    if not (o12 > 0 and o21 > 0):
        raise DegenerateRatio(f"overlap ratios must be positive, got {o12}, {o21}")
    return 1.0 / (1.0 / o12 + 1.0 / o21 - 1.0)


def classify(overlap: float, small_max: float = SMALL_MAX, large_min: float = LARGE_MIN) -> OverlapSplit:
    """Large above ``large_min``, Small below ``small_max``; boundaries are Medium."""
    if not small_max < large_min:
        raise ValueError("small_max must be below large_min")
    if overlap > large_min:
        return OverlapSplit.LARGE
    if overlap < small_max:
        return OverlapSplit.SMALL
    return OverlapSplit.MEDIUM


def pair_overlap_from_matcher(f_12, f_21, m_12, m_21):
    """Directed overlap ratios as the confident fraction of each mask.

    The flows are accepted for interface symmetry with the matcher output;
    only the masks enter the ratios.
    """
    del f_12, f_21
    o12 = float(np.mean(getattr(m_12, "data", m_12)))
    o21 = float(np.mean(getattr(m_21, "data", m_21)))
    return o12, o21


@dataclass
class PairRecord:
    scene: str
    i1: int
    it: int
    i2: int
    overlap: float
    split: str
    rot_err_deg: float = math.nan
    trans_ang_deg: float = math.nan
    trans_abs_m: float = math.nan
    psnr: float = math.nan
    ssim: float = math.nan
    mse: float = math.nan
    o12: float = math.nan
    o21: float = math.nan
    oracle_overlap: float = math.nan

    def __post_init__(self):
        if not 0 < self.overlap <= 1:
            raise ValueError(f"overlap must lie in (0, 1], got {self.overlap}")


@dataclass
class MetricSummary:
    avg: float
    median: float
    std: float
    count: int
    extra: dict = field(default_factory=dict)


def lower_median(values) -> float:
    v = sorted(values)
    return float(v[(len(v) - 1) // 2])


def summarize_values(values) -> MetricSummary:
    v = np.asarray([x for x in values if math.isfinite(x)], dtype=np.float64)
    if v.size == 0:
        return MetricSummary(math.nan, math.nan, math.nan, 0)
    # sorted summation keeps the result independent of record order
    v = np.sort(v)
    avg = math.fsum(v) / v.size
    std = math.sqrt(math.fsum((v - avg) ** 2) / v.size)
    return MetricSummary(avg, lower_median(v), std, int(v.size))


def summarize(records, metrics=METRICS) -> dict:
    """``{split: {metric: MetricSummary}}`` for every non-empty split plus ``overall``.

    Empty splits are left out rather than reported as zeros.
    """
    records = list(records)
    groups = {"overall": records}
    for split in OverlapSplit:
        members = [r for r in records if r.split == split.value]
        if members:
            groups[split.value] = members
    if not records:
        groups.pop("overall")
    return {name: {m: summarize_values([getattr(r, m) for r in rs]) for m in metrics}
            for name, rs in groups.items()}


# -- report emission --------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, float):
        return "nan" if math.isnan(x) else repr(x)
    return str(x)


def write_records_csv(path, records) -> None:
    names = [f.name for f in fields(PairRecord)]
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(names)
        for r in records:
            writer.writerow([_fmt(getattr(r, n)) for n in names])


def read_records_csv(path) -> list:
    out = []
    types = {f.name: f.type for f in fields(PairRecord)}
    with open(Path(path), newline="") as fh:
        for row in csv.DictReader(fh):
            kw = {}
            for k, v in row.items():
                t = types[k]
                kw[k] = int(v) if t in (int, "int") else float(v) if t in (float, "float") else v
            out.append(PairRecord(**kw))
    return out


def summary_to_json(summary: dict) -> dict:
    def clean(x):
        return None if isinstance(x, float) and math.isnan(x) else x

    return {split: {m: {k: clean(v) for k, v in asdict(s).items() if k != "extra"}
                    for m, s in metrics.items()}
            for split, metrics in summary.items()}


def write_summary_csv(path, summary: dict) -> None:
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["split", "metric", "avg", "median", "std", "count"])
        for split, metrics in summary.items():
            for m, s in metrics.items():
                writer.writerow([split, m, _fmt(s.avg), _fmt(s.median), _fmt(s.std), s.count])


def write_report_json(path, records, summary: dict, extra: dict | None = None) -> None:
    def clean(d):
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}

    doc = {"records": [clean(asdict(r)) for r in records], "summary": summary_to_json(summary)}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
