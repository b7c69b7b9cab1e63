"""Displacement metrics and heading-change-binned reports."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyInput, HorizonMismatch
from .kinematics import BIN_LABELS, N_BINS

MISS_THRESHOLD = 2.0  # metres; strictly greater counts as a miss
REPORT_SCHEMA_VERSION = "1.0"
REPORT_COLUMNS = ("stream", "bin", "n", "minADE", "minFDE", "MR")


def _check(cands, gt):
    cands = np.asarray(cands, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if cands.ndim == 2:
        cands = cands[None]
    if cands.ndim != 3 or gt.ndim != 2 or cands.shape[1:] != gt.shape:
        raise HorizonMismatch(f"candidates {cands.shape} do not match ground truth {gt.shape}")
    return cands, gt


def ade(cands, gt) -> np.ndarray:
    """(K,) mean per-waypoint Euclidean error of each candidate."""
    cands, gt = _check(cands, gt)
    return np.linalg.norm(cands - gt, axis=2).mean(axis=1)


def fde(cands, gt) -> np.ndarray:
    """(K,) final-waypoint Euclidean error of each candidate."""
    cands, gt = _check(cands, gt)
    return np.linalg.norm(cands[:, -1] - gt[-1], axis=1)


def min_ade(cands, gt) -> float:
    return float(ade(cands, gt).min())


def min_fde(cands, gt) -> float:
    return float(fde(cands, gt).min())


def miss(cands, gt, threshold: float = MISS_THRESHOLD) -> bool:
    return min_fde(cands, gt) > threshold


@dataclass
class SceneMetrics:
    scene_id: str
    stream: str
    min_ade: float
    min_fde: float
    missed: bool
    delta_theta_bin: int
    delta_theta: float = float("nan")


def scene_metrics(scene_id, stream, cands, gt, delta_theta, bin_index) -> SceneMetrics:
    a, f = min_ade(cands, gt), min_fde(cands, gt)
    return SceneMetrics(str(scene_id), stream, a, f, f > MISS_THRESHOLD, int(bin_index), float(delta_theta))


@dataclass
class ReportRow:
    stream: str
    bin: str
    n: int
    minADE: float
    minFDE: float
    MR: float  # percent
    fraction: float


def _row(stream, label, items: Sequence[SceneMetrics], total: int) -> ReportRow:
    n = len(items)
    if n == 0:
        return ReportRow(stream, label, 0, float("nan"), float("nan"), float("nan"), 0.0)
    return ReportRow(
        stream, label, n,
        float(np.mean([m.min_ade for m in items])),
        float(np.mean([m.min_fde for m in items])),
        100.0 * float(np.mean([m.missed for m in items])),
        n / total,
    )


def binned_report(per_scene: Iterable[SceneMetrics]) -> list[ReportRow]:
    """Per-bin and overall means for every stream, in first-seen stream order."""
    per_scene = list(per_scene)
    if not per_scene:
        raise EmptyInput("no scene metrics to report")
    streams = list(dict.fromkeys(m.stream for m in per_scene))
    rows = []
    for s in streams:
        items = [m for m in per_scene if m.stream == s]
        for b in range(N_BINS):
            rows.append(_row(s, BIN_LABELS[b], [m for m in items if m.delta_theta_bin == b], len(items)))
        rows.append(_row(s, "overall", items, len(items)))
    return rows


def _fmt(x):
    return "nan" if x != x else f"{x:.4f}"


def report_csv(rows: Sequence[ReportRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow([r.stream, r.bin, r.n, _fmt(r.minADE), _fmt(r.minFDE), _fmt(r.MR)])
    return buf.getvalue()


def report_json(rows: Sequence[ReportRow]) -> str:
    doc = {"schema_version": REPORT_SCHEMA_VERSION, "rows": [asdict(r) for r in rows]}
    return json.dumps(doc, indent=1, sort_keys=True, allow_nan=True) + "\n"


def read_report_csv(text: str) -> list[dict]:
    return list(csv.DictReader(io.StringIO(text)))


def scene_log_line(m: SceneMetrics, **extra) -> str:
    rec = asdict(m)
    rec.update(extra)
    rec["schema_version"] = REPORT_SCHEMA_VERSION
    return json.dumps(rec, sort_keys=True)


def read_scene_log(lines: Iterable[str]) -> list[SceneMetrics]:
    fields = set(SceneMetrics.__dataclass_fields__)
    out = []
    for line in lines:
        line = line.strip()
        if not line:
            continue
        rec = json.loads(line)
        out.append(SceneMetrics(**{k: v for k, v in rec.items() if k in fields}))
    return out
