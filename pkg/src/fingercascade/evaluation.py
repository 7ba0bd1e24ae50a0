"""Evaluation: overlap/error averages, detection-rate curves, the hand x finger
cross table, zone-stratified overlap and the per-stage latency benchmark."""

from __future__ import annotations

import csv
import gc
import json
import logging
import math
import os
import platform
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import cascade as cc
from . import datagen as dg
from . import geometry as geo
from .cascade import FingerStrategy, HandStrategy
from .geometry import BBox

logger = logging.getLogger(__name__)

OVERLAP_THRESHOLDS = tuple(round(0.05 * i, 2) for i in range(21))
ERROR_THRESHOLDS = tuple(float(i) for i in range(101))
CROSS_ROWS = (HandStrategy.RHD, HandStrategy.AHD, HandStrategy.GT)
CROSS_COLS = (FingerStrategy.MFD, FingerStrategy.SPD)
DEFAULT_FOCUS_ZONE = (0.25, 0.25, 0.75, 0.75)  # central half of width and height
MIN_BENCH_REPETITIONS = 30

# Published figures for the original GPU system on 640x480 real footage.
# Context for reports only; nothing here is a target at desk scale.
REFERENCE_CROSS_TABLE_PX = {
    (HandStrategy.RHD, FingerStrategy.MFD): 18.93,
    (HandStrategy.AHD, FingerStrategy.MFD): 15.71,
    (HandStrategy.GT, FingerStrategy.MFD): 10.71,
    (HandStrategy.RHD, FingerStrategy.SPD): 20.34,
    (HandStrategy.AHD, FingerStrategy.SPD): 16.93,
    (HandStrategy.GT, FingerStrategy.SPD): 12.50,
}
REFERENCE_TIMINGS_MS = {"hand_detect": 5.76, "finger_detect": 0.68, "total": 9.65}


# -- overlap metrics -------------------------------------------------------

def gt_coverage(pred: BBox, gt: BBox) -> float:
    """Intersection over ground-truth area (alternative reading of overlap rate)."""
    if not (pred.valid and gt.valid):
        return 0.0
    iw = min(pred.x2, gt.x2) - max(pred.x1, gt.x1)
    ih = min(pred.y2, gt.y2) - max(pred.y1, gt.y1)
    return max(iw, 0.0) * max(ih, 0.0) / gt.area


OVERLAP_METRICS: dict[str, Callable[[BBox, BBox], float]] = {
    "iou": geo.iou,
    "gt_coverage": gt_coverage,
}


# -- curves ----------------------------------------------------------------

@dataclass
class EvalCurve:
    thresholds: list[float]
    detection_rates: list[float]
    kind: str = "overlap"  # or "error"

    def rate_at(self, threshold: float) -> float:
        return self.detection_rates[self.thresholds.index(threshold)]


def _check_thresholds(thresholds: Sequence[float]) -> list[float]:
    ts = [float(t) for t in thresholds]
    if not ts or any(b <= a for a, b in zip(ts, ts[1:])):
        raise ValueError("thresholds must be a non-empty strictly ascending sequence")
    return ts


def overlap_curve(ious: Sequence[float], thresholds: Sequence[float] = OVERLAP_THRESHOLDS) -> EvalCurve:
    """Fraction of overlaps >= each threshold."""
    values = np.asarray(ious, dtype=np.float64)
    if values.size == 0:
        raise ValueError("overlap_curve of an empty list")
    if np.any((values < 0) | (values > 1)):
        raise ValueError("overlap values must lie in [0, 1]")
    ts = _check_thresholds(thresholds)
    rates = [float(np.count_nonzero(values >= t)) / values.size for t in ts]
    return EvalCurve(ts, rates, "overlap")


def error_curve(errors: Sequence[float], thresholds: Sequence[float] = ERROR_THRESHOLDS) -> EvalCurve:
    """Fraction of errors <= each threshold."""
    values = np.asarray(errors, dtype=np.float64)
    if values.size == 0:
        raise ValueError("error_curve of an empty list")
    if np.any(values < 0):
        raise ValueError("errors must be non-negative")
    ts = _check_thresholds(thresholds)
    rates = [float(np.count_nonzero(values <= t)) / values.size for t in ts]
    return EvalCurve(ts, rates, "error")


# -- per-frame records -----------------------------------------------------

@dataclass
class EvalRecord:
    frame_id: str
    image_size: tuple[int, int]
    gt_box: BBox
    ious: dict[HandStrategy, float] = field(default_factory=dict)
    errors: dict[tuple[HandStrategy, FingerStrategy], float] = field(default_factory=dict)


def fingertip_error(pred: Sequence[float], truth: Sequence[float]) -> float:
    return math.hypot(pred[0] - truth[0], pred[1] - truth[1])


def evaluate_frames(models: cc.TrainedModels, frames: Iterable[dg.LabeledFrame],
                    hand_strategies: Sequence[HandStrategy] = CROSS_ROWS,
                    finger_strategies: Sequence[FingerStrategy] = CROSS_COLS,
                    metric: str = "iou") -> tuple[list[EvalRecord], list[tuple[str, str]]]:
    """Run every requested strategy on every frame.

    Hand boxes are computed once per hand strategy and shared by both finger
    detectors. Frames that raise are excluded and returned as (id, reason).
    """
    overlap = OVERLAP_METRICS[metric]
    records, failures = [], []
    for k, frame in enumerate(frames):
        fid = str(frame.meta.get("image", k))
        try:
            rec = EvalRecord(fid, frame.size, frame.hand_box)
            for hs in hand_strategies:
                hs = HandStrategy(hs)
                gt = frame.hand_box if hs is HandStrategy.GT else None
                box = cc.detect_hand(models, frame.image, hs, gt)
                rec.ious[hs] = overlap(box, frame.hand_box)
                for fs in finger_strategies:
                    fs = FingerStrategy(fs)
                    tip, _ = cc.finger_predict(models, frame.image, box, fs)
                    rec.errors[(hs, fs)] = fingertip_error(tip, frame.fingertip)
            records.append(rec)
        except Exception as e:  # noqa: BLE001 - report and keep evaluating
            logger.warning("frame %s failed: %s", fid, e)
            failures.append((fid, repr(e)))
    return records, failures


def mean_iou(records: Sequence[EvalRecord], strategy: HandStrategy) -> float:
    return float(np.mean([r.ious[HandStrategy(strategy)] for r in records]))


def mean_error(records: Sequence[EvalRecord], hand: HandStrategy, finger: FingerStrategy) -> float:
    return float(np.mean([r.errors[(HandStrategy(hand), FingerStrategy(finger))] for r in records]))


# -- cross comparison ------------------------------------------------------

@dataclass
class CrossTable:
    cells: dict[tuple[HandStrategy, FingerStrategy], float]
    frames: int
    failures: int = 0

    def cell(self, hand, finger) -> float:
        return self.cells[(HandStrategy(hand), FingerStrategy(finger))]

    def rows(self) -> list[tuple[HandStrategy, FingerStrategy, float]]:
        return [(h, f, self.cells[(h, f)]) for h in CROSS_ROWS for f in CROSS_COLS
                if (h, f) in self.cells]

    def render(self) -> str:
        lines = ["hand  " + "".join(f"{f.value:>10}" for f in CROSS_COLS)]
        for h in CROSS_ROWS:
            vals = "".join(f"{self.cells[(h, f)]:>10.2f}" if (h, f) in self.cells else f"{'-':>10}"
                           for f in CROSS_COLS)
            lines.append(f"{h.value:<6}{vals}")
        return "\n".join(lines)


def reference_cross_table() -> CrossTable:
    return CrossTable(dict(REFERENCE_CROSS_TABLE_PX), frames=0)


def cross_table_from_records(records: Sequence[EvalRecord], failures: int = 0) -> CrossTable:
    if not records:
        raise ValueError("no successfully evaluated frames")
    cells = {}
    for h in CROSS_ROWS:
        for f in CROSS_COLS:
            if (h, f) in records[0].errors:
                cells[(h, f)] = mean_error(records, h, f)
    return CrossTable(cells, len(records), failures)


def cross_comparison(models: cc.TrainedModels, data) -> CrossTable:
    """Mean fingertip error of all six hand x finger strategy pairs."""
    frames = data.frames() if isinstance(data, dg.DatasetManifest) else list(data)
    if not frames:
        raise ValueError("cross_comparison needs a non-empty manifest")
    records, failures = evaluate_frames(models, frames)
    return cross_table_from_records(records, len(failures))


# -- zones -----------------------------------------------------------------

@dataclass
class ZoneStat:
    mean_iou: float
    frames: int


def in_zone(box: BBox, image_size: tuple[int, int], zone: Sequence[float]) -> bool:
    w, h = image_size
    cx, cy = box.center
    return zone[0] * w <= cx < zone[2] * w and zone[1] * h <= cy < zone[3] * h


def zone_metrics(records: Sequence[EvalRecord], focus_zone: Sequence[float] = DEFAULT_FOCUS_ZONE,
                 strategies: Sequence[HandStrategy] | None = None
                 ) -> dict[str, dict[HandStrategy, ZoneStat]]:
    """Mean overlap per strategy within the focus zone and the surrounding zone.

    ``focus_zone`` is (x1, y1, x2, y2) in fractions of the image size. A
    partition with no frames is left out of the result rather than reported as 0.
    """
    if not (0 <= focus_zone[0] < focus_zone[2] <= 1 and 0 <= focus_zone[1] < focus_zone[3] <= 1):
        raise ValueError(f"focus zone {focus_zone} must be a box inside [0, 1]^2")
    parts = {"focus": [], "surrounding": []}
    for r in records:
        key = "focus" if in_zone(r.gt_box, r.image_size, focus_zone) else "surrounding"
        parts[key].append(r)
    out = {}
    for name, recs in parts.items():
        if not recs:
            continue
        strats = strategies or list(recs[0].ious)
        out[name] = {HandStrategy(s): ZoneStat(mean_iou(recs, s), len(recs)) for s in strats}
    return out


# -- latency ---------------------------------------------------------------

@dataclass
class StageStat:
    mean_ms: float
    p95_ms: float
    sem_ms: float


@dataclass
class TimingReport:
    stages: dict[str, StageStat]
    total: StageStat
    n: int
    warmup: int
    env: dict

    def to_json(self) -> dict:
        return {
            "stages": {k: {"mean_ms": v.mean_ms, "p95_ms": v.p95_ms, "sem_ms": v.sem_ms}
                       for k, v in self.stages.items()},
            "total_ms": {"mean_ms": self.total.mean_ms, "p95_ms": self.total.p95_ms,
                         "sem_ms": self.total.sem_ms},
            "n": self.n,
            "warmup": self.warmup,
            "env": self.env,
            "reference_ms": dict(REFERENCE_TIMINGS_MS),
        }

    def render(self) -> str:
        lines = [f"{'stage':<14}{'mean ms':>10}{'p95 ms':>10}"]
        for k, v in self.stages.items():
            lines.append(f"{k:<14}{v.mean_ms:>10.3f}{v.p95_ms:>10.3f}")
        lines.append(f"{'total':<14}{self.total.mean_ms:>10.3f}{self.total.p95_ms:>10.3f}")
        return "\n".join(lines)


_STAT_SCHEMA = {
    "type": "object",
    "required": ["mean_ms", "p95_ms"],
    "properties": {"mean_ms": {"type": "number", "exclusiveMinimum": 0},
                   "p95_ms": {"type": "number", "exclusiveMinimum": 0},
                   "sem_ms": {"type": "number", "minimum": 0}},
}
TIMING_SCHEMA = {
    "type": "object",
    "required": ["stages", "total_ms", "n", "env"],
    "properties": {
        "stages": {
            "type": "object",
            "required": [cc.HAND_STAGE, cc.FINGER_STAGE, cc.PROCESSING_STAGE],
            "additionalProperties": _STAT_SCHEMA,
        },
        "total_ms": _STAT_SCHEMA,
        "n": {"type": "integer", "minimum": MIN_BENCH_REPETITIONS},
        "warmup": {"type": "integer", "minimum": 0},
        "env": {"type": "object"},
        "reference_ms": {"type": "object"},
    },
}


def environment_note() -> dict:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "machine": platform.machine(),
        "processor": platform.processor() or "unknown",
        "cpu_count": os.cpu_count(),
        "system": platform.system(),
        "note": "single-threaded CPU run; reference_ms are GPU figures, not targets",
    }


def _stat(values: Sequence[float]) -> StageStat:
    a = np.asarray(values, dtype=np.float64)
    sem = float(a.std(ddof=1) / math.sqrt(a.size)) if a.size > 1 else 0.0
    return StageStat(float(a.mean()), float(np.percentile(a, 95)), sem)


def benchmark_latency(models: cc.TrainedModels, data, repetitions: int, warmup: int = 5,
                      hand: HandStrategy = HandStrategy.AHD,
                      finger: FingerStrategy = FingerStrategy.MFD) -> TimingReport:
    """Time ``repetitions`` cascade runs (after ``warmup`` untimed ones), cycling over frames."""
    if repetitions < MIN_BENCH_REPETITIONS:
        raise ValueError(f"repetitions >= {MIN_BENCH_REPETITIONS} required")
    frames = data.frames() if isinstance(data, dg.DatasetManifest) else list(data)
    if not frames:
        raise ValueError("benchmark needs at least one frame")
    hand = HandStrategy(hand)
    if hand is HandStrategy.GT:
        raise ValueError("benchmarking the GT strategy times no hand detector")
    for i in range(warmup):
        cc.run_cascade(models, frames[i % len(frames)].image, hand, finger)
    samples: dict[str, list[float]] = {}
    # like timeit: collector pauses scale with the caller's heap, not with the cascade
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        for i in range(repetitions):
            det = cc.run_cascade(models, frames[i % len(frames)].image, hand, finger)
            for k, v in det.stage_timings.items():
                samples.setdefault(k, []).append(v)
    finally:
        if gc_was_enabled:
            gc.enable()
    total = samples.pop("total")
    stages = {k: _stat(v) for k, v in samples.items()}
    env = environment_note()
    env["strategies"] = [hand.value, FingerStrategy(finger).value]
    return TimingReport(stages, _stat(total), repetitions, warmup, env)


# -- files -----------------------------------------------------------------

def _fmt(v: float) -> str:
    return format(float(v), ".6g")


def emit_csv(obj, path: str | Path) -> Path:
    """Write an EvalCurve or CrossTable as CSV, or a TimingReport as JSON."""
    path = Path(path)
    try:
        if isinstance(obj, EvalCurve):
            if not obj.thresholds:
                raise ValueError("refusing to write an empty curve")
            rows = [["threshold", "detection_rate"]]
            rows += [[_fmt(t), _fmt(r)] for t, r in zip(obj.thresholds, obj.detection_rates)]
            _write_rows(path, rows)
        elif isinstance(obj, CrossTable):
            if not obj.cells:
                raise ValueError("refusing to write an empty cross table")
            rows = [["hand_strategy", "finger_strategy", "mean_error_px", "frames"]]
            rows += [[h.value, f.value, _fmt(v), str(obj.frames)] for h, f, v in obj.rows()]
            _write_rows(path, rows)
        elif isinstance(obj, TimingReport):
            path.write_text(json.dumps(obj.to_json(), indent=2, sort_keys=True) + "\n")
        else:
            raise TypeError(f"cannot emit {type(obj).__name__}")
    except OSError as e:
        raise OSError(f"cannot write {path}: {e}") from e
    return path


def _write_rows(path: Path, rows) -> None:
    with open(path, "w", newline="") as f:
        csv.writer(f, lineterminator="\n").writerows(rows)


def read_curve_csv(path: str | Path, kind: str = "overlap") -> EvalCurve:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != ["threshold", "detection_rate"]:
        raise ValueError(f"{path}: not a curve file")
    return EvalCurve([float(r[0]) for r in rows[1:]], [float(r[1]) for r in rows[1:]], kind)


def read_cross_csv(path: str | Path) -> CrossTable:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != ["hand_strategy", "finger_strategy", "mean_error_px", "frames"]:
        raise ValueError(f"{path}: not a cross-table file")
    cells = {(HandStrategy(r[0]), FingerStrategy(r[1])): float(r[2]) for r in rows[1:]}
    frames = int(rows[1][3]) if len(rows) > 1 else 0
    return CrossTable(cells, frames)


def emit_zone_csv(zones: dict[str, dict[HandStrategy, ZoneStat]], path: str | Path) -> Path:
    rows = [["zone", "hand_strategy", "mean_iou", "frames"]]
    for zone in ("focus", "surrounding"):
        for s, stat in zones.get(zone, {}).items():
            rows.append([zone, s.value, _fmt(stat.mean_iou), str(stat.frames)])
    _write_rows(Path(path), rows)
    return Path(path)


def read_timing_json(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())
