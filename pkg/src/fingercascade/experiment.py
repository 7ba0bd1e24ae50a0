"""Stage runners shared by the CLI and the desk-scale ablation experiment.

The experiment generates train / held-out / uniform-stress splits, trains the
rough hand net, fine-tunes the attention net, trains both fingertip nets and
checks that the synthetic results reproduce the direction of each ablation
effect (attention helps more in the periphery, better boxes give better
fingertips, the joint target does not hurt the fingertip).
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import cascade as cc
from . import datagen as dg
from . import evaluation as ev
from . import nn_core as nn
from .cascade import FingerStrategy, HandStrategy
from .config import RunConfig

logger = logging.getLogger(__name__)

STAGES = ("hand", "finetune", "finger-mfd", "finger-spd")
STAGE_MODEL = {
    "hand": "rough_hand",
    "finetune": "attention_hand",
    "finger-mfd": "finger_multi",
    "finger-spd": "finger_single",
}
OVERLAP_STRATEGIES = (HandStrategy.RHD, HandStrategy.RECENTER, HandStrategy.AHD)
MEAN_TOLERANCE = 1e-6
SLACK = 0.10  # relative slack allowed on each ordering comparison


def loss_trace_path(models_dir: Path, stage: str) -> Path:
    return Path(models_dir) / f"loss_{stage}.csv"


def write_loss_trace(trace, path: Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        w.writerows([i + 1, format(v, ".8g")] for i, v in enumerate(trace))


def _resolve_mean(models_dir: Path, manifest: dg.DatasetManifest) -> tuple[float, float, float]:
    mean = dg.dataset_mean(manifest)
    if (models_dir / cc.DESCRIPTOR).exists():
        stored, _ = cc.read_descriptor(models_dir)
        if np.max(np.abs(np.subtract(stored, mean))) > MEAN_TOLERANCE:
            raise ValueError(f"models in {models_dir} were trained with data mean {stored}, "
                             f"but {manifest.path} has mean {mean}")
    return mean


def train_stage(cfg: RunConfig, stage: str, manifest: dg.DatasetManifest, models_dir: str | Path,
                progress: Callable[[int, float], None] | None = None) -> cc.TrainResult:
    """Train one stage and write its weight file, loss trace and the model descriptor."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; expected one of {', '.join(STAGES)}")
    models_dir = Path(models_dir)
    if len(manifest) == 0:
        raise ValueError(f"manifest {manifest.path} is empty")
    geometry = cfg.geometry()
    if stage == "finetune":
        base_path = models_dir / cc.MODEL_FILES["rough_hand"]
        if not base_path.exists():
            raise FileNotFoundError(f"base hand weights not found: {base_path}")
    mean = _resolve_mean(models_dir, manifest)
    frames = manifest.frames()
    if stage == "hand":
        result = cc.train_hand_detector(frames, cfg.train_config("hand"), geometry, mean,
                                        spec=cfg.hand_spec(), progress=progress)
    elif stage == "finetune":
        base = cc.Net(*nn.load_weights(base_path))
        result = cc.finetune_hand_detector(frames, base, cfg.train_config("finetune"), geometry,
                                           mean, progress=progress)
    else:
        strategy = FingerStrategy.MFD if stage == "finger-mfd" else FingerStrategy.SPD
        result = cc.train_finger_detector(frames, strategy, cfg.train_config("finger"), geometry,
                                          mean, spec=cfg.finger_spec(strategy),
                                          augment=cfg.finger_augment(), progress=progress)
    models_dir.mkdir(parents=True, exist_ok=True)
    nn.save_weights(result.spec, result.weights, models_dir / cc.MODEL_FILES[STAGE_MODEL[stage]])
    write_loss_trace(result.loss_trace, loss_trace_path(models_dir, stage))
    cc.write_descriptor(models_dir, mean, geometry)
    return result


def eval_file_set() -> list[str]:
    names = [f"overlap_{s.value}.csv" for s in OVERLAP_STRATEGIES]
    names += [f"error_{h.value}_{f.value}.csv" for h in ev.CROSS_ROWS for f in ev.CROSS_COLS]
    return sorted(names + ["cross_table.csv", "zones.csv"])


@dataclass
class EvalOutput:
    records: list[ev.EvalRecord]
    failures: list
    cross: ev.CrossTable
    zones: dict
    files: list[Path] = field(default_factory=list)


def evaluate_to_dir(cfg: RunConfig, models: cc.TrainedModels, frames, out_dir: str | Path) -> EvalOutput:
    """Evaluate every strategy and write the curve, cross-table and zone files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    hand = (*OVERLAP_STRATEGIES, HandStrategy.GT)
    records, failures = ev.evaluate_frames(models, frames, hand, ev.CROSS_COLS, cfg.overlap_metric)
    if not records:
        raise RuntimeError("every frame failed evaluation")
    files = []
    for s in OVERLAP_STRATEGIES:
        curve = ev.overlap_curve([r.ious[s] for r in records], cfg.overlap_thresholds())
        files.append(ev.emit_csv(curve, out_dir / f"overlap_{s.value}.csv"))
    for h in ev.CROSS_ROWS:
        for f in ev.CROSS_COLS:
            curve = ev.error_curve([r.errors[(h, f)] for r in records], cfg.error_thresholds())
            files.append(ev.emit_csv(curve, out_dir / f"error_{h.value}_{f.value}.csv"))
    cross = ev.cross_table_from_records(records, len(failures))
    files.append(ev.emit_csv(cross, out_dir / "cross_table.csv"))
    zones = ev.zone_metrics(records, cfg.focus_zone_box, OVERLAP_STRATEGIES)
    files.append(ev.emit_zone_csv(zones, out_dir / "zones.csv"))
    return EvalOutput(records, failures, cross, zones, files)


# -- the desk-scale ablation ------------------------------------------------

@dataclass
class Criterion:
    name: str
    passed: bool
    detail: str


@dataclass
class ExperimentMetrics:
    held_iou: dict[str, float]
    stress_iou: dict[str, float]
    stress_zones: dict[str, dict[str, float]]  # zone -> strategy -> mean IoU
    zone_counts: dict[str, int]
    cross: dict[str, float]  # "HAND+FINGER" -> mean error px
    failures: int

    def to_json(self) -> dict:
        return self.__dict__.copy()


def _ratio_ok(smaller: float, larger: float, slack: float = SLACK) -> bool:
    return smaller <= larger * (1.0 + slack)


def check_criteria(m: ExperimentMetrics, min_iou: float = 0.5) -> list[Criterion]:
    """Evaluate the four ablation checks on measured metrics."""
    out = []
    rhd = m.held_iou["RHD"]
    out.append(Criterion("4a RHD held-out IoU", rhd >= min_iou, f"{rhd:.4f} >= {min_iou}"))

    s_rhd, s_ahd = m.stress_iou["RHD"], m.stress_iou["AHD"]
    zones = m.stress_zones
    if "focus" in zones and "surrounding" in zones:
        g_sur = zones["surrounding"]["AHD"] - zones["surrounding"]["RHD"]
        g_foc = zones["focus"]["AHD"] - zones["focus"]["RHD"]
        ok = s_ahd >= s_rhd and g_sur > g_foc
        detail = (f"AHD {s_ahd:.4f} vs RHD {s_rhd:.4f}; "
                  f"surrounding gap {g_sur:+.4f} vs focus gap {g_foc:+.4f}")
    else:
        ok, detail = False, f"a zone is empty: {sorted(zones)}"
    out.append(Criterion("4b attention gain on stress set", ok, detail))

    c = m.cross
    gt, ahd, rough = c["GT+MFD"], c["AHD+MFD"], c["RHD+MFD"]
    ok = _ratio_ok(gt, ahd) and _ratio_ok(ahd, rough)
    out.append(Criterion("4c hand-strategy ordering", ok,
                         f"GT {gt:.2f} <= AHD {ahd:.2f} <= RHD {rough:.2f} (10% slack)"))

    parts, ok = [], True
    for h in ("RHD", "AHD", "GT"):
        mfd, spd = c[f"{h}+MFD"], c[f"{h}+SPD"]
        ok &= _ratio_ok(mfd, spd)
        parts.append(f"{h}: {mfd:.2f} vs {spd:.2f}")
    out.append(Criterion("4d MFD vs SPD", bool(ok), "; ".join(parts) + " (10% slack)"))
    return out


@dataclass
class ExperimentResult:
    metrics: ExperimentMetrics
    criteria: list[Criterion]
    seconds: dict[str, float]
    models: cc.TrainedModels

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.criteria)


def generate_splits(cfg: RunConfig, root: Path) -> dict[str, dg.DatasetManifest]:
    splits = {"train": (cfg.count, "gaussian"), "held": (cfg.held_count, "gaussian"),
              "stress": (cfg.stress_count, "uniform")}
    return {name: dg.generate_dataset(cfg.scene_params(placement, name), n, root / "data" / name)
            for name, (n, placement) in splits.items()}


def run_desk_experiment(cfg: RunConfig, workdir: str | Path,
                        log: Callable[[str], None] = logger.info) -> ExperimentResult:
    """Generate data, train all four nets, evaluate and check the ablation effects."""
    workdir = Path(workdir)
    seconds = {}
    t0 = time.perf_counter()
    data = generate_splits(cfg, workdir)
    seconds["generate"] = time.perf_counter() - t0
    log(f"generated {', '.join(f'{k}={len(v)}' for k, v in data.items())} "
        f"in {seconds['generate']:.1f}s")

    models_dir = workdir / "models"
    for stage in STAGES:
        t0 = time.perf_counter()
        res = train_stage(cfg, stage, data["train"], models_dir)
        seconds[stage] = time.perf_counter() - t0
        log(f"{stage}: final loss {res.loss_trace[-1] if res.loss_trace else float('nan'):.5f} "
            f"in {seconds[stage]:.1f}s")
    models = cc.TrainedModels.load(models_dir)

    t0 = time.perf_counter()
    held = evaluate_to_dir(cfg, models, data["held"].frames(), workdir / "eval_held")
    stress_recs, stress_fail = ev.evaluate_frames(models, data["stress"].frames(),
                                                  OVERLAP_STRATEGIES, (), cfg.overlap_metric)
    seconds["evaluate"] = time.perf_counter() - t0
    zones = ev.zone_metrics(stress_recs, cfg.focus_zone_box, OVERLAP_STRATEGIES)
    metrics = ExperimentMetrics(
        held_iou={s.value: ev.mean_iou(held.records, s) for s in OVERLAP_STRATEGIES},
        stress_iou={s.value: ev.mean_iou(stress_recs, s) for s in OVERLAP_STRATEGIES},
        stress_zones={z: {s.value: st.mean_iou for s, st in v.items()} for z, v in zones.items()},
        zone_counts={z: next(iter(v.values())).frames for z, v in zones.items()},
        cross={f"{h.value}+{f.value}": v for h, f, v in held.cross.rows()},
        failures=len(held.failures) + len(stress_fail),
    )
    criteria = check_criteria(metrics)
    (workdir / "experiment.json").write_text(json.dumps({
        "metrics": metrics.to_json(),
        "criteria": [c.__dict__ for c in criteria],
        "seconds": seconds,
    }, indent=2) + "\n")
    return ExperimentResult(metrics, criteria, seconds, models)
