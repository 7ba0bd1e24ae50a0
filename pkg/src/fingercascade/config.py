"""Run configuration: one flat key set shared by the INI file and the CLI flags.

Every field of :class:`RunConfig` is a key of the ``[run]`` section and also a
``--key-name`` flag; flags override the file, the file overrides defaults.
The defaults are the desk-scale settings used by the acceptance experiment.
"""

from __future__ import annotations

import configparser
import dataclasses
import zlib
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import datagen as dg
from . import nn_core as nn
from .cascade import FingerAugment, FingerStrategy, HandStrategy, InputGeometry

SECTION = "run"
DESK_SEED = 1729
TRAIN_STAGES = ("hand", "finetune", "finger")


def named_seed(seed: int, name: str) -> int:
    """Derive an independent 63-bit seed for the named sub-stream."""
    ss = np.random.SeedSequence([seed & (2**64 - 1), zlib.crc32(name.encode())])
    hi, lo = ss.generate_state(2, np.uint32)
    return int((int(hi) << 31) ^ int(lo))


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in str(text).split(",") if v.strip())


@dataclass
class RunConfig:
    seed: int = DESK_SEED
    data_dir: str = "data"
    models_dir: str = "models"
    out_dir: str = "out"
    # scene generation
    split: str = "train"  # names the data sub-stream, so splits never share frames
    count: int = 2000
    held_count: int = 500
    stress_count: int = 500
    image_width: int = 128
    image_height: int = 128
    placement: str = "gaussian"
    dark_fraction: float = 0.3
    noise_sigma: float = 0.015
    # network input geometry (square sizes)
    hand_train_size: int = 72
    hand_input_size: int = 64
    finger_patch_size: int = 48
    margin: float = 0.15
    input_scale: float = 4.0
    # rough hand detector
    hand_channels: str = "8,16,32,32,64"
    hand_hidden: str = "256,128"
    hand_learning_rate: float = 0.02
    hand_momentum: float = 0.9
    hand_batch_size: int = 16
    hand_epochs: int = 50
    hand_lr_decay: float = 0.96
    hand_weight_init_scale: float = 2.0
    hand_grad_clip: float = 5.0
    # attention fine-tuning
    finetune_learning_rate: float = 0.01
    finetune_momentum: float = 0.9
    finetune_batch_size: int = 16
    finetune_epochs: int = 20
    finetune_lr_decay: float = 0.95
    finetune_grad_clip: float = 5.0
    # fingertip detectors (MFD and SPD share these)
    finger_channels: str = "8,16,32,32,64"
    finger_hidden: str = "256,128"
    finger_learning_rate: float = 0.01
    finger_momentum: float = 0.9
    finger_batch_size: int = 16
    finger_epochs: int = 30
    finger_lr_decay: float = 0.96
    finger_weight_init_scale: float = 2.0
    finger_grad_clip: float = 5.0
    finger_scale_min: float = 0.9
    finger_scale_max: float = 1.1
    finger_rotation_deg: float = 15.0
    # evaluation / inference
    hand_strategy: str = "AHD"
    finger_strategy: str = "MFD"
    overlap_metric: str = "iou"
    focus_zone: str = "0.25,0.25,0.75,0.75"
    overlap_step: float = 0.05
    error_max: float = 100.0
    error_step: float = 1.0
    reps: int = 100
    warmup: int = 5

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type in ("int", "float") and isinstance(v, str):
                setattr(self, f.name, int(v) if f.type == "int" else float(v))
        self.validate()

    def validate(self) -> None:
        if min(self.count, self.held_count, self.stress_count) < 0:
            raise ValueError("frame counts must be non-negative")
        if self.reps < 1 or self.warmup < 0:
            raise ValueError("reps must be positive and warmup non-negative")
        HandStrategy(self.hand_strategy)
        FingerStrategy(self.finger_strategy)
        zone = self.focus_zone_box
        if len(zone) != 4:
            raise ValueError("focus_zone needs four comma-separated fractions")
        if not 0 < self.overlap_step <= 1 or self.error_step <= 0 or self.error_max <= 0:
            raise ValueError("threshold grid steps must be positive")
        self.geometry()
        self.scene_params()
        for stage in TRAIN_STAGES:
            self.train_config(stage)

    # -- typed views -------------------------------------------------------

    @property
    def focus_zone_box(self) -> tuple[float, ...]:
        return _floats(self.focus_zone)

    def scene_params(self, placement: str | None = None, split: str | None = None) -> dg.SceneParams:
        return dg.SceneParams(
            image_size=(self.image_width, self.image_height),
            placement=placement or self.placement,
            dark_fraction=self.dark_fraction,
            noise_sigma=self.noise_sigma,
            seed=named_seed(self.seed, f"data/{split or self.split}"),
        )

    def geometry(self) -> InputGeometry:
        return InputGeometry((self.hand_train_size,) * 2, (self.hand_input_size,) * 2,
                             (self.finger_patch_size,) * 2, self.margin, self.input_scale)

    def train_config(self, stage: str) -> nn.TrainConfig:
        """Optimizer settings for 'hand', 'finetune' or 'finger'."""
        if stage not in TRAIN_STAGES:
            raise ValueError(f"unknown training stage {stage!r}")
        init_stage = "hand" if stage == "finetune" else stage
        return nn.TrainConfig(
            learning_rate=getattr(self, f"{stage}_learning_rate"),
            momentum=getattr(self, f"{stage}_momentum"),
            batch_size=getattr(self, f"{stage}_batch_size"),
            epochs=getattr(self, f"{stage}_epochs"),
            seed=named_seed(self.seed, f"train/{stage}"),
            weight_init_scale=getattr(self, f"{init_stage}_weight_init_scale"),
            lr_decay=getattr(self, f"{stage}_lr_decay"),
            grad_clip=getattr(self, f"{stage}_grad_clip"),
        )

    def hand_spec(self) -> nn.NetworkSpec:
        return nn.conv_ladder_spec(self.hand_input_size, 4, channels=_ints(self.hand_channels),
                                   hidden=_ints(self.hand_hidden))

    def finger_spec(self, strategy: FingerStrategy) -> nn.NetworkSpec:
        out = 4 if FingerStrategy(strategy) is FingerStrategy.MFD else 2
        return nn.conv_ladder_spec(self.finger_patch_size, out,
                                   channels=_ints(self.finger_channels),
                                   hidden=_ints(self.finger_hidden))

    def finger_augment(self) -> FingerAugment:
        r = self.finger_rotation_deg
        return FingerAugment((self.finger_scale_min, self.finger_scale_max), (-r, r))

    def overlap_thresholds(self) -> list[float]:
        n = int(round(1.0 / self.overlap_step))
        return [round(i * self.overlap_step, 10) for i in range(n + 1)]

    def error_thresholds(self) -> list[float]:
        n = int(round(self.error_max / self.error_step))
        return [round(i * self.error_step, 10) for i in range(n + 1)]

    # -- files -------------------------------------------------------------

    def to_ini(self) -> str:
        lines = [f"{f.name} = {getattr(self, f.name)}" for f in fields(self)]
        return f"[{SECTION}]\n" + "\n".join(lines) + "\n"


def config_keys() -> list[str]:
    return [f.name for f in fields(RunConfig)]


def read_ini(path: str | Path) -> dict[str, str]:
    """Return the raw key/value pairs of the ``[run]`` section; unknown keys are an error."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    cp = configparser.ConfigParser()
    try:
        cp.read(path, encoding="utf-8")
    except configparser.Error as e:
        raise ValueError(f"{path}: {e}") from e
    if SECTION not in cp:
        raise ValueError(f"{path}: missing [{SECTION}] section")
    extra = set(cp.sections()) - {SECTION}
    if extra:
        raise ValueError(f"{path}: unexpected sections {sorted(extra)}")
    values = dict(cp[SECTION])
    unknown = set(values) - set(config_keys())
    if unknown:
        raise ValueError(f"{path}: unknown keys {sorted(unknown)}")
    return values


def build_config(ini_path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults <- INI file <- overrides (None values in ``overrides`` are ignored)."""
    values: dict = {}
    if ini_path is not None:
        values.update(read_ini(ini_path))
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    types = {f.name: f.type for f in fields(RunConfig)}
    typed = {}
    for k, v in values.items():
        if k not in types:
            raise ValueError(f"unknown config key {k!r}")
        t = types[k]
        try:
            typed[k] = int(v) if t == "int" else float(v) if t == "float" else str(v)
        except ValueError:
            raise ValueError(f"config key {k}: cannot parse {v!r} as {t}") from None
    return dataclasses.replace(RunConfig(), **typed) if typed else RunConfig()
