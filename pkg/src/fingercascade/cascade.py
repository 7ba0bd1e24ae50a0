"""The two-level hand/fingertip pipeline and its training procedures.

Level one regresses the hand box. The attention variant runs a rough pass,
translates the frame so the rough box is centered (padding with the dataset
mean), regresses again with a network fine-tuned on centered samples and maps
the result back. Level two crops the (inflated) hand box and regresses the
fingertip, plus the index-finger joint for the multi-point detector.

Network outputs are coordinates normalized to [0, 1] of the network input
frame; every coordinate leaving this module is in original-image pixels.
"""

from __future__ import annotations

import json
import logging
import math
import time
import zlib
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import datagen as dg
from . import geometry as geo
from . import nn_core as nn
from .geometry import BBox, Point

logger = logging.getLogger(__name__)

MIN_BOX_SIDE = 8.0
REFERENCE_WIDTH = 640  # frame width the 50 px centering bias refers to
REFERENCE_BIAS_PX = 50.0

MODEL_FILES = {
    "rough_hand": "rough_hand.cdw",
    "attention_hand": "attention_hand.cdw",
    "finger_multi": "finger_multi.cdw",
    "finger_single": "finger_single.cdw",
}
DESCRIPTOR = "models.json"


class HandStrategy(str, Enum):
    RHD = "RHD"  # rough detector alone
    AHD = "AHD"  # centralize + re-detect with the fine-tuned net
    GT = "GT"  # ground-truth box
    RECENTER = "RECENTER"  # centralize + re-detect with the rough net's own weights


class FingerStrategy(str, Enum):
    SPD = "SPD"
    MFD = "MFD"


class Net(NamedTuple):
    spec: nn.NetworkSpec
    weights: list

    def __call__(self, batch: np.ndarray) -> np.ndarray:
        return nn.forward(self.spec, self.weights, batch)

    @property
    def input_size(self) -> tuple[int, int]:
        _, h, w = self.spec.input_shape
        return w, h


@dataclass
class InputGeometry:
    hand_train_size: tuple[int, int] = (72, 72)  # resize target before random cropping
    hand_input_size: tuple[int, int] = (64, 64)  # hand network input (= crop size)
    finger_patch_size: tuple[int, int] = (48, 48)
    margin: float = 0.15  # finger patch = hand box grown by this fraction per side
    input_scale: float = 4.0  # network input = (image - fill_mean) * input_scale

    def __post_init__(self):
        self.hand_train_size = tuple(int(v) for v in self.hand_train_size)
        self.hand_input_size = tuple(int(v) for v in self.hand_input_size)
        self.finger_patch_size = tuple(int(v) for v in self.finger_patch_size)
        if (self.hand_input_size[0] > self.hand_train_size[0]
                or self.hand_input_size[1] > self.hand_train_size[1]):
            raise ValueError("hand_input_size must not exceed hand_train_size")
        if self.margin < 0:
            raise ValueError("margin must be non-negative")
        if not self.input_scale > 0:
            raise ValueError("input_scale must be positive")


def bias_max_for(width: int) -> float:
    """Centering bias bound scaled from 50 px at 640 px frame width."""
    return REFERENCE_BIAS_PX * width / REFERENCE_WIDTH


@dataclass
class TrainedModels:
    rough_hand: Net
    attention_hand: Net
    finger_multi: Net
    finger_single: Net
    fill_mean: tuple[float, float, float]
    geometry: InputGeometry = field(default_factory=InputGeometry)

    def finger_net(self, strategy: FingerStrategy) -> Net:
        return self.finger_multi if FingerStrategy(strategy) is FingerStrategy.MFD else self.finger_single

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, fname in MODEL_FILES.items():
            net = getattr(self, name)
            nn.save_weights(net.spec, net.weights, directory / fname)
        write_descriptor(directory, self.fill_mean, self.geometry)

    @classmethod
    def load(cls, directory: str | Path) -> "TrainedModels":
        directory = Path(directory)
        fill_mean, geometry = read_descriptor(directory)
        nets = {}
        for name, fname in MODEL_FILES.items():
            path = directory / fname
            if not path.exists():
                raise FileNotFoundError(f"missing model file {path}")
            nets[name] = Net(*nn.load_weights(path))
        return cls(fill_mean=fill_mean, geometry=geometry, **nets)


def write_descriptor(directory: Path, fill_mean, geometry: InputGeometry, **extra) -> None:
    d = {
        "fill_mean": [float(v) for v in fill_mean],
        "input_geometry": {k: list(v) if isinstance(v, tuple) else v
                           for k, v in asdict(geometry).items()},
        "margin": geometry.margin,
        "bias_max_reference": {"px": REFERENCE_BIAS_PX, "width": REFERENCE_WIDTH},
        "files": MODEL_FILES,
    }
    d.update(extra)
    (Path(directory) / DESCRIPTOR).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")


def read_descriptor(directory: Path) -> tuple[tuple[float, float, float], InputGeometry]:
    path = Path(directory) / DESCRIPTOR
    if not path.exists():
        raise FileNotFoundError(f"missing model descriptor {path}")
    d = json.loads(path.read_text())
    g = d["input_geometry"]
    geometry = InputGeometry(tuple(g["hand_train_size"]), tuple(g["hand_input_size"]),
                             tuple(g["finger_patch_size"]), float(g["margin"]),
                             float(g["input_scale"]))
    return tuple(float(v) for v in d["fill_mean"]), geometry


# -- timing ----------------------------------------------------------------

class StageTimer:
    """Accumulates wall-clock nanoseconds per named stage."""

    def __init__(self):
        self.ns: dict[str, int] = {}

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter_ns()
        try:
            yield
        finally:
            self.ns[name] = self.ns.get(name, 0) + time.perf_counter_ns() - t0

    def ms(self) -> dict[str, float]:
        return {k: v / 1e6 for k, v in self.ns.items()}


_NULL_TIMER = StageTimer()
HAND_STAGE, FINGER_STAGE, PROCESSING_STAGE = "hand_detect", "finger_detect", "processing"


# -- inference -------------------------------------------------------------

def net_input(img: np.ndarray, mean, scale: float) -> np.ndarray:
    """(H, W, 3) image -> (3, H, W) float32 with the mean removed, so mean fill maps to 0."""
    x = (img - np.asarray(mean, dtype=np.float32)) * np.float32(scale)
    return np.ascontiguousarray(x.transpose(2, 0, 1), dtype=np.float32)


def to_batch(img: np.ndarray, mean, scale: float) -> np.ndarray:
    return net_input(img, mean, scale)[None]


def decode_box(out: Sequence[float], input_size: tuple[int, int],
               scale: tuple[float, float]) -> BBox:
    """Normalized corner outputs -> box in the frame the input was resized from."""
    iw, ih = input_size
    sx, sy = scale
    x1, y1, x2, y2 = (float(v) for v in out[:4])
    return BBox(x1 * iw / sx, y1 * ih / sy, x2 * iw / sx, y2 * ih / sy)


def repair_box(box: BBox) -> tuple[BBox, bool]:
    """Reorder corners; replace a box under 1 px^2 by a minimum box at its center."""
    x1, x2 = sorted((box.x1, box.x2))
    y1, y2 = sorted((box.y1, box.y2))
    fixed = BBox(x1, y1, x2, y2)
    if fixed.area < 1.0:
        cx, cy = fixed.center
        h = MIN_BOX_SIDE / 2
        return BBox(cx - h, cy - h, cx + h, cy + h), True
    return fixed, fixed != box


def clip_box(box: BBox, width: int, height: int) -> tuple[BBox, bool]:
    """Clip to the frame; a box that vanishes becomes a minimum box inside it."""
    clipped = BBox(min(max(box.x1, 0.0), width), min(max(box.y1, 0.0), height),
                   min(max(box.x2, 0.0), width), min(max(box.y2, 0.0), height))
    if clipped.area >= 1.0:
        return clipped, clipped != box
    h = min(MIN_BOX_SIDE, width, height) / 2
    cx = min(max(box.center.x, h), width - h)
    cy = min(max(box.center.y, h), height - h)
    return BBox(cx - h, cy - h, cx + h, cy + h), True


def clip_point(p: Point, width: int, height: int) -> Point:
    return Point(min(max(p.x, 0.0), float(width)), min(max(p.y, 0.0), float(height)))


def regress_box(net: Net, img: np.ndarray, models: TrainedModels,
                timer: StageTimer = _NULL_TIMER) -> tuple[BBox, bool]:
    """One hand-net pass: resize to the net input, regress, decode and repair (no clipping)."""
    with timer.stage(PROCESSING_STAGE):
        resized, scale = geo.resize_image(img, net.input_size)
        batch = to_batch(resized, models.fill_mean, models.geometry.input_scale)
    with timer.stage(HAND_STAGE):
        out = net(batch)[0]
    with timer.stage(PROCESSING_STAGE):
        box, repaired = repair_box(decode_box(out, net.input_size, scale))
    if repaired:
        logger.debug("hand box repaired: %s", box)
    return box, repaired


def rough_detect(models: TrainedModels, img: np.ndarray,
                 timer: StageTimer = _NULL_TIMER) -> BBox:
    box, _ = regress_box(models.rough_hand, img, models, timer)
    w, h = geo.image_size(img)
    return clip_box(box, w, h)[0]


def ahd_detect(models: TrainedModels, img: np.ndarray, redetector: Net | None = None,
               timer: StageTimer = _NULL_TIMER) -> tuple[BBox, geo.Translation]:
    """Rough pass, centralize on its box, re-detect, map back to the original frame."""
    net = models.attention_hand if redetector is None else redetector
    first = rough_detect(models, img, timer)
    with timer.stage(PROCESSING_STAGE):
        centered, t = geo.centralize(img, first, models.fill_mean)
    second, _ = regress_box(net, centered, models, timer)
    with timer.stage(PROCESSING_STAGE):
        w, h = geo.image_size(img)
        box = clip_box(geo.apply_translation(second, geo.invert(t)), w, h)[0]
    return box, t


def finger_predict(models: TrainedModels, img: np.ndarray, box: BBox,
                   strategy: FingerStrategy, timer: StageTimer = _NULL_TIMER
                   ) -> tuple[Point, Point | None]:
    """Regress fingertip (and joint for MFD) inside ``box``; points in frame coordinates."""
    net = models.finger_net(strategy)
    g = models.geometry
    with timer.stage(PROCESSING_STAGE):
        patch, pt = geo.crop_resize(img, box.inflate(g.margin), net.input_size, models.fill_mean)
        batch = to_batch(patch, models.fill_mean, g.input_scale)
    with timer.stage(FINGER_STAGE):
        out = net(batch)[0]
    with timer.stage(PROCESSING_STAGE):
        pw, ph = net.input_size
        w, h = geo.image_size(img)
        points = [clip_point(pt.to_frame((float(out[i]) * pw, float(out[i + 1]) * ph)), w, h)
                  for i in range(0, len(out), 2)]
    return points[0], (points[1] if len(points) > 1 else None)


@dataclass
class Detection:
    hand_box: BBox
    fingertip: Point
    joint: Point | None
    stage_timings: dict[str, float]  # milliseconds
    strategies: tuple[HandStrategy, FingerStrategy]

    def to_json(self) -> dict:
        d = {
            "hand_box": [float(v) for v in self.hand_box],
            "fingertip": [float(v) for v in self.fingertip],
            "timings_ms": dict(self.stage_timings),
        }
        if self.joint is not None:
            d["joint"] = [float(v) for v in self.joint]
        return d


def detect_hand(models: TrainedModels, img: np.ndarray, strategy: HandStrategy,
                gt_box: BBox | None = None, timer: StageTimer = _NULL_TIMER) -> BBox:
    strategy = HandStrategy(strategy)
    if strategy is HandStrategy.GT:
        if gt_box is None:
            raise ValueError("GT hand strategy needs a ground-truth box")
        return gt_box
    if strategy is HandStrategy.RHD:
        return rough_detect(models, img, timer)
    redetector = models.rough_hand if strategy is HandStrategy.RECENTER else None
    return ahd_detect(models, img, redetector, timer)[0]


def run_cascade(models: TrainedModels, img: np.ndarray, hand_strategy: HandStrategy,
                finger_strategy: FingerStrategy, gt_box: BBox | None = None) -> Detection:
    hand_strategy = HandStrategy(hand_strategy)
    finger_strategy = FingerStrategy(finger_strategy)
    if (gt_box is not None) != (hand_strategy is HandStrategy.GT):
        raise ValueError("gt_box must be given exactly when the hand strategy is GT")
    timer = StageTimer()
    t0 = time.perf_counter_ns()
    box = detect_hand(models, img, hand_strategy, gt_box, timer)
    tip, joint = finger_predict(models, img, box, finger_strategy, timer)
    timings = {k: timer.ms().get(k, 0.0) for k in (HAND_STAGE, FINGER_STAGE, PROCESSING_STAGE)}
    timings["total"] = (time.perf_counter_ns() - t0) / 1e6
    return Detection(box, tip, joint, timings, (hand_strategy, finger_strategy))


# -- training --------------------------------------------------------------

@dataclass
class TrainResult:
    spec: nn.NetworkSpec
    weights: list
    loss_trace: list[float]

    @property
    def net(self) -> Net:
        return Net(self.spec, self.weights)


def substream(seed: int, name: str) -> np.random.Generator:
    """Named, reproducible random stream derived from the top-level seed."""
    return np.random.default_rng(np.random.SeedSequence(
        [seed & (2**64 - 1), zlib.crc32(name.encode())]))


def _as_frames(data) -> list[dg.LabeledFrame]:
    if isinstance(data, dg.DatasetManifest):
        data = data.frames()
    frames = list(data)
    if not frames:
        raise ValueError("training needs at least one frame")
    return frames


def fit(spec: nn.NetworkSpec, weights: list, n: int,
        make_batch: Callable[[np.ndarray, np.random.Generator], tuple[np.ndarray, np.ndarray]],
        config: nn.TrainConfig, rng: np.random.Generator,
        progress: Callable[[int, float], None] | None = None) -> tuple[list, list[float]]:
    """Momentum-SGD loop over ``n`` samples; returns weights and per-epoch mean loss."""
    velocity = nn.zeros_like(weights)
    trace = []
    lr = config.learning_rate
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            x, y = make_batch(idx, rng)
            try:
                loss, grads = nn.loss_and_grad(spec, weights, x, y)
            except nn.NonFiniteLossError as e:
                raise nn.NonFiniteLossError(e.loss, epoch + 1, b + 1) from None
            weights = nn.sgd_step(weights, grads, config, velocity, learning_rate=lr)
            total += loss * len(idx)
        trace.append(total / n)
        if progress:
            progress(epoch + 1, trace[-1])
        logger.info("epoch %d/%d loss %.6f", epoch + 1, config.epochs, trace[-1])
        lr *= config.lr_decay
    return weights, trace


def _box_target(box: BBox, size: tuple[int, int]) -> list[float]:
    w, h = size
    return [box.x1 / w, box.y1 / h, box.x2 / w, box.y2 / h]


def train_hand_detector(data, config: nn.TrainConfig, geometry: InputGeometry, mean,
                        spec: nn.NetworkSpec | None = None, progress=None) -> TrainResult:
    """Train the rough hand box regressor on resize + random-crop samples."""
    frames = _as_frames(data)
    spec = spec or nn.conv_ladder_spec(geometry.hand_input_size[::-1], 4)
    if (spec.input_shape[2], spec.input_shape[1]) != geometry.hand_input_size or spec.output_dim != 4:
        raise ValueError("hand spec must take hand_input_size and emit 4 values")
    resized = [dg.resize_frame(f, geometry.hand_train_size) for f in frames]
    mean32 = np.asarray(mean, dtype=np.float32)

    def make_batch(idx, rng):
        xs, ys = [], []
        for i in idx:
            s = dg.random_crop(resized[i], geometry.hand_input_size, rng)
            xs.append(net_input(s.image, mean32, geometry.input_scale))
            ys.append(_box_target(s.hand_box, geometry.hand_input_size))
        return np.stack(xs), np.asarray(ys, dtype=np.float32)

    weights = nn.init_weights(spec, config.seed, config.weight_init_scale)
    weights, trace = fit(spec, weights, len(frames), make_batch, config,
                         substream(config.seed, "augment/hand"), progress)
    return TrainResult(spec, weights, trace)


def finetune_hand_detector(data, base: Net | TrainResult, config: nn.TrainConfig,
                           geometry: InputGeometry, mean, progress=None) -> TrainResult:
    """Continue training on roughly centered, mean-padded samples."""
    frames = _as_frames(data)
    spec, base_weights = (base.spec, base.weights)
    nn.check_weights(spec, base_weights)
    mean32 = np.asarray(mean, dtype=np.float32)

    def make_batch(idx, rng):
        xs, ys = [], []
        for i in idx:
            f = frames[i]
            s = dg.synthesize_centered_sample(f, bias_max_for(f.size[0]), mean32, rng)
            s = dg.resize_frame(s, geometry.hand_input_size)
            xs.append(net_input(s.image, mean32, geometry.input_scale))
            ys.append(_box_target(s.hand_box, geometry.hand_input_size))
        return np.stack(xs), np.asarray(ys, dtype=np.float32)

    weights = [w.copy() for w in base_weights]
    weights, trace = fit(spec, weights, len(frames), make_batch, config,
                         substream(config.seed, "augment/finetune"), progress)
    return TrainResult(spec, weights, trace)


def finger_targets(tip: Sequence[float], joint: Sequence[float] | None,
                   size: tuple[int, int], strategy: FingerStrategy) -> list[float]:
    """Pack normalized patch-frame targets as (tip_x, tip_y[, joint_x, joint_y])."""
    w, h = size
    t = [tip[0] / w, tip[1] / h]
    if FingerStrategy(strategy) is FingerStrategy.MFD:
        t += [joint[0] / w, joint[1] / h]
    return t


@dataclass
class FingerAugment:
    scale_range: tuple[float, float] = (0.9, 1.1)
    rotation_range: tuple[float, float] = (-15.0, 15.0)


def train_finger_detector(data, strategy: FingerStrategy, config: nn.TrainConfig,
                          geometry: InputGeometry, mean, spec: nn.NetworkSpec | None = None,
                          augment: FingerAugment | None = None, progress=None) -> TrainResult:
    """Train on ground-truth hand crops with random scale/rotation augmentation."""
    strategy = FingerStrategy(strategy)
    frames = _as_frames(data)
    out_dim = 4 if strategy is FingerStrategy.MFD else 2
    spec = spec or nn.conv_ladder_spec(geometry.finger_patch_size[::-1], out_dim)
    if spec.output_dim != out_dim:
        raise ValueError(f"{strategy.value} spec must emit {out_dim} values")
    size = (spec.input_shape[2], spec.input_shape[1])
    augment = augment or FingerAugment()
    mean32 = np.asarray(mean, dtype=np.float32)
    patches, keypoints = [], []
    for f in frames:
        patch, pt = geo.crop_resize(f.image, f.hand_box.inflate(geometry.margin), size, mean32)
        kps = [pt.to_patch(f.fingertip)]
        if strategy is FingerStrategy.MFD:
            kps.append(pt.to_patch(f.joint))
        patches.append(patch)
        keypoints.append(np.asarray(kps))

    def make_batch(idx, rng):
        xs, ys = [], []
        for i in idx:
            img, kps = dg.augment_keypoint_sample(patches[i], keypoints[i], augment.scale_range,
                                                  augment.rotation_range, rng, fill=mean32)
            xs.append(net_input(img, mean32, geometry.input_scale))
            ys.append(finger_targets(kps[0], kps[1] if len(kps) > 1 else None, size, strategy))
        return np.stack(xs), np.asarray(ys, dtype=np.float32)

    weights = nn.init_weights(spec, config.seed, config.weight_init_scale)
    weights, trace = fit(spec, weights, len(frames), make_batch, config,
                         substream(config.seed, f"augment/finger-{strategy.value}"), progress)
    return TrainResult(spec, weights, trace)
