"""Synthetic egocentric frames, dataset manifests and training-time augmentation.

Frames come from a procedural renderer: a gradient background with random
distractor shapes (always including a skin-colored blob) and a hand made of
an elliptical palm plus an index-finger capsule. Each frame is determined by
``(seed, index)`` through its own PCG64 stream, so datasets can be generated
in any order or in parallel and still match bit for bit.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image as PILImage

from . import geometry as geo
from .geometry import BBox, Point

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"
DIRECTIONS = ("left", "up", "right")
# pointing angle (degrees, y-down so -90 is up) and half-width of the spread
_DIRECTION_ANGLES = {"left": (180.0, 35.0), "up": (-90.0, 35.0), "right": (0.0, 35.0)}
JOINT_FRACTION = 0.55  # joint sits this far down the finger capsule, measured from the tip
MAX_PLACEMENT_ATTEMPTS = 100
MIN_FIT_SCALE = 0.35  # below this a border hand is nudged inward rather than shrunk further


class GenerationError(RuntimeError):
    pass


@dataclass
class LabeledFrame:
    image: np.ndarray
    hand_box: BBox
    fingertip: Point
    joint: Point
    meta: dict = field(default_factory=dict)

    @property
    def size(self) -> tuple[int, int]:
        return geo.image_size(self.image)


@dataclass
class SceneParams:
    image_size: tuple[int, int] = (128, 128)
    location_mean: tuple[float, float] | None = None  # default: image center
    location_sigma: tuple[float, float] | None = None  # default: 1/6 of each dimension
    placement: str = "gaussian"  # or "uniform" for stress sets
    direction_weights: dict = field(
        default_factory=lambda: {"left": 0.6, "up": 0.2, "right": 0.2})
    dark_fraction: float = 0.3
    distractor_count_range: tuple[int, int] = (2, 5)
    hand_scale_range: tuple[float, float] = (0.2, 0.3)  # palm width / min image side
    noise_sigma: float = 0.015
    seed: int = 0

    def __post_init__(self):
        w, h = self.image_size
        if w < 16 or h < 16:
            raise ValueError("image_size must be at least 16x16")
        if self.placement not in ("gaussian", "uniform"):
            raise ValueError(f"unknown placement {self.placement!r}")
        weights = self.direction_weights
        if set(weights) - set(DIRECTIONS) or any(v < 0 for v in weights.values()):
            raise ValueError(f"bad direction weights {weights}")
        if not math.isclose(sum(weights.values()), 1.0, abs_tol=1e-9):
            raise ValueError("direction weights must sum to 1")
        if not 0.0 <= self.dark_fraction <= 1.0:
            raise ValueError("dark_fraction must lie in [0, 1]")
        if self.location_sigma is not None and min(self.location_sigma) < 0:
            raise ValueError("location_sigma must be non-negative")
        lo, hi = self.distractor_count_range
        if lo < 1 or hi < lo:
            raise ValueError("distractor_count_range must be (lo >= 1, hi >= lo)")

    @property
    def mean(self) -> tuple[float, float]:
        w, h = self.image_size
        return self.location_mean if self.location_mean is not None else (w / 2, h / 2)

    @property
    def sigma(self) -> tuple[float, float]:
        w, h = self.image_size
        return self.location_sigma if self.location_sigma is not None else (w / 6, h / 6)


def frame_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(
        [seed & (2**64 - 1), index, stream])))


# -- rendering -------------------------------------------------------------

def _skin_color(rng) -> np.ndarray:
    base = np.array([0.88, 0.66, 0.52]) * rng.uniform(0.7, 1.08)
    return np.clip(base + rng.normal(0, 0.03, 3), 0, 1)


def _ellipse_mask(gx, gy, center, axes, angle_deg):
    th = math.radians(angle_deg)
    c, s = math.cos(th), math.sin(th)
    dx, dy = gx - center[0], gy - center[1]
    u = (c * dx + s * dy) / axes[0]
    v = (-s * dx + c * dy) / axes[1]
    return u * u + v * v <= 1.0


def _capsule_mask(gx, gy, a, b, radius):
    ax, ay = a
    bx, by = b
    vx, vy = bx - ax, by - ay
    t = np.clip(((gx - ax) * vx + (gy - ay) * vy) / (vx * vx + vy * vy), 0.0, 1.0)
    px, py = ax + t * vx - gx, ay + t * vy - gy
    return px * px + py * py <= radius * radius


def _background(rng, w, h, gx, gy, distractors: int) -> np.ndarray:
    c0, c1 = rng.uniform(0.05, 0.95, 3), rng.uniform(0.05, 0.95, 3)
    th = rng.uniform(0, 2 * math.pi)
    ramp = ((gx - w / 2) * math.cos(th) + (gy - h / 2) * math.sin(th)) / max(w, h) + 0.5
    ramp = np.clip(ramp, 0, 1)[..., None]
    img = c0 + (c1 - c0) * ramp
    kinds = ["skin"] + list(rng.choice(["rect", "disc", "bar", "skin"], size=distractors - 1))
    for kind in kinds:
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        size = rng.uniform(0.04, 0.14) * min(w, h)
        if kind == "skin":
            mask = _ellipse_mask(gx, gy, (cx, cy), (size, size * rng.uniform(0.5, 1.0)),
                                 rng.uniform(0, 180))
            color = _skin_color(rng)
        elif kind == "rect":
            mask = (np.abs(gx - cx) <= size) & (np.abs(gy - cy) <= size * rng.uniform(0.3, 1.5))
            color = rng.uniform(0, 1, 3)
        elif kind == "disc":
            mask = _ellipse_mask(gx, gy, (cx, cy), (size, size), 0.0)
            color = rng.uniform(0, 1, 3)
        else:
            th2 = rng.uniform(0, math.pi)
            d = np.array([math.cos(th2), math.sin(th2)]) * size * 2
            mask = _capsule_mask(gx, gy, (cx - d[0], cy - d[1]), (cx + d[0], cy + d[1]),
                                 rng.uniform(1.0, 3.0))
            color = rng.uniform(0, 1, 3)
        img[mask] = color
    return img


@dataclass
class _HandShape:
    palm_center: np.ndarray
    palm_axes: tuple[float, float]
    palm_angle: float
    seg_start: np.ndarray
    seg_end: np.ndarray
    radius: float
    direction: np.ndarray

    @property
    def fingertip(self) -> np.ndarray:
        return self.seg_end + self.radius * self.direction

    @property
    def joint(self) -> np.ndarray:
        length = np.linalg.norm(self.seg_end - self.seg_start) + 2 * self.radius
        return self.fingertip - JOINT_FRACTION * length * self.direction

    def extent(self) -> BBox:
        """Analytic bounding box of palm and finger."""
        a, b = self.palm_axes
        th = math.radians(self.palm_angle)
        ex = math.hypot(a * math.cos(th), b * math.sin(th))
        ey = math.hypot(a * math.sin(th), b * math.cos(th))
        px, py = self.palm_center
        xs = [px - ex, px + ex, self.seg_start[0] - self.radius, self.seg_start[0] + self.radius,
              self.seg_end[0] - self.radius, self.seg_end[0] + self.radius]
        ys = [py - ey, py + ey, self.seg_start[1] - self.radius, self.seg_start[1] + self.radius,
              self.seg_end[1] - self.radius, self.seg_end[1] + self.radius]
        return BBox(min(xs), min(ys), max(xs), max(ys))

    def shifted(self, d) -> "_HandShape":
        d = np.asarray(d, dtype=float)
        return replace(self, palm_center=self.palm_center + d, seg_start=self.seg_start + d,
                       seg_end=self.seg_end + d)

    def scaled(self, s: float, about) -> "_HandShape":
        c = np.asarray(about, dtype=float)
        a, b = self.palm_axes
        return replace(self, palm_center=c + s * (self.palm_center - c), palm_axes=(s * a, s * b),
                       seg_start=c + s * (self.seg_start - c), seg_end=c + s * (self.seg_end - c),
                       radius=s * self.radius)


def _keypoints_inside(hand: _HandShape, w: int, h: int) -> bool:
    return all(1.0 <= p[0] <= w - 1.0 and 1.0 <= p[1] <= h - 1.0
               for p in (hand.fingertip, hand.joint))


def _fit_factor(hand: _HandShape, center, w: int, h: int) -> float:
    """Largest scale <= 1 about ``center`` that keeps fingertip and joint in [1, size-1]."""
    s = 1.0
    for p in (hand.fingertip, hand.joint):
        for k, hi in ((0, w - 1.0), (1, h - 1.0)):
            d = p[k] - center[k]
            if p[k] > hi:
                s = min(s, (hi - center[k]) / d)
            elif p[k] < 1.0:
                s = min(s, (1.0 - center[k]) / d)
    return max(s * (1.0 - 1e-9), 0.0)


def _sample_hand(rng, params: SceneParams, direction: str) -> _HandShape:
    w, h = params.image_size
    palm_w = rng.uniform(*params.hand_scale_range) * min(w, h)
    a = palm_w / 2
    b = a * rng.uniform(1.0, 1.3)
    base_angle, spread = _DIRECTION_ANGLES[direction]
    theta = math.radians(base_angle + rng.uniform(-spread, spread))
    d = np.array([math.cos(theta), math.sin(theta)])
    radius = a * rng.uniform(0.2, 0.26)
    seg_len = a * rng.uniform(1.0, 1.4)
    start = 0.55 * a * d
    return _HandShape(np.zeros(2), (a, b), math.degrees(theta) + 90.0 + rng.uniform(-15, 15),
                      start, start + seg_len * d, radius, d)


def _sample_center(rng, params: SceneParams) -> np.ndarray:
    w, h = params.image_size
    if params.placement == "uniform":
        return np.array([rng.uniform(0, w), rng.uniform(0, h)])
    mx, my = params.mean
    sx, sy = params.sigma
    # truncated by rejection to [1, size-1], which is symmetric about the default mean
    for _ in range(1000):
        c = np.array([rng.normal(mx, sx), rng.normal(my, sy)])
        if 1.0 <= c[0] <= w - 1.0 and 1.0 <= c[1] <= h - 1.0:
            return c
    raise GenerationError(f"location mean {params.mean} with sigma {params.sigma} "
                          f"never lands inside the {w}x{h} frame")


def generate_frame(params: SceneParams, index: int) -> LabeledFrame:
    """Render frame ``index`` of the synthetic stream defined by ``params``."""
    rng = frame_rng(params.seed, index)
    w, h = params.image_size
    names = [k for k in DIRECTIONS if k in params.direction_weights]
    probs = np.array([params.direction_weights[k] for k in names], dtype=float)
    direction = names[int(rng.choice(len(names), p=probs / probs.sum()))]
    dark = bool(rng.random() < params.dark_fraction)
    shape = _sample_hand(rng, params, direction)
    ext = shape.extent()
    offset = np.array(ext.center)

    if params.placement == "gaussian":
        # keep the sampled center so the location statistics stay exact; a hand whose
        # fingertip or joint would leave the frame is shrunk about that center instead
        center = _sample_center(rng, params)
        hand = shape.shifted(center - offset)
        if not _keypoints_inside(hand, w, h):
            hand = hand.scaled(max(_fit_factor(hand, center, w, h), MIN_FIT_SCALE), center)
            pts = np.array([hand.fingertip, hand.joint])
            eps = 1e-9  # keep clear of the bound after rounding
            nudge = np.clip(pts, 1.0 + eps, [w - 1.0 - eps, h - 1.0 - eps]) - pts
            shift = np.where(np.abs(nudge).max(0) > 0, nudge[np.argmax(np.abs(nudge), 0), [0, 1]], 0)
            hand = hand.shifted(shift)
            center = center + shift
    else:
        # uniform over the admissible placements
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            center = _sample_center(rng, params)
            hand = shape.shifted(center - offset)
            if _keypoints_inside(hand, w, h) and hand.extent().intersects_frame(w, h):
                break
        else:
            raise GenerationError(f"frame {index}: no admissible hand placement after "
                                  f"{MAX_PLACEMENT_ATTEMPTS} attempts")
    tip, joint = hand.fingertip, hand.joint

    gx, gy = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    lo, hi = params.distractor_count_range
    img = _background(rng, w, h, gx, gy, int(rng.integers(lo, hi + 1)))

    palm = _ellipse_mask(gx, gy, hand.palm_center, hand.palm_axes, hand.palm_angle)
    finger = _capsule_mask(gx, gy, hand.seg_start, hand.seg_end, hand.radius)
    mask = palm | finger
    skin = _skin_color(rng)
    # soft shading so the finger outline stays visible against the palm
    shade = 1.0 - 0.25 * np.clip(np.hypot(gx - hand.palm_center[0], gy - hand.palm_center[1])
                                 / (3 * hand.palm_axes[1]), 0, 1)
    img[mask] = skin * shade[mask][:, None]
    edge = finger & ~_capsule_mask(gx, gy, hand.seg_start, hand.seg_end, hand.radius - 1.0)
    img[edge & ~palm] *= 0.8

    brightness = rng.uniform(0.25, 0.45) if dark else rng.uniform(0.85, 1.1)
    img = img * brightness + rng.normal(0, params.noise_sigma, img.shape)
    img = np.clip(img, 0, 1).astype(np.float32)

    ys, xs = np.nonzero(mask)
    box = BBox(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))
    meta = {"dark": dark, "dir": direction, "size": [w, h],
            "center": [float(center[0]), float(center[1])]}
    return LabeledFrame(img, box, Point(float(tip[0]), float(tip[1])),
                        Point(float(joint[0]), float(joint[1])), meta)


# -- manifests -------------------------------------------------------------

@dataclass
class ManifestRecord:
    image: str
    bbox: BBox
    fingertip: Point
    joint: Point
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "image": self.image,
            "bbox": [float(v) for v in self.bbox],
            "fingertip": [float(v) for v in self.fingertip],
            "joint": [float(v) for v in self.joint],
            "meta": self.meta,
        }, sort_keys=False)

    @classmethod
    def from_json(cls, line: str) -> "ManifestRecord":
        d = json.loads(line)
        return cls(d["image"], BBox(*map(float, d["bbox"])), Point(*map(float, d["fingertip"])),
                   Point(*map(float, d["joint"])), d.get("meta", {}))


@dataclass
class DatasetManifest:
    root: Path
    records: list[ManifestRecord]

    def __len__(self) -> int:
        return len(self.records)

    @property
    def path(self) -> Path:
        return self.root / MANIFEST_NAME

    def image_path(self, i: int) -> Path:
        return self.root / self.records[i].image

    def load_frame(self, i: int) -> LabeledFrame:
        r = self.records[i]
        img = read_png(self.image_path(i))
        return LabeledFrame(img, r.bbox, r.fingertip, r.joint, dict(r.meta, image=r.image))

    def frames(self) -> list[LabeledFrame]:
        return [self.load_frame(i) for i in range(len(self))]


def quantize(img: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid used on disk, returned as float32."""
    return (np.round(np.clip(img, 0, 1) * 255.0) / 255.0).astype(np.float32)


def write_png(img: np.ndarray, path: Path) -> None:
    data = np.round(np.clip(img, 0, 1) * 255.0).astype(np.uint8)
    try:
        PILImage.fromarray(data, mode="RGB").save(path, format="PNG")
    except OSError as e:
        raise OSError(f"cannot write image {path}: {e}") from e


def read_png(path: Path) -> np.ndarray:
    try:
        with PILImage.open(path) as im:
            data = np.asarray(im.convert("RGB"), dtype=np.float32)
    except (OSError, ValueError) as e:
        raise OSError(f"cannot read image {path}: {e}") from e
    return data / np.float32(255.0)


def write_manifest(manifest: DatasetManifest) -> Path:
    manifest.root.mkdir(parents=True, exist_ok=True)
    text = "".join(r.to_json() + "\n" for r in manifest.records)
    manifest.path.write_text(text, encoding="utf-8")
    return manifest.path


def read_manifest(path: str | Path, check_images: bool = True) -> DatasetManifest:
    """Load a JSON Lines manifest; ``path`` may be the file or its directory."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    records = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            records.append(ManifestRecord.from_json(line))
        except (KeyError, TypeError, ValueError) as e:
            raise ValueError(f"{path}:{n}: bad manifest record: {e}") from e
    manifest = DatasetManifest(path.parent, records)
    if check_images:
        for i, r in enumerate(records):
            p = manifest.image_path(i)
            if not p.exists():
                raise FileNotFoundError(f"{path}:{i + 1}: image {p} does not exist")
            size = r.meta.get("size")
            if size is not None:
                with PILImage.open(p) as im:
                    if list(im.size) != list(size):
                        raise ValueError(
                            f"{path}:{i + 1}: image {p} is {im.size}, manifest says {size}")
    return manifest


def generate_dataset(params: SceneParams, count: int, out_dir: str | Path) -> DatasetManifest:
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(count):
        frame = generate_frame(params, i)
        rel = f"images/{i:06d}.png"
        write_png(frame.image, out_dir / rel)
        records.append(ManifestRecord(rel, frame.hand_box, frame.fingertip, frame.joint,
                                      frame.meta))
    manifest = DatasetManifest(out_dir, records)
    write_manifest(manifest)
    return manifest


def summarize(manifest: DatasetManifest) -> dict:
    n = len(manifest)
    dirs = {d: 0 for d in DIRECTIONS}
    dark = 0
    for r in manifest.records:
        dark += bool(r.meta.get("dark"))
        if r.meta.get("dir") in dirs:
            dirs[r.meta["dir"]] += 1
    return {
        "count": n,
        "dark_fraction": dark / n if n else 0.0,
        "direction_split": {k: (v / n if n else 0.0) for k, v in dirs.items()},
    }


def dataset_mean(manifest: DatasetManifest) -> tuple[float, float, float]:
    """Per-channel mean over every pixel of every image, summed in sorted-path order."""
    if len(manifest) == 0:
        raise ValueError("dataset_mean of an empty manifest")
    total = np.zeros(3, dtype=np.float64)
    pixels = 0
    for rel in sorted(r.image for r in manifest.records):
        img = read_png(manifest.root / rel)
        total += img.reshape(-1, 3).sum(axis=0, dtype=np.float64)
        pixels += img.shape[0] * img.shape[1]
    return tuple(float(v) for v in total / pixels)


def frames_mean(frames: Sequence[LabeledFrame]) -> tuple[float, float, float]:
    if not frames:
        raise ValueError("frames_mean of an empty frame list")
    total = np.zeros(3, dtype=np.float64)
    pixels = 0
    for f in frames:
        total += f.image.reshape(-1, 3).sum(axis=0, dtype=np.float64)
        pixels += f.image.shape[0] * f.image.shape[1]
    return tuple(float(v) for v in total / pixels)


# -- augmentation ----------------------------------------------------------

def resize_frame(frame: LabeledFrame, size: tuple[int, int]) -> LabeledFrame:
    img, (sx, sy) = geo.resize_image(frame.image, size)
    return LabeledFrame(img, frame.hand_box.scaled(sx, sy),
                        Point(frame.fingertip.x * sx, frame.fingertip.y * sy),
                        Point(frame.joint.x * sx, frame.joint.y * sy), dict(frame.meta))


def crop_frame(frame: LabeledFrame, offset: tuple[int, int], size: tuple[int, int]) -> LabeledFrame:
    """Cut the ``size`` window at integer ``offset``; labels shift by -offset."""
    ox, oy = int(offset[0]), int(offset[1])
    cw, ch = size
    w, h = frame.size
    if ox < 0 or oy < 0 or ox + cw > w or oy + ch > h:
        raise ValueError(f"crop {size} at {offset} exceeds {frame.size}")
    t = geo.Translation(-ox, -oy)
    return LabeledFrame(frame.image[oy:oy + ch, ox:ox + cw].copy(),
                        geo.apply_translation(frame.hand_box, t),
                        geo.apply_translation(frame.fingertip, t),
                        geo.apply_translation(frame.joint, t), dict(frame.meta))


def random_crop(frame: LabeledFrame, crop_size: tuple[int, int], rng: np.random.Generator,
                min_retained: float = 0.5, attempts: int = 20) -> LabeledFrame:
    w, h = frame.size
    cw, ch = crop_size
    if cw > w or ch > h:
        raise ValueError(f"crop {crop_size} larger than image {frame.size}")
    box = frame.hand_box
    for _ in range(attempts):
        ox = int(rng.integers(0, w - cw + 1))
        oy = int(rng.integers(0, h - ch + 1))
        iw = min(box.x2, ox + cw) - max(box.x1, ox)
        ih = min(box.y2, oy + ch) - max(box.y1, oy)
        kept = max(iw, 0) * max(ih, 0) / box.area if box.area > 0 else 0.0
        if kept >= min_retained or (cw, ch) == (w, h):
            return crop_frame(frame, (ox, oy), crop_size)
    logger.warning("no crop keeps %.0f%% of the hand box; using the center crop",
                   100 * min_retained)
    out = crop_frame(frame, ((w - cw) // 2, (h - ch) // 2), crop_size)
    out.meta["crop_fallback"] = True
    return out


def augment_detection_sample(frame: LabeledFrame, train_size: tuple[int, int],
                             crop_size: tuple[int, int], rng: np.random.Generator) -> LabeledFrame:
    """Resize to ``train_size`` then take a random ``crop_size`` window."""
    if crop_size[0] > train_size[0] or crop_size[1] > train_size[1]:
        raise ValueError("crop_size must not exceed train_size")
    return random_crop(resize_frame(frame, train_size), crop_size, rng)


def warp_keypoints_sample(patch: np.ndarray, keypoints, scale: float, degrees: float,
                          fill=None) -> tuple[np.ndarray, np.ndarray]:
    """Scale and rotate ``patch`` about its center; keypoints follow the same map."""
    w, h = geo.image_size(patch)
    m = geo.similarity_matrix(scale, degrees, (w / 2, h / 2))
    kps = np.asarray(keypoints, dtype=np.float64).reshape(-1, 2)
    moved = kps @ m[:, :2].T + m[:, 2]
    if scale == 1.0 and degrees == 0.0:
        return patch.copy(), moved
    return geo.warp_affine(patch, m, fill), moved


def augment_keypoint_sample(patch: np.ndarray, keypoints, scale_range: tuple[float, float],
                            rotation_range: tuple[float, float], rng: np.random.Generator,
                            fill=None, attempts: int = 20) -> tuple[np.ndarray, np.ndarray]:
    """Random similarity warp; draws whose keypoints leave the patch are redrawn."""
    if scale_range[0] <= 0 or scale_range[1] < scale_range[0]:
        raise ValueError(f"bad scale range {scale_range}")
    if rotation_range[1] < rotation_range[0]:
        raise ValueError(f"bad rotation range {rotation_range}")
    w, h = geo.image_size(patch)
    m_kps = np.asarray(keypoints, dtype=np.float64).reshape(-1, 2)
    for _ in range(attempts):
        s = float(rng.uniform(*scale_range))
        th = float(rng.uniform(*rotation_range))
        m = geo.similarity_matrix(s, th, (w / 2, h / 2))
        moved = m_kps @ m[:, :2].T + m[:, 2]
        if np.all((moved >= 0) & (moved < [w, h])):
            return warp_keypoints_sample(patch, m_kps, s, th, fill)
    return patch.copy(), m_kps.copy()


def synthesize_centered_sample(frame: LabeledFrame, bias_max: float, fill,
                               rng: np.random.Generator) -> LabeledFrame:
    """Center the hand, then shift by a random integer bias in [-bias_max, bias_max]^2."""
    w, h = frame.size
    t = geo.centering_translation(w, h, frame.hand_box)
    b = int(math.floor(bias_max))
    bias = geo.Translation(int(rng.integers(-b, b + 1)), int(rng.integers(-b, b + 1)))
    total = geo.compose(t, bias)
    return LabeledFrame(geo.translate_image(frame.image, total, fill),
                        geo.apply_translation(frame.hand_box, total),
                        geo.apply_translation(frame.fingertip, total),
                        geo.apply_translation(frame.joint, total),
                        dict(frame.meta, translation=[total.dx, total.dy]))
