"""Small hand-differentiated CNN engine.

Supports the fixed layer vocabulary used by the detectors (conv, relu,
maxpool, flatten, fc), mean squared Euclidean loss, momentum SGD and a
binary weight format. Tensors are plain numpy arrays in NCHW layout.
Production arithmetic is float32; pass float64 weights/batches for the
verification path used by :func:`grad_check`.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

LAYER_KINDS = ("conv", "relu", "maxpool", "flatten", "fc")
MAGIC = b"CDW1"
FORMAT_VERSION = 1

Weights = list  # list[np.ndarray], ordered (kernel, bias) per conv/fc layer


class SpecError(ValueError):
    """Network spec or tensor shapes are inconsistent at ``layer_index``.

    ``layer_index`` is -1 for problems with the network input itself.
    """

    def __init__(self, message: str, layer_index: int):
        super().__init__(f"layer {layer_index}: {message}")
        self.layer_index = layer_index


class NonFiniteLossError(FloatingPointError):
    def __init__(self, loss: float, epoch: int | None = None, batch: int | None = None):
        where = ""
        if epoch is not None:
            where = f" at epoch {epoch}, batch {batch}"
        super().__init__(f"non-finite loss {loss!r}{where}")
        self.loss = loss
        self.epoch = epoch
        self.batch = batch


class WeightsFileError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out_channels: int = 0
    kernel_size: int = 0
    stride: int = 1
    padding: int = 0
    window: int = 0
    out_features: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv":
            if self.out_channels < 1 or self.kernel_size < 1 or self.stride < 1 or self.padding < 0:
                raise ValueError(f"bad conv parameters: {self}")
        elif self.kind == "maxpool":
            if self.window < 1 or self.stride < 1:
                raise ValueError(f"bad maxpool parameters: {self}")
        elif self.kind == "fc" and self.out_features < 1:
            raise ValueError(f"bad fc parameters: {self}")

    def to_dict(self) -> dict:
        keep = {
            "conv": ("out_channels", "kernel_size", "stride", "padding"),
            "maxpool": ("window", "stride"),
            "fc": ("out_features",),
        }.get(self.kind, ())
        d = {"kind": self.kind}
        d.update({k: getattr(self, k) for k in keep})
        return d


def conv(out_channels: int, kernel_size: int, stride: int = 1, padding: int = 0) -> LayerSpec:
    return LayerSpec("conv", out_channels=out_channels, kernel_size=kernel_size,
                     stride=stride, padding=padding)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def maxpool(window: int, stride: int | None = None) -> LayerSpec:
    return LayerSpec("maxpool", window=window, stride=window if stride is None else stride)


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def fc(out_features: int) -> LayerSpec:
    return LayerSpec("fc", out_features=out_features)


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple[int, int, int]  # (channels, height, width)
    layers: tuple[LayerSpec, ...]
    output_dim: int

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.activation_shapes()  # validates

    def activation_shapes(self) -> list[tuple[int, ...]]:
        """Per-sample output shape of every layer; raises SpecError on bad geometry."""
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise SpecError(f"input shape {self.input_shape} must be 3 positive extents", -1)
        shape: tuple[int, ...] = self.input_shape
        shapes = []
        for i, layer in enumerate(self.layers):
            if layer.kind in ("conv", "maxpool"):
                if len(shape) != 3:
                    raise SpecError(f"{layer.kind} needs a (C,H,W) input, got {shape}", i)
                c, h, w = shape
                if layer.kind == "conv":
                    k, s, p = layer.kernel_size, layer.stride, layer.padding
                    c = layer.out_channels
                else:
                    k, s, p = layer.window, layer.stride, 0
                h2 = (h + 2 * p - k) // s + 1
                w2 = (w + 2 * p - k) // s + 1
                if h + 2 * p < k or w + 2 * p < k or h2 < 1 or w2 < 1:
                    raise SpecError(f"{layer.kind} window {k} does not fit extent {shape}", i)
                shape = (c, h2, w2)
            elif layer.kind == "flatten":
                shape = (math.prod(shape),)
            elif layer.kind == "fc":
                if len(shape) != 1:
                    raise SpecError(f"fc needs a flat input, got {shape}; add flatten", i)
                shape = (layer.out_features,)
            shapes.append(shape)
        if not shapes or shapes[-1] != (self.output_dim,) or self.layers[-1].kind != "fc":
            raise SpecError(
                f"network must end in fc({self.output_dim}), ends with "
                f"{shapes[-1] if shapes else 'nothing'}", len(self.layers) - 1)
        return shapes

    def param_shapes(self) -> list[tuple[int, ...]]:
        shapes = []
        prev = self.input_shape
        for layer, out in zip(self.layers, self.activation_shapes()):
            if layer.kind == "conv":
                k = layer.kernel_size
                shapes += [(layer.out_channels, prev[0], k, k), (layer.out_channels,)]
            elif layer.kind == "fc":
                shapes += [(layer.out_features, prev[0]), (layer.out_features,)]
            prev = out
        return shapes

    def param_layer_indices(self) -> list[int]:
        """Layer index owning each parameter tensor."""
        out = []
        for i, layer in enumerate(self.layers):
            if layer.kind in ("conv", "fc"):
                out += [i, i]
        return out

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": [layer.to_dict() for layer in self.layers],
            "output_dim": self.output_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(tuple(d["input_shape"]), tuple(LayerSpec(**l) for l in d["layers"]),
                   int(d["output_dim"]))


def conv_ladder_spec(input_size: int | tuple[int, int], output_dim: int,
                     channels: Sequence[int] = (16, 32, 64, 64, 128),
                     hidden: Sequence[int] = (256, 128), in_channels: int = 3) -> NetworkSpec:
    """Five 3x3 conv+relu+2x2-pool blocks followed by a three-layer fc regressor."""
    if isinstance(input_size, int):
        input_size = (input_size, input_size)
    h, w = input_size
    layers: list[LayerSpec] = []
    for c in channels:
        layers += [conv(c, 3, 1, 1), relu(), maxpool(2, 2)]
    layers.append(flatten())
    for units in hidden:
        layers += [fc(units), relu()]
    layers.append(fc(output_dim))
    return NetworkSpec((in_channels, h, w), tuple(layers), output_dim)


def hand_net_spec(input_size: int = 112, **kw) -> NetworkSpec:
    return conv_ladder_spec(input_size, 4, **kw)


def finger_net_spec(input_size: int = 96, multi_point: bool = True, **kw) -> NetworkSpec:
    return conv_ladder_spec(input_size, 4 if multi_point else 2, **kw)


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    weight_init_scale: float = 2.0
    # multiplicative learning-rate factor applied after every epoch
    lr_decay: float = 1.0
    # rescale gradients whose global L2 norm exceeds this; 0 disables clipping
    grad_clip: float = 0.0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if not self.weight_init_scale > 0:
            raise ValueError("weight_init_scale must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if not self.grad_clip >= 0:
            raise ValueError("grad_clip must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def init_weights(spec: NetworkSpec, seed: int, scale: float = 2.0,
                 dtype=np.float32) -> Weights:
    """Uniform(-a, a) kernels with a = scale / sqrt(fan_in); zero biases."""
    rng = np.random.default_rng(np.random.SeedSequence([seed & (2**64 - 1), 0x1A17]))
    weights = []
    for shape in spec.param_shapes():
        if len(shape) == 1:
            weights.append(np.zeros(shape, dtype=dtype))
        else:
            fan_in = math.prod(shape[1:])
            a = scale / math.sqrt(fan_in)
            weights.append(rng.uniform(-a, a, size=shape).astype(dtype))
    return weights


def check_weights(spec: NetworkSpec, weights: Sequence[np.ndarray]) -> None:
    expected = spec.param_shapes()
    owners = spec.param_layer_indices()
    if len(weights) != len(expected):
        raise SpecError(f"expected {len(expected)} parameter tensors, got {len(weights)}",
                        owners[min(len(weights), len(owners) - 1)] if owners else -1)
    for i, (w, shape) in enumerate(zip(weights, expected)):
        if tuple(w.shape) != shape:
            raise SpecError(f"parameter {i} has shape {tuple(w.shape)}, expected {shape}",
                            owners[i])


# -- layer kernels ---------------------------------------------------------
# Activations run channel-major (C, N, H, W) internally so im2col copies and
# pooling slices move contiguous rows; the public contract and the stored
# kernel layout (O, C, k, k) stay (N, C, H, W).

def _conv_forward(x, w, b, stride, padding):
    c, n = x.shape[:2]
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    ho = (xp.shape[2] - k) // stride + 1
    wo = (xp.shape[3] - k) // stride + 1
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    cols = np.empty((c, k, k, n, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i:i + hs:stride, j:j + ws:stride]
    cols = cols.reshape(c * k * k, n * ho * wo)
    out = w.reshape(o, -1) @ cols
    out += b[:, None]
    return out.reshape(o, n, ho, wo), (cols, xp.shape)


def _conv_backward(dout, w, cache, stride, padding, need_dx):
    cols, padded_shape = cache
    o, c, k, _ = w.shape
    _, n, ho, wo = dout.shape
    dflat = dout.reshape(o, -1)
    dw = (dflat @ cols.T).reshape(w.shape)
    db = dflat.sum(axis=1)
    if not need_dx:
        return None, dw, db
    dcols = (w.reshape(o, -1).T @ dflat).reshape(c, k, k, n, ho, wo)
    dxp = np.zeros(padded_shape, dtype=dout.dtype)
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + hs:stride, j:j + ws:stride] += dcols[:, i, j]
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return dxp, dw, db


def _pool_slices(window, stride, ho, wo):
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for t in range(window * window):
        i, j = divmod(t, window)
        yield t, (slice(None), slice(None), slice(i, i + hs, stride), slice(j, j + ws, stride))


def _pool_forward(x, window, stride):
    ho = (x.shape[2] - window) // stride + 1
    wo = (x.shape[3] - window) // stride + 1
    slices = list(_pool_slices(window, stride, ho, wo))
    out = x[slices[0][1]].copy()
    for _, sl in slices[1:]:
        np.maximum(out, x[sl], out=out)
    # first maximal position in row-major window order, like argmax
    idx = np.full(out.shape, -1, dtype=np.int8 if window * window < 127 else np.int32)
    for t, sl in slices:
        idx[(idx < 0) & (x[sl] == out)] = t
    return out, (idx, x.shape)


def _pool_backward(dout, cache, window, stride):
    idx, in_shape = cache
    dx = np.zeros(in_shape, dtype=dout.dtype)
    zero = dout.dtype.type(0)
    for t, sl in _pool_slices(window, stride, dout.shape[2], dout.shape[3]):
        if stride >= window:
            dx[sl] = np.where(idx == t, dout, zero)  # windows do not overlap
        else:
            dx[sl] += np.where(idx == t, dout, zero)
    return dx


def _run(spec: NetworkSpec, weights: Sequence[np.ndarray], batch: np.ndarray, keep: bool):
    expected = (batch.shape[0],) + spec.input_shape if batch.ndim == 4 else None
    if batch.ndim != 4 or batch.shape != expected or batch.shape[0] < 1:
        raise SpecError(f"batch shape {batch.shape} does not match (N,) + {spec.input_shape}", -1)
    check_weights(spec, weights)
    x = np.ascontiguousarray(batch.transpose(1, 0, 2, 3))
    caches = []
    p = 0
    for layer in spec.layers:
        cache = None
        if layer.kind == "conv":
            x, cache = _conv_forward(x, weights[p], weights[p + 1], layer.stride, layer.padding)
            p += 2
        elif layer.kind == "relu":
            cache = x > 0
            x = x * cache
        elif layer.kind == "maxpool":
            x, cache = _pool_forward(x, layer.window, layer.stride)
        elif layer.kind == "flatten":
            # per-sample (C, H, W) order, so fc weights follow the NCHW convention
            cache = x.shape
            x = x.transpose(1, 0, 2, 3).reshape(x.shape[1], -1)
        else:
            cache = x
            x = x @ weights[p].T + weights[p + 1]
            p += 2
        if keep:
            caches.append(cache)
    return x, caches


def forward(spec: NetworkSpec, weights: Sequence[np.ndarray], batch: np.ndarray) -> np.ndarray:
    """Run ``batch`` of shape (N, C, H, W) through the network; returns (N, output_dim)."""
    out, _ = _run(spec, weights, np.asarray(batch), keep=False)
    return out


def _backward(spec, weights, caches, dout):
    grads: list[np.ndarray | None] = [None] * len(weights)
    p = len(weights)
    first_param_layer = min(spec.param_layer_indices())
    for i in range(len(spec.layers) - 1, -1, -1):
        layer, cache = spec.layers[i], caches[i]
        if layer.kind == "conv":
            p -= 2
            dout, grads[p], grads[p + 1] = _conv_backward(
                dout, weights[p], cache, layer.stride, layer.padding,
                need_dx=i > first_param_layer)
        elif layer.kind == "relu":
            dout = dout * cache
        elif layer.kind == "maxpool":
            dout = _pool_backward(dout, cache, layer.window, layer.stride)
        elif layer.kind == "flatten":
            c, n, h, w = cache
            dout = np.ascontiguousarray(dout.reshape(n, c, h, w).transpose(1, 0, 2, 3))
        else:
            p -= 2
            grads[p] = dout.T @ cache
            grads[p + 1] = dout.sum(axis=0)
            dout = dout @ weights[p]
        if i <= first_param_layer:
            break
    return grads


def loss_and_grad(spec: NetworkSpec, weights: Sequence[np.ndarray], batch: np.ndarray,
                  targets: np.ndarray) -> tuple[float, Weights]:
    """Mean over the batch of squared Euclidean prediction error, and its gradient."""
    batch = np.asarray(batch)
    targets = np.asarray(targets, dtype=batch.dtype)
    out, caches = _run(spec, weights, batch, keep=True)
    if targets.shape != out.shape:
        raise SpecError(f"targets shape {targets.shape} != output shape {out.shape}",
                        len(spec.layers) - 1)
    n = out.shape[0]
    diff = out - targets
    loss = float(np.sum(diff.astype(np.float64) ** 2) / n)
    if not math.isfinite(loss):
        raise NonFiniteLossError(loss)
    dout = (2.0 / n) * diff
    return loss, _backward(spec, weights, caches, dout.astype(batch.dtype))


def sgd_step(weights: Sequence[np.ndarray], grads: Sequence[np.ndarray], config: TrainConfig,
             velocity: list[np.ndarray], learning_rate: float | None = None) -> Weights:
    """Momentum SGD. Updates ``velocity`` in place and returns the new weights.

    velocity <- momentum * velocity - lr * grad;  weights <- weights + velocity

    With ``config.grad_clip > 0`` the gradient is first rescaled so its global
    L2 norm does not exceed that bound.
    """
    if not (len(weights) == len(grads) == len(velocity)):
        raise ValueError("weights, grads and velocity differ in length")
    lr = config.learning_rate if learning_rate is None else learning_rate
    if config.grad_clip > 0:
        grads = clip_gradients(grads, config.grad_clip)
    new = []
    for i, (w, g, v) in enumerate(zip(weights, grads, velocity)):
        if w.shape != g.shape or w.shape != v.shape:
            raise ValueError(f"tensor {i}: shapes {w.shape}, {g.shape}, {v.shape} differ")
        v *= w.dtype.type(config.momentum)
        v -= w.dtype.type(lr) * g
        new.append(w + v)
    return new


def clip_gradients(grads: Sequence[np.ndarray], max_norm: float) -> Weights:
    """Scale all gradients by one factor so their joint L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
    if norm <= max_norm or norm == 0:
        return list(grads)
    k = max_norm / norm
    return [g * g.dtype.type(k) for g in grads]


def zeros_like(weights: Iterable[np.ndarray]) -> Weights:
    return [np.zeros_like(w) for w in weights]


# -- gradient checking -----------------------------------------------------

def _activation_pattern(spec, weights, batch):
    _, caches = _run(spec, weights, batch, keep=True)
    parts = []
    for layer, cache in zip(spec.layers, caches):
        if layer.kind == "relu":
            parts.append(np.packbits(cache).tobytes())
        elif layer.kind == "maxpool":
            parts.append(cache[0].tobytes())
    return b"|".join(parts)


@dataclass
class GradCheckResult:
    max_relative_error: float
    checked: int
    skipped: int  # components whose +/-step probe crossed a relu/maxpool switch
    errors: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))


def grad_check_detailed(spec: NetworkSpec, seed: int, dtype=np.float32, step: float = 1e-3,
                        batch_size: int = 2) -> GradCheckResult:
    """Compare analytic gradients (computed in ``dtype``) with float64 central differences.

    The relative error of a component is |a - n| / max(|a|, |n|, 1e-3 * max|n|):
    components far below the gradient's overall scale are judged on that scale.
    Probes whose perturbation flips a relu mask or maxpool argmax are not
    differentiable there and are skipped.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed & (2**64 - 1), 0x6C4E]))
    w64 = init_weights(spec, seed, scale=1.5, dtype=np.float64)
    # non-zero biases so their gradients are exercised too
    w64 = [w if w.ndim > 1 else rng.uniform(-0.1, 0.1, w.shape) for w in w64]
    x64 = rng.standard_normal((batch_size,) + spec.input_shape)
    t64 = rng.uniform(0.0, 1.0, (batch_size, spec.output_dim))

    _, analytic = loss_and_grad(spec, [w.astype(dtype) for w in w64], x64.astype(dtype),
                                t64.astype(dtype))
    base = _activation_pattern(spec, w64, x64)

    def loss64(ws):
        out = forward(spec, ws, x64)
        return float(np.sum((out - t64) ** 2) / batch_size)

    numeric, analytic_flat, valid = [], [], []
    for p, w in enumerate(w64):
        for idx in np.ndindex(w.shape):
            orig = w[idx]
            w[idx] = orig + step
            lp, pp = loss64(w64), _activation_pattern(spec, w64, x64)
            w[idx] = orig - step
            lm, pm = loss64(w64), _activation_pattern(spec, w64, x64)
            w[idx] = orig
            numeric.append((lp - lm) / (2 * step))
            analytic_flat.append(float(analytic[p][idx]))
            valid.append(pp == base and pm == base)
    numeric_a = np.array(numeric)
    analytic_a = np.array(analytic_flat)
    valid_a = np.array(valid, dtype=bool)
    floor = max(1e-3 * float(np.max(np.abs(numeric_a[valid_a]), initial=0.0)), 1e-12)
    denom = np.maximum(np.maximum(np.abs(analytic_a), np.abs(numeric_a)), floor)
    errors = np.abs(analytic_a - numeric_a) / denom
    errors = errors[valid_a]
    worst = float(errors.max()) if errors.size else 0.0
    return GradCheckResult(worst, int(valid_a.sum()), int((~valid_a).sum()), errors)


def grad_check(spec: NetworkSpec, seed: int, dtype=np.float32, step: float = 1e-3) -> float:
    """Worst relative analytic-vs-central-difference gradient error for a random batch."""
    result = grad_check_detailed(spec, seed, dtype=dtype, step=step)
    if result.skipped:
        logger.debug("grad_check skipped %d non-differentiable probes", result.skipped)
    return result.max_relative_error


# -- serialization ---------------------------------------------------------

def save_weights(spec: NetworkSpec, weights: Sequence[np.ndarray], path: str | Path) -> None:
    check_weights(spec, weights)
    header = {
        "version": FORMAT_VERSION,
        "spec": spec.to_dict(),
        "tensors": [list(w.shape) for w in weights],
        "dtype": "<f4",
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for w in weights:
            f.write(np.ascontiguousarray(w, dtype="<f4").tobytes())


def load_weights(path: str | Path) -> tuple[NetworkSpec, Weights]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise WeightsFileError(f"{path}: not a weights file (bad magic at byte 0)")
    if len(data) < 8:
        raise WeightsFileError(f"{path}: truncated, missing bytes [{len(data)}, 8) of header length")
    (hlen,) = struct.unpack("<I", data[4:8])
    if len(data) < 8 + hlen:
        raise WeightsFileError(
            f"{path}: truncated, missing header bytes [{len(data)}, {8 + hlen})")
    try:
        header: dict[str, Any] = json.loads(data[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise WeightsFileError(f"{path}: corrupt header at byte {8 + getattr(e, 'pos', 0)}: {e}")
    if header.get("version") != FORMAT_VERSION:
        raise WeightsFileError(f"{path}: unsupported version {header.get('version')!r} at byte 8")
    try:
        spec = NetworkSpec.from_dict(header["spec"])
    except (KeyError, TypeError, ValueError) as e:
        raise WeightsFileError(f"{path}: invalid network spec in header: {e}")
    table = [tuple(s) for s in header.get("tensors", [])]
    expected = spec.param_shapes()
    for i in range(max(len(table), len(expected))):
        got = table[i] if i < len(table) else None
        want = expected[i] if i < len(expected) else None
        if got != want:
            raise WeightsFileError(
                f"{path}: shape table entry {i} is {got}, spec implies {want}")
    offset = 8 + hlen
    weights = []
    for shape in table:
        nbytes = 4 * math.prod(shape)
        if len(data) < offset + nbytes:
            raise WeightsFileError(
                f"{path}: truncated, missing bytes [{len(data)}, {offset + nbytes})")
        arr = np.frombuffer(data, dtype="<f4", count=math.prod(shape), offset=offset)
        weights.append(arr.reshape(shape).astype(np.float32))
        offset += nbytes
    if offset != len(data):
        raise WeightsFileError(f"{path}: {len(data) - offset} trailing bytes at offset {offset}")
    return spec, weights
