"""Small classifiers used as victim and surrogate, with training and weight files."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from leba import tensor as T
from leba.tensor import ContractError, Node

logger = logging.getLogger(__name__)

ARCHS = ("mlp", "tinycnn")


class WeightFormatError(ValueError):
    """A weight file could not be parsed."""


class IncompatibleWeightsError(ValueError):
    """A weight file does not match the requested model spec."""


@dataclass(frozen=True)
class ModelSpec:
    arch: str = "tinycnn"
    input_shape: tuple[int, int, int] = (1, 28, 28)
    classes: int = 10
    hidden: tuple[int, ...] = ()
    channels: tuple[int, ...] = (8, 16)
    kernel: int = 3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "hidden", tuple(int(v) for v in self.hidden))
        object.__setattr__(self, "channels", tuple(int(v) for v in self.channels))
        if self.arch not in ARCHS:
            raise ContractError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")
        if self.classes < 2:
            raise ContractError(f"classes must be >= 2, got {self.classes}")
        if len(self.input_shape) != 3 or int(np.prod(self.input_shape)) <= 0:
            raise ContractError(f"input_shape must be a positive (C, H, W), got {self.input_shape}")
        if self.arch == "tinycnn":
            if self.kernel < 1 or self.kernel % 2 == 0:
                raise ContractError(f"tinycnn kernel must be odd, got {self.kernel}")
            step = 2 ** len(self.channels)
            if self.input_shape[1] % step or self.input_shape[2] % step:
                raise ContractError(
                    f"tinycnn with {len(self.channels)} pooled stages needs H, W divisible by {step}"
                )

    @property
    def n_inputs(self) -> int:
        return int(np.prod(self.input_shape))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        return cls(**json.loads(text))


@dataclass
class Model:
    spec: ModelSpec
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "Model":
        return Model(self.spec, {k: v.copy() for k, v in self.params.items()})


@dataclass
class LabeledDataset:
    images: np.ndarray  # N, C, H, W in [0, 1]
    labels: np.ndarray  # N ints

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ContractError(
                f"dataset shapes {self.images.shape} and {self.labels.shape} do not conform"
            )
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ContractError("dataset pixels must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.images[idx], self.labels[idx])


# ---------------------------------------------------------------- parameters


def param_shapes(spec: ModelSpec) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in creation order."""
    shapes: list[tuple[str, tuple[int, ...]]] = []
    c, h, w = spec.input_shape
    if spec.arch == "mlp":
        width = spec.n_inputs
        for i, n in enumerate(spec.hidden):
            shapes += [(f"fc{i}.w", (width, n)), (f"fc{i}.b", (n,))]
            width = n
        shapes += [("out.w", (width, spec.classes)), ("out.b", (spec.classes,))]
    else:
        k = spec.kernel
        for i, n in enumerate(spec.channels):
            shapes += [(f"conv{i}.w", (n, c, k, k)), (f"conv{i}.b", (n,))]
            c, h, w = n, h // 2, w // 2
        shapes += [("out.w", (c * h * w, spec.classes)), ("out.b", (spec.classes,))]
    return shapes


def _fan_in(name: str, shape: tuple[int, ...], shapes: dict) -> int:
    wshape = shapes[name[:-1] + "w"]
    return int(np.prod(wshape[1:])) if len(wshape) == 4 else wshape[0]


def init_model(spec: ModelSpec) -> Model:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation, deterministic in the seed."""
    if spec.arch not in ARCHS:
        raise ContractError(f"unknown arch {spec.arch!r}")
    rng = np.random.default_rng(spec.seed)
    shapes = dict(param_shapes(spec))
    params = {}
    for name, shape in param_shapes(spec):
        bound = 1.0 / np.sqrt(_fan_in(name, shape, shapes))
        params[name] = rng.uniform(-bound, bound, size=shape)
    return Model(spec, params)


def param_count(model: Model) -> int:
    return sum(v.size for v in model.params.values())


# ---------------------------------------------------------------- forward


def logits(model: Model, x: Node, params: Optional[dict[str, Node]] = None) -> Node:
    """Graph forward pass; x is N,C,H,W. ``params`` may supply differentiable parameter nodes."""
    spec = model.spec
    if params is None:
        params = {k: T.constant(v) for k, v in model.params.items()}
    n = x.shape[0]
    if spec.arch == "mlp":
        h = T.reshape(x, (n, spec.n_inputs))
        for i in range(len(spec.hidden)):
            h = T.relu(_dense(h, params[f"fc{i}.w"], params[f"fc{i}.b"]))
    else:
        h = x
        for i in range(len(spec.channels)):
            z = T.conv2d(h, params[f"conv{i}.w"])
            b = params[f"conv{i}.b"]
            b = T.broadcast_to(T.reshape(b, (1, b.shape[0], 1, 1)), z.shape)
            h = T.avg_pool2(T.relu(T.add(z, b)))
        h = T.reshape(h, (n, int(np.prod(h.shape[1:]))))
    return _dense(h, params["out.w"], params["out.b"])


def _dense(h: Node, w: Node, b: Node) -> Node:
    z = T.matmul(h, w)
    return T.add(z, T.broadcast_to(b, z.shape))


def _logits_np(model: Model, x: np.ndarray, pattern: Optional[list] = None) -> np.ndarray:
    """Inference-only forward pass without graph bookkeeping; optionally records ReLU on/off masks."""
    spec, p = model.spec, model.params
    n = x.shape[0]
    if spec.arch == "mlp":
        h = x.reshape(n, -1)
        for i in range(len(spec.hidden)):
            h = h @ p[f"fc{i}.w"] + p[f"fc{i}.b"]
            if pattern is not None:
                pattern.append((h > 0).reshape(n, -1))
            h = np.maximum(h, 0.0)
    else:
        h = x
        for i in range(len(spec.channels)):
            z = T._conv_np(h, p[f"conv{i}.w"]) + p[f"conv{i}.b"][:, None, None]
            if pattern is not None:
                pattern.append((z > 0).reshape(n, -1))
            np.maximum(z, 0.0, out=z)
            h = T._pool_np(z)
        h = h.reshape(n, -1)
    return h @ p["out.w"] + p["out.b"]


def activation_pattern(model: Model, X: np.ndarray) -> np.ndarray:
    """Boolean (N, units) mask of active ReLUs; equal masks at two inputs mean the segment between them is kink-free."""
    X = _as_batch(model, X)
    masks: list = []
    _logits_np(model, X, masks)
    if not masks:
        return np.zeros((X.shape[0], 0), dtype=bool)
    return np.concatenate(masks, axis=1)


def _log_softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _as_batch(model: Model, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    shape = model.spec.input_shape
    if X.shape == shape:
        return X[None]
    if X.ndim == 4 and X.shape[1:] == shape:
        return X
    raise ContractError(f"input shape {X.shape} does not match model input {shape}")


def log_probs(model: Model, X: np.ndarray) -> np.ndarray:
    """Log-probabilities for one image (K,) or a batch (N, K)."""
    batch = _as_batch(model, X)
    out = _log_softmax_np(_logits_np(model, batch))
    return out[0] if np.asarray(X).ndim == 3 else out


def predict(model: Model, X: np.ndarray) -> np.ndarray:
    """Class probabilities (softmax over logits) for one image or a batch."""
    return np.exp(log_probs(model, X))


def accuracy(model: Model, data: LabeledDataset, batch: int = 256) -> float:
    hits = 0
    for s in range(0, len(data), batch):
        lp = log_probs(model, data.images[s : s + batch])
        hits += int((lp.argmax(axis=1) == data.labels[s : s + batch]).sum())
    return hits / len(data)


# ---------------------------------------------------------------- gradients


def class_log_prob(model: Model, x: Node, target, params: Optional[dict[str, Node]] = None) -> Node:
    """Per-sample log S_target as an (N,) node."""
    target = np.broadcast_to(np.asarray(target, dtype=np.int64), (x.shape[0],))
    return T.gather(T.log_softmax(logits(model, x, params)), target)


def grad_input(model: Model, X: np.ndarray, target) -> np.ndarray:
    """d log S_target / dX, same shape as X (single image or batch)."""
    K = model.spec.classes
    if np.any(np.asarray(target) >= K) or np.any(np.asarray(target) < 0):
        raise ContractError(f"target {target} out of range for {K} classes")
    batch = _as_batch(model, X)
    x = T.variable(batch)
    (g,) = T.backward(T.sum(class_log_prob(model, x, target)), [x])
    return g.reshape(np.shape(X))


def param_nodes(model: Model) -> dict[str, Node]:
    return {k: T.variable(v) for k, v in model.params.items()}


# ---------------------------------------------------------------- training


def cross_entropy(model: Model, x: Node, labels, params: dict[str, Node]) -> Node:
    return T.mul_scalar(T.mean(class_log_prob(model, x, labels, params)), -1.0)


def train(
    model: Model,
    data: LabeledDataset,
    epochs: int,
    lr: float,
    batch: int = 32,
    seed: Optional[int] = None,
    fgsm_eps: Optional[float] = None,
) -> tuple[Model, float]:
    """Minibatch SGD on cross-entropy. Returns the trained model and its training accuracy.

    With ``fgsm_eps`` set, the first half of every batch is replaced by FGSM
    examples crafted against the current parameters.
    """
    if len(data) == 0:
        raise ContractError("cannot train on an empty dataset")
    if lr < 0:
        raise ContractError(f"lr must be non-negative, got {lr}")
    model = model.copy()
    rng = np.random.default_rng(model.spec.seed if seed is None else seed)
    n = len(data)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for s in range(0, n, batch):
            idx = order[s : s + batch]
            xb, yb = data.images[idx], data.labels[idx]
            if fgsm_eps is not None:
                xb = xb.copy()
                half = (len(idx) + 1) // 2
                xb[:half] = fgsm(model, xb[:half], yb[:half], fgsm_eps)
            params = param_nodes(model)
            loss = cross_entropy(model, T.constant(xb), yb, params)
            names = list(params)
            grads = T.backward(loss, [params[k] for k in names])
            for k, g in zip(names, grads):
                model.params[k] = model.params[k] - lr * g
        logger.debug("epoch %d loss %.4f", epoch, float(loss.value))
    return model, accuracy(model, data)


def fgsm(model: Model, X: np.ndarray, y, eps: float) -> np.ndarray:
    """One-step sign-gradient ascent on cross-entropy, clipped to [0, 1]."""
    x = T.variable(X)
    params = {k: T.constant(v) for k, v in model.params.items()}
    (g,) = T.backward(cross_entropy(model, x, y, params), [x])
    return np.clip(X + eps * np.sign(g), 0.0, 1.0)


# ---------------------------------------------------------------- weight files
#
# layout: MAGIC | version u8 | spec-json length u32 | spec json |
#         param count u32 | per param: name length u16, name, ndim u8,
#         dims u32 * ndim, raw float64 values; all little-endian.

MAGIC = b"LEBAW"
VERSION = 1


def save_weights(model: Model, path) -> None:
    spec_bytes = model.spec.to_json().encode()
    parts = [MAGIC, struct.pack("<B", VERSION), struct.pack("<I", len(spec_bytes)), spec_bytes]
    parts.append(struct.pack("<I", len(model.params)))
    for name, value in model.params.items():
        nb = name.encode()
        parts += [struct.pack("<H", len(nb)), nb, struct.pack("<B", value.ndim)]
        parts.append(struct.pack(f"<{value.ndim}I", *value.shape))
        parts.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise WeightFormatError(f"truncated {what} at offset {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_weights(path) -> tuple[ModelSpec, dict[str, np.ndarray]]:
    r = _Reader(Path(path).read_bytes())
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise WeightFormatError("bad magic at offset 0")
    (version,) = r.unpack("<B", "version")
    if version != VERSION:
        raise WeightFormatError(f"unsupported version {version} at offset {len(MAGIC)}")
    (n,) = r.unpack("<I", "spec length")
    start = r.pos
    try:
        spec = ModelSpec.from_json(r.take(n, "spec").decode())
    except (UnicodeDecodeError, json.JSONDecodeError, TypeError, ContractError) as e:
        raise WeightFormatError(f"bad spec descriptor at offset {start}: {e}") from None
    (count,) = r.unpack("<I", "parameter count")
    params = {}
    for _ in range(count):
        (ln,) = r.unpack("<H", "name length")
        at = r.pos
        try:
            name = r.take(ln, "name").decode()
        except UnicodeDecodeError:
            raise WeightFormatError(f"bad parameter name at offset {at}") from None
        (ndim,) = r.unpack("<B", "ndim")
        shape = r.unpack(f"<{ndim}I", "dims")
        size = int(np.prod(shape))
        params[name] = np.frombuffer(r.take(8 * size, "values"), dtype="<f8").reshape(shape).copy()
    if r.pos != len(r.buf):
        raise WeightFormatError(f"trailing bytes at offset {r.pos}")
    return spec, params


def load_weights(spec: ModelSpec, path) -> Model:
    stored_spec, params = read_weights(path)
    if stored_spec != spec:
        raise IncompatibleWeightsError(f"file spec {stored_spec} differs from requested {spec}")
    expected = param_shapes(spec)
    got = [(k, v.shape) for k, v in params.items()]
    if got != expected:
        raise IncompatibleWeightsError(f"parameter shapes {got} differ from expected {expected}")
    for k, v in params.items():
        if not np.all(np.isfinite(v)):
            raise IncompatibleWeightsError(f"parameter {k} has non-finite values")
    return Model(spec, params)


def load_any(path) -> Model:
    """Load a weight file using the spec stored in its header."""
    spec, _ = read_weights(path)
    return load_weights(spec, path)
