"""The desk-scale "original model": a tiny CNN, its SGD trainer and file format."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError, FormatError, TrainingError
from .rng import Rng

MODEL_MAGIC = b"AMLM"
MODEL_VERSION = 1

LAYER_TYPES = ("conv", "relu", "maxpool", "flatten", "dense")

# Hook signature used by instrumentation and steering: (layer_index, activations) -> activations
ActivationHook = Callable[[int, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple[int, int, int]
    layers: tuple[dict, ...]

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(dict(l) for l in self.layers))
        self.shapes()  # validates

    def shapes(self) -> list[tuple[int, ...]]:
        """Output shape of every layer, per sample."""
        shape = self.input_shape
        out = []
        for i, layer in enumerate(self.layers):
            kind = layer.get("type")
            if kind not in LAYER_TYPES:
                raise ConfigurationError(f"layer {i}: unknown type {kind!r}")
            if kind == "conv":
                if len(shape) != 3:
                    raise ConfigurationError(f"layer {i}: conv needs a C x H x W input, got {shape}")
                c, h, w = shape
                kh, kw = layer["kh"], layer["kw"]
                if kh > h or kw > w or layer["filters"] < 1:
                    raise ConfigurationError(f"layer {i}: kernel {kh}x{kw} does not fit {h}x{w}")
                shape = (layer["filters"], h - kh + 1, w - kw + 1)
            elif kind == "maxpool":
                if len(shape) != 3 or shape[1] < 2 or shape[2] < 2:
                    raise ConfigurationError(f"layer {i}: maxpool needs a spatial input, got {shape}")
                shape = (shape[0], shape[1] // 2, shape[2] // 2)
            elif kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif kind == "dense":
                if len(shape) != 1:
                    raise ConfigurationError(f"layer {i}: dense needs a flat input, got {shape}")
                shape = (layer["out"],)
            out.append(shape)
        if not self.layers or self.layers[-1]["type"] != "dense":
            raise ConfigurationError("network must end in a dense layer producing logits")
        return out

    @property
    def num_classes(self) -> int:
        return self.layers[-1]["out"]

    @property
    def relu_layers(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l["type"] == "relu"]

    @property
    def param_layers(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l["type"] in ("conv", "dense")]

    def param_shapes(self, index: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
        layer = self.layers[index]
        in_shape = self.input_shape if index == 0 else self.shapes()[index - 1]
        if layer["type"] == "conv":
            f = layer["filters"]
            return (f, in_shape[0], layer["kh"], layer["kw"]), (f,)
        return (layer["out"], in_shape[0]), (layer["out"],)

    def to_json(self) -> dict:
        return {"input_shape": list(self.input_shape), "layers": [dict(l) for l in self.layers]}

    @classmethod
    def from_json(cls, d: dict) -> "NetworkSpec":
        return cls(tuple(d["input_shape"]), tuple(d["layers"]))


def default_spec(num_classes: int = 8, input_shape=(1, 16, 16)) -> NetworkSpec:
    return NetworkSpec(input_shape, (
        {"type": "conv", "filters": 8, "kh": 3, "kw": 3},
        {"type": "relu"},
        {"type": "maxpool"},
        {"type": "conv", "filters": 8, "kh": 3, "kw": 3},
        {"type": "relu"},
        {"type": "flatten"},
        {"type": "dense", "out": 32},
        {"type": "relu"},
        {"type": "dense", "out": num_classes},
    ))


@dataclass
class Prediction:
    label: int
    logits: np.ndarray
    probabilities: np.ndarray


@dataclass
class TrainedModel:
    spec: NetworkSpec
    params: dict[int, tuple[np.ndarray, np.ndarray]]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for i in self.spec.param_layers:
            if i not in self.params:
                raise ConfigurationError(f"missing weights for layer {i}")
            ws, bs = self.spec.param_shapes(i)
            w, b = self.params[i]
            if w.shape != ws or b.shape != bs:
                raise ConfigurationError(f"layer {i}: weights {w.shape}/{b.shape}, spec wants {ws}/{bs}")

    def forward(self, x: np.ndarray, tape: T.Tape | None = None,
                hook: ActivationHook | None = None) -> np.ndarray:
        """Batched logits ``(N, K)`` for inputs ``(N, C, H, W)``.

        ``hook`` is called right after every relu layer and may replace the
        activations; downstream layers see what it returns.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.spec.input_shape:
            raise DimensionError(f"input shape {x.shape[1:]} does not match model input {self.spec.input_shape}")
        for i, layer in enumerate(self.spec.layers):
            kind = layer["type"]
            if kind == "conv":
                k, b = self.params[i]
                out = T.conv2d_forward(x, k, b)
                if tape is not None:
                    tape.push(i, lambda g, x=x, k=k: _conv_back(g, x, k, tape.params))
            elif kind == "dense":
                w, b = self.params[i]
                out = T.dense_forward(x, w, b)
                if tape is not None:
                    tape.push(i, lambda g, x=x, w=w: _dense_back(g, x, w, tape.params))
            elif kind == "relu":
                out = T.relu(x)
                if tape is not None:
                    tape.push(i, lambda g, x=x: (T.relu_backward(g, x), None))
                if hook is not None:
                    out = hook(i, out)
            elif kind == "maxpool":
                out = T.maxpool2x2(x)
                if tape is not None:
                    tape.push(i, lambda g, x=x: (T.maxpool2x2_backward(g, x), None))
            else:
                out = T.flatten(x)
                if tape is not None:
                    tape.push(i, lambda g, s=x.shape: (g.reshape(s), None))
            x = out
        return x

    def logits(self, images: np.ndarray) -> np.ndarray:
        return self.forward(_as_batch(images, self.spec.input_shape))

    def predict_labels(self, images: np.ndarray) -> np.ndarray:
        return argmax_labels(self.logits(images))

    def input_gradient(self, images: np.ndarray, logit_grad: Callable[[np.ndarray], np.ndarray]):
        """``(logits, d/dx)`` where the scalar objective's logit gradient is ``logit_grad(logits)``."""
        tape = T.Tape(params=False)
        z = self.forward(_as_batch(images, self.spec.input_shape), tape=tape)
        return z, T.backward(tape, logit_grad(z))["input"]

    def digest(self) -> str:
        return hashlib.sha256(model_to_bytes(self)).hexdigest()


def _conv_back(g, x, k, want_params):
    dx, dk, db = T.conv2d_backward(g, x, k, want_params)
    return dx, (dk, db)


def _dense_back(g, x, w, want_params):
    dx, dw, db = T.dense_backward(g, x, w, want_params)
    return dx, (dw, db)


def _as_batch(images, input_shape) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    if x.shape == tuple(input_shape):
        return x[None]
    return x


def argmax_labels(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal index: lowest-index tie-break
    return np.argmax(logits, axis=-1).astype(np.int64)


def predict(model: TrainedModel, image: np.ndarray) -> Prediction:
    x = np.asarray(image, dtype=np.float64)
    if x.shape != model.spec.input_shape:
        raise DimensionError(f"image shape {x.shape} does not match model input {model.spec.input_shape}")
    z = model.forward(x[None])[0]
    return Prediction(int(argmax_labels(z)), z, T.softmax(z))


def init_params(spec: NetworkSpec, rng: Rng) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """He-uniform weights, zero biases; layers drawn in index order."""
    params = {}
    for i in spec.param_layers:
        ws, bs = spec.param_shapes(i)
        fan_in = int(np.prod(ws[1:]))
        bound = np.sqrt(6.0 / fan_in)
        params[i] = (rng.uniform(-bound, bound, ws), np.zeros(bs))
    return params


def zero_model(spec: NetworkSpec) -> TrainedModel:
    params = {}
    for i in spec.param_layers:
        ws, bs = spec.param_shapes(i)
        params[i] = (np.zeros(ws), np.zeros(bs))
    return TrainedModel(spec, params, {})


@dataclass
class TrainConfig:
    epochs: int = 30
    batch: int = 16
    lr: float = 0.05
    seed: int = 7


def train(spec: NetworkSpec, dataset, hyper: TrainConfig, log: Callable[[str], None] | None = None) -> TrainedModel:
    """Minibatch SGD on mean cross-entropy, no momentum.

    Shuffle order per epoch comes from a stream derived from ``hyper.seed``,
    independent of the initialisation stream.
    """
    labels = np.asarray(dataset.labels, dtype=np.int64)
    k = spec.num_classes
    if labels.size == 0:
        raise ConfigurationError("cannot train on an empty dataset")
    if labels.min() < 0 or labels.max() >= k:
        raise ConfigurationError(f"labels must lie in [0, {k})")
    if hyper.epochs < 1 or hyper.batch < 1 or not hyper.lr > 0:
        raise ConfigurationError("epochs and batch must be >= 1 and lr > 0")
    root = Rng(hyper.seed)
    params = init_params(spec, root.spawn(0))
    order_rng = root.spawn(1)
    images = np.asarray(dataset.images, dtype=np.float64)
    model = TrainedModel(spec, params, {})
    n = labels.size
    for epoch in range(hyper.epochs):
        order = order_rng.permutation(n)
        total = []
        for start in range(0, n, hyper.batch):
            idx = order[start:start + hyper.batch]
            tape = T.Tape()
            z = model.forward(images[idx], tape=tape)
            loss = T.cross_entropy(z, labels[idx])
            total.append(loss)
            grads = T.backward(tape, T.cross_entropy_backward(z, labels[idx]) / idx.size)
            for i in spec.param_layers:
                w, b = model.params[i]
                dw, db = grads[i]
                model.params[i] = (w - hyper.lr * dw, b - hyper.lr * db)
        mean_loss = float(T.ordered_sum(np.concatenate(total))) / n
        if not np.isfinite(mean_loss) or not all(np.all(np.isfinite(w)) for pair in model.params.values() for w in pair):
            raise TrainingError("training diverged: non-finite loss or weights", epoch)
        if log is not None:
            log(f"epoch {epoch + 1}/{hyper.epochs} loss {mean_loss:.6f}")
    acc = accuracy(model, images, labels)
    model.metadata = {
        "seed": hyper.seed,
        "epochs": hyper.epochs,
        "batch": hyper.batch,
        "lr": hyper.lr,
        "final_accuracy": acc,
        "final_loss": mean_loss,
        "train_count": int(n),
    }
    return model


def accuracy(model: TrainedModel, images: np.ndarray, labels: np.ndarray, chunk: int = 512) -> float:
    labels = np.asarray(labels, dtype=np.int64)
    pred = np.concatenate([model.predict_labels(images[s:s + chunk]) for s in range(0, len(labels), chunk)])
    return int(np.count_nonzero(pred == labels)) / len(labels)


# ---------------------------------------------------------------- file format


def model_to_bytes(model: TrainedModel) -> bytes:
    """``AMLM``, u32 version, u32-length JSON (spec + metadata), f64 LE weights in layer order."""
    header = json.dumps({"spec": model.spec.to_json(), "metadata": model.metadata},
                        sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")
    parts = [MODEL_MAGIC, struct.pack("<II", MODEL_VERSION, len(header)), header]
    for i in model.spec.param_layers:
        w, b = model.params[i]
        parts.append(w.astype("<f8").tobytes(order="C"))
        parts.append(b.astype("<f8").tobytes(order="C"))
    return b"".join(parts)


def model_from_bytes(buf: bytes) -> TrainedModel:
    if buf[:4] != MODEL_MAGIC:
        raise FormatError("not a model file (bad magic)")
    try:
        version, n = struct.unpack_from("<II", buf, 4)
        if version != MODEL_VERSION:
            raise FormatError(f"unsupported model version {version}")
        head = json.loads(buf[12:12 + n].decode("utf-8"))
        spec = NetworkSpec.from_json(head["spec"])
        pos = 12 + n
        params = {}
        for i in spec.param_layers:
            pair = []
            for shape in spec.param_shapes(i):
                count = int(np.prod(shape))
                if pos + 8 * count > len(buf):
                    raise FormatError("model file truncated")
                pair.append(np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(shape))
                pos += 8 * count
            params[i] = tuple(pair)
    except (struct.error, ValueError, KeyError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"corrupt model file: {exc}") from exc
    if pos != len(buf):
        raise FormatError("trailing bytes after weights")
    return TrainedModel(spec, params, head["metadata"])


def save_model(model: TrainedModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def load_model(path) -> TrainedModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
