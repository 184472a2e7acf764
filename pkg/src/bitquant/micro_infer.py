"""Minimal deterministic forward-pass engine for small feed-forward CNNs.

The engine executes the textual layer graph embedded in a model container:
one layer per line, ``kind key=value ...``.  Supported kinds are dense,
conv2d, batchnorm, relu, maxpool, avgpool, softmax and flatten, preceded
by a single ``input shape=CxHxW`` line.  Convolution is direct
cross-correlation with explicit symmetric zero padding; all arithmetic
accumulates in f32.

The dataset sidecar format ``BQDS`` is also defined here::

    magic "BQDS" | u32 sample_count | u32 feature_len | u32 class_count
    per sample: f32 features[feature_len] | u32 label
"""

from __future__ import annotations

import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .quant_core import FP32_SENTINEL, ModelQuantization, QuantScheme, quantize_model
from .tensor_store import ModelFile, Tensor, iter_graph_lines

DATASET_MAGIC = b"BQDS"

LAYER_KINDS = ("dense", "conv2d", "batchnorm", "relu", "maxpool", "avgpool", "softmax", "flatten")
_TENSOR_ATTRS = {
    "dense": ("weight", "bias"),
    "conv2d": ("weight", "bias"),
    "batchnorm": ("scale", "shift", "mean", "var"),
}


class GraphError(Exception):
    """Graph text that cannot be built into an executable network."""


def thread_count() -> int:
    """Worker cap from BITQUANT_THREADS; defaults to single-threaded."""
    raw = os.environ.get("BITQUANT_THREADS", "").strip()
    try:
        return max(1, int(raw)) if raw else 1
    except ValueError:
        return 1


@dataclass
class BoundLayer:
    index: int
    kind: str
    arrays: dict[str, np.ndarray]
    stride: int = 1
    pad: int = 0
    size: int = 0
    eps: float = 1e-5
    in_shape: tuple[int, ...] = ()
    out_shape: tuple[int, ...] = ()

    def describe(self) -> str:
        return f"layer {self.index} ({self.kind})"


@dataclass
class ModelGraph:
    input_shape: tuple[int, ...]
    layers: list[BoundLayer] = field(default_factory=list)

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.layers[-1].out_shape if self.layers else self.input_shape


def _parse_shape(text: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(p) for p in text.lower().split("x"))
    except ValueError:
        raise GraphError(f"bad shape spec {text!r}") from None
    if not dims or any(d <= 0 for d in dims):
        raise GraphError(f"bad shape spec {text!r}")
    return dims


def _int_attr(attrs: dict[str, str], key: str, where: str, default: int | None = None) -> int:
    if key not in attrs:
        if default is None:
            raise GraphError(f"{where}: missing required attribute {key!r}")
        return default
    try:
        value = int(attrs[key])
    except ValueError:
        raise GraphError(f"{where}: attribute {key}={attrs[key]!r} is not an integer") from None
    if value < 0:
        raise GraphError(f"{where}: attribute {key}={value} must be non-negative")
    return value


def _resolve_pad(attrs: dict[str, str], kernel: int, stride: int, where: str) -> int:
    """Padding is an explicit integer; `same`/`valid` shorthand is resolved here."""
    raw = attrs.get("pad", "0")
    if raw == "valid":
        return 0
    if raw == "same":
        if stride != 1 or kernel % 2 == 0:
            raise GraphError(f"{where}: pad=same needs stride 1 and an odd kernel")
        return (kernel - 1) // 2
    return _int_attr(attrs, "pad", where, default=0)


def build_graph(model: ModelFile) -> ModelGraph:
    """Parse, bind and shape-check the model's graph text."""
    entries = iter_graph_lines(model.graph)
    if not entries or entries[0][0] != "input":
        raise GraphError("graph must start with an 'input shape=...' line")
    shape = _parse_shape(entries[0][1].get("shape", ""))
    tensors = model.tensor_map()

    graph = ModelGraph(shape)
    current = shape
    for index, (kind, attrs) in enumerate(entries[1:], start=1):
        where = f"layer {index} ({kind})"
        if kind not in LAYER_KINDS:
            raise GraphError(f"{where}: unknown layer kind")
        layer = BoundLayer(index, kind, {}, in_shape=current)
        for key in _TENSOR_ATTRS.get(kind, ()):
            if key in attrs:
                name = attrs[key]
                if name not in tensors:
                    raise GraphError(f"{where}: references missing tensor {name!r}")
                layer.arrays[key] = tensors[name].reshaped()

        if kind == "dense":
            current = _infer_dense(layer, where)
        elif kind == "conv2d":
            layer.stride = _int_attr(attrs, "stride", where, default=1)
            if layer.stride < 1:
                raise GraphError(f"{where}: stride must be >= 1")
            kernel = layer.arrays["weight"].shape[-1] if "weight" in layer.arrays else 0
            layer.pad = _resolve_pad(attrs, kernel, layer.stride, where)
            current = _infer_conv(layer, where)
        elif kind == "batchnorm":
            layer.eps = float(attrs.get("eps", "1e-5"))
            current = _infer_batchnorm(layer, where)
        elif kind in ("maxpool", "avgpool"):
            layer.size = _int_attr(attrs, "size", where)
            layer.stride = _int_attr(attrs, "stride", where, default=layer.size)
            if layer.size < 1 or layer.stride < 1:
                raise GraphError(f"{where}: pool size and stride must be >= 1")
            current = _infer_pool(layer, where)
        elif kind == "flatten":
            current = (int(math.prod(current)),)
        elif kind == "softmax":
            if len(current) != 1:
                raise GraphError(f"{where}: softmax expects a vector, got {current}")
        # relu keeps its input shape

        layer.out_shape = current
        graph.layers.append(layer)
    return graph


def _infer_dense(layer: BoundLayer, where: str) -> tuple[int, ...]:
    if "weight" not in layer.arrays:
        raise GraphError(f"{where}: missing weight tensor")
    w = layer.arrays["weight"]
    if w.ndim != 2:
        raise GraphError(f"{where}: weight must be rank 2, got shape {w.shape}")
    if layer.in_shape != (w.shape[1],):
        raise GraphError(f"{where}: input {layer.in_shape} does not match weight {w.shape}")
    bias = layer.arrays.get("bias")
    if bias is not None and bias.shape != (w.shape[0],):
        raise GraphError(f"{where}: bias shape {bias.shape} does not match {w.shape[0]} outputs")
    return (w.shape[0],)


def _infer_conv(layer: BoundLayer, where: str) -> tuple[int, ...]:
    if "weight" not in layer.arrays:
        raise GraphError(f"{where}: missing weight tensor")
    w = layer.arrays["weight"]
    if w.ndim != 4:
        raise GraphError(f"{where}: weight must be rank 4 (out,in,kh,kw), got {w.shape}")
    if len(layer.in_shape) != 3:
        raise GraphError(f"{where}: expects CxHxW input, got {layer.in_shape}")
    c, h, width = layer.in_shape
    out_c, in_c, kh, kw = w.shape
    if in_c != c:
        raise GraphError(f"{where}: weight expects {in_c} input channels, input has {c}")
    oh = (h + 2 * layer.pad - kh) // layer.stride + 1
    ow = (width + 2 * layer.pad - kw) // layer.stride + 1
    if oh < 1 or ow < 1:
        raise GraphError(f"{where}: kernel {kh}x{kw} does not fit input {layer.in_shape}")
    bias = layer.arrays.get("bias")
    if bias is not None and bias.shape != (out_c,):
        raise GraphError(f"{where}: bias shape {bias.shape} does not match {out_c} channels")
    return (out_c, oh, ow)


def _infer_batchnorm(layer: BoundLayer, where: str) -> tuple[int, ...]:
    channels = layer.in_shape[0]
    for key in ("scale", "shift", "mean", "var"):
        arr = layer.arrays.get(key)
        if arr is None:
            raise GraphError(f"{where}: missing {key} tensor")
        if arr.shape != (channels,):
            raise GraphError(
                f"{where}: {key} shape {arr.shape} does not match {channels} channels"
            )
    return layer.in_shape


def _infer_pool(layer: BoundLayer, where: str) -> tuple[int, ...]:
    if len(layer.in_shape) != 3:
        raise GraphError(f"{where}: expects CxHxW input, got {layer.in_shape}")
    c, h, w = layer.in_shape
    oh = (h - layer.size) // layer.stride + 1
    ow = (w - layer.size) // layer.stride + 1
    if oh < 1 or ow < 1:
        raise GraphError(f"{where}: window {layer.size} does not fit input {layer.in_shape}")
    return (c, oh, ow)


def _windows(x: np.ndarray, size: int, stride: int) -> np.ndarray:
    """Sliding (C, oh, ow, size, size) view over a contiguous CxHxW array."""
    c, h, w = x.shape
    oh = (h - size) // stride + 1
    ow = (w - size) // stride + 1
    s0, s1, s2 = x.strides
    return np.lib.stride_tricks.as_strided(
        x, (c, oh, ow, size, size), (s0, s1 * stride, s2 * stride, s1, s2)
    )


def _conv2d(x: np.ndarray, layer: BoundLayer) -> np.ndarray:
    w = layer.arrays["weight"]
    out_c, in_c, kh, kw = w.shape
    if layer.pad:
        x = np.pad(x, ((0, 0), (layer.pad, layer.pad), (layer.pad, layer.pad)))
    x = np.ascontiguousarray(x, dtype=np.float32)
    c, h, width = x.shape
    oh = (h - kh) // layer.stride + 1
    ow = (width - kw) // layer.stride + 1
    s0, s1, s2 = x.strides
    win = np.lib.stride_tricks.as_strided(
        x, (c, oh, ow, kh, kw), (s0, s1 * layer.stride, s2 * layer.stride, s1, s2)
    )
    cols = win.transpose(1, 2, 0, 3, 4).reshape(oh * ow, c * kh * kw)
    out = cols @ w.reshape(out_c, -1).T
    bias = layer.arrays.get("bias")
    if bias is not None:
        out = out + bias
    return out.T.reshape(out_c, oh, ow).astype(np.float32)


def _layer_forward(x: np.ndarray, layer: BoundLayer) -> np.ndarray:
    kind = layer.kind
    if kind == "dense":
        out = layer.arrays["weight"] @ x
        bias = layer.arrays.get("bias")
        return (out + bias if bias is not None else out).astype(np.float32)
    if kind == "conv2d":
        return _conv2d(x, layer)
    if kind == "batchnorm":
        shape = (-1,) + (1,) * (x.ndim - 1)
        a = layer.arrays
        denom = np.sqrt(a["var"].astype(np.float32) + np.float32(layer.eps))
        return ((x - a["mean"].reshape(shape)) / denom.reshape(shape)) * a["scale"].reshape(
            shape
        ) + a["shift"].reshape(shape)
    if kind == "relu":
        return np.maximum(x, np.float32(0))
    if kind == "maxpool":
        x = np.ascontiguousarray(x, dtype=np.float32)
        return _windows(x, layer.size, layer.stride).max(axis=(3, 4))
    if kind == "avgpool":
        x = np.ascontiguousarray(x, dtype=np.float32)
        return _windows(x, layer.size, layer.stride).mean(axis=(3, 4), dtype=np.float32)
    if kind == "flatten":
        return x.reshape(-1)
    if kind == "softmax":
        shifted = np.exp(x - x.max())
        return (shifted / shifted.sum()).astype(np.float32)
    raise GraphError(f"{layer.describe()}: unknown layer kind")


def forward(graph: ModelGraph, x) -> np.ndarray:
    """Run one sample through the graph; deterministic f32 output."""
    arr = x.reshaped() if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)
    if tuple(arr.shape) != graph.input_shape:
        raise GraphError(f"input shape {tuple(arr.shape)} does not match {graph.input_shape}")
    out = arr.astype(np.float32)
    for layer in graph.layers:
        if tuple(out.shape) != layer.in_shape:
            raise GraphError(
                f"{layer.describe()}: got shape {tuple(out.shape)}, expected {layer.in_shape}"
            )
        out = _layer_forward(out, layer)
    return out


@dataclass
class Dataset:
    features: np.ndarray  # (N, F) float32
    labels: np.ndarray  # (N,) int64
    class_count: int
    class_names: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features must be (samples, features) aligned with labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels out of range [0, {self.class_count})")
        if not self.class_names:
            self.class_names = tuple(f"class_{i}" for i in range(self.class_count))

    def __len__(self) -> int:
        return self.features.shape[0]


def serialize_dataset(dataset: Dataset) -> bytes:
    n, feat = dataset.features.shape
    out = bytearray(DATASET_MAGIC)
    out += struct.pack("<III", n, feat, dataset.class_count)
    for i in range(n):
        out += dataset.features[i].astype("<f4").tobytes()
        out += struct.pack("<I", int(dataset.labels[i]))
    return bytes(out)


def parse_dataset(data: bytes) -> Dataset:
    if data[:4] != DATASET_MAGIC:
        raise ValueError("not a dataset file (bad magic)")
    n, feat, classes = struct.unpack_from("<III", data, 4)
    stride = 4 * feat + 4
    if len(data) != 16 + n * stride:
        raise ValueError(f"dataset file is {len(data)} bytes, expected {16 + n * stride}")
    features = np.empty((n, feat), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    pos = 16
    for i in range(n):
        features[i] = np.frombuffer(data, dtype="<f4", count=feat, offset=pos)
        labels[i] = struct.unpack_from("<I", data, pos + 4 * feat)[0]
        pos += stride
    return Dataset(features, labels, classes)


def load_dataset(path) -> Dataset:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise OSError(f"cannot read dataset {path}: {exc}") from exc
    return parse_dataset(data)


def save_dataset(dataset: Dataset, path) -> None:
    data = serialize_dataset(dataset)
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise OSError(f"cannot write dataset {path}: {exc}") from exc


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (K, K) int64, rows = true class, cols = predicted
    class_names: tuple[str, ...]

    def __post_init__(self) -> None:
        self.counts = np.asarray(self.counts, dtype=np.int64)
        k = len(self.class_names)
        if self.counts.shape != (k, k):
            raise ValueError(f"confusion matrix {self.counts.shape} does not match {k} classes")
        if (self.counts < 0).any():
            raise ValueError("confusion counts must be non-negative")

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    def total(self) -> int:
        return int(self.counts.sum())

    def correct(self) -> int:
        return int(np.trace(self.counts))

    def to_csv(self) -> str:
        lines = ["true\\pred," + ",".join(self.class_names)]
        for name, row in zip(self.class_names, self.counts):
            lines.append(name + "," + ",".join(str(int(v)) for v in row))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "ConfusionMatrix":
        rows = [l for l in text.splitlines() if l.strip() and not l.startswith("#")]
        if not rows:
            raise ValueError("empty confusion CSV")
        names = tuple(rows[0].split(",")[1:])
        counts = []
        for line in rows[1:]:
            parts = line.split(",")
            counts.append([int(v) for v in parts[1:]])
        return cls(np.array(counts, dtype=np.int64), names)


@dataclass
class EvalResult:
    accuracy: float
    confusion: ConfusionMatrix
    sample_count: int


def model_scores(graph: ModelGraph, features: np.ndarray) -> np.ndarray:
    """Final-layer outputs for each sample row, as an (N, K) array.

    Samples are processed in index order; BITQUANT_THREADS may spread
    chunks over threads, with results written back by position so the
    output is identical either way.
    """
    n = features.shape[0]
    if n == 0:
        raise ValueError("empty dataset")
    first = forward(graph, features[0].reshape(graph.input_shape))
    scores = np.empty((n, first.shape[0]), dtype=np.float32)
    scores[0] = first

    def run(lo: int, hi: int) -> None:
        for i in range(lo, hi):
            scores[i] = forward(graph, features[i].reshape(graph.input_shape))

    workers = min(thread_count(), max(1, n - 1))
    if workers == 1:
        run(1, n)
    else:
        step = math.ceil((n - 1) / workers)
        spans = [(lo, min(lo + step, n)) for lo in range(1, n, step)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(lambda s: run(*s), spans))
    return scores


def evaluate(graph: ModelGraph, dataset: Dataset) -> EvalResult:
    """Argmax accuracy plus the confusion matrix; ties pick the lowest class."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if math.prod(graph.input_shape) != dataset.features.shape[1]:
        raise GraphError(
            f"dataset features ({dataset.features.shape[1]}) do not fill "
            f"graph input {graph.input_shape}"
        )
    scores = model_scores(graph, dataset.features)
    if scores.shape[1] != dataset.class_count:
        raise GraphError(
            f"model emits {scores.shape[1]} scores for {dataset.class_count} classes"
        )
    preds = scores.argmax(axis=1)
    k = dataset.class_count
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (dataset.labels, preds), 1)
    confusion = ConfusionMatrix(counts, dataset.class_names)
    return EvalResult(confusion.correct() / len(dataset), confusion, len(dataset))


@dataclass(frozen=True)
class SweepRow:
    bit_width: int  # 32 marks the FP32 baseline row
    result: EvalResult
    packed_payload_bytes: int
    model_bytes: int
    quantization: ModelQuantization | None = None


def bit_sweep(
    model: ModelFile,
    dataset: Dataset,
    scheme: QuantScheme,
    bit_widths: list[int],
    **quant_kwargs,
) -> list[SweepRow]:
    """Evaluate the model per bit width, with an FP32 baseline row first.

    Pow2 has no bit-width knob; it contributes a single row at its storage
    width regardless of the requested list.
    """
    scheme = QuantScheme(scheme)
    for n in bit_widths:
        if n != FP32_SENTINEL and n not in range(2, 9):
            raise ValueError(f"bit width {n} outside supported range [2, 8]")

    raw_bytes = model.payload_bytes()
    baseline = evaluate(build_graph(model), dataset)
    rows = [SweepRow(FP32_SENTINEL, baseline, raw_bytes, raw_bytes)]

    if scheme is QuantScheme.POW2:
        widths = [None]
    else:
        widths = [n for n in bit_widths if n != FP32_SENTINEL]

    for n in widths:
        quant = quantize_model(model, scheme, n, **quant_kwargs)
        result = evaluate(build_graph(quant.model), dataset)
        packed_bytes = quant.packed.payload_bytes()
        untouched = sum(
            t.nbytes for t in model.tensors if t.name not in quant.quantized_names
        )
        rows.append(
            SweepRow(quant.packed.bit_width, result, packed_bytes, packed_bytes + untouched, quant)
        )
    return rows


def fold_batchnorm(model: ModelFile) -> ModelFile:
    """Fold batchnorm layers into the directly preceding conv2d/dense layer.

    The folded layer gets weights scaled per output channel and a bias
    absorbing mean/shift; unpaired batchnorm layers stay in place.
    """
    entries = iter_graph_lines(model.graph)
    tensors = model.tensor_map()
    new_tensors: dict[str, Tensor] = {t.name: t for t in model.tensors}
    drop_tensors: set[str] = set()
    out_lines: list[str] = []
    skip = False

    for i, (kind, attrs) in enumerate(entries):
        if skip:
            skip = False
            continue
        nxt = entries[i + 1] if i + 1 < len(entries) else None
        if kind in ("conv2d", "dense") and nxt is not None and nxt[0] == "batchnorm":
            bn = nxt[1]
            w = tensors[attrs["weight"]]
            scale = tensors[bn["scale"]].data.astype(np.float64)
            shift = tensors[bn["shift"]].data.astype(np.float64)
            mean = tensors[bn["mean"]].data.astype(np.float64)
            var = tensors[bn["var"]].data.astype(np.float64)
            eps = float(bn.get("eps", "1e-5"))
            k = scale / np.sqrt(var + eps)

            folded_w = w.reshaped().astype(np.float64) * k.reshape((-1,) + (1,) * (len(w.shape) - 1))
            bias_name = attrs.get("bias")
            old_bias = (
                tensors[bias_name].data.astype(np.float64)
                if bias_name
                else np.zeros(w.shape[0])
            )
            folded_b = (old_bias - mean) * k + shift

            new_tensors[w.name] = Tensor(w.name, w.shape, folded_w.reshape(-1).astype(np.float32))
            if bias_name is None:
                bias_name = f"{w.name}.fold_bias"
                if bias_name in new_tensors:
                    raise ValueError(f"cannot fold: tensor name {bias_name!r} already taken")
            new_tensors[bias_name] = Tensor(bias_name, (w.shape[0],), folded_b.astype(np.float32))
            drop_tensors.update(bn[key] for key in ("scale", "shift", "mean", "var"))

            parts = [kind, f"weight={w.name}", f"bias={bias_name}"]
            for key, value in attrs.items():
                if key not in ("weight", "bias"):
                    parts.append(f"{key}={value}")
            out_lines.append(" ".join(parts))
            skip = True
        else:
            parts = [kind] + [f"{k}={v}" for k, v in attrs.items()]
            out_lines.append(" ".join(parts))

    kept = [t for name, t in new_tensors.items() if name not in drop_tensors]
    return ModelFile(kept, "\n".join(out_lines) + "\n")
