"""Data-free quantization schemes and exact dequantization.

Three schemes, all driven purely by the tensor's own values:

* uniform asymmetric: ``round((x - min) * (2^n - 1) / (max - min))``,
  unsigned codes, min/max kept as parameters;
* uniform symmetric: ``round(x * (2^(n-1) - 1) / max|x|)``, signed codes
  around an exactly-representable zero;
* power-of-two: each nonzero value snaps to ``sign(x) * 2^round(log2|x|)``,
  with a per-tensor exponent window sized by a configurable bit budget.

Rounding is half-away-from-zero throughout, including the pow2 exponent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor_store import (
    AsymmParams,
    GRAPH_REF_KEYS,
    ModelFile,
    PackedQuantModel,
    Pow2Params,
    QuantParams,
    QuantScheme,
    SymmParams,
    Tensor,
    iter_graph_lines,
    pack_quantized,
)

UNIFORM_BITS = range(2, 9)
FP32_SENTINEL = 32
DEFAULT_EXPONENT_BITS = 4

# Which graph attributes of each layer kind are quantizable parameters.
_WEIGHT_KEYS = {"dense": ("weight",), "conv2d": ("weight",)}
_BIAS_KEYS = {"dense": ("bias",), "conv2d": ("bias",)}
_BN_LEARNED = ("scale", "shift")
_BN_STATS = ("mean", "var")
_STATELESS_KINDS = frozenset({"input", "relu", "maxpool", "avgpool", "softmax", "flatten"})


def round_half_away(values) -> np.ndarray:
    """Round to nearest integer, ties away from zero."""
    v = np.asarray(values, dtype=np.float64)
    return np.copysign(np.floor(np.abs(v) + 0.5), v)


@dataclass
class QuantizedTensor:
    """Integer codes (uniform) or sign/exponent pairs (pow2) plus the
    parameters needed to dequantize exactly."""

    name: str
    scheme: QuantScheme
    bit_width: int
    shape: tuple[int, ...]
    params: QuantParams
    codes: np.ndarray | None = None
    signs: np.ndarray | None = None
    exponents: np.ndarray | None = None
    channel_axis: int | None = None

    @property
    def count(self) -> int:
        return int(math.prod(self.shape))

    def group_count(self) -> int:
        if self.channel_axis is None:
            return 1
        return self.shape[self.channel_axis]


def _as_tensor(x, fallback_name: str = "tensor") -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor.from_array(fallback_name, np.asarray(x, dtype=np.float32))


def _check_uniform_input(x: Tensor, bit_width: int) -> None:
    if bit_width not in UNIFORM_BITS:
        raise ValueError(f"bit width {bit_width} outside supported range [2, 8]")
    if x.count == 0:
        raise ValueError(f"tensor {x.name!r} is empty")
    x.validate_finite()


def _grouped(x: Tensor, channel_axis: int | None) -> tuple[np.ndarray, int]:
    """View the flat data as (groups, elements_per_group) in float64.

    Only axis 0 is supported for per-channel grouping; axis-0 slices are
    contiguous in row-major order, so codes stay in original element order.
    """
    if channel_axis is None:
        return x.data.astype(np.float64).reshape(1, -1), 1
    if channel_axis != 0:
        raise ValueError("per-channel quantization supports axis 0 only")
    if len(x.shape) < 2:
        return x.data.astype(np.float64).reshape(1, -1), 1
    groups = x.shape[0]
    return x.data.astype(np.float64).reshape(groups, -1), groups


def quantize_asymm(x, bit_width: int, *, channel_axis: int | None = None) -> QuantizedTensor:
    """Map the tensor's [min, max] range onto 2^n evenly spaced levels.

    A constant tensor yields all-zero codes with min == max; dequantize
    then reproduces the constant.
    """
    x = _as_tensor(x)
    _check_uniform_input(x, bit_width)
    work, groups = _grouped(x, channel_axis)
    lo = work.min(axis=1)
    hi = work.max(axis=1)
    span = hi - lo
    top = float((1 << bit_width) - 1)
    scale = np.divide(top, span, out=np.zeros_like(span), where=span > 0)
    codes = round_half_away((work - lo[:, None]) * scale[:, None])
    codes = np.clip(codes, 0, top).astype(np.int32)
    params = AsymmParams(lo.astype(np.float32), hi.astype(np.float32))
    return QuantizedTensor(
        x.name, QuantScheme.ASYMM, bit_width, x.shape, params,
        codes=codes.reshape(-1), channel_axis=None if groups == 1 else 0,
    )


def quantize_symm(x, bit_width: int, *, channel_axis: int | None = None) -> QuantizedTensor:
    """Scale by max|x| onto signed levels symmetric around an exact zero."""
    x = _as_tensor(x)
    _check_uniform_input(x, bit_width)
    work, groups = _grouped(x, channel_axis)
    max_abs = np.abs(work).max(axis=1)
    qmax = float((1 << (bit_width - 1)) - 1)
    scale = np.divide(qmax, max_abs, out=np.zeros_like(max_abs), where=max_abs > 0)
    codes = round_half_away(work * scale[:, None])
    codes = np.clip(codes, -qmax, qmax).astype(np.int32)
    params = SymmParams(max_abs.astype(np.float32))
    return QuantizedTensor(
        x.name, QuantScheme.SYMM, bit_width, x.shape, params,
        codes=codes.reshape(-1), channel_axis=None if groups == 1 else 0,
    )


def quantize_pow2(x, *, exponent_bits: int = DEFAULT_EXPONENT_BITS) -> QuantizedTensor:
    """Snap each value to the nearest signed power of two.

    The exponent window covers the tensor's own nonzero magnitudes,
    shrunk to at most ``2^exponent_bits - 1`` levels (one code per element
    is reserved for exact zero) and kept inside the f32 normal range.
    Magnitudes below half of the smallest level flush to zero; the rest
    clamp onto the window.
    """
    if not 1 <= exponent_bits <= 7:
        raise ValueError(f"exponent bits {exponent_bits} outside supported range [1, 7]")
    x = _as_tensor(x)
    if x.count == 0:
        raise ValueError(f"tensor {x.name!r} is empty")
    x.validate_finite()

    flat = x.data.astype(np.float64)
    mag = np.abs(flat)
    nonzero = mag > 0.0
    bit_width = exponent_bits + 1

    if not nonzero.any():
        params = Pow2Params(np.zeros(1, np.int32), np.zeros(1, np.int32))
        return QuantizedTensor(
            x.name, QuantScheme.POW2, bit_width, x.shape, params,
            signs=np.zeros(x.count, np.int8), exponents=np.zeros(x.count, np.int32),
        )

    levels = (1 << exponent_bits) - 1
    e_max = int(round_half_away(np.log2(mag[nonzero].max())))
    e_max = min(127, max(e_max, -126))
    e_min = int(round_half_away(np.log2(mag[nonzero].min())))
    e_min = max(e_min, e_max - (levels - 1), -126)

    raw = np.zeros_like(flat)
    raw[nonzero] = round_half_away(np.log2(mag[nonzero]))
    exponents = np.clip(raw, e_min, e_max).astype(np.int32)
    keep = mag >= 2.0 ** (e_min - 1)
    signs = np.where(keep, np.sign(flat), 0.0).astype(np.int8)
    exponents = np.where(keep, exponents, 0).astype(np.int32)

    params = Pow2Params(np.array([e_min], np.int32), np.array([e_max], np.int32))
    return QuantizedTensor(
        x.name, QuantScheme.POW2, bit_width, x.shape, params,
        signs=signs, exponents=exponents,
    )


def level_spacing(q: QuantizedTensor) -> np.ndarray:
    """Per-group distance between adjacent levels (uniform schemes only)."""
    if q.scheme is QuantScheme.ASYMM:
        span = q.params.max_val.astype(np.float64) - q.params.min_val.astype(np.float64)
        return span / ((1 << q.bit_width) - 1)
    if q.scheme is QuantScheme.SYMM:
        return q.params.max_abs.astype(np.float64) / ((1 << (q.bit_width - 1)) - 1)
    raise ValueError("power-of-two quantization has no uniform level spacing")


def dequantize(q: QuantizedTensor) -> Tensor:
    """Exact inverse of the level mapping; output is f32."""
    groups = q.group_count()
    if q.scheme is QuantScheme.POW2:
        values = q.signs.astype(np.float64) * np.exp2(q.exponents.astype(np.float64))
    elif q.scheme is QuantScheme.ASYMM:
        delta = level_spacing(q)
        lo = q.params.min_val.astype(np.float64)
        work = q.codes.astype(np.float64).reshape(groups, -1)
        values = work * delta[:, None] + lo[:, None]
    else:
        delta = level_spacing(q)
        work = q.codes.astype(np.float64).reshape(groups, -1)
        values = work * delta[:, None]
    return Tensor(q.name, q.shape, values.reshape(-1).astype(np.float32))


def quantize_tensor(
    x,
    scheme: QuantScheme,
    bit_width: int | None = None,
    *,
    channel_axis: int | None = None,
    exponent_bits: int = DEFAULT_EXPONENT_BITS,
) -> QuantizedTensor:
    """Dispatch to one scheme; pow2 ignores bit_width and channel_axis."""
    scheme = QuantScheme(scheme)
    if scheme is QuantScheme.POW2:
        return quantize_pow2(x, exponent_bits=exponent_bits)
    if bit_width is None:
        raise ValueError(f"{scheme.value} quantization requires a bit width")
    if scheme is QuantScheme.ASYMM:
        return quantize_asymm(x, bit_width, channel_axis=channel_axis)
    return quantize_symm(x, bit_width, channel_axis=channel_axis)


@dataclass
class ModelQuantization:
    """Simulated-quantization model plus its packed form and skip notes."""

    model: ModelFile
    packed: PackedQuantModel | None
    quantized_names: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def _param_tensor_names(
    model: ModelFile, quantize_bias: bool, quantize_bn_stats: bool
) -> tuple[list[str], list[str]]:
    """Names of quantizable tensors, in graph order, plus skip warnings."""
    names: list[str] = []
    warnings: list[str] = []
    seen: set[str] = set()
    for index, (kind, attrs) in enumerate(iter_graph_lines(model.graph)):
        if kind in _WEIGHT_KEYS:
            keys = _WEIGHT_KEYS[kind] + (_BIAS_KEYS[kind] if quantize_bias else ())
        elif kind == "batchnorm":
            keys = _BN_LEARNED + (_BN_STATS if quantize_bn_stats else ())
        elif kind in _STATELESS_KINDS:
            continue
        else:
            refs = sorted(v for k, v in attrs.items() if k in GRAPH_REF_KEYS)
            if refs:
                warnings.append(
                    f"layer {index} kind {kind!r} is not quantizable; left as-is: {', '.join(refs)}"
                )
            continue
        for key in keys:
            name = attrs.get(key)
            if name and name not in seen:
                seen.add(name)
                names.append(name)
    return names, warnings


def quantize_model(
    model: ModelFile,
    scheme: QuantScheme,
    bit_width: int | None = None,
    *,
    granularity: str = "tensor",
    quantize_bias: bool = False,
    quantize_bn_stats: bool = True,
    exponent_bits: int = DEFAULT_EXPONENT_BITS,
) -> ModelQuantization:
    """Replace parameter tensors with their quantize->dequantize images.

    Returns the simulated-quantization model for evaluation together with
    the packed form for size accounting.  ``bit_width=32`` is a no-op
    passthrough.  Non-parameter tensors (and biases, unless requested) are
    untouched.
    """
    scheme = QuantScheme(scheme)
    model.validate()
    if granularity not in ("tensor", "channel"):
        raise ValueError(f"unknown granularity {granularity!r}")

    names, warnings = _param_tensor_names(model, quantize_bias, quantize_bn_stats)
    if bit_width == FP32_SENTINEL:
        return ModelQuantization(model, None, names, warnings)

    channel_axis = 0 if granularity == "channel" else None
    if scheme is QuantScheme.POW2 and channel_axis is not None:
        warnings.append("pow2 quantization is per-tensor; channel granularity ignored")
        channel_axis = None

    quantized: dict[str, QuantizedTensor] = {}
    for name in names:
        quantized[name] = quantize_tensor(
            model.tensor(name), scheme, bit_width,
            channel_axis=channel_axis, exponent_bits=exponent_bits,
        )

    tensors = [
        dequantize(quantized[t.name]) if t.name in quantized else t for t in model.tensors
    ]
    storage_bits = (exponent_bits + 1) if scheme is QuantScheme.POW2 else bit_width
    packed = pack_quantized([quantized[n] for n in names], scheme, storage_bits)
    return ModelQuantization(ModelFile(tensors, model.graph), packed, names, warnings)
