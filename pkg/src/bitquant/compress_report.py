"""On-disk size accounting for packed quantized models under deflate.

One general-purpose deflate codec (zlib, maximum level) stands in for the
gzip/7zip pair: what drives the difference between schemes is the symbol
alphabet the codec gets to build a dictionary over, so the report carries
the distinct-symbol count next to the byte sizes.  Compression runs over
the concatenated packed tensor payloads; headers stay out of the ratios.
"""

from __future__ import annotations

import io
import zlib
from dataclasses import dataclass

import numpy as np

from .quant_core import FP32_SENTINEL, QuantScheme, quantize_model
from .tensor_store import ModelFile, PackedQuantModel, unpack_codes

COMPRESSION_LEVEL = 9
# Deflate never expands an incompressible stream by more than stored-block
# framing; 64 bytes is a safe cap at desk scale.
CODEC_OVERHEAD_BYTES = 64


@dataclass(frozen=True)
class SizeRow:
    scheme: str
    bit_width: int
    raw_fp32_bytes: int
    packed_bytes: int
    compressed_bytes: int
    compression_ratio: float
    distinct_symbols: int


@dataclass
class SizeReport:
    rows: list[SizeRow]

    HEADERS = (
        "scheme",
        "bit_width",
        "raw_fp32_bytes",
        "packed_bytes",
        "compressed_bytes",
        "compression_ratio",
        "distinct_symbols",
    )

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("# packed/compressed sizes; ratio = raw_fp32 / compressed\n")
        out.write(",".join(self.HEADERS) + "\n")
        for r in self.rows:
            out.write(
                f"{r.scheme},{r.bit_width},{r.raw_fp32_bytes},{r.packed_bytes},"
                f"{r.compressed_bytes},{r.compression_ratio:.4f},{r.distinct_symbols}\n"
            )
        return out.getvalue()


def distinct_symbols(packed: PackedQuantModel) -> int:
    """Distinct stored code patterns across the packed payloads.

    This is the symbol alphabet a dictionary codec gets to work with: at
    most 2^n for uniform schemes, at most 2 * levels + 1 for pow2, whose
    sign/exponent codes are relative to each tensor's window.
    """
    seen: set[int] = set()
    for t in packed.tensors:
        seen.update(np.unique(unpack_codes(t.payload, packed.bit_width, t.count)).tolist())
    return len(seen)


def measure_sizes(
    model: ModelFile,
    schemes: list[QuantScheme],
    bit_widths: list[int],
    **quant_kwargs,
) -> SizeReport:
    """Packed and deflate-compressed sizes per (scheme, bit width) cell.

    ``bit_width=32`` rows are the unpacked passthrough.  The pow2 scheme
    has no bit-width knob and contributes a single row at its storage
    width.  Byte counts cover the tensors selected for quantization.
    """
    rows: list[SizeRow] = []
    for scheme in [QuantScheme(s) for s in schemes]:
        widths = [None] if scheme is QuantScheme.POW2 else list(bit_widths)
        for n in widths:
            quant = quantize_model(model, scheme, n, **quant_kwargs)
            if n == FP32_SENTINEL:
                scope = [model.tensor(nm) for nm in quant.quantized_names]
                payload = b"".join(t.data.astype("<f4").tobytes() for t in scope)
                raw = len(payload)
                packed_bytes = raw
                distinct = int(np.unique(np.concatenate([t.data for t in scope])).size)
                width_label = FP32_SENTINEL
            else:
                payload = quant.packed.concat_payload()
                raw = sum(4 * t.count for t in quant.packed.tensors)
                packed_bytes = quant.packed.payload_bytes()
                distinct = distinct_symbols(quant.packed)
                width_label = quant.packed.bit_width
            compressed = len(zlib.compress(payload, COMPRESSION_LEVEL))
            rows.append(
                SizeRow(
                    scheme.value,
                    width_label,
                    raw,
                    packed_bytes,
                    compressed,
                    raw / compressed if compressed else float("inf"),
                    distinct,
                )
            )
    return SizeReport(rows)
