"""Weight distribution analysis: per-channel quartiles, histograms and a
range/density bit-efficiency summary for quantization results.

Bit efficiency is reported as a pair, never one scalar: how much of the
original value range the dequantized tensor still covers, and how far the
two binned densities have drifted (one minus histogram intersection).
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .tensor_store import Tensor

BE_BINS = 64


@dataclass(frozen=True)
class ChannelQuartiles:
    tensor_name: str
    channel_axis: int
    values: np.ndarray  # (channels, 5): min, q1, median, q3, max

    @property
    def channel_count(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class WeightHistogram:
    tensor_name: str
    bin_edges: np.ndarray
    counts: np.ndarray


@dataclass(frozen=True)
class BitEfficiencyReport:
    tensor_name: str
    range_coverage: float
    density_divergence: float
    levels_used: int
    levels_available: int


def channel_quartiles(x: Tensor, channel_axis: int = 0) -> ChannelQuartiles:
    """Five-number summary per channel slice, type-7 linear interpolation."""
    if not 0 <= channel_axis < len(x.shape):
        raise ValueError(f"channel axis {channel_axis} out of range for shape {x.shape}")
    arr = np.moveaxis(x.reshaped(), channel_axis, 0).reshape(x.shape[channel_axis], -1)
    stats = np.percentile(arr.astype(np.float64), [0, 25, 50, 75, 100], axis=1).T
    return ChannelQuartiles(x.name, channel_axis, stats)


def weight_histogram(x: Tensor, bins: int = BE_BINS) -> WeightHistogram:
    """Equal-width histogram over [min, max]; rightmost bin is closed."""
    if bins < 1:
        raise ValueError(f"bin count must be positive, got {bins}")
    counts, edges = np.histogram(x.data.astype(np.float64), bins=bins)
    return WeightHistogram(x.name, edges, counts.astype(np.int64))


def _intersection_divergence(a: np.ndarray, b: np.ndarray, bins: int) -> float:
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if hi == lo:
        return 0.0
    edges = np.linspace(lo, hi, bins + 1)
    pa, _ = np.histogram(a, bins=edges)
    pb, _ = np.histogram(b, bins=edges)
    pa = pa / pa.sum()
    pb = pb / pb.sum()
    return float(1.0 - np.minimum(pa, pb).sum())


def bit_efficiency(
    original: Tensor, dequantized: Tensor, bit_width: int, *, bins: int = BE_BINS
) -> BitEfficiencyReport:
    """Range coverage and density drift of a quantized tensor vs its source."""
    if original.shape != dequantized.shape:
        raise ValueError(
            f"shape mismatch: {original.shape} vs {dequantized.shape} "
            f"({original.name!r} vs {dequantized.name!r})"
        )
    a = original.data.astype(np.float64)
    b = dequantized.data.astype(np.float64)
    span_a = float(a.max() - a.min())
    span_b = float(b.max() - b.min())
    coverage = 1.0 if span_a == 0.0 else min(max(span_b / span_a, 0.0), 1.0)
    divergence = _intersection_divergence(a, b, bins)
    return BitEfficiencyReport(
        original.name,
        coverage,
        divergence,
        levels_used=int(np.unique(b).size),
        levels_available=1 << bit_width,
    )


def quartiles_csv(reports: list[ChannelQuartiles]) -> str:
    """One row per (tensor, channel)."""
    out = io.StringIO()
    out.write("# per-channel weight quartiles\n")
    out.write("tensor,channel,min,q1,median,q3,max\n")
    for rep in reports:
        for ch, row in enumerate(rep.values):
            out.write(f"{rep.tensor_name},{ch}," + ",".join(f"{v:.9g}" for v in row) + "\n")
    return out.getvalue()


def histogram_csv(reports: list[WeightHistogram]) -> str:
    """One row per bin; edges are [left, right) except the last, which is closed."""
    out = io.StringIO()
    out.write("# weight histograms\n")
    out.write("tensor,bin,left_edge,right_edge,count\n")
    for rep in reports:
        for i, count in enumerate(rep.counts):
            out.write(
                f"{rep.tensor_name},{i},{rep.bin_edges[i]:.9g},{rep.bin_edges[i + 1]:.9g},{int(count)}\n"
            )
    return out.getvalue()


def bit_efficiency_csv(reports: list[BitEfficiencyReport]) -> str:
    out = io.StringIO()
    out.write("# per-tensor bit efficiency (range coverage + density divergence)\n")
    out.write("tensor,range_coverage,density_divergence,levels_used,levels_available\n")
    for rep in reports:
        out.write(
            f"{rep.tensor_name},{rep.range_coverage:.9g},{rep.density_divergence:.9g},"
            f"{rep.levels_used},{rep.levels_available}\n"
        )
    return out.getvalue()
