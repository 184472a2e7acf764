import numpy as np
import pytest

from bitquant.distribution_stats import (
    bit_efficiency,
    bit_efficiency_csv,
    channel_quartiles,
    histogram_csv,
    quartiles_csv,
    weight_histogram,
)
from bitquant.quant_core import dequantize, quantize_asymm, quantize_pow2, quantize_symm
from bitquant.tensor_store import Tensor

from oracles import histogram_intersection, sorted_quartiles


def tensor(values, name="t", shape=None):
    arr = np.asarray(values, dtype=np.float32)
    if shape is not None:
        arr = arr.reshape(shape)
    return Tensor.from_array(name, arr)


class TestQuartiles:
    def test_symmetric_five_numbers(self):
        rep = channel_quartiles(tensor([[1, 2, 3, 4, 5]]), 0)
        np.testing.assert_allclose(rep.values[0], [1, 2, 3, 4, 5])

    def test_constant_channel(self):
        rep = channel_quartiles(tensor([[7.0, 7.0, 7.0]]), 0)
        np.testing.assert_allclose(rep.values[0], [7, 7, 7, 7, 7])

    def test_matches_sort_oracle(self):
        rng = np.random.default_rng(31)
        x = tensor(rng.normal(0, 3, (5, 40)), shape=(5, 40))
        rep = channel_quartiles(x, 0)
        for ch in range(5):
            np.testing.assert_allclose(
                rep.values[ch], sorted_quartiles(x.reshaped()[ch]), rtol=1e-12
            )

    def test_channel_axis_selects_slices(self):
        x = tensor(np.arange(12, dtype=np.float32), shape=(3, 4))
        rep = channel_quartiles(x, 1)
        assert rep.channel_count == 4
        np.testing.assert_allclose(rep.values[0], sorted_quartiles(x.reshaped()[:, 0]))

    def test_axis_out_of_range(self):
        with pytest.raises(ValueError):
            channel_quartiles(tensor([1.0, 2.0]), 1)

    def test_monotone_invariant(self):
        rng = np.random.default_rng(32)
        rep = channel_quartiles(tensor(rng.normal(size=(8, 16)), shape=(8, 16)), 0)
        for row in rep.values:
            assert row[0] <= row[1] <= row[2] <= row[3] <= row[4]


class TestHistogram:
    def test_two_even_bins(self):
        rep = weight_histogram(tensor([0.0, 1.0, 2.0, 3.0]), 2)
        np.testing.assert_array_equal(rep.counts, [2, 2])

    def test_constant_tensor_single_bin(self):
        rep = weight_histogram(tensor([4.0, 4.0, 4.0]), 8)
        assert (rep.counts > 0).sum() == 1
        assert rep.counts.sum() == 3

    def test_counts_sum_to_element_count(self):
        rng = np.random.default_rng(33)
        x = tensor(rng.normal(size=777))
        rep = weight_histogram(x, 13)
        assert rep.counts.sum() == 777
        assert len(rep.bin_edges) == 14

    def test_bins_validated(self):
        with pytest.raises(ValueError):
            weight_histogram(tensor([1.0]), 0)


class TestBitEfficiency:
    def test_identity_is_perfect(self):
        x = tensor(np.linspace(-1, 1, 128))
        rep = bit_efficiency(x, x, 8)
        assert rep.range_coverage == 1.0
        assert rep.density_divergence == 0.0

    def test_asymm_coverage_is_one(self):
        rng = np.random.default_rng(34)
        for n in (2, 4, 8):
            x = tensor(rng.uniform(-5, 5, 256))
            rep = bit_efficiency(x, dequantize(quantize_asymm(x, n)), n)
            assert rep.range_coverage == 1.0

    def test_symm_coverage_at_most_one(self):
        rng = np.random.default_rng(35)
        x = tensor(np.abs(rng.uniform(1, 5, 256)))  # one-sided range
        rep = bit_efficiency(x, dequantize(quantize_symm(x, 4)), 4)
        assert 0.0 <= rep.range_coverage <= 1.0

    def test_symm_coverage_exact_for_sign_symmetric_range(self):
        x = tensor([-3.0, -1.0, 0.5, 3.0])  # max == -min, both endpoints on the grid
        rep = bit_efficiency(x, dequantize(quantize_symm(x, 6)), 6)
        assert rep.range_coverage == 1.0

    def test_divergence_matches_overlap_oracle(self):
        rng = np.random.default_rng(36)
        x = tensor(rng.normal(0, 1, 2048))
        deq = dequantize(quantize_pow2(x))
        rep = bit_efficiency(x, deq, 5)
        oracle = 1.0 - histogram_intersection(x.data, deq.data, 64)
        assert abs(rep.density_divergence - oracle) < 1e-9

    def test_pow2_levels_bounded(self):
        rng = np.random.default_rng(37)
        x = tensor(rng.normal(0, 1, 2048))
        q = quantize_pow2(x)
        rep = bit_efficiency(x, dequantize(q), q.bit_width)
        span = int(q.params.exponent_max[0]) - int(q.params.exponent_min[0]) + 1
        assert rep.levels_used <= 2 * span + 1

    def test_constant_original_coverage_one(self):
        x = tensor([2.0, 2.0, 2.0])
        rep = bit_efficiency(x, x, 4)
        assert rep.range_coverage == 1.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            bit_efficiency(tensor([1.0, 2.0]), tensor([1.0]), 4)

    def test_levels_used_counts_distinct_values(self):
        x = tensor([0.0, 0.0, 1.0, 1.0, 2.0])
        rep = bit_efficiency(x, x, 4)
        assert rep.levels_used == 3
        assert rep.levels_available == 16


class TestCsvExports:
    def test_quartiles_rows(self):
        rng = np.random.default_rng(38)
        reps = [channel_quartiles(tensor(rng.normal(size=(3, 7)), name="w", shape=(3, 7)), 0)]
        text = quartiles_csv(reps)
        lines = text.strip().splitlines()
        assert lines[1] == "tensor,channel,min,q1,median,q3,max"
        assert len(lines) == 2 + 3
        assert lines[2].startswith("w,0,")

    def test_histogram_rows(self):
        reps = [weight_histogram(tensor([0.0, 1.0, 2.0, 3.0], name="w"), 2)]
        lines = histogram_csv(reps).strip().splitlines()
        assert len(lines) == 2 + 2
        assert lines[2].split(",")[:2] == ["w", "0"]

    def test_bit_efficiency_rows(self):
        x = tensor(np.linspace(0, 1, 32), name="w")
        text = bit_efficiency_csv([bit_efficiency(x, x, 6)])
        assert "w,1,0,32,64" in text
