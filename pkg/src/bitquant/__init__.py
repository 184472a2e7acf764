"""Data-free weight quantization toolkit.

Quantize trained f32 weights to 2..8-bit uniform grids or signed powers
of two using nothing but the weights themselves, store the result with
true sub-byte packing, evaluate accuracy with a built-in forward-pass
engine, recover low-bit accuracy by merging confusable classes, and
measure compression and shift-kernel effects.
"""

from .class_cluster import (
    ClassGrouping,
    evaluate_grouped_scores,
    group_confusion,
    propose_merge,
    regroup_eval,
)
from .compress_report import SizeReport, SizeRow, distinct_symbols, measure_sizes
from .distribution_stats import (
    BitEfficiencyReport,
    ChannelQuartiles,
    WeightHistogram,
    bit_efficiency,
    channel_quartiles,
    weight_histogram,
)
from .micro_infer import (
    ConfusionMatrix,
    Dataset,
    EvalResult,
    GraphError,
    ModelGraph,
    SweepRow,
    bit_sweep,
    build_graph,
    evaluate,
    fold_batchnorm,
    forward,
    load_dataset,
    save_dataset,
)
from .quant_core import (
    FP32_SENTINEL,
    ModelQuantization,
    QuantizedTensor,
    dequantize,
    quantize_asymm,
    quantize_model,
    quantize_pow2,
    quantize_symm,
    quantize_tensor,
    round_half_away,
)
from .shift_bench import (
    BenchRow,
    FixedPointActivations,
    ShiftWeights,
    bench_latency,
    multiply_dense,
    reconstruct_weights,
    shift_dense,
    to_shift_weights,
)
from .tensor_store import (
    ModelCorruptionError,
    ModelFile,
    ModelFormatError,
    ModelValidationError,
    PackedQuantModel,
    QuantScheme,
    Tensor,
    load_model,
    load_packed,
    pack_quantized,
    save_model,
    save_packed,
    unpack_quantized,
)

__version__ = "0.1.0"
