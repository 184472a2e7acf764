"""Command-line entry point.

Subcommands mirror the toolkit workflows: ``quantize`` writes simulated
and packed models plus a bit-efficiency CSV, ``eval`` runs accuracy
sweeps, ``cluster`` merges confusable classes from a confusion CSV,
``report`` measures packed/compressed sizes and exports distribution
stats, ``bench`` times the shift kernel against fp32, and
``make-fixture`` regenerates the shipped demo task.

Exit codes: 0 success, 2 usage or input validation, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import fixtures
from .class_cluster import evaluate_grouped_scores, propose_merge, regroup_eval
from .compress_report import SizeReport, measure_sizes
from .distribution_stats import (
    bit_efficiency,
    bit_efficiency_csv,
    channel_quartiles,
    histogram_csv,
    quartiles_csv,
    weight_histogram,
)
from .micro_infer import (
    ConfusionMatrix,
    EvalResult,
    bit_sweep,
    build_graph,
    fold_batchnorm,
    load_dataset,
)
from .quant_core import FP32_SENTINEL, QuantScheme, dequantize, quantize_model
from .tensor_store import (
    ModelCorruptionError,
    ModelFormatError,
    ModelValidationError,
    load_model,
    save_model,
    save_packed,
    unpack_quantized,
)


class UsageError(Exception):
    pass


def _parse_bits(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        try:
            n = int(part)
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad bit width {part!r}") from None
        if n != FP32_SENTINEL and not 2 <= n <= 8:
            raise argparse.ArgumentTypeError(f"bit width {n} outside [2, 8] (32 = passthrough)")
        out.append(n)
    if not out:
        raise argparse.ArgumentTypeError("empty bit width list")
    return out


def _parse_layers(text: str) -> list[tuple[int, int]]:
    layers = []
    for part in text.split(","):
        try:
            a, b = part.lower().split("x")
            layers.append((int(a), int(b)))
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad layer shape {part!r}, expected INxOUT") from None
    return layers


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p


def _quant_kwargs(args) -> dict:
    return {
        "granularity": args.granularity,
        "quantize_bias": args.quantize_bias,
        "quantize_bn_stats": not args.skip_bn_stats,
    }


def render_table(headers: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(headers)]
    lines = [
        "  ".join(h.ljust(w) for h, w in zip(headers, widths)).rstrip(),
        "  ".join("-" * w for w in widths),
    ]
    for row in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
    return "\n".join(lines)


def _header(cmd: str, seed: int) -> str:
    return f"# bitquant {cmd} seed={seed}"


def _load_input_model(args):
    _require_file(args.model, "model")
    model = load_model(args.model)
    if getattr(args, "fold_bn", False):
        model = fold_batchnorm(model)
    return model


def _width_label(n: int) -> str:
    return "fp32" if n == FP32_SENTINEL else f"{n}bit"


def cmd_quantize(args) -> int:
    model = _load_input_model(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    print(_header("quantize", args.seed))

    for n in args.bits:
        quant = quantize_model(model, args.scheme, n, **_quant_kwargs(args))
        for note in quant.warnings:
            print(f"warning: {note}", file=sys.stderr)
        label = _width_label(quant.packed.bit_width if quant.packed else n)
        stem = f"{args.scheme.value}_{label}"

        written = [f"quantized_{stem}.bqnt"]
        save_model(quant.model, out / written[0])
        reports = []
        if quant.packed is not None:
            save_packed(quant.packed, out / f"packed_{stem}.bqpk")
            written.append(f"packed_{stem}.bqpk")
            width = quant.packed.bit_width
            for q in unpack_quantized(quant.packed):
                reports.append(bit_efficiency(model.tensor(q.name), dequantize(q), width))
        csv_text = f"{_header('quantize', args.seed)} scheme={args.scheme.value} bits={label}\n"
        csv_text += bit_efficiency_csv(reports)
        (out / f"bit_efficiency_{stem}.csv").write_text(csv_text)
        written.append(f"bit_efficiency_{stem}.csv")
        print("wrote " + " ".join(written))
    return 0


def cmd_eval(args) -> int:
    model = _load_input_model(args)
    _require_file(args.data, "dataset")
    dataset = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    print(_header("eval", args.seed))
    if args.scheme is QuantScheme.POW2 and any(n != FP32_SENTINEL for n in args.bits):
        print("note: pow2 has no bit-width knob; evaluating its single configuration")

    rows = bit_sweep(model, dataset, args.scheme, args.bits, **_quant_kwargs(args))
    table = []
    csv_lines = [
        f"{_header('eval', args.seed)} scheme={args.scheme.value}",
        "bit_width,accuracy,packed_payload_bytes,model_bytes",
    ]
    for row in rows:
        label = _width_label(row.bit_width)
        table.append(
            [label, f"{row.result.accuracy:.4f}", str(row.packed_payload_bytes), str(row.model_bytes)]
        )
        csv_lines.append(
            f"{row.bit_width},{row.result.accuracy:.6f},{row.packed_payload_bytes},{row.model_bytes}"
        )
        (out / f"confusion_{args.scheme.value}_{label}.csv").write_text(
            row.result.confusion.to_csv()
        )
    print(render_table(["bits", "accuracy", "packed_bytes", "model_bytes"], table))
    (out / "accuracy.csv").write_text("\n".join(csv_lines) + "\n")
    return 0


def cmd_cluster(args) -> int:
    _require_file(args.confusion, "confusion CSV")
    confusion = ConfusionMatrix.from_csv(Path(args.confusion).read_text())
    k = confusion.class_count
    if args.merges >= k - 1:
        raise UsageError(f"--merges {args.merges} must be < {k - 1} for {k} classes")

    print(_header("cluster", args.seed))
    total = confusion.total()
    before = EvalResult(confusion.correct() / total if total else 0.0, confusion, total)
    grouping = propose_merge(confusion, args.merges)
    after = regroup_eval(before, grouping)

    print(f"accuracy before grouping: {before.accuracy:.4f}")
    print(f"accuracy after grouping:  {after.accuracy:.4f}")
    print("groups:")
    print(grouping.to_text(), end="")

    if args.logit_sum_grouping:
        if not (args.model and args.data):
            raise UsageError("--logit-sum-grouping needs --model and --data to re-evaluate")
        model = load_model(_require_file(args.model, "model"))
        dataset = load_dataset(_require_file(args.data, "dataset"))
        summed = evaluate_grouped_scores(build_graph(model), dataset, grouping)
        print(f"accuracy with summed scores: {summed.accuracy:.4f}")

    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "grouping.txt").write_text(grouping.to_text())
        (out / "grouped_confusion.csv").write_text(after.confusion.to_csv())
    return 0


def cmd_report(args) -> int:
    model = _load_input_model(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    print(_header("report", args.seed))

    schemes = args.schemes or [QuantScheme.ASYMM, QuantScheme.SYMM, QuantScheme.POW2]
    report = measure_sizes(model, schemes, args.bits, **_quant_kwargs(args))
    print(
        render_table(
            list(SizeReport.HEADERS),
            [
                [
                    r.scheme,
                    str(r.bit_width),
                    str(r.raw_fp32_bytes),
                    str(r.packed_bytes),
                    str(r.compressed_bytes),
                    f"{r.compression_ratio:.2f}",
                    str(r.distinct_symbols),
                ]
                for r in report.rows
            ],
        )
    )
    (out / "sizes.csv").write_text(f"{_header('report', args.seed)}\n" + report.to_csv())

    quartiles = [
        channel_quartiles(t) for t in model.tensors if len(t.shape) >= 2
    ]
    (out / "quartiles.csv").write_text(quartiles_csv(quartiles))
    histograms = [weight_histogram(t, args.bins) for t in model.tensors]
    (out / "histograms.csv").write_text(histogram_csv(histograms))
    print("wrote sizes.csv quartiles.csv histograms.csv")
    return 0


def cmd_bench(args) -> int:
    from .shift_bench import bench_csv, bench_latency

    print(_header("bench", args.seed))
    rows = bench_latency(args.layers, repetitions=args.reps, seed=args.seed)
    print(
        render_table(
            ["path", "layer", "median_ns", "iqr_ns"],
            [[r.path, r.layer_shape, f"{r.median_ns:.0f}", f"{r.iqr_ns:.0f}"] for r in rows],
        )
    )
    by_shape: dict[str, dict[str, float]] = {}
    for r in rows:
        by_shape.setdefault(r.layer_shape, {})[r.path] = r.median_ns
    for shape, meds in by_shape.items():
        ratio = meds["fp32_multiply"] / meds["integer_shift"]
        print(f"{shape}: fp32/shift median ratio {ratio:.2f} (informational, host-dependent)")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.csv").write_text(f"{_header('bench', args.seed)}\n" + bench_csv(rows))
    return 0


def cmd_make_fixture(args) -> int:
    print(_header("make-fixture", args.seed))
    summary = fixtures.make_fixture(args.out, args.seed)
    print(
        f"fp32={summary.fp32_accuracy:.4f} 8bit={summary.acc_8bit:.4f} "
        f"3bit={summary.acc_3bit:.4f} 2bit={summary.acc_2bit:.4f} "
        f"lift={summary.cluster_lift:.4f} pair={summary.top_pair} "
        f"ratio6={summary.uniform6_ratio:.2f}"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bitquant", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, model=True):
        if model:
            p.add_argument("model", help="input .bqnt model")
        p.add_argument("--seed", type=int, default=0, help="seed recorded in report headers")
        p.add_argument("--granularity", choices=["tensor", "channel"], default="tensor")
        p.add_argument("--quantize-bias", action="store_true", help="quantize bias tensors too")
        p.add_argument("--skip-bn-stats", action="store_true",
                       help="leave batchnorm mean/var unquantized")
        p.add_argument("--fold-bn", action="store_true",
                       help="fold batchnorm into preceding conv/dense first")

    p = sub.add_parser("quantize", help="write simulated + packed models and a BE report")
    common(p)
    p.add_argument("--scheme", type=QuantScheme, choices=list(QuantScheme), required=True)
    p.add_argument("--bits", type=_parse_bits, required=True, help="N or N,N,... in [2,8]")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(handler=cmd_quantize)

    p = sub.add_parser("eval", help="accuracy sweep over bit widths")
    common(p)
    p.add_argument("--data", required=True, help="evaluation dataset (.bqds)")
    p.add_argument("--scheme", type=QuantScheme, choices=list(QuantScheme), required=True)
    p.add_argument("--bits", type=_parse_bits, default=list(range(2, 9)))
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("cluster", help="merge confusable classes from a confusion CSV")
    p.add_argument("--confusion", required=True, help="confusion CSV from eval")
    p.add_argument("--merges", type=int, default=1, help="number of greedy merges")
    p.add_argument("--logit-sum-grouping", action="store_true",
                   help="also re-evaluate summing class scores within groups")
    p.add_argument("--model", help="model for --logit-sum-grouping")
    p.add_argument("--data", help="dataset for --logit-sum-grouping")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="optional output directory")
    p.set_defaults(handler=cmd_cluster)

    p = sub.add_parser("report", help="packed/compressed sizes and distribution stats")
    common(p)
    p.add_argument("--schemes", type=lambda s: [QuantScheme(x) for x in s.split(",")],
                   help="comma list, default asymm,symm,pow2")
    p.add_argument("--bits", type=_parse_bits, default=[6])
    p.add_argument("--bins", type=int, default=64, help="histogram bins for exports")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_report)

    p = sub.add_parser("bench", help="time fp32 vs shift dense kernels")
    p.add_argument("--layers", type=_parse_layers, default=[(256, 128), (512, 256)],
                   help="comma list of INxOUT shapes")
    p.add_argument("--reps", type=int, default=100, help="timed repetitions (>= 30)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="optional output directory for bench.csv")
    p.set_defaults(handler=cmd_bench)

    p = sub.add_parser("make-fixture", help="regenerate the shipped demo model/dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=fixtures.FIXTURE_SEED)
    p.set_defaults(handler=cmd_make_fixture)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.handler(args)
    except (
        UsageError,
        ModelFormatError,
        ModelCorruptionError,
        ModelValidationError,
        ValueError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures: I/O mid-run, internal errors
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main_entry() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    main_entry()
