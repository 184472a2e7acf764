import subprocess
import sys
from pathlib import Path

import pytest

from bitquant.cli import main

FIXTURE_DIR = Path(__file__).parent.parent / "fixtures"
GOLDEN_EVAL = Path(__file__).parent / "data" / "golden_eval.csv"
MODEL = str(FIXTURE_DIR / "student.bqnt")
DATA = str(FIXTURE_DIR / "eval.bqds")


class TestQuantizeCommand:
    def test_writes_three_artifacts(self, tmp_path):
        out = tmp_path / "q"
        code = main(["quantize", MODEL, "--scheme", "asymm", "--bits", "6", "--out", str(out)])
        assert code == 0
        assert (out / "quantized_asymm_6bit.bqnt").is_file()
        assert (out / "packed_asymm_6bit.bqpk").is_file()
        assert (out / "bit_efficiency_asymm_6bit.csv").is_file()

    def test_bits_out_of_range_is_usage_error(self, tmp_path, capsys):
        code = main(["quantize", MODEL, "--scheme", "asymm", "--bits", "9", "--out", str(tmp_path)])
        assert code == 2

    def test_reruns_are_byte_identical(self, tmp_path):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        for out in (out_a, out_b):
            assert main(
                ["quantize", MODEL, "--scheme", "symm", "--bits", "4", "--out", str(out)]
            ) == 0
        for name in ("quantized_symm_4bit.bqnt", "packed_symm_4bit.bqpk", "bit_efficiency_symm_4bit.csv"):
            assert (out_a / name).read_bytes() == (out_b / name).read_bytes()

    def test_missing_model_is_usage_error(self, tmp_path):
        code = main(["quantize", str(tmp_path / "no.bqnt"), "--scheme", "asymm",
                     "--bits", "6", "--out", str(tmp_path)])
        assert code == 2

    def test_pow2_uses_storage_width_label(self, tmp_path):
        out = tmp_path / "p"
        assert main(["quantize", MODEL, "--scheme", "pow2", "--bits", "6", "--out", str(out)]) == 0
        assert (out / "packed_pow2_5bit.bqpk").is_file()

    def test_fp32_passthrough_writes_no_packed_file(self, tmp_path, capsys):
        out = tmp_path / "f"
        assert main(["quantize", MODEL, "--scheme", "asymm", "--bits", "32", "--out", str(out)]) == 0
        assert (out / "quantized_asymm_fp32.bqnt").is_file()
        assert not (out / "packed_asymm_fp32.bqpk").exists()
        assert "packed" not in capsys.readouterr().out.splitlines()[-1]

    def test_channel_granularity_roundtrip(self, tmp_path):
        from bitquant.tensor_store import load_packed

        out = tmp_path / "c"
        assert main(["quantize", MODEL, "--scheme", "symm", "--bits", "5",
                     "--granularity", "channel", "--out", str(out)]) == 0
        packed = load_packed(out / "packed_symm_5bit.bqpk")
        by_name = {t.name: t for t in packed.tensors}
        assert len(by_name["conv1.w"].params.max_abs) == 8  # one group per out channel

    def test_fold_bn_flag(self, tmp_path):
        from bitquant.tensor_store import load_model as load

        out = tmp_path / "fb"
        assert main(["quantize", MODEL, "--scheme", "asymm", "--bits", "8",
                     "--fold-bn", "--out", str(out)]) == 0
        folded = load(out / "quantized_asymm_8bit.bqnt")
        assert "batchnorm" not in folded.graph


class TestEvalCommand:
    def test_full_sweep_emits_eight_rows(self, tmp_path):
        out = tmp_path / "e"
        code = main(["eval", MODEL, "--data", DATA, "--scheme", "asymm",
                     "--bits", "2,3,4,5,6,7,8", "--out", str(out)])
        assert code == 0
        lines = [l for l in (out / "accuracy.csv").read_text().splitlines() if l and not l.startswith("#")]
        assert len(lines) == 1 + 8  # header + fp32 + 7 widths
        assert lines[1].startswith("32,")
        assert (out / "confusion_asymm_fp32.csv").is_file()
        assert (out / "confusion_asymm_3bit.csv").is_file()

    def test_missing_dataset_is_usage_error(self, tmp_path):
        code = main(["eval", MODEL, "--data", str(tmp_path / "no.bqds"), "--scheme", "asymm",
                     "--bits", "8", "--out", str(tmp_path)])
        assert code == 2

    def test_matches_golden_table(self, tmp_path):
        out = tmp_path / "g"
        assert main(["eval", MODEL, "--data", DATA, "--scheme", "asymm",
                     "--bits", "2,3,4,5,6,7,8", "--out", str(out)]) == 0
        assert (out / "accuracy.csv").read_text() == GOLDEN_EVAL.read_text()


@pytest.fixture(scope="module")
def confusion_csv(tmp_path_factory):
    out = tmp_path_factory.mktemp("eval")
    assert main(["eval", MODEL, "--data", DATA, "--scheme", "asymm",
                 "--bits", "3", "--out", str(out)]) == 0
    return out / "confusion_asymm_3bit.csv"


class TestClusterCommand:
    def test_zero_merges_identity(self, confusion_csv, capsys):
        assert main(["cluster", "--confusion", str(confusion_csv), "--merges", "0"]) == 0
        text = capsys.readouterr().out
        before = next(l for l in text.splitlines() if "before" in l).split(":")[1].strip()
        after = next(l for l in text.splitlines() if "after" in l).split(":")[1].strip()
        assert before == after

    def test_too_many_merges_rejected(self, confusion_csv):
        assert main(["cluster", "--confusion", str(confusion_csv), "--merges", "9"]) == 2

    def test_fixture_lift_reproduced(self, confusion_csv, tmp_path, capsys):
        assert main(["cluster", "--confusion", str(confusion_csv), "--merges", "1",
                     "--out", str(tmp_path)]) == 0
        text = capsys.readouterr().out
        before = float(next(l for l in text.splitlines() if "before" in l).split(":")[1])
        after = float(next(l for l in text.splitlines() if "after" in l).split(":")[1])
        assert after > before
        assert (tmp_path / "grouping.txt").read_text().splitlines()[0] == "class_0,class_1"

    def test_logit_sum_needs_model_and_data(self, confusion_csv):
        assert main(["cluster", "--confusion", str(confusion_csv), "--merges", "1",
                     "--logit-sum-grouping"]) == 2

    def test_logit_sum_variant_runs(self, confusion_csv, capsys):
        assert main(["cluster", "--confusion", str(confusion_csv), "--merges", "1",
                     "--logit-sum-grouping", "--model", MODEL, "--data", DATA]) == 0
        assert "summed scores" in capsys.readouterr().out


class TestReportCommand:
    def test_writes_reports(self, tmp_path):
        out = tmp_path / "r"
        assert main(["report", MODEL, "--bits", "6,32", "--out", str(out)]) == 0
        sizes = (out / "sizes.csv").read_text()
        assert "asymm,6," in sizes
        assert "pow2,5," in sizes
        assert (out / "quartiles.csv").is_file()
        assert (out / "histograms.csv").is_file()

    def test_deterministic(self, tmp_path):
        outs = []
        for sub in ("a", "b"):
            out = tmp_path / sub
            assert main(["report", MODEL, "--bits", "6", "--out", str(out)]) == 0
            outs.append((out / "sizes.csv").read_bytes())
        assert outs[0] == outs[1]


class TestBenchCommand:
    def test_emits_csv_with_both_paths(self, tmp_path, capsys):
        out = tmp_path / "b"
        assert main(["bench", "--layers", "64x32", "--reps", "30", "--out", str(out)]) == 0
        text = (out / "bench.csv").read_text()
        assert "fp32_multiply,64x32" in text
        assert "integer_shift,64x32" in text
        assert "median_ns" in text

    def test_low_reps_rejected(self):
        assert main(["bench", "--layers", "8x4", "--reps", "5"]) == 2


class TestExitCodes:
    def test_unknown_flag_is_usage_error(self):
        assert main(["quantize", MODEL, "--scheme", "asymm", "--bits", "6",
                     "--out", "/tmp/x", "--frobnicate"]) == 2

    def test_runtime_write_failure_is_exit_one(self):
        # out dir nested under a regular file cannot be created
        code = main(["quantize", MODEL, "--scheme", "asymm", "--bits", "6",
                     "--out", MODEL + "/sub"])
        assert code == 1

    def test_seed_printed_in_header(self, tmp_path, capsys):
        assert main(["report", MODEL, "--bits", "6", "--seed", "7", "--out", str(tmp_path)]) == 0
        out = capsys.readouterr().out
        assert out.splitlines()[0] == "# bitquant report seed=7"


def test_console_entry_point_help():
    proc = subprocess.run(
        [sys.executable, "-m", "bitquant.cli", "--help"], capture_output=True, text=True
    )
    assert proc.returncode == 0
    assert "quantize" in proc.stdout
