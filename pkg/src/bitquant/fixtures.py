"""Deterministic desk-scale classification fixture.

The task is synthetic so the whole pipeline stays self-contained: a
seeded random "teacher" CNN labels seeded random inputs, and the shipped
student weight file is a noisy copy of the teacher, standing in for a
model trained elsewhere.  Inputs are drawn around per-class prototype
images; prototypes for classes 0 and 1 are deliberately close together,
so those two classes overlap and become the first casualties of low-bit
quantization.

Everything is a pure function of the seed.  ``make_fixture`` also checks
the margins the test suite relies on (8-bit near baseline, 2-bit
collapsed, a strict clustering lift at 3-bit, compression floors) and
refuses to write a fixture that does not exhibit them.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .class_cluster import propose_merge, regroup_eval
from .micro_infer import Dataset, build_graph, evaluate, forward, save_dataset
from .quant_core import QuantScheme, quantize_model
from .tensor_store import ModelFile, Tensor, save_model

FIXTURE_SEED = 42
CLASS_COUNT = 10
SAMPLE_COUNT = 2000
INPUT_SHAPE = (1, 8, 8)

# Tuned once against the validation margins below and then frozen.
PROTO_OVERLAP = 0.25  # distance scale between class-0 and class-1 prototypes
INPUT_NOISE = 0.45  # sample spread around each prototype
LOGIT_SCALE = 2.0  # sharpness of the teacher's final layer
STUDENT_NOISE = 0.02  # relative perturbation of the shipped student

MODEL_FILENAME = "student.bqnt"
DATASET_FILENAME = "eval.bqds"

_GRAPH = """\
input shape=1x8x8
conv2d weight=conv1.w stride=1 pad=1
batchnorm scale=bn1.scale shift=bn1.shift mean=bn1.mean var=bn1.var eps=1e-05
relu
maxpool size=2 stride=2
flatten
dense weight=fc1.w bias=fc1.b
relu
dense weight=fc2.w bias=fc2.b
softmax
"""

_BACKBONE_GRAPH = "\n".join(_GRAPH.splitlines()[:-2]) + "\n"


def _backbone_tensors(rng: np.random.Generator) -> list[Tensor]:
    return [
        Tensor.from_array("conv1.w", rng.normal(0.0, 0.5, (8, 1, 3, 3))),
        Tensor.from_array("bn1.scale", rng.uniform(0.8, 1.2, 8)),
        Tensor.from_array("bn1.shift", rng.normal(0.0, 0.05, 8)),
        Tensor.from_array("bn1.mean", rng.normal(0.0, 0.05, 8)),
        Tensor.from_array("bn1.var", rng.uniform(0.8, 1.2, 8)),
        Tensor.from_array("fc1.w", rng.normal(0.0, 0.12, (32, 128))),
        Tensor.from_array("fc1.b", rng.normal(0.0, 0.05, 32)),
    ]


def _prototypes(rng: np.random.Generator) -> np.ndarray:
    protos = rng.normal(0.0, 1.0, (CLASS_COUNT,) + INPUT_SHAPE)
    protos[1] = protos[0] + PROTO_OVERLAP * rng.normal(0.0, 1.0, INPUT_SHAPE)
    return protos.astype(np.float32)


def build_teacher(seed: int = FIXTURE_SEED) -> tuple[ModelFile, np.ndarray]:
    """Teacher network and its class prototypes.

    The final layer is a prototype matcher: each class row points along
    the backbone features of that class's prototype image, which keeps
    the random network's labels roughly balanced across classes.
    """
    rng = np.random.default_rng(seed)
    tensors = _backbone_tensors(rng)
    protos = _prototypes(rng)

    backbone = ModelFile(list(tensors), _BACKBONE_GRAPH)
    graph = build_graph(backbone)
    feats = np.stack([forward(graph, p) for p in protos])
    rows = LOGIT_SCALE * feats / np.linalg.norm(feats, axis=1, keepdims=True)

    tensors = tensors + [
        Tensor.from_array("fc2.w", rows),
        Tensor.from_array("fc2.b", np.zeros(CLASS_COUNT)),
    ]
    return ModelFile(tensors, _GRAPH), protos


def build_dataset(
    teacher: ModelFile, protos: np.ndarray, seed: int = FIXTURE_SEED
) -> Dataset:
    """Samples around the prototypes, labeled by the teacher itself."""
    rng = np.random.default_rng(seed + 1)
    graph = build_graph(teacher)
    centers = protos[np.arange(SAMPLE_COUNT) % CLASS_COUNT]
    features = centers + INPUT_NOISE * rng.normal(0.0, 1.0, centers.shape)
    features = features.astype(np.float32).reshape(SAMPLE_COUNT, -1)
    labels = np.array(
        [int(forward(graph, x.reshape(INPUT_SHAPE)).argmax()) for x in features],
        dtype=np.int64,
    )
    return Dataset(features, labels, CLASS_COUNT)


def build_student(teacher: ModelFile, seed: int = FIXTURE_SEED) -> ModelFile:
    """Noisy copy of the teacher, standing in for separately trained weights."""
    rng = np.random.default_rng(seed + 2)
    tensors = []
    for t in teacher.tensors:
        spread = float(t.data.std()) or 1.0
        noisy = t.data + STUDENT_NOISE * spread * rng.normal(0.0, 1.0, t.data.shape)
        if t.name == "bn1.var":
            noisy = np.maximum(noisy, 1e-3)
        tensors.append(Tensor(t.name, t.shape, noisy.astype(np.float32)))
    return ModelFile(tensors, teacher.graph)


@dataclass
class FixtureSummary:
    seed: int
    fp32_accuracy: float
    acc_8bit: float
    acc_3bit: float
    acc_2bit: float
    cluster_lift: float
    top_pair: tuple[int, int]
    uniform6_ratio: float
    uniform6_compressed: int
    pow2_compressed: int


def _accuracy_at(model: ModelFile, dataset: Dataset, bits: int | None) -> float:
    if bits is None:
        return evaluate(build_graph(model), dataset).accuracy
    quant = quantize_model(model, QuantScheme.ASYMM, bits)
    return evaluate(build_graph(quant.model), dataset).accuracy


def validate_fixture(student: ModelFile, dataset: Dataset, seed: int) -> FixtureSummary:
    """Measure the margins the shipped fixture is required to exhibit."""
    fp32 = _accuracy_at(student, dataset, None)
    acc8 = _accuracy_at(student, dataset, 8)
    acc2 = _accuracy_at(student, dataset, 2)

    quant3 = quantize_model(student, QuantScheme.ASYMM, 3)
    result3 = evaluate(build_graph(quant3.model), dataset)
    grouping = propose_merge(result3.confusion, 1)
    merged = next(g for g in grouping.groups if len(g) == 2)
    lift = regroup_eval(result3, grouping).accuracy - result3.accuracy

    quant6 = quantize_model(student, QuantScheme.ASYMM, 6)
    raw = sum(4 * t.count for t in quant6.packed.tensors)
    compressed6 = len(zlib.compress(quant6.packed.concat_payload(), 9))
    quant_pow2 = quantize_model(student, QuantScheme.POW2)
    compressed_pow2 = len(zlib.compress(quant_pow2.packed.concat_payload(), 9))

    summary = FixtureSummary(
        seed=seed,
        fp32_accuracy=fp32,
        acc_8bit=acc8,
        acc_3bit=result3.accuracy,
        acc_2bit=acc2,
        cluster_lift=lift,
        top_pair=merged,
        uniform6_ratio=raw / compressed6,
        uniform6_compressed=compressed6,
        pow2_compressed=compressed_pow2,
    )

    problems = []
    if not 0.90 <= fp32 <= 0.999:
        problems.append(f"fp32 accuracy {fp32:.3f} outside [0.90, 0.999]")
    if abs(fp32 - acc8) > 0.015:
        problems.append(f"8-bit drift {abs(fp32 - acc8):.3f} > 0.015")
    if acc8 - acc2 < 0.25:
        problems.append(f"8-bit to 2-bit drop {acc8 - acc2:.3f} < 0.25")
    if result3.accuracy > fp32 - 0.03:
        problems.append(f"3-bit accuracy {result3.accuracy:.3f} not degraded enough")
    if lift <= 0:
        problems.append(f"cluster lift {lift:.4f} is not strictly positive")
    if merged != (0, 1):
        problems.append(f"top-confused pair {merged} is not the engineered (0, 1)")
    if summary.uniform6_ratio < 4.2:
        problems.append(f"6-bit compression ratio {summary.uniform6_ratio:.2f} < 4.2")
    if compressed_pow2 > 0.95 * compressed6:
        problems.append(
            f"pow2 compressed {compressed_pow2} not clearly below uniform {compressed6}"
        )
    if problems:
        raise ValueError("fixture validation failed: " + "; ".join(problems))
    return summary


def make_fixture(out_dir, seed: int = FIXTURE_SEED) -> FixtureSummary:
    """Generate, validate and write the student model and eval dataset."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    teacher, protos = build_teacher(seed)
    dataset = build_dataset(teacher, protos, seed)
    student = build_student(teacher, seed)
    summary = validate_fixture(student, dataset, seed)
    save_model(student, out / MODEL_FILENAME)
    save_dataset(dataset, out / DATASET_FILENAME)
    return summary
