"""Confusion-driven grouping of classes into super-classes.

Low-bit models stop separating classes whose score distributions overlap;
merging the most-confused pair (and re-scoring predictions at the group
level) recovers accuracy the task may not have needed to spend.  Merges
are greedy: each step joins the pair of current groups with the highest
symmetrized off-diagonal confusion mass, normalized by the groups' sample
counts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .micro_infer import ConfusionMatrix, Dataset, EvalResult, ModelGraph, model_scores


@dataclass(frozen=True)
class ClassGrouping:
    """Partition of class indices; every class sits in exactly one group."""

    groups: tuple[tuple[int, ...], ...]
    class_names: tuple[str, ...]

    def __post_init__(self) -> None:
        flat = sorted(c for g in self.groups for c in g)
        if flat != list(range(len(self.class_names))):
            raise ValueError("groups must partition all class indices exactly once")
        if len(self.groups) < 2:
            raise ValueError("at least 2 groups must remain")

    @classmethod
    def identity(cls, class_names: tuple[str, ...]) -> "ClassGrouping":
        return cls(tuple((i,) for i in range(len(class_names))), tuple(class_names))

    @property
    def mapping(self) -> np.ndarray:
        out = np.empty(len(self.class_names), dtype=np.int64)
        for gi, members in enumerate(self.groups):
            for c in members:
                out[c] = gi
        return out

    @property
    def group_names(self) -> tuple[str, ...]:
        return tuple("+".join(self.class_names[c] for c in members) for members in self.groups)

    def indicator(self) -> np.ndarray:
        """Partition indicator P with P[g, c] = 1 iff class c is in group g."""
        p = np.zeros((len(self.groups), len(self.class_names)), dtype=np.int64)
        for gi, members in enumerate(self.groups):
            p[gi, list(members)] = 1
        return p

    def to_text(self) -> str:
        return "\n".join(",".join(self.class_names[c] for c in members) for members in self.groups) + "\n"

    @classmethod
    def from_text(cls, text: str, class_names: tuple[str, ...]) -> "ClassGrouping":
        index = {name: i for i, name in enumerate(class_names)}
        groups = []
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                groups.append(tuple(index[name.strip()] for name in line.split(",")))
            except KeyError as exc:
                raise ValueError(f"grouping names unknown class {exc.args[0]!r}") from None
        return cls(tuple(groups), tuple(class_names))


def group_confusion(confusion: ConfusionMatrix, grouping: ClassGrouping) -> ConfusionMatrix:
    """Confusion matrix over groups: P C P^T for the indicator P."""
    p = grouping.indicator()
    return ConfusionMatrix(p @ confusion.counts @ p.T, grouping.group_names)


def _merge_once(counts: np.ndarray, groups: list[tuple[int, ...]]) -> list[tuple[int, ...]]:
    samples = counts.sum(axis=1)
    best_score = -1.0
    best = (0, 1)
    for i in range(len(groups)):
        for j in range(i + 1, len(groups)):
            mass = float(counts[i, j] + counts[j, i])
            denom = float(samples[i] + samples[j])
            score = mass / denom if denom > 0 else 0.0
            if score > best_score:
                best_score = score
                best = (i, j)
    i, j = best
    merged = tuple(sorted(groups[i] + groups[j]))
    return groups[:i] + [merged] + groups[i + 1 : j] + groups[j + 1 :]


def propose_merge(confusion: ConfusionMatrix, k_merges: int) -> ClassGrouping:
    """Greedily merge the most-confused group pair, k_merges times.

    Ties (including the all-diagonal case, where every score is zero) fall
    to the lowest index pair.
    """
    k = confusion.class_count
    if not 0 <= k_merges < k - 1:
        raise ValueError(f"k_merges must be in [0, {k - 2}] for {k} classes")
    groups: list[tuple[int, ...]] = [(i,) for i in range(k)]
    grouping = ClassGrouping(tuple(groups), confusion.class_names)
    for _ in range(k_merges):
        counts = group_confusion(confusion, grouping).counts
        groups = _merge_once(counts, groups)
        grouping = ClassGrouping(tuple(groups), confusion.class_names)
    return grouping


def regroup_eval(result: EvalResult, grouping: ClassGrouping) -> EvalResult:
    """Re-score an evaluation under merged labels.

    Predictions were already argmaxed per class, so mapping both axes of
    the confusion matrix through the grouping is exact: a prediction is
    correct iff its group matches the label's group.
    """
    confusion = group_confusion(result.confusion, grouping)
    total = confusion.total()
    accuracy = confusion.correct() / total if total else 0.0
    return EvalResult(accuracy, confusion, result.sample_count)


def evaluate_grouped_scores(
    graph: ModelGraph, dataset: Dataset, grouping: ClassGrouping
) -> EvalResult:
    """Alternate scoring: sum class scores within each group before argmax."""
    scores = model_scores(graph, dataset.features)
    if scores.shape[1] != dataset.class_count:
        raise ValueError(f"model emits {scores.shape[1]} scores for {dataset.class_count} classes")
    p = grouping.indicator().astype(np.float32)
    grouped_scores = scores @ p.T
    preds = grouped_scores.argmax(axis=1)
    labels = grouping.mapping[dataset.labels]
    g = len(grouping.groups)
    counts = np.zeros((g, g), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    confusion = ConfusionMatrix(counts, grouping.group_names)
    return EvalResult(confusion.correct() / len(dataset), confusion, len(dataset))
