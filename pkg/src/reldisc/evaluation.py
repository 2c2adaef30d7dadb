"""Clustering and semantic-quality metrics.

Label-index quality: Hungarian-matched accuracy, NMI, and ARI, each read
on the pre-defined, novel, and full slices of the evaluation set (one
global Hungarian mapping, restricted per slice). Semantic quality: cosine
similarity and KL divergence between a model word distribution and the
ground-truth distribution obtained by feeding "<description> means
[MASK]" through the pretrained encoder.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.metrics import adjusted_rand_score, normalized_mutual_info_score

from .encoder import EncoderBackend, MASK_TOKEN, PromptedInput, encode

KL_SMOOTHING = 1e-10

PRE_SLICE, NOV_SLICE, ALL_SLICE = "pre", "nov", "all"
SLICES = (PRE_SLICE, NOV_SLICE, ALL_SLICE)


class EvaluationError(ValueError):
    pass


def _as_labels(pred, gold) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.int64)
    gold = np.asarray(gold, dtype=np.int64)
    if pred.shape != gold.shape or pred.ndim != 1:
        raise EvaluationError(f"label arrays disagree: {pred.shape} vs {gold.shape}")
    if pred.size == 0:
        raise EvaluationError("cannot score an empty label set")
    return pred, gold


def _contingency(pred: np.ndarray, gold: np.ndarray) -> np.ndarray:
    size = int(max(pred.max(), gold.max())) + 1
    w = np.zeros((size, size), dtype=np.int64)
    np.add.at(w, (pred, gold), 1)
    return w


def hungarian_mapping(pred, gold) -> dict[int, int]:
    """Best one-to-one map from predicted labels to gold labels."""
    pred, gold = _as_labels(pred, gold)
    w = _contingency(pred, gold)
    rows, cols = linear_sum_assignment(w, maximize=True)
    return {int(r): int(c) for r, c in zip(rows, cols)}


def clustering_accuracy(pred, gold) -> float:
    """Accuracy under the best label permutation (Hungarian matching)."""
    pred, gold = _as_labels(pred, gold)
    w = _contingency(pred, gold)
    rows, cols = linear_sum_assignment(w, maximize=True)
    return float(w[rows, cols].sum() / pred.size)


def nmi(pred, gold) -> float:
    """Normalized mutual information, arithmetic-mean normalization.

    Identical single-cluster labelings score 1.0 by convention.
    """
    pred, gold = _as_labels(pred, gold)
    return float(normalized_mutual_info_score(gold, pred, average_method="arithmetic"))


def ari(pred, gold) -> float:
    pred, gold = _as_labels(pred, gold)
    return float(adjusted_rand_score(gold, pred))


@dataclass
class MetricReport:
    """One evaluation's metrics; slice keys are "pre"/"nov"/"all"."""

    acc: dict[str, float | None] = field(default_factory=dict)
    nmi: dict[str, float | None] = field(default_factory=dict)
    ari: dict[str, float | None] = field(default_factory=dict)
    cos: float | None = None
    kl: float | None = None
    per_relation_cos: dict[str, float] = field(default_factory=dict)
    per_relation_kl: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "acc": self.acc,
                "nmi": self.nmi,
                "ari": self.ari,
                "cos": self.cos,
                "kl": self.kl,
                "per_relation_cos": self.per_relation_cos,
                "per_relation_kl": self.per_relation_kl,
            },
            sort_keys=True,
        )

    def to_tsv(self) -> str:
        cells = ["metric", *SLICES]
        lines = ["\t".join(cells)]
        for name, values in (("acc", self.acc), ("nmi", self.nmi), ("ari", self.ari)):
            row = [name] + [
                "" if values.get(s) is None else f"{values[s]:.4f}" for s in SLICES
            ]
            lines.append("\t".join(row))
        if self.cos is not None:
            lines.append(f"cos\t{self.cos:.4f}\t\t")
        if self.kl is not None:
            lines.append(f"kl\t{self.kl:.4f}\t\t")
        return "\n".join(lines) + "\n"


def partition_metrics(pred, gold, novel_mask, split: str) -> tuple[float, float, float]:
    """(acc, nmi, ari) on one slice of the evaluation set.

    The slice holds the instances whose GOLD relation is pre-defined
    ("pre"), novel ("nov"), or either ("all"). Accuracy uses the Hungarian
    mapping fit on the full set, restricted to the slice, so novel
    clusters cannot borrow pre-defined ones; NMI/ARI are computed on the
    slice's labels directly.
    """
    pred, gold = _as_labels(pred, gold)
    novel_mask = np.asarray(novel_mask, dtype=bool)
    if novel_mask.shape != pred.shape:
        raise EvaluationError("novel_mask must align with the label arrays")
    if split not in SLICES:
        raise EvaluationError(f"unknown split {split!r}")
    keep = {
        PRE_SLICE: ~novel_mask,
        NOV_SLICE: novel_mask,
        ALL_SLICE: np.ones_like(novel_mask),
    }[split]
    if not keep.any():
        raise EvaluationError(f"split {split!r} selects no instances")
    mapping = hungarian_mapping(pred, gold)
    mapped = np.array([mapping.get(int(p), -1) for p in pred])
    acc = float((mapped[keep] == gold[keep]).mean())
    return acc, nmi(pred[keep], gold[keep]), ari(pred[keep], gold[keep])


def evaluate_partitions(pred, gold, novel_mask) -> MetricReport:
    """MetricReport over all three slices; empty slices report None."""
    report = MetricReport()
    for split in SLICES:
        try:
            acc, nmi_v, ari_v = partition_metrics(pred, gold, novel_mask, split)
        except EvaluationError:
            acc = nmi_v = ari_v = None
        report.acc[split] = acc
        report.nmi[split] = nmi_v
        report.ari[split] = ari_v
    return report


def ground_truth_distribution(description: str, backend: EncoderBackend) -> np.ndarray:
    """Vocabulary distribution of "<description> means [MASK]" under the
    pretrained (not fine-tuned) backend."""
    words = description.split()
    if not words:
        raise EvaluationError("relation description must be non-empty")
    tokens = (*words, "means", MASK_TOKEN)
    prompt = PromptedInput(
        tokens=tokens,
        mask_position=len(tokens) - 1,
        view_kind="main",
        instance_id=f"desc:{description}",
        body_len=len(tokens) - 1,
    )
    return encode([prompt], backend, mode="eval")[0].word_dist


def semantic_similarity(pred_dist, truth_dist) -> tuple[float, float]:
    """(cosine, KL) between two word distributions.

    KL is D(pred || truth) with additive smoothing then renormalization,
    so disjoint supports stay finite.
    """
    p = np.asarray(pred_dist, dtype=np.float64)
    q = np.asarray(truth_dist, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise EvaluationError(f"distribution shapes disagree: {p.shape} vs {q.shape}")
    cos = float(p @ q / (np.linalg.norm(p) * np.linalg.norm(q)))
    ps = (p + KL_SMOOTHING) / (p + KL_SMOOTHING).sum()
    qs = (q + KL_SMOOTHING) / (q + KL_SMOOTHING).sum()
    kl = float((ps * np.log(ps / qs)).sum())
    return cos, kl


def novel_semantic_report(
    relation_dists: Mapping[str, np.ndarray],
    truth_dists: Mapping[str, np.ndarray],
) -> tuple[float, float, dict[str, float], dict[str, float]]:
    """Average COS/KL over novel relations.

    ``relation_dists`` maps each novel relation to the model's word
    distribution for it (mean over that relation's instances);
    ``truth_dists`` holds the matching template distributions. Values are
    averaged per relation, then across relations.
    """
    if set(relation_dists) - set(truth_dists):
        missing = sorted(set(relation_dists) - set(truth_dists))
        raise EvaluationError(f"missing ground-truth distributions for {missing}")
    per_cos: dict[str, float] = {}
    per_kl: dict[str, float] = {}
    for relation in sorted(relation_dists):
        cos, kl = semantic_similarity(relation_dists[relation], truth_dists[relation])
        per_cos[relation] = cos
        per_kl[relation] = kl
    if not per_cos:
        raise EvaluationError("no novel relations to score")
    mean_cos = float(np.mean(list(per_cos.values())))
    mean_kl = float(np.mean(list(per_kl.values())))
    return mean_cos, mean_kl, per_cos, per_kl
