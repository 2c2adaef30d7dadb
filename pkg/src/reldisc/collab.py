"""Collaboration layer and training loop.

The two spaces cooperate per episode: anchor labels from the class-index
space align each view's cluster labels through a count-based cost matrix
solved by the Hungarian algorithm; a selection rule keeps a pseudo-label
only when the three views agree or one view is confident enough; the
surviving pseudo-labels (plus the labeled split's gold) drive a
cross-entropy fine-tuning step. Inference averages the three views' head
assignments and reads relational words off the main view's refined word
distribution.
"""

from __future__ import annotations

import copy
import json
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from torch import nn

from . import evaluation, index_space, semantic_space
from .config import TrainConfig
from .corpus import SplitData
from .encoder import EncoderBackend, MockBackend, PromptedInput, build_prompt
from .semifactual import TriView, derive_rng


class CollabError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    """Raised when a loss goes non-finite; a diagnostic checkpoint is
    written first when a path is available."""


def build_cost_matrix(anchors, clusters, num_classes: int) -> np.ndarray:
    """Count-based alignment cost between anchor and cluster labels.

    counts[c, c'] is the number of instances with anchor label c and
    cluster label c'; the cost is (global max count) - counts, so a
    minimum-cost assignment maximizes matched instances.
    """
    anchors = np.asarray(anchors, dtype=np.int64)
    clusters = np.asarray(clusters, dtype=np.int64)
    if anchors.shape != clusters.shape or anchors.ndim != 1:
        raise CollabError(f"label arrays disagree: {anchors.shape} vs {clusters.shape}")
    for name, labels in (("anchor", anchors), ("cluster", clusters)):
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise CollabError(f"{name} labels outside [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (anchors, clusters), 1)
    return counts.max() - counts


def align(cost: np.ndarray) -> np.ndarray:
    """Boolean permutation matrix minimizing the total assignment cost."""
    cost = np.asarray(cost)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise CollabError(f"cost matrix must be square, got {cost.shape}")
    rows, cols = linear_sum_assignment(cost)
    u = np.zeros(cost.shape, dtype=bool)
    u[rows, cols] = True
    return u


def _check_permutation(u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=bool)
    if u.ndim != 2 or u.shape[0] != u.shape[1]:
        raise CollabError(f"alignment matrix must be square, got {u.shape}")
    if not (u.sum(axis=0) == 1).all() or not (u.sum(axis=1) == 1).all():
        raise CollabError("alignment matrix must have exactly one 1 per row and column")
    return u


def apply_alignment(labels, u: np.ndarray) -> np.ndarray:
    """Relabel cluster labels through the permutation: an instance with
    cluster label c' gets label c where u[c, c'] is set."""
    u = _check_permutation(u)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= u.shape[0]):
        raise CollabError(f"labels outside [0, {u.shape[0]})")
    row_of_col = np.argmax(u, axis=0)
    return row_of_col[labels]


def realign_probs(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Permute assignment-probability columns consistently with the
    alignment, so column c holds the probability of aligned label c."""
    u = _check_permutation(u)
    probs = np.asarray(probs)
    col_of_row = np.argmax(u, axis=1)
    return probs[..., col_of_row]


@dataclass(frozen=True)
class LabelDecision:
    """Outcome of tri-view pseudo-label selection for one instance."""

    instance_id: str
    label: int | None
    source_view: int | None  # 0-based view index; None when views agree
    max_probability: float
    abandoned: bool


def select_labels(
    instance_ids: Sequence[str],
    aligned_labels: np.ndarray,
    winning_probs: np.ndarray,
    theta: float,
) -> list[LabelDecision]:
    """Choose a reliable pseudo-label per instance, or abandon it.

    ``aligned_labels``/``winning_probs`` are [3, N]: each view's aligned
    cluster label and the assignment probability of that label. Unanimous
    views keep their label; otherwise the most confident view wins if its
    probability reaches ``theta``, and the instance is abandoned below it.
    """
    aligned_labels = np.asarray(aligned_labels)
    winning_probs = np.asarray(winning_probs)
    if aligned_labels.shape != winning_probs.shape or aligned_labels.shape[0] != 3:
        raise CollabError(
            f"expected [3, N] label and probability arrays, got "
            f"{aligned_labels.shape} and {winning_probs.shape}"
        )
    if aligned_labels.shape[1] != len(instance_ids):
        raise CollabError("instance_ids does not match the label arrays")
    decisions = []
    for i, instance_id in enumerate(instance_ids):
        labels = aligned_labels[:, i]
        probs = winning_probs[:, i]
        best_view = int(np.argmax(probs))
        best_prob = float(probs[best_view])
        if labels[0] == labels[1] == labels[2]:
            decisions.append(
                LabelDecision(instance_id, int(labels[0]), None, best_prob, False)
            )
        elif best_prob >= theta:
            decisions.append(
                LabelDecision(instance_id, int(labels[best_view]), best_view, best_prob, False)
            )
        else:
            decisions.append(LabelDecision(instance_id, None, None, best_prob, True))
    return decisions


def supervised_loss(z: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Cross entropy of the tri-view head assignments against targets.

    ``z`` is [3, N, K] probability rows; ``targets`` is [N] with -1
    marking instances that contribute nothing (abandoned pseudo-labels).
    The mean runs over the three views and the contributing instances;
    with none contributing the loss is 0.
    """
    if z.ndim != 3 or z.shape[0] != 3:
        raise CollabError(f"expected [3, N, K] view tensor, got {tuple(z.shape)}")
    if targets.shape != (z.shape[1],):
        raise CollabError("targets must align with the instance axis")
    keep = targets >= 0
    if not bool(keep.any()):
        return z.sum() * 0.0
    kept = z[:, keep, :]
    idx = targets[keep].long()
    tiny = torch.finfo(z.dtype).tiny
    picked = kept[:, torch.arange(idx.shape[0]), idx].clamp_min(tiny)
    return -picked.log().mean()


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    acc: dict[str, float | None]
    nmi: dict[str, float | None]
    ari: dict[str, float | None]
    abandoned_fraction: float | None

    def to_json(self) -> str:
        payload = {"epoch": self.epoch, "phase": self.phase,
                   "abandoned_fraction": self.abandoned_fraction}
        for name, values in (("acc", self.acc), ("nmi", self.nmi), ("ari", self.ari)):
            for split, value in values.items():
                payload[f"{name}_{split}"] = value
        return json.dumps(payload, sort_keys=True)


@dataclass
class TrainedModel:
    """Everything inference needs, plus the training trace."""

    backend: EncoderBackend
    classifier: nn.Linear
    centroids: np.ndarray | None          # [3, C, V] per-view centroids
    head_binding: tuple[str, ...]         # relation bound to each of the first heads
    predefined_relations: tuple[str, ...]
    novel_relations: tuple[str, ...]
    num_heads: int
    config: TrainConfig
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_acc_all: float = float("-inf")
    last_epoch: int = 0


def _prompts_for(tri_view: TriView) -> list[PromptedInput]:
    return [build_prompt(view, instance_id=tri_view.source_id) for view in tri_view.views]


def _forward_tri_views(
    backend: EncoderBackend,
    classifier: nn.Linear,
    prompts: Sequence[Sequence[PromptedInput]],
    need_hidden: bool = True,
    need_dists: bool = True,
) -> tuple[torch.Tensor | None, torch.Tensor | None]:
    """Stack per-view encoder outputs: z as [3, B, K], dists as [3, B, V]."""
    z_views, dist_views = [], []
    for view_idx in range(3):
        hidden, logits = backend.forward_views([p[view_idx] for p in prompts])
        if need_hidden:
            z_views.append(index_space.classify(hidden, classifier))
        if need_dists:
            dist_views.append(torch.softmax(logits, dim=-1))
    z = torch.stack(z_views) if need_hidden else None
    dists = torch.stack(dist_views) if need_dists else None
    return z, dists


def _batches(n: int, batch_size: int, rng) -> list[list[int]]:
    order = list(range(n))
    rng.shuffle(order)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


@contextmanager
def _eval_mode(*modules: nn.Module):
    states = [m.training for m in modules]
    for m in modules:
        m.eval()
    try:
        yield
    finally:
        for m, state in zip(modules, states):
            m.train(state)


def _require_finite(value: torch.Tensor, what: str, diagnostics_path: Path | None,
                    model: "TrainedModel | None" = None) -> None:
    if torch.isfinite(value).all():
        return
    if diagnostics_path is not None and model is not None:
        save_checkpoint(model, diagnostics_path)
    raise TrainingDiverged(f"{what} became non-finite"
                           + (f"; diagnostic checkpoint at {diagnostics_path}"
                              if diagnostics_path else ""))


def train(
    splits: SplitData,
    tri_views: Mapping[str, TriView],
    backend: EncoderBackend,
    num_heads: int,
    config: TrainConfig,
    metrics_path: str | Path | None = None,
    diagnostics_path: str | Path | None = None,
    start_epoch: int = 0,
    classifier: nn.Linear | None = None,
) -> TrainedModel:
    """Run the two-phase learning loop.

    Warm-up fits the encoder and classifier on the labeled split with the
    semantic, consistency, and supervised losses together. Each following
    episode then: refines word distributions on the unlabeled split,
    clusters each view and soft-assigns labels, trains and reads anchor
    labels in the class-index space, aligns each view's clusters to the
    anchors, selects reliable pseudo-labels, and fine-tunes with cross
    entropy over labeled gold plus selected pseudo-labels. The test split
    is scored every episode; training stops when the overall accuracy has
    not improved for ``config.patience`` episodes or at
    ``config.max_epochs``. The returned model carries the best-episode
    parameter snapshot.
    """
    missing = [ins.instance_id
               for part in (splits.labeled, splits.unlabeled, splits.test)
               for ins in part if ins.instance_id not in tri_views]
    if missing:
        raise CollabError(f"tri-views missing for instance ids, e.g. {missing[0]!r}")

    head_binding = tuple(splits.predefined_relations)
    if num_heads < len(head_binding):
        raise CollabError(
            f"num_heads={num_heads} cannot cover {len(head_binding)} pre-defined relations"
        )
    relation_index = {rel: i for i, rel in enumerate(head_binding)}
    for i, rel in enumerate(sorted(splits.novel_relations)):
        relation_index[rel] = len(head_binding) + i

    dtype = next(backend.parameters()).dtype
    if classifier is None:
        classifier = index_space.make_classifier(
            backend.hidden_dim, num_heads, seed=config.seed, dtype=dtype
        )
    optimizer = torch.optim.Adam(
        list(backend.parameters()) + list(classifier.parameters()), lr=config.learning_rate
    )

    labeled_prompts = [_prompts_for(tri_views[ins.instance_id]) for ins in splits.labeled]
    labeled_targets = torch.tensor(
        [relation_index[ins.relation_label] for ins in splits.labeled], dtype=torch.long
    )
    unlabeled_ids = [ins.instance_id for ins in splits.unlabeled]
    unlabeled_prompts = [_prompts_for(tri_views[i]) for i in unlabeled_ids]
    test_prompts = [_prompts_for(tri_views[ins.instance_id]) for ins in splits.test]
    test_gold = np.array([relation_index[ins.relation_label] for ins in splits.test])
    test_novel = np.array(
        [ins.relation_label in set(splits.novel_relations) for ins in splits.test]
    )

    model = TrainedModel(
        backend=backend,
        classifier=classifier,
        centroids=None,
        head_binding=head_binding,
        predefined_relations=tuple(splits.predefined_relations),
        novel_relations=tuple(splits.novel_relations),
        num_heads=num_heads,
        config=config,
    )
    diagnostics_path = Path(diagnostics_path) if diagnostics_path else None
    metrics_file = open(metrics_path, "a", encoding="utf-8") if metrics_path else None

    def optimize(loss: torch.Tensor, what: str) -> None:
        _require_finite(loss, what, diagnostics_path, model)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

    def eval_dists(prompts: Sequence[Sequence[PromptedInput]]) -> np.ndarray:
        chunks = []
        with torch.no_grad(), _eval_mode(backend, classifier):
            for start in range(0, len(prompts), config.batch_size):
                _, dists = _forward_tri_views(
                    backend, classifier, prompts[start : start + config.batch_size],
                    need_hidden=False,
                )
                chunks.append(dists.cpu().numpy())
        return np.concatenate(chunks, axis=1)

    def eval_z(prompts: Sequence[Sequence[PromptedInput]]) -> np.ndarray:
        chunks = []
        with torch.no_grad(), _eval_mode(backend, classifier):
            for start in range(0, len(prompts), config.batch_size):
                z, _ = _forward_tri_views(
                    backend, classifier, prompts[start : start + config.batch_size],
                    need_dists=False,
                )
                chunks.append(z.cpu().numpy())
        return np.concatenate(chunks, axis=1)

    def record(epoch: int, phase: str, abandoned: float | None) -> evaluation.MetricReport:
        z_test = eval_z(test_prompts)
        pred = z_test.mean(axis=0).argmax(axis=1)
        report = evaluation.evaluate_partitions(pred, test_gold, test_novel)
        rec = EpochRecord(epoch, phase, report.acc, report.nmi, report.ari, abandoned)
        model.history.append(rec)
        if metrics_file:
            metrics_file.write(rec.to_json() + "\n")
            metrics_file.flush()
        return report

    best_state: dict | None = None

    def snapshot() -> dict:
        return {
            "backend": copy.deepcopy(backend.state_dict()),
            "classifier": copy.deepcopy(classifier.state_dict()),
            "centroids": None if model.centroids is None else model.centroids.copy(),
        }

    try:
        # Initialization on labeled data with all three objectives.
        if start_epoch == 0:
            for warm_epoch in range(config.warmup_epochs):
                rng = derive_rng(config.seed, "warmup", warm_epoch)
                for batch in _batches(len(labeled_prompts), config.batch_size, rng):
                    z, dists = _forward_tri_views(
                        backend, classifier, [labeled_prompts[i] for i in batch]
                    )
                    loss = (
                        config.semantic_weight
                        * semantic_space.self_contrastive_loss(
                            dists, config.tau1, config.exclude_self_semantic
                        )
                        + config.consistency_weight
                        * index_space.consistency_loss(
                            z, config.tau2, config.entropy_reg_weight,
                            config.exclude_self_consistency,
                        )
                        + config.supervised_weight
                        * supervised_loss(z, labeled_targets[batch])
                    )
                    optimize(loss, "warm-up loss")

        stagnant = 0
        for epoch in range(start_epoch + 1, config.max_epochs + 1):
            rng = derive_rng(config.seed, "episode", epoch)

            # Refine relational semantics on unlabeled data.
            for batch in _batches(len(unlabeled_prompts), config.batch_size, rng):
                _, dists = _forward_tri_views(
                    backend, classifier, [unlabeled_prompts[i] for i in batch],
                    need_hidden=False,
                )
                loss = config.semantic_weight * semantic_space.self_contrastive_loss(
                    dists, config.tau1, config.exclude_self_semantic
                )
                optimize(loss, "semantic refinement loss")

            # Cluster each view and soft-assign.
            dists_all = eval_dists(unlabeled_prompts)  # [3, N2, V]
            centroids = []
            cluster_labels = []
            winning = []
            for view_idx in range(3):
                km = semantic_space.fit_centroids(
                    dists_all[view_idx], num_heads,
                    seed=derive_rng(config.seed, "kmeans", epoch, view_idx).randrange(2**32),
                )
                probs = semantic_space.soft_assign(dists_all[view_idx], km.centroids)
                centroids.append(km.centroids)
                cluster_labels.append(semantic_space.hard_labels(probs))
                winning.append(probs.max(axis=1))
            model.centroids = np.stack(centroids)

            # Learn anchors in the class-index space.
            for batch in _batches(len(unlabeled_prompts), config.batch_size, rng):
                z, _ = _forward_tri_views(
                    backend, classifier, [unlabeled_prompts[i] for i in batch],
                    need_dists=False,
                )
                loss = config.consistency_weight * index_space.consistency_loss(
                    z, config.tau2, config.entropy_reg_weight,
                    config.exclude_self_consistency,
                )
                optimize(loss, "consistency loss")
            z_unlabeled = eval_z(unlabeled_prompts)
            anchors = index_space.anchor_labels(z_unlabeled)  # [3, N2]

            # Align each view's clusters to the anchors, then select.
            aligned = np.empty((3, len(unlabeled_ids)), dtype=np.int64)
            for view_idx in range(3):
                cost = build_cost_matrix(anchors[view_idx], cluster_labels[view_idx], num_heads)
                u = align(cost)
                aligned[view_idx] = apply_alignment(cluster_labels[view_idx], u)
            decisions = select_labels(
                unlabeled_ids, aligned, np.stack(winning), config.theta
            )
            abandoned_fraction = float(np.mean([d.abandoned for d in decisions]))
            pseudo_targets = torch.tensor(
                [-1 if d.abandoned else d.label for d in decisions], dtype=torch.long
            )

            # Fine-tune with gold plus selected pseudo-labels.
            pool_prompts = labeled_prompts + unlabeled_prompts
            pool_targets = torch.cat([labeled_targets, pseudo_targets])
            for batch in _batches(len(pool_prompts), config.batch_size, rng):
                z, _ = _forward_tri_views(
                    backend, classifier, [pool_prompts[i] for i in batch],
                    need_dists=False,
                )
                loss = config.supervised_weight * supervised_loss(z, pool_targets[batch])
                optimize(loss, "supervised loss")

            report = record(epoch, "episode", abandoned_fraction)
            model.last_epoch = epoch
            acc_all = report.acc.get("all")
            if acc_all is not None and acc_all > model.best_acc_all:
                model.best_acc_all = acc_all
                model.best_epoch = epoch
                best_state = snapshot()
                stagnant = 0
            else:
                stagnant += 1
                if stagnant >= config.patience:
                    break
    finally:
        if metrics_file:
            metrics_file.close()

    if best_state is not None:
        backend.load_state_dict(best_state["backend"])
        classifier.load_state_dict(best_state["classifier"])
        model.centroids = best_state["centroids"]
    return model


def infer_batch(
    model: TrainedModel,
    tri_views: Sequence[TriView],
    top_words: int | None = None,
) -> list[tuple[int, list[str]]]:
    """Label index and relational words for each instance.

    The label is the argmax over heads of the mean head assignment across
    the three views; the words are the most probable vocabulary entries of
    the main view's word distribution.
    """
    k = top_words if top_words is not None else model.config.infer_top_words
    prompts = [_prompts_for(tv) for tv in tri_views]
    results: list[tuple[int, list[str]]] = []
    with torch.no_grad(), _eval_mode(model.backend, model.classifier):
        for start in range(0, len(prompts), model.config.batch_size):
            chunk = prompts[start : start + model.config.batch_size]
            z, dists = _forward_tri_views(model.backend, model.classifier, chunk)
            labels = z.mean(dim=0).argmax(dim=1).cpu().numpy()
            main_dists = dists[0].cpu().numpy()
            for row, label in enumerate(labels):
                words = semantic_space.top_relational_words(
                    main_dists[row], k, model.backend.vocab
                )
                results.append((int(label), words))
    return results


def infer(model: TrainedModel, tri_view: TriView, top_words: int | None = None) -> tuple[int, list[str]]:
    return infer_batch(model, [tri_view], top_words)[0]


def save_checkpoint(model: TrainedModel, path: str | Path) -> None:
    """Single binary bundle with parameters, centroids, bindings, config,
    and the per-epoch history."""
    backend = model.backend
    if isinstance(backend, MockBackend):
        backend_meta = {
            "kind": "mock",
            "means": {k: v.tolist() for k, v in backend.means.items()},
            "vocab": list(backend.vocab),
            "hidden_dim": backend.hidden_dim,
            "seed": backend.seed,
            "instance_noise": backend.instance_noise,
            "view_noise": backend.view_noise,
            "max_length": backend.max_length,
        }
    else:
        backend_meta = {
            "kind": "bert",
            "model_name": getattr(backend, "model_name", "bert-base-uncased"),
            "max_length": backend.max_length,
        }
    payload = {
        "backend_meta": backend_meta,
        "backend_state": backend.state_dict(),
        "classifier_state": model.classifier.state_dict(),
        "hidden_dim": model.backend.hidden_dim,
        "num_heads": model.num_heads,
        "centroids": model.centroids,
        "head_binding": list(model.head_binding),
        "predefined_relations": list(model.predefined_relations),
        "novel_relations": list(model.novel_relations),
        "config": model.config.__dict__,
        "history": [rec.to_json() for rec in model.history],
        "best_epoch": model.best_epoch,
        "best_acc_all": model.best_acc_all,
        "last_epoch": model.last_epoch,
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path, backend: EncoderBackend | None = None) -> TrainedModel:
    """Rebuild a TrainedModel; the backend is reconstructed from the
    checkpoint metadata unless one is supplied."""
    payload = torch.load(path, weights_only=False)
    meta = payload["backend_meta"]
    if backend is None:
        if meta["kind"] == "mock":
            backend = MockBackend(
                means=meta["means"],
                vocab=meta["vocab"],
                hidden_dim=meta["hidden_dim"],
                seed=meta["seed"],
                instance_noise=meta["instance_noise"],
                view_noise=meta["view_noise"],
                max_length=meta["max_length"],
            )
        else:
            from .encoder import MaskedLMBackend

            backend = MaskedLMBackend(meta["model_name"], max_length=meta["max_length"])
    backend.load_state_dict(payload["backend_state"])
    config = TrainConfig(**payload["config"])
    dtype = next(backend.parameters()).dtype
    classifier = nn.Linear(payload["hidden_dim"], payload["num_heads"], dtype=dtype)
    classifier.load_state_dict(payload["classifier_state"])
    history = []
    for raw in payload["history"]:
        data = json.loads(raw)
        history.append(
            EpochRecord(
                epoch=data["epoch"],
                phase=data["phase"],
                acc={s: data.get(f"acc_{s}") for s in evaluation.SLICES},
                nmi={s: data.get(f"nmi_{s}") for s in evaluation.SLICES},
                ari={s: data.get(f"ari_{s}") for s in evaluation.SLICES},
                abandoned_fraction=data.get("abandoned_fraction"),
            )
        )
    return TrainedModel(
        backend=backend,
        classifier=classifier,
        centroids=payload["centroids"],
        head_binding=tuple(payload["head_binding"]),
        predefined_relations=tuple(payload["predefined_relations"]),
        novel_relations=tuple(payload["novel_relations"]),
        num_heads=payload["num_heads"],
        config=config,
        history=history,
        best_epoch=payload["best_epoch"],
        best_acc_all=payload["best_acc_all"],
        last_epoch=payload["last_epoch"],
    )
