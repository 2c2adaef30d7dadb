"""Synthetic corpora and blob generators for desk-scale runs.

The synthetic corpus plants one vocabulary block per relation and a mock
feature table whose per-relation means put high logits on that block, so
the whole pipeline (views, clustering, alignment, selection, training,
relational words) can be exercised end to end on a CPU in seconds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .corpus import RelationInstance, Span
from .encoder import MockBackend
from .semifactual import EntityTypeLexicon, SynonymLexicon, derive_rng

_RELATION_NAMES = (
    "crosses", "contains", "employs", "follows", "borders", "operates",
    "precedes", "supplies", "funds", "hosts",
)

# (surface tokens, type name or None when the lexicon should miss)
_ENTITY_POOL = (
    (("Orion",), "City"),
    (("Vega", "Prime"), "City"),
    (("Altair",), "Person"),
    (("Castor", "Pollux"), "Company"),
    (("Deneb",), "River"),
    (("Mira",), "Person"),
    (("Rigel", "Station"), "City"),
    (("Spica",), "River"),
    (("Lyra",), "Company"),
    (("Antares",), None),
    (("Procyon",), "City"),
    (("Capella", "Heights"), None),
)

_CONTEXT_NOUNS = {
    "valley": ("basin", "hollow"),
    "market": ("bazaar", "fair"),
    "harbor": ("port", "haven"),
    "plateau": ("tableland", "mesa"),
}


@dataclass(frozen=True)
class SyntheticCorpus:
    instances: tuple[RelationInstance, ...]
    relations: tuple[str, ...]
    vocab: tuple[str, ...]
    mock_means: dict[str, list[float]]
    relation_words: dict[str, tuple[str, ...]]
    descriptions: dict[str, str]
    entity_lexicon: EntityTypeLexicon
    synonym_lexicon: SynonymLexicon


def make_synthetic_corpus(
    n_relations: int = 6,
    per_relation: int = 200,
    seed: int = 0,
    words_per_relation: int = 5,
    feature_scale: float = 4.0,
) -> SyntheticCorpus:
    """Build a separable corpus of ``n_relations`` relations.

    Each relation owns a block of ``words_per_relation`` vocabulary words
    with gently decreasing planted logits, so its expected top word is the
    block's first. Entity and synonym lexicons cover most (not all)
    entities and context nouns, leaving the fallback paths reachable.
    """
    if n_relations > len(_RELATION_NAMES):
        names = _RELATION_NAMES + tuple(
            f"relation_{i}" for i in range(len(_RELATION_NAMES), n_relations)
        )
    else:
        names = _RELATION_NAMES
    relations = names[:n_relations]

    vocab: list[str] = []
    relation_words: dict[str, tuple[str, ...]] = {}
    for relation in relations:
        block = tuple(f"{relation}_{j}" for j in range(words_per_relation))
        relation_words[relation] = block
        vocab.extend(block)

    mock_means: dict[str, list[float]] = {}
    for r, relation in enumerate(relations):
        mean = np.zeros(len(vocab))
        start = r * words_per_relation
        for j in range(words_per_relation):
            mean[start + j] = feature_scale * (1.0 - 0.05 * j)
        mock_means[relation] = mean.tolist()
        mock_means[f"desc:{relation}"] = mean.tolist()

    context_nouns = sorted(_CONTEXT_NOUNS)
    instances: list[RelationInstance] = []
    for relation in relations:
        rng = derive_rng(seed, "corpus", relation)
        for idx in range(per_relation):
            head_tokens, _ = _ENTITY_POOL[rng.randrange(len(_ENTITY_POOL))]
            tail_tokens, _ = _ENTITY_POOL[rng.randrange(len(_ENTITY_POOL))]
            noun = context_nouns[rng.randrange(len(context_nouns))]
            tokens = [*head_tokens, "reportedly", relation, "the", *tail_tokens,
                      "near", "the", noun]
            tags = (
                ["NNP"] * len(head_tokens)
                + ["RB", "VBZ", "DT"]
                + ["NNP"] * len(tail_tokens)
                + ["IN", "DT", "NN"]
            )
            head = Span(0, len(head_tokens), " ".join(head_tokens),
                        kb_id=f"kb_{'_'.join(head_tokens).lower()}")
            t_start = len(head_tokens) + 3
            tail = Span(t_start, t_start + len(tail_tokens), " ".join(tail_tokens),
                        kb_id=f"kb_{'_'.join(tail_tokens).lower()}")
            instance = RelationInstance(
                instance_id=f"{relation}/{idx:05d}",
                tokens=tuple(tokens),
                head_span=head,
                tail_span=tail,
                relation_label=relation,
                pos_tags=tuple(tags),
            )
            instance.validate()
            instances.append(instance)

    by_surface = {}
    by_kb = {}
    for surface_tokens, type_name in _ENTITY_POOL:
        if type_name is None:
            continue
        surface = " ".join(surface_tokens)
        by_surface[surface] = type_name
        by_kb[f"kb_{'_'.join(surface_tokens).lower()}"] = type_name
    synonyms = {(word, "n"): list(syns) for word, syns in _CONTEXT_NOUNS.items()}

    return SyntheticCorpus(
        instances=tuple(sorted(instances, key=lambda i: i.instance_id)),
        relations=tuple(relations),
        vocab=tuple(vocab),
        mock_means=mock_means,
        relation_words=relation_words,
        descriptions={relation: relation for relation in relations},
        entity_lexicon=EntityTypeLexicon(by_kb, by_surface),
        synonym_lexicon=SynonymLexicon(synonyms),
    )


def make_mock_backend(
    corpus: SyntheticCorpus,
    hidden_dim: int = 16,
    seed: int = 0,
    instance_noise: float = 0.5,
    view_noise: float = 0.1,
) -> MockBackend:
    return MockBackend(
        means=corpus.mock_means,
        vocab=corpus.vocab,
        hidden_dim=hidden_dim,
        seed=seed,
        instance_noise=instance_noise,
        view_noise=view_noise,
    )


def write_synthetic_dataset(corpus: SyntheticCorpus, out_dir: str | Path,
                            mock: Mapping | None = None) -> dict[str, Path]:
    """Write the corpus in the formats the CLI consumes.

    Returns the paths: dataset (fewrel-json), POS sidecar, the two
    lexicons, the mock backend table, and relation descriptions.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "dataset": out_dir / "dataset.json",
        "pos": out_dir / "pos.tsv",
        "entity_lexicon": out_dir / "entity_lexicon.tsv",
        "synonym_lexicon": out_dir / "synonym_lexicon.tsv",
        "mock": out_dir / "mock_backend.json",
        "descriptions": out_dir / "descriptions.tsv",
    }

    by_relation: dict[str, list[dict]] = {rel: [] for rel in corpus.relations}
    pos_lines = []
    for ins in corpus.instances:
        rel = ins.relation_label
        by_relation[rel].append(
            {
                "tokens": list(ins.tokens),
                "h": [ins.head_span.surface, ins.head_span.kb_id,
                      [list(range(ins.head_span.start, ins.head_span.end))]],
                "t": [ins.tail_span.surface, ins.tail_span.kb_id,
                      [list(range(ins.tail_span.start, ins.tail_span.end))]],
            }
        )
        pos_lines.append(f"{ins.instance_id}\t{' '.join(ins.pos_tags)}")
    paths["dataset"].write_text(json.dumps(by_relation, indent=1), encoding="utf-8")
    paths["pos"].write_text("\n".join(pos_lines) + "\n", encoding="utf-8")

    entity_lines = []
    for surface_tokens, type_name in _ENTITY_POOL:
        if type_name is None:
            continue
        surface = " ".join(surface_tokens)
        entity_lines.append(f"{surface}\tkb_{'_'.join(surface_tokens).lower()}\t{type_name}")
    paths["entity_lexicon"].write_text("\n".join(entity_lines) + "\n", encoding="utf-8")

    synonym_lines = [
        f"{word}\tn\t{'|'.join(syns)}" for word, syns in sorted(_CONTEXT_NOUNS.items())
    ]
    paths["synonym_lexicon"].write_text("\n".join(synonym_lines) + "\n", encoding="utf-8")

    mock_payload = {
        "vocab": list(corpus.vocab),
        "means": corpus.mock_means,
        "hidden_dim": 16,
        "seed": 0,
        "instance_noise": 0.5,
        "view_noise": 0.1,
    }
    if mock:
        mock_payload.update(mock)
    paths["mock"].write_text(json.dumps(mock_payload, indent=1), encoding="utf-8")

    desc_lines = [f"{rel}\t{desc}" for rel, desc in sorted(corpus.descriptions.items())]
    paths["descriptions"].write_text("\n".join(desc_lines) + "\n", encoding="utf-8")
    return paths


def gaussian_blobs(
    means: np.ndarray, per_cluster: int, sigma: float, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Sample isotropic Gaussian clusters around the given means.

    Returns (points, labels); the label of a point is the index of the
    mean it was drawn around.
    """
    means = np.asarray(means, dtype=np.float64)
    rng = np.random.default_rng(seed)
    points = []
    labels = []
    for idx, mean in enumerate(means):
        points.append(mean + sigma * rng.standard_normal((per_cluster, means.shape[1])))
        labels.extend([idx] * per_cluster)
    return np.concatenate(points), np.asarray(labels)


def simplex_blobs(
    n_clusters: int,
    per_cluster: int,
    dim: int,
    scale: float,
    sigma: float,
    seed: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Well-separated clusters of probability vectors.

    Cluster i peaks coordinate i (requires dim >= n_clusters); logits are
    jittered and pushed through a softmax, mimicking word distributions.
    """
    if dim < n_clusters:
        raise ValueError(f"dim={dim} must cover n_clusters={n_clusters}")
    logit_means = np.zeros((n_clusters, dim))
    logit_means[np.arange(n_clusters), np.arange(n_clusters)] = scale
    logits, labels = gaussian_blobs(logit_means, per_cluster, sigma, seed)
    shifted = logits - logits.max(axis=1, keepdims=True)
    dists = np.exp(shifted)
    dists /= dists.sum(axis=1, keepdims=True)
    return dists, labels
