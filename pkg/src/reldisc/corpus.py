"""Corpus ingestion and labeled/unlabeled/test split construction.

Loads relation-extraction corpora (FewRel-style and TACRED-style JSON),
validates entity spans, and carves the instance pool into the three splits
that define the open-world discovery task: a labeled split drawn from
pre-defined relations, an unlabeled split mixing pre-defined and novel
relations (gold labels hidden), and a test split covering all relations.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence


class DatasetError(ValueError):
    """Raised for malformed dataset files or records."""


class SplitError(ValueError):
    """Raised when a split request cannot be satisfied."""


@dataclass(frozen=True)
class Span:
    """Half-open token range [start, end) with its surface string."""

    start: int
    end: int
    surface: str
    kb_id: str | None = None

    def __len__(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class RelationInstance:
    """One sentence with a head/tail entity pair and an optional gold label."""

    instance_id: str
    tokens: tuple[str, ...]
    head_span: Span
    tail_span: Span
    relation_label: str | None = None
    pos_tags: tuple[str, ...] | None = None

    def validate(self) -> None:
        n = len(self.tokens)
        for name, span in (("head_span", self.head_span), ("tail_span", self.tail_span)):
            if span.start < 0 or span.end > n or span.start >= span.end:
                raise DatasetError(
                    f"instance {self.instance_id!r}: {name} [{span.start}, {span.end}) "
                    f"outside token range 0..{n}"
                )
        h, t = self.head_span, self.tail_span
        if h.start < t.end and t.start < h.end:
            raise DatasetError(f"instance {self.instance_id!r}: head and tail spans overlap")
        if self.pos_tags is not None and len(self.pos_tags) != n:
            raise DatasetError(
                f"instance {self.instance_id!r}: {len(self.pos_tags)} pos tags for {n} tokens"
            )


# Relation counts per novel ratio when nearest-integer rounding would drift
# from the canonical 41-relation setup (9/20/32 novel at 20/50/80%).
_NOVEL_COUNT_OVERRIDES: dict[int, dict[float, int]] = {
    41: {0.2: 9, 0.5: 20, 0.8: 32},
}

_NO_RELATION_LABELS = {"no_relation", "no relation"}


def _require(cond: bool, where: str, msg: str) -> None:
    if not cond:
        raise DatasetError(f"{where}: {msg}")


def _load_fewrel(path: Path) -> list[RelationInstance]:
    with open(path, encoding="utf-8") as f:
        raw = json.load(f)
    _require(isinstance(raw, dict), str(path), "expected a relation -> records mapping")
    instances = []
    for relation in sorted(raw):
        records = raw[relation]
        _require(isinstance(records, list), f"relation {relation!r}", "records must be a list")
        for idx, rec in enumerate(records):
            where = f"relation {relation!r} record {idx}"
            _require(isinstance(rec, dict), where, "record must be an object")
            tokens = rec.get("tokens")
            _require(
                isinstance(tokens, list) and tokens and all(isinstance(t, str) for t in tokens),
                where,
                "field 'tokens' must be a non-empty list of strings",
            )
            spans = {}
            for field in ("h", "t"):
                ent = rec.get(field)
                _require(
                    isinstance(ent, list) and len(ent) == 3,
                    where,
                    f"field {field!r} must be [surface, kb_id, positions]",
                )
                surface, kb_id, positions = ent
                _require(
                    isinstance(positions, list)
                    and positions
                    and all(isinstance(p, list) and p for p in positions),
                    where,
                    f"field {field!r} has no token positions",
                )
                flat = [i for p in positions for i in p]
                spans[field] = Span(min(flat), max(flat) + 1, str(surface), kb_id)
            instance = RelationInstance(
                instance_id=f"{relation}/{idx:05d}",
                tokens=tuple(tokens),
                head_span=spans["h"],
                tail_span=spans["t"],
                relation_label=relation,
            )
            instance.validate()
            instances.append(instance)
    return instances


def _load_tacred(path: Path) -> list[RelationInstance]:
    with open(path, encoding="utf-8") as f:
        raw = json.load(f)
    _require(isinstance(raw, list), str(path), "expected a list of records")
    instances = []
    for idx, rec in enumerate(raw):
        where = f"record {idx}"
        _require(isinstance(rec, dict), where, "record must be an object")
        relation = rec.get("relation")
        _require(isinstance(relation, str) and relation != "", where, "field 'relation' missing")
        if relation.lower() in _NO_RELATION_LABELS:
            continue
        tokens = rec.get("token", rec.get("tokens"))
        _require(
            isinstance(tokens, list) and tokens and all(isinstance(t, str) for t in tokens),
            where,
            "field 'token' must be a non-empty list of strings",
        )
        spans = {}
        for field, start_key, end_key in (
            ("head", "subj_start", "subj_end"),
            ("tail", "obj_start", "obj_end"),
        ):
            start, end = rec.get(start_key), rec.get(end_key)
            _require(
                isinstance(start, int) and isinstance(end, int),
                where,
                f"fields {start_key!r}/{end_key!r} must be integers",
            )
            # TACRED span ends are inclusive.
            spans[field] = Span(start, end + 1, " ".join(tokens[start : end + 1]))
        pos = rec.get("stanford_pos")
        instance = RelationInstance(
            instance_id=str(rec.get("id", f"tacred/{idx:06d}")),
            tokens=tuple(tokens),
            head_span=spans["head"],
            tail_span=spans["tail"],
            relation_label=relation,
            pos_tags=tuple(pos) if isinstance(pos, list) else None,
        )
        instance.validate()
        instances.append(instance)
    return instances


def load_dataset(path: str | Path, format: str) -> list[RelationInstance]:
    """Load a relation corpus, returning instances sorted by instance_id.

    ``format`` is one of ``fewrel-json`` (relation -> record list, entity
    fields ``h``/``t`` as [surface, kb_id, positions]) or ``tacred-json``
    (record list with inclusive subj/obj index pairs). TACRED records
    labeled "no_relation" are dropped.
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"dataset file not found: {path}")
    if format == "fewrel-json":
        instances = _load_fewrel(path)
    elif format == "tacred-json":
        instances = _load_tacred(path)
    else:
        raise DatasetError(f"unknown dataset format {format!r}")
    instances.sort(key=lambda ins: ins.instance_id)
    seen: set[str] = set()
    for ins in instances:
        _require(ins.instance_id not in seen, ins.instance_id, "duplicate instance_id")
        seen.add(ins.instance_id)
    return instances


def load_pos_sidecar(path: str | Path) -> dict[str, tuple[str, ...]]:
    """Read a tab-separated sidecar: ``instance_id<TAB>tag tag tag ...``."""
    mapping: dict[str, tuple[str, ...]] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DatasetError(f"{path}:{lineno}: expected 'id<TAB>tags'")
            mapping[parts[0]] = tuple(parts[1].split())
    return mapping


def attach_pos_tags(
    instances: Sequence[RelationInstance], tags: Mapping[str, Sequence[str]]
) -> list[RelationInstance]:
    """Return instances with pos_tags filled in from a sidecar mapping."""
    out = []
    for ins in instances:
        want = tags.get(ins.instance_id)
        if want is None:
            out.append(ins)
            continue
        if len(want) != len(ins.tokens):
            raise DatasetError(
                f"instance {ins.instance_id!r}: sidecar has {len(want)} tags "
                f"for {len(ins.tokens)} tokens"
            )
        out.append(replace(ins, pos_tags=tuple(want)))
    return out


@dataclass(frozen=True)
class FixedCountPolicy:
    """Fixed per-relation counts (FewRel-style sizing)."""

    test_per_relation: int = 100
    unlabeled_per_relation: int = 300
    labeled_per_relation: int = 300


@dataclass(frozen=True)
class FractionPolicy:
    """Fractional sizing (TACRED-style): test share first, then the remainder
    is halved into unlabeled and (for pre-defined relations) labeled."""

    test_fraction: float = 0.15
    unlabeled_fraction: float = 0.5


SplitPolicy = FixedCountPolicy | FractionPolicy

FEWREL_POLICY = FixedCountPolicy()
TACRED_POLICY = FractionPolicy()


@dataclass(frozen=True)
class SplitSpec:
    """Id-level description of the labeled/unlabeled/test partition."""

    labeled_ids: tuple[str, ...]
    unlabeled_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    predefined_relations: tuple[str, ...]
    novel_relations: tuple[str, ...]
    novel_ratio: float

    def validate(self) -> None:
        lab, unl, tst = set(self.labeled_ids), set(self.unlabeled_ids), set(self.test_ids)
        if lab & unl or lab & tst or unl & tst:
            raise SplitError("labeled/unlabeled/test id sets must be pairwise disjoint")
        if set(self.predefined_relations) & set(self.novel_relations):
            raise SplitError("pre-defined and novel relation sets must be disjoint")


def novel_relation_count(num_relations: int, novel_ratio: float) -> int:
    """Number of novel relations for a given ratio.

    Exact when the product is integral; otherwise nearest-integer, except
    for corpus sizes with explicit canonical counts (41 relations).
    """
    if not 0.0 <= novel_ratio < 1.0:
        raise SplitError(f"novel_ratio must be in [0, 1), got {novel_ratio}")
    override = _NOVEL_COUNT_OVERRIDES.get(num_relations, {})
    for ratio, count in override.items():
        if abs(ratio - novel_ratio) < 1e-9:
            return count
    exact = novel_ratio * num_relations
    return round(exact)


def _sizes_for(policy: SplitPolicy, n_available: int, predefined: bool) -> tuple[int, int, int]:
    """(test, unlabeled, labeled) counts for one relation; labeled is 0 for novel."""
    if isinstance(policy, FixedCountPolicy):
        test, unl = policy.test_per_relation, policy.unlabeled_per_relation
        lab = policy.labeled_per_relation if predefined else 0
    else:
        test = round(policy.test_fraction * n_available)
        rest = n_available - test
        unl = round(policy.unlabeled_fraction * rest)
        lab = rest - unl if predefined else 0
    return test, unl, lab


def build_splits(
    instances: Sequence[RelationInstance],
    novel_ratio: float,
    policy: SplitPolicy,
    seed: int,
) -> SplitSpec:
    """Partition instances into labeled/unlabeled/test splits.

    Novel relations are drawn uniformly at random under ``seed``; instance
    sampling within each relation is uniform without replacement. The
    labeled split contains only pre-defined relations, the unlabeled split
    mixes pre-defined and novel, and the test split covers every relation.
    """
    by_relation: dict[str, list[str]] = {}
    for ins in instances:
        if ins.relation_label is None:
            raise SplitError(f"instance {ins.instance_id!r} has no relation label")
        by_relation.setdefault(ins.relation_label, []).append(ins.instance_id)
    relations = sorted(by_relation)
    if not relations:
        raise SplitError("no instances to split")

    n_novel = novel_relation_count(len(relations), novel_ratio)
    rng = random.Random(seed)
    novel = sorted(rng.sample(relations, n_novel))
    predefined = sorted(set(relations) - set(novel))

    labeled: list[str] = []
    unlabeled: list[str] = []
    test: list[str] = []
    for relation in relations:
        ids = sorted(by_relation[relation])
        is_pre = relation in set(predefined)
        n_test, n_unl, n_lab = _sizes_for(policy, len(ids), is_pre)
        needed = n_test + n_unl + n_lab
        if needed > len(ids):
            raise SplitError(
                f"relation {relation!r} has {len(ids)} instances, needs {needed} "
                f"under the sizing policy"
            )
        if n_test < 1 or n_unl < 1 or (is_pre and n_lab < 1):
            raise SplitError(f"relation {relation!r}: sizing policy yields an empty split")
        rng.shuffle(ids)
        test.extend(ids[:n_test])
        unlabeled.extend(ids[n_test : n_test + n_unl])
        labeled.extend(ids[n_test + n_unl : needed])

    spec = SplitSpec(
        labeled_ids=tuple(sorted(labeled)),
        unlabeled_ids=tuple(sorted(unlabeled)),
        test_ids=tuple(sorted(test)),
        predefined_relations=tuple(predefined),
        novel_relations=tuple(novel),
        novel_ratio=novel_ratio,
    )
    spec.validate()
    return spec


_MANIFEST_SECTIONS = ("predefined_relations", "novel_relations", "labeled", "unlabeled", "test")


def write_manifest(spec: SplitSpec, path: str | Path) -> None:
    """Serialize a SplitSpec to a plain-text manifest, one id per line."""
    lines = [f"novel_ratio\t{spec.novel_ratio!r}"]
    for section, values in zip(
        _MANIFEST_SECTIONS,
        (spec.predefined_relations, spec.novel_relations, spec.labeled_ids,
         spec.unlabeled_ids, spec.test_ids),
    ):
        lines.append(f"[{section}]")
        lines.extend(values)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path: str | Path) -> SplitSpec:
    text = Path(path).read_text(encoding="utf-8")
    sections: dict[str, list[str]] = {name: [] for name in _MANIFEST_SECTIONS}
    current: list[str] | None = None
    novel_ratio: float | None = None
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line:
            continue
        if line.startswith("novel_ratio\t"):
            novel_ratio = float(line.split("\t", 1)[1])
        elif line.startswith("[") and line.endswith("]"):
            name = line[1:-1]
            if name not in sections:
                raise SplitError(f"{path}:{lineno}: unknown manifest section {name!r}")
            current = sections[name]
        elif current is None:
            raise SplitError(f"{path}:{lineno}: content before any section header")
        else:
            current.append(line)
    if novel_ratio is None:
        raise SplitError(f"{path}: missing novel_ratio header")
    spec = SplitSpec(
        labeled_ids=tuple(sections["labeled"]),
        unlabeled_ids=tuple(sections["unlabeled"]),
        test_ids=tuple(sections["test"]),
        predefined_relations=tuple(sections["predefined_relations"]),
        novel_relations=tuple(sections["novel_relations"]),
        novel_ratio=novel_ratio,
    )
    spec.validate()
    return spec


@dataclass(frozen=True)
class SplitData:
    """Materialized splits: unlabeled instances carry no gold label."""

    labeled: tuple[RelationInstance, ...]
    unlabeled: tuple[RelationInstance, ...]
    test: tuple[RelationInstance, ...]
    predefined_relations: tuple[str, ...]
    novel_relations: tuple[str, ...]


def materialize_splits(
    instances: Sequence[RelationInstance], spec: SplitSpec
) -> SplitData:
    """Resolve a SplitSpec against the instance pool.

    The unlabeled split's gold labels are stripped; labeled and test
    instances keep theirs.
    """
    by_id = {ins.instance_id: ins for ins in instances}
    missing = [i for ids in (spec.labeled_ids, spec.unlabeled_ids, spec.test_ids)
               for i in ids if i not in by_id]
    if missing:
        raise SplitError(f"manifest references unknown instance ids, e.g. {missing[0]!r}")
    return SplitData(
        labeled=tuple(by_id[i] for i in spec.labeled_ids),
        unlabeled=tuple(replace(by_id[i], relation_label=None) for i in spec.unlabeled_ids),
        test=tuple(by_id[i] for i in spec.test_ids),
        predefined_relations=spec.predefined_relations,
        novel_relations=spec.novel_relations,
    )
