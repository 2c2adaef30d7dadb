"""Semi-factual tri-view generation.

Each relation instance yields three sentence variants that all express the
same relation: the main view (original tokens with entity markers), an
entity-debiased view (head/tail/both replaced by bracketed type names from
an offline lexicon), and a context-debiased view (a small fraction of
context words swapped for same-POS synonyms). Entity spans in every view
are wrapped with the marker tokens <h> </h> <t> </t>.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .corpus import RelationInstance, Span

HEAD_OPEN, HEAD_CLOSE = "<h>", "</h>"
TAIL_OPEN, TAIL_CLOSE = "<t>", "</t>"
MARKER_TOKENS = (HEAD_OPEN, HEAD_CLOSE, TAIL_OPEN, TAIL_CLOSE)

MAIN_VIEW, ENTITY_VIEW, CONTEXT_VIEW = "main", "entity", "context"
VIEW_KINDS = (MAIN_VIEW, ENTITY_VIEW, CONTEXT_VIEW)

# Penn tags never considered for synonym substitution: proper nouns,
# pronouns, coordinating conjunctions, determiners, numbers. Tags that do
# not start with a letter are punctuation.
EXCLUDED_POS_TAGS = frozenset(
    {"NNP", "NNPS", "PRP", "PRP$", "WP", "WP$", "CC", "DT", "PDT", "WDT", "CD", "SYM", "LS"}
)

DEFAULT_CONTEXT_RATIO = 0.05


def derive_rng(seed: int, *keys: object) -> random.Random:
    """Deterministic per-instance random source.

    String seeding is hash-stable across processes (CPython seeds str via
    SHA-512), so parallel lanes keyed by (seed, instance_id) are
    order-independent.
    """
    return random.Random("|".join([str(seed), *map(str, keys)]))


@dataclass(frozen=True)
class MarkedSentence:
    """One view of a sentence with marker tokens around both entity spans.

    ``head_surface``/``tail_surface`` are the strings to place in the
    relation prompt: the entity surface normally, or the bare marker token
    when the entity-debiased view replaced that entity.
    """

    tokens: tuple[str, ...]
    head_surface: str
    tail_surface: str
    view_kind: str
    fallback: bool = False

    def marker_counts(self) -> dict[str, int]:
        return {m: self.tokens.count(m) for m in MARKER_TOKENS}


@dataclass(frozen=True)
class TriView:
    """The (main, entity-debiased, context-debiased) views of one instance."""

    source_id: str
    views: tuple[MarkedSentence, MarkedSentence, MarkedSentence]
    relation_label: str | None = None

    def __post_init__(self) -> None:
        kinds = tuple(v.view_kind for v in self.views)
        if kinds != VIEW_KINDS:
            raise ValueError(f"views must be ordered {VIEW_KINDS}, got {kinds}")

    @property
    def main(self) -> MarkedSentence:
        return self.views[0]


class EntityTypeLexicon:
    """Offline entity -> type-name lookup (e.g. "Beijing" -> "City").

    Keys are knowledge-base ids (exact) and surface strings (casefolded);
    kb ids win. A missing entry returns None, distinct from an entry whose
    type name is the empty string.
    """

    def __init__(self, by_kb_id: Mapping[str, str] | None = None,
                 by_surface: Mapping[str, str] | None = None):
        self._by_kb_id = dict(by_kb_id or {})
        self._by_surface = {k.casefold(): v for k, v in (by_surface or {}).items()}

    def __len__(self) -> int:
        return len(self._by_kb_id) + len(self._by_surface)

    def lookup(self, span: Span) -> str | None:
        if span.kb_id is not None and span.kb_id in self._by_kb_id:
            return self._by_kb_id[span.kb_id]
        return self._by_surface.get(span.surface.casefold())

    @classmethod
    def from_tsv(cls, path: str | Path) -> "EntityTypeLexicon":
        """Load ``surface<TAB>kb_id<TAB>type_name`` rows (kb_id may be empty)."""
        by_kb, by_surface = {}, {}
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.rstrip("\n")
                if not line or line.startswith("#"):
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields")
                surface, kb_id, type_name = parts
                if kb_id:
                    by_kb[kb_id] = type_name
                if surface:
                    by_surface[surface] = type_name
        return cls(by_kb, by_surface)


def coarse_pos(tag: str) -> str | None:
    """Map a Penn tag to the coarse class used as the synonym-lexicon key."""
    if tag.startswith("NN") and not tag.startswith("NNP"):
        return "n"
    if tag.startswith("VB"):
        return "v"
    if tag.startswith("JJ"):
        return "a"
    if tag.startswith("RB"):
        return "r"
    return None


class SynonymLexicon:
    """(word, coarse POS) -> synonym candidates.

    A word never appears among its own candidates, so no entry has the key
    word as its sole option.
    """

    def __init__(self, entries: Mapping[tuple[str, str], Sequence[str]] | None = None):
        self._entries: dict[tuple[str, str], tuple[str, ...]] = {}
        for (word, pos), candidates in (entries or {}).items():
            kept = tuple(c for c in candidates if c.casefold() != word.casefold())
            if kept:
                self._entries[(word.casefold(), pos)] = kept

    def __len__(self) -> int:
        return len(self._entries)

    def lookup(self, word: str, pos: str | None) -> tuple[str, ...]:
        if pos is None:
            return ()
        return self._entries.get((word.casefold(), pos), ())

    @classmethod
    def from_tsv(cls, path: str | Path) -> "SynonymLexicon":
        """Load ``word<TAB>pos<TAB>syn1|syn2|...`` rows; pos is n/v/a/r."""
        entries: dict[tuple[str, str], list[str]] = {}
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.rstrip("\n")
                if not line or line.startswith("#"):
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields")
                word, pos, raw = parts
                entries.setdefault((word, pos), []).extend(
                    c for c in raw.split("|") if c
                )
        return cls(entries)


def _ordered_spans(instance: RelationInstance) -> list[tuple[str, Span]]:
    spans = [("head", instance.head_span), ("tail", instance.tail_span)]
    spans.sort(key=lambda item: item[1].start)
    return spans


def _wrap_markers(tokens: Sequence[str], head: tuple[int, int], tail: tuple[int, int]) -> tuple[str, ...]:
    """Insert <h>..</h> and <t>..</t> around the given half-open ranges."""
    out = list(tokens)
    inserts = sorted(
        [(head, HEAD_OPEN, HEAD_CLOSE), (tail, TAIL_OPEN, TAIL_CLOSE)],
        key=lambda item: item[0][0],
        reverse=True,
    )
    for (start, end), opener, closer in inserts:
        out.insert(end, closer)
        out.insert(start, opener)
    return tuple(out)


def _rebuild(
    instance: RelationInstance,
    head_tokens: Sequence[str] | None,
    tail_tokens: Sequence[str] | None,
    context_subs: Mapping[int, Sequence[str]] | None = None,
) -> tuple[str, ...]:
    """Reassemble the sentence with per-span and per-token substitutions,
    then wrap markers around the (possibly shifted) entity spans."""
    context_subs = context_subs or {}
    spans = {
        "head": (instance.head_span, head_tokens),
        "tail": (instance.tail_span, tail_tokens),
    }
    out: list[str] = []
    new_ranges: dict[str, tuple[int, int]] = {}
    i = 0
    n = len(instance.tokens)
    while i < n:
        placed = False
        for name, (span, replacement) in spans.items():
            if i == span.start:
                pieces = list(replacement) if replacement is not None else list(
                    instance.tokens[span.start : span.end]
                )
                new_ranges[name] = (len(out), len(out) + len(pieces))
                out.extend(pieces)
                i = span.end
                placed = True
                break
        if placed:
            continue
        out.extend(context_subs.get(i, (instance.tokens[i],)))
        i += 1
    return _wrap_markers(out, new_ranges["head"], new_ranges["tail"])


def main_view(instance: RelationInstance) -> MarkedSentence:
    """Original tokens with entity markers inserted; nothing else changes."""
    instance.validate()
    return MarkedSentence(
        tokens=_rebuild(instance, None, None),
        head_surface=instance.head_span.surface,
        tail_surface=instance.tail_span.surface,
        view_kind=MAIN_VIEW,
    )


def entity_debiased_view(
    instance: RelationInstance,
    lexicon: EntityTypeLexicon,
    rng: random.Random,
) -> MarkedSentence:
    """Replace the head, the tail, or both with bracketed type names.

    The substitution mode is drawn uniformly from ``rng`` (always, so the
    stream stays aligned under lexicon changes). An entity without a
    lexicon entry keeps its surface and flags the view as a fallback; a
    replaced entity's prompt slot becomes the bare <h>/<t> marker.
    """
    instance.validate()
    mode = rng.choice(("head", "tail", "both"))
    want_head = mode in ("head", "both")
    want_tail = mode in ("tail", "both")

    head_type = lexicon.lookup(instance.head_span) if want_head else None
    tail_type = lexicon.lookup(instance.tail_span) if want_tail else None
    fallback = (want_head and head_type is None) or (want_tail and tail_type is None)

    tokens = _rebuild(
        instance,
        [f"[{head_type}]"] if head_type is not None else None,
        [f"[{tail_type}]"] if tail_type is not None else None,
    )
    return MarkedSentence(
        tokens=tokens,
        head_surface=HEAD_OPEN if head_type is not None else instance.head_span.surface,
        tail_surface=TAIL_OPEN if tail_type is not None else instance.tail_span.surface,
        view_kind=ENTITY_VIEW,
        fallback=fallback,
    )


def eligible_context_indices(
    instance: RelationInstance,
    lexicon: SynonymLexicon,
    pos_tags: Sequence[str],
) -> list[int]:
    """Context token indices open to substitution: outside both entity
    spans, POS not excluded, and covered by the synonym lexicon."""
    inside = set(range(instance.head_span.start, instance.head_span.end))
    inside |= set(range(instance.tail_span.start, instance.tail_span.end))
    eligible = []
    for i, (token, tag) in enumerate(zip(instance.tokens, pos_tags)):
        if i in inside or tag in EXCLUDED_POS_TAGS or not (tag and tag[0].isalpha()):
            continue
        if lexicon.lookup(token, coarse_pos(tag)):
            eligible.append(i)
    return eligible


def context_debiased_view(
    instance: RelationInstance,
    lexicon: SynonymLexicon,
    pos_tags: Sequence[str] | None,
    rng: random.Random,
    ratio: float = DEFAULT_CONTEXT_RATIO,
) -> MarkedSentence:
    """Swap ceil(ratio * eligible) context words for same-POS synonyms.

    Entity spans are never touched. With no eligible token (or no POS
    tags) the view degrades to the main-view content with fallback=True.
    Multi-token synonyms are spliced in place.
    """
    instance.validate()
    if pos_tags is not None and len(pos_tags) != len(instance.tokens):
        raise ValueError(
            f"instance {instance.instance_id!r}: {len(pos_tags)} pos tags "
            f"for {len(instance.tokens)} tokens"
        )
    eligible = (
        eligible_context_indices(instance, lexicon, pos_tags) if pos_tags is not None else []
    )
    if not eligible:
        return MarkedSentence(
            tokens=_rebuild(instance, None, None),
            head_surface=instance.head_span.surface,
            tail_surface=instance.tail_span.surface,
            view_kind=CONTEXT_VIEW,
            fallback=True,
        )
    n_replace = math.ceil(ratio * len(eligible))
    chosen = sorted(rng.sample(eligible, n_replace))
    subs: dict[int, list[str]] = {}
    for i in chosen:
        candidates = lexicon.lookup(instance.tokens[i], coarse_pos(pos_tags[i]))
        synonym = rng.choice(candidates)
        subs[i] = synonym.replace("_", " ").split()
    return MarkedSentence(
        tokens=_rebuild(instance, None, None, subs),
        head_surface=instance.head_span.surface,
        tail_surface=instance.tail_span.surface,
        view_kind=CONTEXT_VIEW,
    )


def generate_tri_view(
    instance: RelationInstance,
    entity_lexicon: EntityTypeLexicon,
    synonym_lexicon: SynonymLexicon,
    seed: int,
    pos_tags: Sequence[str] | None = None,
    context_ratio: float = DEFAULT_CONTEXT_RATIO,
) -> TriView:
    """Produce the three views of one instance.

    Deterministic under (seed, instance_id): the random stream is derived
    from both, so per-instance generation can run in any order or in
    parallel. POS tags default to the ones carried by the instance.
    """
    rng = derive_rng(seed, "tri_view", instance.instance_id)
    tags = pos_tags if pos_tags is not None else instance.pos_tags
    views = (
        main_view(instance),
        entity_debiased_view(instance, entity_lexicon, rng),
        context_debiased_view(instance, synonym_lexicon, tags, rng, context_ratio),
    )
    return TriView(source_id=instance.instance_id, views=views,
                   relation_label=instance.relation_label)


def generate_tri_views(
    instances: Sequence[RelationInstance],
    entity_lexicon: EntityTypeLexicon,
    synonym_lexicon: SynonymLexicon,
    seed: int,
    context_ratio: float = DEFAULT_CONTEXT_RATIO,
) -> dict[str, TriView]:
    return {
        ins.instance_id: generate_tri_view(
            ins, entity_lexicon, synonym_lexicon, seed, context_ratio=context_ratio
        )
        for ins in instances
    }


def write_tri_views(views: Mapping[str, TriView], path: str | Path) -> None:
    """Cache generated views as JSON lines, one instance per line."""
    with open(path, "w", encoding="utf-8") as f:
        for source_id in sorted(views):
            tv = views[source_id]
            record = {
                "source_id": tv.source_id,
                "relation_label": tv.relation_label,
                "views": [
                    {
                        "tokens": list(v.tokens),
                        "head_surface": v.head_surface,
                        "tail_surface": v.tail_surface,
                        "view_kind": v.view_kind,
                        "fallback": v.fallback,
                    }
                    for v in tv.views
                ],
            }
            f.write(json.dumps(record, ensure_ascii=False) + "\n")


def read_tri_views(path: str | Path) -> dict[str, TriView]:
    views: dict[str, TriView] = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            views[record["source_id"]] = TriView(
                source_id=record["source_id"],
                relation_label=record.get("relation_label"),
                views=tuple(
                    MarkedSentence(
                        tokens=tuple(v["tokens"]),
                        head_surface=v["head_surface"],
                        tail_surface=v["tail_surface"],
                        view_kind=v["view_kind"],
                        fallback=v["fallback"],
                    )
                    for v in record["views"]
                ),
            )
    return views
