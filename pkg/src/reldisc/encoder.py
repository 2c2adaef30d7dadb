"""Relation prompts and encoder backends.

Every view is suffixed with the relation prompt "<head> [MASK] <tail>";
the encoder reads the masked position and exposes two things per input:
the hidden vector there and the softmax-normalized vocabulary
distribution. Two backends implement that contract: a pretrained masked
language model, and a deterministic mock (feature lookup plus small
trainable linear maps) that runs the full pipeline on a CPU.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .semifactual import HEAD_OPEN, MARKER_TOKENS, MarkedSentence

MASK_TOKEN = "[MASK]"


class EncoderError(ValueError):
    pass


@dataclass(frozen=True)
class PromptedInput:
    """Sentence tokens followed by the prompt suffix, with one mask."""

    tokens: tuple[str, ...]
    mask_position: int
    view_kind: str
    instance_id: str
    body_len: int  # tokens before the prompt suffix; only these may be truncated

    def __post_init__(self) -> None:
        if self.tokens[self.mask_position] != MASK_TOKEN:
            raise EncoderError(
                f"instance {self.instance_id!r}: mask_position does not point at {MASK_TOKEN}"
            )
        if self.tokens.count(MASK_TOKEN) != 1:
            raise EncoderError(f"instance {self.instance_id!r}: expected exactly one mask token")


@dataclass(frozen=True)
class RelationRepresentation:
    """Masked-position outputs for one view of one instance."""

    hidden: np.ndarray
    word_dist: np.ndarray
    view_kind: str
    instance_id: str


def build_prompt(
    view: MarkedSentence,
    head: str | None = None,
    tail: str | None = None,
    instance_id: str = "",
) -> PromptedInput:
    """Append the relation prompt "head [MASK] tail" to a view.

    The slots default to the view's recorded surfaces, which are already
    the bare <h>/<t> markers when the entity-debiased view replaced that
    entity. Multi-word surfaces contribute one token per word.
    """
    if not view.tokens:
        raise EncoderError(f"instance {instance_id!r}: empty sentence")
    head = view.head_surface if head is None else head
    tail = view.tail_surface if tail is None else tail
    head_tokens = tuple(head.split())
    tail_tokens = tuple(tail.split())
    if not head_tokens or not tail_tokens:
        raise EncoderError(f"instance {instance_id!r}: empty head or tail prompt slot")
    if MASK_TOKEN in view.tokens:
        raise EncoderError(f"instance {instance_id!r}: sentence already contains {MASK_TOKEN}")
    tokens = view.tokens + head_tokens + (MASK_TOKEN,) + tail_tokens
    return PromptedInput(
        tokens=tokens,
        mask_position=len(view.tokens) + len(head_tokens),
        view_kind=view.view_kind,
        instance_id=instance_id,
        body_len=len(view.tokens),
    )


def truncate_prompt(prompt: PromptedInput, max_tokens: int) -> PromptedInput:
    """Trim sentence-body tokens from the right until the prompt fits.

    The prompt suffix is never trimmed; if it alone exceeds the budget,
    the input is rejected by name.
    """
    if len(prompt.tokens) <= max_tokens:
        return prompt
    suffix_len = len(prompt.tokens) - prompt.body_len
    keep = max_tokens - suffix_len
    if keep < 1:
        raise EncoderError(
            f"instance {prompt.instance_id!r}: prompt suffix ({suffix_len} tokens) "
            f"does not fit the encoder length limit {max_tokens}"
        )
    tokens = prompt.tokens[:keep] + prompt.tokens[prompt.body_len :]
    return replace(
        prompt,
        tokens=tokens,
        mask_position=prompt.mask_position - (prompt.body_len - keep),
        body_len=keep,
    )


class EncoderBackend(nn.Module):
    """Contract shared by the real and mock encoders.

    ``forward_views`` returns (hidden [B, d], vocab logits [B, V]) for a
    batch of prompts; gradients flow into the backend parameters. Eval
    calls are deterministic for fixed parameters.
    """

    vocab: tuple[str, ...]
    hidden_dim: int
    max_length: int

    def forward_views(self, prompts: Sequence[PromptedInput]) -> tuple[torch.Tensor, torch.Tensor]:
        raise NotImplementedError


def _stable_uint(*keys: object) -> int:
    import hashlib

    digest = hashlib.sha256("|".join(map(str, keys)).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


class MockBackend(EncoderBackend):
    """Lookup-table encoder for desk-scale runs and tests.

    A base feature per (instance, view) comes from a table of per-key mean
    vectors plus deterministic Gaussian jitter (per-instance, then a
    smaller per-view term), keyed by the instance id or its prefix before
    "/". Ids with no table entry get pure jitter around zero. Two small
    trainable linear maps turn the base feature into the hidden vector and
    the vocabulary logits.
    """

    def __init__(
        self,
        means: Mapping[str, Sequence[float]],
        vocab: Sequence[str],
        hidden_dim: int = 16,
        seed: int = 0,
        instance_noise: float = 0.5,
        view_noise: float = 0.1,
        max_length: int = 512,
        dtype: torch.dtype = torch.float64,
    ):
        super().__init__()
        self.means = {k: np.asarray(v, dtype=np.float64) for k, v in means.items()}
        dims = {v.shape for v in self.means.values()}
        if len(dims) > 1:
            raise EncoderError(f"mean vectors disagree on dimension: {sorted(dims)}")
        self.feature_dim = next(iter(dims))[0] if dims else len(vocab)
        self.vocab = tuple(vocab)
        self.hidden_dim = hidden_dim
        self.max_length = max_length
        self.seed = seed
        self.instance_noise = instance_noise
        self.view_noise = view_noise
        self._feature_cache: dict[tuple[str, str], np.ndarray] = {}

        gen = torch.Generator().manual_seed(_stable_uint(seed, "mock-params") % 2**63)
        self.hidden_map = nn.Linear(self.feature_dim, hidden_dim, dtype=dtype)
        self.vocab_map = nn.Linear(self.feature_dim, len(self.vocab), dtype=dtype)
        with torch.no_grad():
            self.hidden_map.weight.copy_(
                torch.randn(hidden_dim, self.feature_dim, generator=gen, dtype=dtype)
                / np.sqrt(self.feature_dim)
            )
            self.hidden_map.bias.zero_()
            if len(self.vocab) == self.feature_dim:
                self.vocab_map.weight.copy_(torch.eye(self.feature_dim, dtype=dtype))
            else:
                self.vocab_map.weight.copy_(
                    torch.randn(len(self.vocab), self.feature_dim, generator=gen, dtype=dtype)
                    / np.sqrt(self.feature_dim)
                )
            self.vocab_map.bias.zero_()

    def _key_for(self, instance_id: str) -> str | None:
        if instance_id in self.means:
            return instance_id
        prefix = instance_id.split("/", 1)[0]
        return prefix if prefix in self.means else None

    def base_feature(self, instance_id: str, view_kind: str) -> np.ndarray:
        cached = self._feature_cache.get((instance_id, view_kind))
        if cached is not None:
            return cached
        key = self._key_for(instance_id)
        mean = self.means.get(key, np.zeros(self.feature_dim)) if key else np.zeros(self.feature_dim)
        inst_rng = np.random.default_rng(_stable_uint(self.seed, "inst", instance_id))
        view_rng = np.random.default_rng(_stable_uint(self.seed, "view", instance_id, view_kind))
        feature = (
            mean
            + self.instance_noise * inst_rng.standard_normal(self.feature_dim)
            + self.view_noise * view_rng.standard_normal(self.feature_dim)
        )
        self._feature_cache[(instance_id, view_kind)] = feature
        return feature

    def forward_views(self, prompts: Sequence[PromptedInput]) -> tuple[torch.Tensor, torch.Tensor]:
        for p in prompts:
            truncate_prompt(p, self.max_length)  # enforce the length contract
        base = np.stack([self.base_feature(p.instance_id, p.view_kind) for p in prompts])
        features = torch.as_tensor(base, dtype=self.hidden_map.weight.dtype)
        return self.hidden_map(features), self.vocab_map(features)


class MaskedLMBackend(EncoderBackend):
    """Pretrained masked-language-model encoder (BERT-base by default).

    Marker tokens are added to the tokenizer with fresh embeddings. The
    hidden vector is the final-layer state at the mask; the vocabulary
    logits are the MLM head output there. Requires the ``transformers``
    extra and local or downloadable weights.
    """

    def __init__(self, model_name: str = "bert-base-uncased", max_length: int = 128,
                 device: str = "cpu"):
        super().__init__()
        from transformers import AutoModelForMaskedLM, AutoTokenizer

        self.tokenizer = AutoTokenizer.from_pretrained(model_name)
        self.model = AutoModelForMaskedLM.from_pretrained(model_name)
        self.tokenizer.add_special_tokens({"additional_special_tokens": list(MARKER_TOKENS)})
        self.model.resize_token_embeddings(len(self.tokenizer))
        self.model.to(device)
        self.device = device
        ids = sorted(self.tokenizer.get_vocab().items(), key=lambda kv: kv[1])
        self.vocab = tuple(tok for tok, _ in ids)
        self.hidden_dim = self.model.config.hidden_size
        self.max_length = max_length
        self.model_name = model_name

    def _word_ids(self, word: str) -> list[int]:
        return self.tokenizer.encode(word, add_special_tokens=False)

    def _assemble(self, prompt: PromptedInput) -> list[int]:
        tok = self.tokenizer
        mask_id = tok.mask_token_id
        suffix: list[int] = []
        for i, word in enumerate(prompt.tokens[prompt.body_len :], start=prompt.body_len):
            suffix.extend([mask_id] if i == prompt.mask_position else self._word_ids(word))
        budget = self.max_length - 2 - len(suffix)  # room for [CLS]/[SEP]
        if budget < 0:
            raise EncoderError(
                f"instance {prompt.instance_id!r}: prompt suffix does not fit "
                f"the encoder length limit {self.max_length}"
            )
        body: list[int] = []
        for word in prompt.tokens[: prompt.body_len]:
            ids = self._word_ids(word)
            if len(body) + len(ids) > budget:
                break
            body.extend(ids)
        return [tok.cls_token_id, *body, *suffix, tok.sep_token_id]

    def forward_views(self, prompts: Sequence[PromptedInput]) -> tuple[torch.Tensor, torch.Tensor]:
        rows = [self._assemble(p) for p in prompts]
        width = max(len(r) for r in rows)
        pad = self.tokenizer.pad_token_id
        input_ids = torch.full((len(rows), width), pad, dtype=torch.long)
        attention = torch.zeros((len(rows), width), dtype=torch.long)
        for i, row in enumerate(rows):
            input_ids[i, : len(row)] = torch.tensor(row)
            attention[i, : len(row)] = 1
        input_ids = input_ids.to(self.device)
        attention = attention.to(self.device)
        out = self.model(input_ids=input_ids, attention_mask=attention,
                         output_hidden_states=True)
        mask_positions = (input_ids == self.tokenizer.mask_token_id).float().argmax(dim=1)
        idx = torch.arange(len(rows), device=input_ids.device)
        hidden = out.hidden_states[-1][idx, mask_positions]
        logits = out.logits[idx, mask_positions]
        return hidden, logits


def encode(
    batch: Sequence[PromptedInput],
    backend: EncoderBackend,
    mode: str = "eval",
    top_k: int | None = None,
) -> list[RelationRepresentation]:
    """Run a batch through the backend and read off the masked position.

    Eval mode is deterministic and grad-free. ``top_k`` keeps only the k
    most probable vocabulary entries (renormalized); the vector keeps its
    full width so centroid arithmetic stays aligned.
    """
    if mode not in ("train", "eval"):
        raise EncoderError(f"unknown encode mode {mode!r}")
    was_training = backend.training
    backend.train(mode == "train")
    try:
        if mode == "eval":
            with torch.no_grad():
                hidden, logits = backend.forward_views(batch)
        else:
            hidden, logits = backend.forward_views(batch)
    finally:
        backend.train(was_training)
    dists = torch.softmax(logits, dim=-1)
    hidden_np = hidden.detach().cpu().numpy()
    dists_np = dists.detach().cpu().numpy()
    if top_k is not None and top_k < dists_np.shape[-1]:
        dists_np = truncate_distribution(dists_np, top_k)
    return [
        RelationRepresentation(
            hidden=hidden_np[i],
            word_dist=dists_np[i],
            view_kind=p.view_kind,
            instance_id=p.instance_id,
        )
        for i, p in enumerate(batch)
    ]


def truncate_distribution(dists: np.ndarray, top_k: int) -> np.ndarray:
    """Zero all but the top_k most probable entries and renormalize."""
    if top_k < 1:
        raise EncoderError(f"top_k must be >= 1, got {top_k}")
    flat = dists.reshape(-1, dists.shape[-1])
    keep = np.argpartition(-flat, top_k - 1, axis=1)[:, :top_k]
    flat_out = np.zeros_like(flat)
    rows = np.arange(flat.shape[0])[:, None]
    flat_out[rows, keep] = flat[rows, keep]
    flat_out /= flat_out.sum(axis=-1, keepdims=True)
    return flat_out.reshape(dists.shape)
