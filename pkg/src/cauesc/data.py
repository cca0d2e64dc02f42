"""Turn conversations plus cause/effect artifacts into padded model batches."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .causes import CauseAnnotation, annotate_lexicon, expand_to_tokens, prefix_flags
from .corpus import (Conversation, SerializedContext, Vocabulary, encode_text, make_examples,
                     serialize_context)
from .effects import EffectBundle, EffectProvider, build_bundle

IGNORE = -100


@dataclass
class PreparedExample:
    conversation_id: str
    situation_ids: list[int]
    situation_cause: np.ndarray
    context_ids: list[int]
    context_cause: np.ndarray
    history_ids: list[int]
    effects_situation: np.ndarray
    effects_intra: np.ndarray
    effects_inter: np.ndarray
    target_ids: list[int]
    target_strategy: int
    response: str


@dataclass
class Batch:
    q_ids: np.ndarray
    q_valid: np.ndarray
    q_cause: np.ndarray
    c_ids: np.ndarray
    c_valid: np.ndarray
    c_cause: np.ndarray
    s_ids: np.ndarray
    s_valid: np.ndarray
    es: np.ndarray
    es_valid: np.ndarray
    ec_intra: np.ndarray
    ec_intra_valid: np.ndarray
    ec_inter: np.ndarray
    ec_inter_valid: np.ndarray
    targets: list[list[int]]
    strategy: np.ndarray

    @property
    def size(self) -> int:
        return len(self.strategy)


def _truncate(example: Conversation, vocab: Vocabulary, max_context_len: int) -> tuple[Conversation, int]:
    """Drop leading utterances until the serialized context fits; returns the offset dropped."""
    start = 0
    utts = example.utterances
    while start < len(utts) - 1:
        sc = serialize_context(replace(example, utterances=utts[start:]), vocab)
        if len(sc) <= max_context_len:
            break
        start += 1
    return replace(example, utterances=utts[start:]), start


def prepare_example(example: Conversation, vocab: Vocabulary, flags: Sequence[int],
                    bundle: EffectBundle, max_context_len: int = 256,
                    max_target_len: int = 64) -> PreparedExample:
    """``flags`` and ``bundle`` describe the example's (untruncated) context."""
    if not example.utterances:
        raise ValueError(f"example {example.conversation_id!r} has an empty context")
    if example.response is None or example.response_strategy is None:
        raise ValueError(f"example {example.conversation_id!r} has no target response")
    trimmed, start = _truncate(example, vocab, max_context_len)
    sc: SerializedContext = serialize_context(trimmed, vocab)
    cause = expand_to_tokens(list(flags)[start:], sc)
    ids = sc.ids
    if len(ids) > max_context_len:
        ids, cause = ids[-max_context_len:], cause[-max_context_len:]
    q_ids = encode_text(example.situation, vocab)[:max_context_len] or [vocab.bos_id]
    history = [vocab.marker_id(s) for s in trimmed.strategies] or [vocab.bos_id]
    b = bundle.prefix(len(example.utterances))
    keep_intra = np.asarray(b.intra_utterance, dtype=np.int64) >= start
    keep_inter = np.asarray(b.inter_utterance, dtype=np.int64) >= start
    target = encode_text(example.response, vocab)[:max_target_len - 1] + [vocab.eos_id]
    return PreparedExample(
        conversation_id=example.conversation_id,
        situation_ids=q_ids,
        situation_cause=np.ones(len(q_ids), dtype=bool),
        context_ids=list(ids),
        context_cause=np.asarray(cause, dtype=bool),
        history_ids=history,
        effects_situation=b.situation,
        effects_intra=b.intra[keep_intra] if len(b.intra) else b.intra,
        effects_inter=b.inter[keep_inter] if len(b.inter) else b.inter,
        target_ids=target,
        target_strategy=int(example.response_strategy),
        response=example.response,
    )


def prepare_corpus(conversations: Sequence[Conversation], vocab: Vocabulary,
                   annotations: Mapping[str, CauseAnnotation] | None,
                   bundles: Mapping[str, EffectBundle] | None = None,
                   provider: EffectProvider | None = None,
                   lexicon: frozenset[str] = frozenset(),
                   mode: str = "all", max_context_len: int = 256,
                   max_target_len: int = 64) -> list[PreparedExample]:
    """Expand conversations into examples with their cause masks and effect rows.

    Missing annotations fall back to the lexicon annotator; missing bundles
    are computed from ``provider``.
    """
    out = []
    for conv in conversations:
        examples = make_examples(conv, mode)
        if not examples:
            continue
        ann = (annotations or {}).get(conv.conversation_id) or annotate_lexicon(conv, lexicon)
        bundle = (bundles or {}).get(conv.conversation_id)
        if bundle is None:
            if provider is None:
                raise ValueError(f"no effect bundle for conversation {conv.conversation_id!r}")
            bundle = build_bundle(conv, provider)
        for ex in examples:
            k = len(ex.utterances)
            out.append(prepare_example(ex, vocab, prefix_flags(ann, k), bundle,
                                       max_context_len, max_target_len))
    return out


def _pad_ids(seqs: Sequence[Sequence[int]], pad: int) -> tuple[np.ndarray, np.ndarray]:
    n = max(1, max(len(s) for s in seqs))
    ids = np.full((len(seqs), n), pad, dtype=np.int64)
    valid = np.zeros((len(seqs), n), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        valid[i, :len(s)] = True
    return ids, valid


def _pad_flags(seqs: Sequence[np.ndarray], width: int) -> np.ndarray:
    out = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


def _pad_rows(mats: Sequence[np.ndarray], dim: int) -> tuple[np.ndarray, np.ndarray]:
    n = max(len(m) for m in mats)
    out = np.zeros((len(mats), n, dim))
    valid = np.zeros((len(mats), n), dtype=bool)
    for i, m in enumerate(mats):
        out[i, :len(m)] = m
        valid[i, :len(m)] = True
    return out, valid


def collate(examples: Sequence[PreparedExample], pad_id: int = 0) -> Batch:
    dim = examples[0].effects_situation.shape[1]
    q_ids, q_valid = _pad_ids([e.situation_ids for e in examples], pad_id)
    c_ids, c_valid = _pad_ids([e.context_ids for e in examples], pad_id)
    s_ids, s_valid = _pad_ids([e.history_ids for e in examples], pad_id)
    es, es_valid = _pad_rows([e.effects_situation for e in examples], dim)
    ia, ia_valid = _pad_rows([e.effects_intra.reshape(-1, dim) for e in examples], dim)
    ie, ie_valid = _pad_rows([e.effects_inter.reshape(-1, dim) for e in examples], dim)
    return Batch(
        q_ids, q_valid, _pad_flags([e.situation_cause for e in examples], q_ids.shape[1]),
        c_ids, c_valid, _pad_flags([e.context_cause for e in examples], c_ids.shape[1]),
        s_ids, s_valid, es, es_valid, ia, ia_valid, ie, ie_valid,
        [list(e.target_ids) for e in examples],
        np.asarray([e.target_strategy for e in examples], dtype=np.int64))
