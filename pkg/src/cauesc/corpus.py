"""Conversations, tokenization, vocabulary and corpus-level analysis."""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SEEKER = "seeker"
SUPPORTER = "supporter"


@dataclass(frozen=True)
class Strategy:
    id: int
    name: str
    description: str

    @property
    def marker(self) -> str:
        return f"[{self.name}]"


STRATEGIES: tuple[Strategy, ...] = tuple(Strategy(i, n, d) for i, (n, d) in enumerate([
    ("Question",
     "Asking for information related to the problem to help the help-seeker articulate the issues "
     "that they face. Openended questions are best, and closed questions can be used to get specific "
     "information."),
    ("Restatement or Paraphrasing",
     "A simple, more concise rephrasing of the help-seeker’s statements that could help them see "
     "their situation more clearly."),
    ("Reflection of Feelings",
     "Articulate and describe the helpseeker’s feelings."),
    ("Self-disclosure",
     "Divulge similar experiences that you have had or emotions that you share with the help-seeker "
     "to express your empathy."),
    ("Affirmation and Reassurance",
     "Affirm the help-seeker’s strengths, motivation, and capabilities and provide reassurance "
     "and encouragement."),
    ("Providing Suggestions",
     "Provide suggestions about how to change the situation, but be careful to not overstep and tell "
     "them what to do."),
    ("Information",
     "Provide useful information to the help-seeker, for example with data, facts, opinions, "
     "resources, or by answering questions."),
    ("Others",
     "Exchange pleasantries and use other support strategies that do not fall into the above "
     "categories."),
]))
N_STRATEGIES = len(STRATEGIES)
_STRATEGY_BY_NAME = {s.name.lower(): s.id for s in STRATEGIES}


def strategy_id(name: str) -> int:
    try:
        return _STRATEGY_BY_NAME[name.strip().lower()]
    except KeyError:
        raise CorpusError(f"unknown strategy {name!r}") from None


PAD, BOS, EOS, SEP, USER, SUPPORTER_TOKEN, UNK = (
    "[PAD]", "[BOS]", "[EOS]", "[SEP]", "[USER]", "[SUPPORTER]", "[UNK]")
RESERVED: tuple[str, ...] = (PAD, BOS, EOS, SEP, USER, SUPPORTER_TOKEN, UNK) + tuple(
    s.marker for s in STRATEGIES)

_TOKEN_RE = re.compile(
    "(" + "|".join(re.escape(t) for t in sorted(RESERVED, key=len, reverse=True)) + r")|\w+|[^\w\s]")


class CorpusError(ValueError):
    """Malformed corpus, annotation or vocabulary input."""


def tokenize(text: str) -> list[str]:
    """Lowercase word/punctuation tokens; reserved markers pass through intact."""
    out = []
    for m in _TOKEN_RE.finditer(text):
        out.append(m.group(1) if m.group(1) else m.group(0).lower())
    return out


class Vocabulary:
    """Token/id bijection with the reserved tokens at fixed leading ids."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:len(RESERVED)]) != RESERVED:
            raise CorpusError("vocabulary must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise CorpusError("vocabulary tokens must be unique")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, self.index[UNK])

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def bos_id(self) -> int:
        return self.index[BOS]

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    def marker_id(self, strategy: int) -> int:
        return self.index[STRATEGIES[strategy].marker]

    @property
    def marker_ids(self) -> list[int]:
        return [self.marker_id(s.id) for s in STRATEGIES]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


def build_vocab(conversations: Iterable["Conversation"], min_count: int = 1,
                extra_texts: Iterable[str] = ()) -> Vocabulary:
    """Reserved tokens first, then tokens by descending count, ties lexicographic."""
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts: Counter[str] = Counter()
    for conv in conversations:
        for text in conv.texts():
            counts.update(tokenize(text))
    for text in extra_texts:
        counts.update(tokenize(text))
    for t in RESERVED:
        counts.pop(t, None)
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    return Vocabulary(list(RESERVED) + kept)


@dataclass(frozen=True)
class Utterance:
    speaker: str
    text: str
    strategy: int | None = None


@dataclass(frozen=True)
class Conversation:
    """A situation plus ordered utterances.

    When built as a training example, ``response``/``response_strategy``
    hold the target supporter turn and ``utterances`` is its context.
    """

    situation: str
    utterances: tuple[Utterance, ...]
    conversation_id: str = ""
    response: str | None = None
    response_strategy: int | None = None

    @property
    def strategies(self) -> list[int]:
        return [u.strategy for u in self.utterances if u.speaker == SUPPORTER]

    def texts(self) -> list[str]:
        out = [self.situation] + [u.text for u in self.utterances]
        if self.response is not None:
            out.append(self.response)
        return out


def _parse_utterance(raw: dict, ci: int, ti: int) -> Utterance:
    if not isinstance(raw, dict):
        raise CorpusError(f"conversation {ci}, turn {ti}: expected an object")
    speaker = str(raw.get("speaker", "")).strip().lower()
    if speaker in ("usr", "user"):
        speaker = SEEKER
    if speaker == "sys":
        speaker = SUPPORTER
    if speaker not in (SEEKER, SUPPORTER):
        raise CorpusError(f"conversation {ci}, turn {ti}: unknown speaker {raw.get('speaker')!r}")
    text = raw.get("text", raw.get("content"))
    if not isinstance(text, str):
        raise CorpusError(f"conversation {ci}, turn {ti}: missing text")
    strategy = raw.get("strategy")
    if strategy is None and isinstance(raw.get("annotation"), dict):
        strategy = raw["annotation"].get("strategy")
    if speaker == SEEKER and strategy is not None:
        raise CorpusError(f"conversation {ci}, turn {ti}: seeker turn carries strategy {strategy!r}")
    if speaker == SUPPORTER:
        if strategy is None:
            raise CorpusError(f"conversation {ci}, turn {ti}: supporter turn without strategy")
        try:
            sid = strategy_id(str(strategy))
        except CorpusError:
            raise CorpusError(
                f"conversation {ci}, turn {ti}: unknown strategy {strategy!r}") from None
        return Utterance(SUPPORTER, text.strip(), sid)
    return Utterance(SEEKER, text.strip(), None)


def parse_conversations(raw: object) -> list[Conversation]:
    if not isinstance(raw, list):
        raise CorpusError("corpus must be a JSON array of conversations")
    out = []
    for ci, item in enumerate(raw):
        if not isinstance(item, dict) or not isinstance(item.get("dialog"), list):
            raise CorpusError(f"conversation {ci}: expected an object with a 'dialog' list")
        situation = item.get("situation", "")
        if not isinstance(situation, str):
            raise CorpusError(f"conversation {ci}: situation must be text")
        turns = tuple(_parse_utterance(t, ci, ti) for ti, t in enumerate(item["dialog"]))
        cid = str(item.get("conversation_id", ci))
        out.append(Conversation(situation.strip(), turns, cid))
    return out


def load_esconv(path: str | Path) -> list[Conversation]:
    """Read an ESConv-style JSON array.

    Both the compact schema (``text``/``strategy``) and the public release
    layout (``content``/``annotation.strategy``) are accepted.
    """
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CorpusError(f"{path}: malformed JSON at line {exc.lineno} column {exc.colno} "
                          f"(char {exc.pos})") from None
    return parse_conversations(raw)


def dump_conversations(conversations: Iterable[Conversation]) -> list[dict]:
    out = []
    for c in conversations:
        turns = []
        for u in c.utterances:
            turn = {"speaker": u.speaker, "text": u.text}
            if u.strategy is not None:
                turn["strategy"] = STRATEGIES[u.strategy].name
            turns.append(turn)
        out.append({"conversation_id": c.conversation_id, "situation": c.situation, "dialog": turns})
    return out


def save_esconv(conversations: Iterable[Conversation], path: str | Path) -> None:
    Path(path).write_text(json.dumps(dump_conversations(conversations), indent=1, ensure_ascii=False)
                          + "\n", encoding="utf-8")


def make_examples(conv: Conversation, mode: str = "all") -> list[Conversation]:
    """Training examples: each supporter turn that directly follows a seeker turn.

    ``mode="last"`` keeps only the final such turn.
    """
    if mode not in ("all", "last"):
        raise ValueError(f"unknown example mode {mode!r}")
    out = []
    for k, u in enumerate(conv.utterances):
        if u.speaker == SUPPORTER and k > 0 and conv.utterances[k - 1].speaker == SEEKER:
            out.append(replace(conv, utterances=conv.utterances[:k], response=u.text,
                               response_strategy=u.strategy))
    return out[-1:] if mode == "last" else out


@dataclass
class SerializedContext:
    ids: list[int] = field(default_factory=list)
    utterance_index: list[int] = field(default_factory=list)
    roles: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)


def serialize_context(conv: Conversation, vocab: Vocabulary) -> SerializedContext:
    """[USER] u [SEP] for seeker turns, [<strategy>] u [SEP] for supporter turns."""
    sc = SerializedContext()
    for k, u in enumerate(conv.utterances):
        if u.speaker == SEEKER:
            head = USER
        else:
            if u.strategy is None:
                raise CorpusError("supporter turn without strategy")
            head = STRATEGIES[u.strategy].marker
        toks = [head] + tokenize(u.text) + [SEP]
        sc.ids.extend(vocab.encode(toks))
        sc.utterance_index.extend([k] * len(toks))
        sc.roles.extend([u.speaker] * len(toks))
    return sc


def detokenize_context(sc: SerializedContext, vocab: Vocabulary, situation: str = "") -> Conversation:
    """Rebuild a Conversation from serialized ids (utterances joined by spaces)."""
    marker_to_sid = {s.marker: s.id for s in STRATEGIES}
    turns = []
    cur: list[str] = []
    for tok in vocab.decode(sc.ids):
        if tok == SEP:
            head, body = cur[0], cur[1:]
            if head == USER:
                turns.append(Utterance(SEEKER, " ".join(body)))
            else:
                turns.append(Utterance(SUPPORTER, " ".join(body), marker_to_sid[head]))
            cur = []
        else:
            cur.append(tok)
    return Conversation(situation, tuple(turns))


def encode_text(text: str, vocab: Vocabulary) -> list[int]:
    return vocab.encode(tokenize(text))


def split_indices(n: int, ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0) -> dict[str, list[int]]:
    """Seeded train/dev/test split; dev and test take floor(n * ratio)."""
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"split ratios must be three nonnegative numbers summing to 1, got {list(ratios)}")
    perm = np.random.default_rng(seed).permutation(n)
    n_dev = int(np.floor(n * ratios[1] + 1e-9))
    n_test = int(np.floor(n * ratios[2] + 1e-9))
    n_train = n - n_dev - n_test
    return {
        "train": sorted(int(i) for i in perm[:n_train]),
        "dev": sorted(int(i) for i in perm[n_train:n_train + n_dev]),
        "test": sorted(int(i) for i in perm[n_train + n_dev:]),
    }


def strategy_distribution(conversations: Iterable[Conversation]) -> np.ndarray:
    counts = np.zeros(N_STRATEGIES)
    for c in conversations:
        for s in c.strategies:
            counts[s] += 1
    total = counts.sum()
    return counts / total if total else counts


def strategy_progress(conversations: Iterable[Conversation], intervals: int = 6) -> np.ndarray:
    """Per-interval strategy distribution over conversation progress.

    Row ``k`` is the distribution of strategies used by supporter turns
    whose position fraction falls in interval ``k``.  Returns an empty
    (0, 8) array when there are no supporter turns; intervals that receive
    no turns are all zero.
    """
    if intervals < 1:
        raise ValueError("intervals must be >= 1")
    counts = np.zeros((intervals, N_STRATEGIES))
    for c in conversations:
        m = len(c.utterances)
        for k, u in enumerate(c.utterances):
            if u.speaker != SUPPORTER:
                continue
            slot = min(int(np.floor(k / m * intervals)), intervals - 1)
            counts[slot, u.strategy] += 1
    if counts.sum() == 0:
        return np.zeros((0, N_STRATEGIES))
    totals = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)
