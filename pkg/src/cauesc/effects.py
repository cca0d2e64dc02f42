"""Per-utterance effect vectors for the six effect relations, and their bundles.

:class:`HashedEffectProvider` stands in for a commonsense generator: it is
a deterministic function of (normalized text, relation).  Any provider
returning one vector per (utterance, relation) can replace it; a real
generator adapter would format its input as ``"<utterance> [MASK] <rel>"``
and mean-pool the last encoder layer into that one vector.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Protocol

import numpy as np

from .container import FormatError, read_container, write_container
from .corpus import SEEKER, SUPPORTER, Conversation


@dataclass(frozen=True)
class Relation:
    name: str
    polarity: str
    definition: str


RELATIONS: dict[str, Relation] = {r.name: r for r in [
    Relation("xReact", "intra", "how the subject of the event feels afterwards"),
    Relation("xEffect", "intra", "what happens to the subject as a result"),
    Relation("xWant", "intra", "what the subject would like to do next"),
    Relation("oReact", "inter", "how other participants feel afterwards"),
    Relation("oEffect", "inter", "what happens to other participants as a result"),
    Relation("oWant", "inter", "what other participants would like to do next"),
]}
INTRA = ("xReact", "xEffect", "xWant")
INTER = ("oReact", "oEffect", "oWant")
UNUSED_RELATIONS = ("xAttr", "xIntent", "xNeed")


class UnsupportedRelation(ValueError):
    pass


class EffectProvider(Protocol):
    dim: int

    def effect_of(self, text: str, relation: str) -> np.ndarray: ...


def _seed(*parts: str) -> int:
    h = hashlib.blake2b("\x1f".join(parts).encode("utf-8"), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def normalize(text: str) -> str:
    return " ".join(text.lower().split())


class HashedEffectProvider:
    """Seeded random projection of character trigrams plus a relation vector.

    Text and relation parts are each unit length, so two relations on the
    same text sit well apart while staying text-sensitive.  The empty
    text maps to the bare relation vector (the null event).
    """

    def __init__(self, dim: int = 64, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self._trigram = lru_cache(maxsize=65536)(self._trigram_vector)
        self._text = lru_cache(maxsize=16384)(self._text_vector)

    def _trigram_vector(self, gram: str) -> np.ndarray:
        return np.random.default_rng(_seed("tri", str(self.seed), gram)).standard_normal(self.dim)

    def _text_vector(self, text: str) -> np.ndarray:
        if not text:
            return np.zeros(self.dim)
        padded = f"  {text} "
        grams = sorted(padded[i:i + 3] for i in range(len(padded) - 2))
        acc = np.zeros(self.dim)
        for g in grams:
            acc += self._trigram(g)
        return acc / np.linalg.norm(acc)

    def relation_vector(self, relation: str) -> np.ndarray:
        v = np.random.default_rng(_seed("rel", str(self.seed), relation)).standard_normal(self.dim)
        return v / np.linalg.norm(v)

    def null_vector(self, relation: str) -> np.ndarray:
        return self.relation_vector(relation)

    def effect_of(self, text: str, relation: str) -> np.ndarray:
        if relation not in RELATIONS:
            raise UnsupportedRelation(f"relation {relation!r} is not one of {sorted(RELATIONS)}")
        return self._text(normalize(text)) + self.relation_vector(relation)


@dataclass
class EffectBundle:
    """Effect rows for one conversation.

    ``situation`` holds the three intra rows of the situation; ``intra``
    has three rows per seeker utterance and ``inter`` three per supporter
    utterance, ordered by utterance then by the fixed relation order.
    ``*_utterance`` record the source utterance index of every row.
    """

    dim: int
    situation: np.ndarray
    intra: np.ndarray
    inter: np.ndarray
    intra_utterance: list[int] = field(default_factory=list)
    inter_utterance: list[int] = field(default_factory=list)

    @property
    def context(self) -> np.ndarray:
        return np.concatenate([self.intra, self.inter], axis=0)

    def relation_names(self, part: str) -> list[str]:
        rows = {"situation": len(self.situation), "intra": len(self.intra), "inter": len(self.inter)}[part]
        rels = INTER if part == "inter" else INTRA
        return [rels[i % 3] for i in range(rows)]

    def prefix(self, k: int) -> "EffectBundle":
        """Restrict to rows that come from the first ``k`` utterances."""
        ia = np.asarray(self.intra_utterance, dtype=np.int64)
        ie = np.asarray(self.inter_utterance, dtype=np.int64)
        mi = ia < k if ia.size else np.zeros(0, dtype=bool)
        me = ie < k if ie.size else np.zeros(0, dtype=bool)
        return EffectBundle(self.dim, self.situation, self.intra[mi], self.inter[me],
                            [int(i) for i in ia[mi]], [int(i) for i in ie[me]])

    def equals(self, other: "EffectBundle") -> bool:
        return (self.dim == other.dim and self.intra_utterance == other.intra_utterance
                and self.inter_utterance == other.inter_utterance
                and all(np.array_equal(a, b) for a, b in
                        [(self.situation, other.situation), (self.intra, other.intra),
                         (self.inter, other.inter)]))


def _rows(provider: EffectProvider, text: str, rels: Iterable[str]) -> list[np.ndarray]:
    return [np.asarray(provider.effect_of(text, r), dtype=np.float64) for r in rels]


def build_bundle(conv: Conversation, provider: EffectProvider) -> EffectBundle:
    """Intra relations on the situation and seeker turns, inter relations on supporter turns."""
    d = provider.dim
    situation = np.stack(_rows(provider, conv.situation, INTRA))
    intra, inter, ia, ie = [], [], [], []
    for k, u in enumerate(conv.utterances):
        if u.speaker == SEEKER:
            intra.extend(_rows(provider, u.text, INTRA))
            ia.extend([k] * 3)
        elif u.speaker == SUPPORTER:
            inter.extend(_rows(provider, u.text, INTER))
            ie.extend([k] * 3)
    return EffectBundle(
        d, situation,
        np.stack(intra) if intra else np.zeros((0, d)),
        np.stack(inter) if inter else np.zeros((0, d)),
        ia, ie)


CACHE_KIND = "effect-cache"


def cache_bundles(bundles: dict[str, EffectBundle], path: str | Path, dim: int) -> None:
    matrices = {}
    index = {}
    for cid, b in bundles.items():
        matrices[f"{cid}/situation"] = b.situation
        matrices[f"{cid}/intra"] = b.intra.reshape(-1, dim)
        matrices[f"{cid}/inter"] = b.inter.reshape(-1, dim)
        index[cid] = {"intra_utterance": b.intra_utterance, "inter_utterance": b.inter_utterance}
    write_container(path, matrices, {"kind": CACHE_KIND, "dims": {"effect_dim": dim},
                                     "conversations": index})


def load_cached(path: str | Path) -> dict[str, EffectBundle]:
    header, matrices = read_container(path)
    if header.get("kind") != CACHE_KIND:
        raise FormatError(f"{path}: not an effect cache (kind={header.get('kind')!r})")
    dim = int(header["dims"]["effect_dim"])
    out = {}
    for cid, meta in header["conversations"].items():
        try:
            out[cid] = EffectBundle(dim, matrices[f"{cid}/situation"], matrices[f"{cid}/intra"],
                                    matrices[f"{cid}/inter"], list(meta["intra_utterance"]),
                                    list(meta["inter_utterance"]))
        except KeyError as exc:
            raise FormatError(f"{path}: missing matrix {exc} for conversation {cid!r}") from None
    return out


def cache_bundle(bundle: EffectBundle, path: str | Path) -> None:
    cache_bundles({"0": bundle}, path, bundle.dim)


def load_bundle(path: str | Path) -> EffectBundle:
    return next(iter(load_cached(path).values()))
