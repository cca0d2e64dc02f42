"""Binary emotion-cause masks: lexicon baseline and external annotation files."""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import SEEKER, Conversation, CorpusError, SerializedContext, tokenize

LEXICON_ANNOTATOR = "lexicon"


@dataclass(frozen=True)
class CauseAnnotation:
    conversation_id: str
    flags: tuple[int, ...]
    annotator: str
    target_index: int

    def to_json(self) -> str:
        return json.dumps({"conversation_id": self.conversation_id, "target_index": self.target_index,
                           "flags": list(self.flags), "annotator": self.annotator})


def load_lexicon(path: str | Path | None = None) -> frozenset[str]:
    """One lowercase term per line; ``None`` loads the bundled cue list."""
    if path is None:
        text = resources.files("cauesc").joinpath("data/cue_lexicon.txt").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return frozenset(t.strip().lower() for t in text.splitlines() if t.strip() and not t.startswith("#"))


def _target_index(conv: Conversation) -> int:
    for k in range(len(conv.utterances) - 1, -1, -1):
        if conv.utterances[k].speaker == SEEKER:
            return k
    return len(conv.utterances) - 1


def annotate_lexicon(conv: Conversation, lexicon: Iterable[str]) -> CauseAnnotation:
    """Flag utterances that contain a cue term; the target utterance is always flagged.

    The target is the seeker's last utterance.
    """
    if not conv.utterances:
        raise CorpusError(f"conversation {conv.conversation_id!r} has no utterances")
    cues = {t.lower() for t in lexicon}
    target = _target_index(conv)
    flags = []
    for k, u in enumerate(conv.utterances):
        flags.append(1 if k == target or cues.intersection(tokenize(u.text)) else 0)
    return CauseAnnotation(conv.conversation_id, tuple(flags), LEXICON_ANNOTATOR, target)


def write_annotations(annotations: Iterable[CauseAnnotation], path: str | Path) -> None:
    Path(path).write_text("".join(a.to_json() + "\n" for a in annotations), encoding="utf-8")


def ingest_annotations(path: str | Path, corpus: Sequence[Conversation]) -> dict[str, CauseAnnotation]:
    """Read JSON-lines annotations and validate them against ``corpus``."""
    by_id = {c.conversation_id: c for c in corpus}
    out: dict[str, CauseAnnotation] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            cid = str(rec["conversation_id"])
            flags = tuple(int(f) for f in rec["flags"])
            target = int(rec.get("target_index", len(flags) - 1))
            annotator = str(rec.get("annotator", "external"))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise CorpusError(f"{path}:{lineno}: malformed annotation ({exc})") from None
        if cid not in by_id:
            raise CorpusError(f"{path}:{lineno}: unknown conversation id {cid!r}")
        n = len(by_id[cid].utterances)
        if len(flags) != n:
            raise CorpusError(f"conversation {cid!r}: {len(flags)} flags for {n} utterances")
        if any(f not in (0, 1) for f in flags):
            raise CorpusError(f"conversation {cid!r}: flags must be 0 or 1")
        if not 0 <= target < n:
            raise CorpusError(f"conversation {cid!r}: target index {target} out of range")
        out[cid] = CauseAnnotation(cid, flags, annotator, target)
    return out


def resolve_annotations(corpus: Sequence[Conversation], lexicon: Iterable[str],
                        external: Mapping[str, CauseAnnotation] | None = None) -> dict[str, CauseAnnotation]:
    """External annotations win; the lexicon covers every other conversation."""
    lex = frozenset(lexicon)
    external = external or {}
    out = {}
    for conv in corpus:
        if conv.conversation_id in external:
            out[conv.conversation_id] = external[conv.conversation_id]
        elif conv.utterances:
            out[conv.conversation_id] = annotate_lexicon(conv, lex)
    return out


def prefix_flags(annotation: CauseAnnotation, k: int) -> tuple[int, ...]:
    """Flags for the first ``k`` utterances, as used by an example whose context ends at ``k``.

    Lexicon flags do not depend on the target except for the target
    itself, so the new last utterance is flagged to match a fresh
    lexicon pass over the prefix.
    """
    flags = list(annotation.flags[:k])
    if annotation.annotator == LEXICON_ANNOTATOR and flags:
        flags[-1] = 1
    return tuple(flags)


def expand_to_tokens(flags: Sequence[int], sc: SerializedContext) -> np.ndarray:
    """Token-level mask: each token inherits its utterance's flag."""
    n_utt = (max(sc.utterance_index) + 1) if sc.utterance_index else 0
    if len(flags) != n_utt:
        raise CorpusError(f"mask covers {len(flags)} utterances but the context has {n_utt}")
    f = np.asarray(flags, dtype=bool)
    return f[np.asarray(sc.utterance_index, dtype=np.int64)] if n_utt else np.zeros(0, dtype=bool)
