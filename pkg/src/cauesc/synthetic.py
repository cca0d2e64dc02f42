"""Small deterministic conversation corpora for smoke runs and overfit checks."""

from __future__ import annotations

import numpy as np

from .corpus import N_STRATEGIES, SEEKER, SUPPORTER, Conversation, Utterance

WORDS = (
    "i feel sad lonely tired angry worried scared stressed lost my job friend partner family "
    "school work exam money home dog cat sister brother mother father boss today week night "
    "cannot sleep eat talk think stop cry breakup fired gossip moved away sick hospital bills "
    "rent late alone again always never really very so much help need want try hope better"
).split()

SEEKER_OPENERS = ("hello", "hi", "hey")


def synthetic_corpus(n: int = 20, seed: int = 0, response_len: tuple[int, int] = (5, 8),
                     turns: int = 2) -> list[Conversation]:
    """``n`` conversations, each ending in a seeker turn followed by a supporter
    response.  Target strategies cycle through all strategies and every
    response is distinct.
    """
    rng = np.random.default_rng(seed)
    words = list(WORDS)

    def sentence(lo: int, hi: int) -> str:
        k = int(rng.integers(lo, hi + 1))
        return " ".join(words[int(i)] for i in rng.integers(0, len(words), size=k))

    out: list[Conversation] = []
    seen: set[str] = set()
    for c in range(n):
        utts = [Utterance(SEEKER, f"{SEEKER_OPENERS[c % 3]} {sentence(3, 6)}")]
        for _ in range(turns - 1):
            utts.append(Utterance(SUPPORTER, sentence(3, 6), int(rng.integers(N_STRATEGIES))))
            utts.append(Utterance(SEEKER, sentence(3, 6)))
        response = sentence(*response_len)
        while response in seen:
            response = sentence(*response_len)
        seen.add(response)
        utts.append(Utterance(SUPPORTER, response, c % N_STRATEGIES))
        out.append(Conversation(situation=sentence(4, 7), utterances=tuple(utts), conversation_id=f"syn-{c:03d}"))
    return out
