"""Response generation: temperature, repetition penalty, top-k and nucleus sampling."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .data import PreparedExample, collate
from .model import CauESC


@dataclass
class DecodeConfig:
    top_p: float = 0.3
    top_k: int = 30
    temperature: float = 0.7
    repetition_penalty: float = 1.03
    max_new_tokens: int = 40
    seed: int = 0
    greedy: bool = False

    def __post_init__(self):
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.top_k < 1:
            raise ValueError(f"top_k must be a positive integer, got {self.top_k}")
        if self.temperature <= 0.0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.repetition_penalty < 1.0:
            raise ValueError(f"repetition_penalty must be >= 1, got {self.repetition_penalty}")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepTrace:
    """What the sampler saw at one step; used to audit the filters."""

    logits: np.ndarray
    seen: tuple[int, ...]
    top_k: np.ndarray
    nucleus: np.ndarray
    probs: np.ndarray
    chosen: int


@dataclass
class Generation:
    strategy: int
    tokens: list[int]
    steps: list[StepTrace] = field(default_factory=list)


def apply_repetition_penalty(logits: np.ndarray, seen, penalty: float) -> np.ndarray:
    """Positive logits of already generated tokens are divided by ``penalty``,
    negative ones multiplied."""
    out = np.array(logits, dtype=np.float64)
    if penalty == 1.0:
        return out
    ids = np.unique(np.asarray(list(seen), dtype=np.int64))
    if ids.size:
        v = out[ids]
        out[ids] = np.where(v > 0, v / penalty, v * penalty)
    return out


def _probs(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max())
    return z / z.sum()


def filter_logits(logits: np.ndarray, seen, dc: DecodeConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (candidate ids, their renormalized probabilities, the top-k ids).

    Temperature, then repetition penalty, then top-k, then the smallest
    prefix of the top-k distribution whose cumulative mass reaches
    ``top_p``.  Candidates are ordered by decreasing probability; ties
    keep the lower id first.
    """
    z = apply_repetition_penalty(np.asarray(logits, dtype=np.float64) / dc.temperature, seen,
                                 dc.repetition_penalty)
    order = np.argsort(-z, kind="stable")
    top_k = order[:min(dc.top_k, z.size)]
    p = _probs(z[top_k])
    cum = np.cumsum(p)
    n = int(np.searchsorted(cum, dc.top_p, side="left")) + 1
    n = min(n, top_k.size)
    keep = top_k[:n]
    q = p[:n] / p[:n].sum()
    return keep, q, top_k


def sample_token(logits: np.ndarray, seen, dc: DecodeConfig, rng: np.random.Generator,
                 trace: list[StepTrace] | None = None) -> int:
    if dc.greedy:
        z = apply_repetition_penalty(logits, seen, dc.repetition_penalty)
        return int(np.argmax(z))
    keep, q, top_k = filter_logits(logits, seen, dc)
    u = rng.random()
    idx = min(int(np.searchsorted(np.cumsum(q), u, side="right")), keep.size - 1)
    tok = int(keep[idx])
    if trace is not None:
        trace.append(StepTrace(np.array(logits, dtype=np.float64), tuple(seen), top_k.copy(), keep.copy(),
                               q.copy(), tok))
    return tok


def generate(model: CauESC, example: PreparedExample, eos_id: int, dc: DecodeConfig,
             trace: bool = False) -> Generation:
    """Decode one response.  The strategy is argmax p; the single variant
    instead picks the best marker logit and forces it as the first token."""
    rng = np.random.default_rng(dc.seed)
    batch = collate([example])
    steps: list[StepTrace] = []
    was_training = model.training
    model.eval()
    try:
        with ag.no_grad():
            mem = model.memory(batch)
            prefix = [model._bos]
            if model.config.variant == "single":
                first = model.decode(mem, np.asarray([prefix])).data[0, -1]
                strategy = int(np.argmax(first[np.asarray(model._marker_ids)]))
                prefix.append(model._marker_ids[strategy])
            else:
                strategy = int(np.argmax(mem.p.data[0]))
            out: list[int] = []
            while len(out) < dc.max_new_tokens and len(prefix) <= model.config.max_positions:
                logits = model.decode(mem, np.asarray([prefix])).data[0, -1]
                tok = sample_token(logits, out, dc, rng, steps if trace else None)
                if tok == eos_id:
                    break
                out.append(tok)
                prefix.append(tok)
    finally:
        model.train(was_training)
    return Generation(strategy, out, steps)
