"""Joint strategy/response training and corpus evaluation."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from . import metrics
from .autograd import NumericError
from .data import PreparedExample, collate
from .decoding import DecodeConfig, generate
from .model import CauESC
from .optim import OptimizerState, clip_grad_norm, optimizer_step

REPORT_KEYS = ("ACC", "PPL", "R-L", "B-2", "B-3", "B-4", "D-1", "D-2")


@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 20
    learning_rate: float = 1e-3
    warmup_steps: int = 120
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    max_grad_norm: float = 1.0
    eval_every: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")

    def optimizer(self) -> OptimizerState:
        return OptimizerState(self.learning_rate, self.warmup_steps, self.beta1, self.beta2,
                              self.epsilon, self.weight_decay)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossReport:
    step: int
    L_s: float
    L_r: float
    L: float
    tokens: int

    def row(self) -> list:
        return [self.step, repr(self.L_s), repr(self.L_r), repr(self.L)]


@dataclass
class TrainResult:
    curve: list[LossReport]
    dev_curve: list[LossReport]
    best_step: int
    best_state: dict[str, np.ndarray]
    optimizer: OptimizerState
    initial: LossReport | None = None

    @property
    def final(self) -> LossReport:
        return self.curve[-1]


def batches(n: int, batch_size: int, seed: int):
    """Endless stream of index batches: a fresh seeded permutation per epoch,
    consumed ``batch_size`` at a time across epoch boundaries."""
    rng = np.random.default_rng(seed)
    buf: list[int] = []
    while True:
        while len(buf) < batch_size:
            buf.extend(int(i) for i in rng.permutation(n))
        yield buf[:batch_size]
        buf = buf[batch_size:]


def _report(model: CauESC, examples: Sequence[PreparedExample], step: int) -> tuple[LossReport, object]:
    batch = collate(examples)
    out = model(batch)
    total, l_s, l_r = model.loss(out, batch)
    tokens = int((out.decoder_targets != -100).sum())
    return LossReport(step, l_s.item(), l_r.item(), total.item(), tokens), total


def evaluate_loss(model: CauESC, examples: Sequence[PreparedExample], batch_size: int = 20) -> LossReport:
    """Teacher-forced L_s, L_r and L averaged over ``examples``."""
    if not examples:
        raise ValueError("no examples to evaluate")
    s_sum = r_sum = 0.0
    tokens = 0
    was = model.training
    model.eval()
    try:
        with ag.no_grad():
            for i in range(0, len(examples), batch_size):
                chunk = examples[i:i + batch_size]
                rep, _ = _report(model, chunk, 0)
                s_sum += rep.L_s * len(chunk)
                r_sum += rep.L_r * len(chunk)
                tokens += rep.tokens
    finally:
        model.train(was)
    n = len(examples)
    l_s, l_r = s_sum / n, r_sum / n
    return LossReport(0, l_s, l_r, l_s + l_r, tokens)


def train(model: CauESC, train_examples: Sequence[PreparedExample], tc: TrainConfig,
          dev_examples: Sequence[PreparedExample] | None = None,
          log: Callable[[dict], None] | None = None) -> TrainResult:
    """Minimize L = L_s + L_r with AdamW; keep the state with the lowest dev L
    (or the final state when there is no dev set)."""
    if not train_examples:
        raise ValueError("training corpus is empty")
    opt = tc.optimizer()
    params = model.parameters()
    stream = batches(len(train_examples), min(tc.batch_size, len(train_examples)), tc.seed)
    curve: list[LossReport] = []
    dev_curve: list[LossReport] = []
    best_state = model.state_dict()
    best_step, best_dev = 0, math.inf
    initial = None

    def check_dev(step: int) -> None:
        nonlocal best_state, best_step, best_dev
        if not dev_examples:
            return
        rep = evaluate_loss(model, dev_examples, tc.batch_size)
        rep.step = step
        dev_curve.append(rep)
        if log:
            log({"event": "dev", "step": step, "L_s": rep.L_s, "L_r": rep.L_r, "L": rep.L})
        if rep.L < best_dev:
            best_dev, best_step, best_state = rep.L, step, model.state_dict()

    model.train()
    for step in range(1, tc.steps + 1):
        idx = next(stream)
        model.zero_grad()
        rep, total = _report(model, [train_examples[i] for i in idx], step)
        if not all(math.isfinite(v) for v in (rep.L_s, rep.L_r, rep.L)):
            raise NumericError(f"non-finite loss at step {step}: L_s={rep.L_s} L_r={rep.L_r} "
                               f"lr={opt.lr_at(step)} batch={idx}")
        if initial is None:
            initial = rep
        total.backward()
        norm = clip_grad_norm(params, tc.max_grad_norm)
        if not math.isfinite(norm):
            raise NumericError(f"non-finite gradient norm at step {step}: L={rep.L} lr={opt.lr_at(step)}")
        optimizer_step(params, opt)
        curve.append(rep)
        if log:
            log({"event": "step", "step": step, "L_s": rep.L_s, "L_r": rep.L_r, "L": rep.L,
                 "grad_norm": norm, "lr": opt.lr_at(step)})
        if tc.eval_every and step % tc.eval_every == 0:
            check_dev(step)
    if dev_examples and (not dev_curve or dev_curve[-1].step != tc.steps):
        check_dev(tc.steps)
    if not dev_examples:
        best_state, best_step = model.state_dict(), tc.steps
    model.eval()
    return TrainResult(curve, dev_curve, best_step, best_state, opt, initial)


def write_curve(curve: Sequence[LossReport], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "L_s", "L_r", "L"])
        for rep in curve:
            w.writerow(rep.row())


# evaluation ------------------------------------------------------------------

@dataclass
class EvalReport:
    ACC: float
    PPL: float
    R_L: float
    B_2: float
    B_3: float
    B_4: float
    D_1: float
    D_2: float
    confusion: np.ndarray
    hypotheses: list[list[str]] = field(default_factory=list)
    strategies: list[int] = field(default_factory=list)

    def as_table(self) -> dict[str, float]:
        """Table-ordered scores; everything but PPL is in percent."""
        raw = [self.ACC, self.PPL, self.R_L, self.B_2, self.B_3, self.B_4, self.D_1, self.D_2]
        return {k: (v if k == "PPL" else 100.0 * v) for k, v in zip(REPORT_KEYS, raw)}


def teacher_forced(model: CauESC, examples: Sequence[PreparedExample],
                   batch_size: int = 20) -> tuple[list[int], float, int]:
    """Predicted strategies, summed response NLL and response token count."""
    preds: list[int] = []
    nll, count = 0.0, 0
    was = model.training
    model.eval()
    try:
        with ag.no_grad():
            for i in range(0, len(examples), batch_size):
                batch = collate(examples[i:i + batch_size])
                out = model(batch)
                preds.extend(int(j) for j in np.argmax(out.strategy_logits.data, axis=-1))
                logits, targets = out.token_logits, out.decoder_targets
                if model.config.variant == "single":
                    logits = ag.getitem(logits, (slice(None), slice(1, None)))
                    targets = targets[:, 1:]
                nll += ag.cross_entropy(logits, targets, -100, "sum").item()
                count += int((targets != -100).sum())
    finally:
        model.train(was)
    return preds, nll, count


def evaluate(model: CauESC, examples: Sequence[PreparedExample], vocab, dc: DecodeConfig,
             batch_size: int = 20) -> EvalReport:
    if not examples:
        raise ValueError("no examples to evaluate")
    preds, nll, count = teacher_forced(model, examples, batch_size)
    gold = [e.target_strategy for e in examples]
    hyps, refs, chosen = [], [], []
    for k, ex in enumerate(examples):
        g = generate(model, ex, vocab.eos_id, DecodeConfig(**{**dc.to_dict(), "seed": dc.seed + k}))
        hyps.append(vocab.decode(g.tokens))
        refs.append(vocab.decode([t for t in ex.target_ids if t != vocab.eos_id]))
        chosen.append(g.strategy)
    return EvalReport(
        ACC=metrics.accuracy(preds, gold),
        PPL=metrics.perplexity(nll, count),
        R_L=metrics.rouge_l(hyps, refs),
        B_2=metrics.bleu(hyps, refs, 2), B_3=metrics.bleu(hyps, refs, 3), B_4=metrics.bleu(hyps, refs, 4),
        D_1=metrics.distinct(hyps, 1), D_2=metrics.distinct(hyps, 2),
        confusion=metrics.confusion(preds, gold, model.config.n_strategies),
        hypotheses=hyps, strategies=chosen)
