"""The cause-aware encoder, causal interaction module and strategy executors."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autograd as ag
from .attention import CrossAttentionBlock, DecoderLayer, EncoderLayer, MultiHeadAttention, causal_mask
from .autograd import Parameter, ShapeError, Value
from .container import FormatError, read_container, write_container
from .corpus import N_STRATEGIES, STRATEGIES, Vocabulary, encode_text
from .data import IGNORE, Batch
from .nn import LayerNorm, Linear, Module

VARIANTS = ("full", "label", "multi", "single")


@dataclass
class ModelConfig:
    vocab_size: int = 0
    hidden: int = 64
    heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    ffn: int = 256
    n_strategies: int = N_STRATEGIES
    effect_dim: int = 64
    max_positions: int = 512
    dropout: float = 0.0
    init_std: float = 0.02
    ln_eps: float = 1e-5
    variant: str = "full"
    use_cause: bool = True
    use_intra: bool = True
    use_inter: bool = True
    use_executors: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.hidden % self.heads:
            raise ValueError(f"hidden {self.hidden} is not divisible by heads {self.heads}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)

    @property
    def has_executors(self) -> bool:
        return self.variant != "single" and self.use_executors


@dataclass
class EncodedContext:
    h_q: Value
    q_valid: np.ndarray
    h_c: Value
    c_valid: np.ndarray
    h_s: Value | None
    s_valid: np.ndarray | None
    h_d: list[Value] = field(default_factory=list)
    k_ec: Value | None = None
    k_ec_valid: np.ndarray | None = None
    k_es: Value | None = None
    k_es_valid: np.ndarray | None = None


@dataclass
class Memory:
    """Everything the decoder needs, computed once per batch."""

    x: Value
    x_valid: np.ndarray
    segments: list[tuple[str, int]]
    p: Value | None
    strategy_logits: Value | None
    exec_memory: list[tuple[Value, np.ndarray]]


@dataclass
class ForwardOutput:
    strategy_logits: Value
    token_logits: Value
    p: Value | None
    decoder_targets: np.ndarray


def _masked_mean(h: Value, valid: np.ndarray) -> Value:
    w = valid.astype(np.float64)
    summed = ag.sum_(ag.mul(h, w[:, :, None]), axis=1)
    return ag.div(summed, np.maximum(w.sum(axis=1, keepdims=True), 1.0))


class CauESC(Module):
    def __init__(self, config: ModelConfig, descriptions: list[list[int]], marker_ids: list[int],
                 bos_id: int, seed: int = 0):
        if len(descriptions) != config.n_strategies or len(marker_ids) != config.n_strategies:
            raise ValueError("need one description and one marker per strategy")
        self.config = config
        cfg = config
        rng = np.random.default_rng(seed)
        std, h = cfg.init_std, cfg.hidden
        self.token_embedding = Parameter(rng.normal(0.0, std, (cfg.vocab_size, h)))
        self.encoder_positions = Parameter(rng.normal(0.0, std, (cfg.max_positions, h)))
        self.encoder_norm = LayerNorm(h, cfg.ln_eps)
        self.encoder = [EncoderLayer(rng, h, cfg.heads, cfg.ffn, std, cfg.ln_eps, cfg.dropout)
                        for _ in range(cfg.encoder_layers)]
        self.effect_proj = Linear(rng, cfg.effect_dim, h, std=std)
        self.effect_norm = LayerNorm(h, cfg.ln_eps)
        self.context_effects = CrossAttentionBlock(rng, h, cfg.heads, std, cfg.ln_eps)
        self.situation_effects = CrossAttentionBlock(rng, h, cfg.heads, std, cfg.ln_eps)
        self.strategy_keys = Parameter(rng.normal(0.0, std, (cfg.n_strategies, 2 * h)))
        self.decoder_positions = Parameter(rng.normal(0.0, std, (cfg.max_positions, h)))
        self.decoder_norm = LayerNorm(h, cfg.ln_eps)
        self.decoder = [DecoderLayer(rng, h, cfg.heads, cfg.ffn, std, cfg.ln_eps, cfg.dropout)
                        for _ in range(cfg.decoder_layers)]
        if not cfg.has_executors:
            n_exec = 0
        elif cfg.variant == "multi":
            n_exec = 1
        else:
            n_exec = cfg.n_strategies
        self.executors = [MultiHeadAttention(rng, h, cfg.heads, std) for _ in range(n_exec)]
        self.executor_norm = LayerNorm(h, cfg.ln_eps)
        self.lm_head = Parameter(rng.normal(0.0, std, (h, cfg.vocab_size)))
        self._descriptions = [list(d) for d in descriptions]
        self._marker_ids = list(marker_ids)
        self._bos = bos_id
        self._drop_rng = np.random.default_rng(int(rng.integers(2 ** 32)))
        self.assign_names()

    @classmethod
    def for_vocab(cls, config: ModelConfig, vocab: Vocabulary, seed: int = 0) -> "CauESC":
        if config.vocab_size != len(vocab):
            config = ModelConfig.from_dict({**config.to_dict(), "vocab_size": len(vocab)})
        descs = [encode_text(s.description, vocab) for s in STRATEGIES]
        return cls(config, descs, vocab.marker_ids, vocab.bos_id, seed)

    # embedding and encoder ---------------------------------------------
    def _embed(self, ids: np.ndarray, positions: Parameter, norm: LayerNorm) -> Value:
        t = ids.shape[1]
        if t > self.config.max_positions:
            raise ShapeError(f"sequence length {t} exceeds max_positions {self.config.max_positions}")
        x = ag.add(ag.embedding(self.token_embedding, ids), ag.getitem(positions, slice(0, t)))
        return ag.dropout(norm(x), self.config.dropout, self._drop_rng, self.training)

    def encode_sequence(self, ids: np.ndarray, valid: np.ndarray, cause: np.ndarray | None = None) -> Value:
        """Cause-aware encoder; ``cause=None`` runs it as a vanilla transformer encoder."""
        h = self._embed(ids, self.encoder_positions, self.encoder_norm)
        for layer in self.encoder:
            h = layer(h, valid, cause)
        return h

    def encode_descriptions(self) -> list[Value]:
        out = []
        for d in self._descriptions:
            ids = np.asarray([d or [self._bos]], dtype=np.int64)
            out.append(self.encode_sequence(ids, np.ones(ids.shape, dtype=bool)))
        return out

    def _effects(self, rows: np.ndarray) -> Value:
        return self.effect_norm(self.effect_proj(Value(rows)))

    def encode(self, batch: Batch) -> EncodedContext:
        cfg = self.config
        if not batch.c_valid.any(axis=1).all():
            raise ValueError("every example needs a nonempty context")
        h_q = self.encode_sequence(batch.q_ids, batch.q_valid, batch.q_cause if cfg.use_cause else None)
        h_c = self.encode_sequence(batch.c_ids, batch.c_valid, batch.c_cause if cfg.use_cause else None)
        enc = EncodedContext(h_q, batch.q_valid, h_c, batch.c_valid, None, None)
        if cfg.variant != "single":
            enc.h_s = self.encode_sequence(batch.s_ids, batch.s_valid)
            enc.s_valid = batch.s_valid
        if cfg.has_executors and cfg.variant in ("full", "multi"):
            enc.h_d = self.encode_descriptions()
        parts, masks = [], []
        if cfg.use_intra:
            parts.append(batch.ec_intra)
            masks.append(batch.ec_intra_valid)
        if cfg.use_inter:
            parts.append(batch.ec_inter)
            masks.append(batch.ec_inter_valid)
        if parts:
            rows = np.concatenate(parts, axis=1)
            if rows.shape[1]:
                enc.k_ec_valid = np.concatenate(masks, axis=1)
                enc.k_ec = self.context_effects(self._effects(rows), h_c, batch.c_valid)
        if cfg.use_intra:
            enc.k_es_valid = batch.es_valid
            enc.k_es = self.situation_effects(self._effects(batch.es), h_q, batch.q_valid)
        return enc

    # strategy memory -----------------------------------------------------
    def strategy_scores(self, h_s: Value, s_valid: np.ndarray, h_c: Value, c_valid: np.ndarray) -> Value:
        """Dot products between the pooled query [s; c] and every strategy key."""
        query = ag.concat([_masked_mean(h_s, s_valid), _masked_mean(h_c, c_valid)], axis=-1)
        b = query.shape[0]
        prod = ag.mul(ag.reshape(query, (b, 1, query.shape[1])), self.strategy_keys)
        return ag.sum_(prod, axis=-1)

    def select_strategy(self, h_s: Value, s_valid: np.ndarray, h_c: Value,
                        c_valid: np.ndarray) -> tuple[Value, Value]:
        logits = self.strategy_scores(h_s, s_valid, h_c, c_valid)
        return logits, ag.softmax(logits, axis=-1, order_free=True)

    # memory assembly -----------------------------------------------------
    @staticmethod
    def build_x(enc: EncodedContext) -> tuple[Value, np.ndarray, list[tuple[str, int]]]:
        parts = [("situation", enc.h_q, enc.q_valid), ("context", enc.h_c, enc.c_valid)]
        if enc.k_ec is not None:
            parts.append(("context_effects", enc.k_ec, enc.k_ec_valid))
        if enc.k_es is not None:
            parts.append(("situation_effects", enc.k_es, enc.k_es_valid))
        x = ag.concat([p[1] for p in parts], axis=1)
        valid = np.concatenate([p[2] for p in parts], axis=1)
        return x, valid, [(name, v.shape[1]) for name, v, _ in parts]

    def memory(self, batch: Batch, p_override: np.ndarray | None = None) -> Memory:
        cfg = self.config
        enc = self.encode(batch)
        x, x_valid, segments = self.build_x(enc)
        b = batch.size
        logits = p = None
        if cfg.variant != "single":
            logits, p = self.select_strategy(enc.h_s, enc.s_valid, enc.h_c, enc.c_valid)
        if p_override is not None:
            p = Value(np.asarray(p_override, dtype=np.float64).reshape(b, -1))
        exec_memory = []
        if cfg.has_executors:
            if cfg.variant == "full":
                extras = enc.h_d
            elif cfg.variant == "label":
                extras = [ag.reshape(ag.embedding(self.token_embedding, np.asarray([m])), (1, 1, cfg.hidden))
                          for m in self._marker_ids]
            else:
                terms = [ag.mul(ag.getitem(p, (slice(None), slice(i, i + 1))),
                                ag.reshape(ag.mean(d, axis=1), (1, cfg.hidden)))
                         for i, d in enumerate(enc.h_d)]
                extras = [ag.reshape(ag.canonical_sum(ag.stack(terms, axis=0), axis=0), (b, 1, cfg.hidden))]
            extras = extras[:len(self.executors)]
            for e in extras:
                e_b = e if e.shape[0] == b else ag.broadcast_to(e, (b,) + e.shape[1:])
                mem = ag.concat([x, e_b], axis=1)
                mask = np.concatenate([x_valid, np.ones((b, e.shape[1]), dtype=bool)], axis=1)
                exec_memory.append((mem, mask))
        return Memory(x, x_valid, segments, p, logits, exec_memory)

    # decoder -------------------------------------------------------------
    def decode(self, mem: Memory, y_in: np.ndarray, y_valid: np.ndarray | None = None) -> Value:
        """Token logits for every prefix position of ``y_in``."""
        if y_valid is None:
            y_valid = np.ones(y_in.shape, dtype=bool)
        self_mask = causal_mask(y_valid)
        y = self._embed(y_in, self.decoder_positions, self.decoder_norm)
        for layer in self.decoder[:-1]:
            y = layer(y, self_mask, mem.x, mem.x_valid)
        last = self.decoder[-1]
        o = last.self_block(y, self_mask)
        if self.executors:
            o = self.executor_norm(ag.add(o, self.mix_executors(o, mem)))
        out = last.memory_block(o, mem.x, mem.x_valid)
        return ag.matmul(out, self.lm_head)

    def executor_outputs(self, o: Value, mem: Memory) -> list[Value]:
        return [ex(o, m, mask) for ex, (m, mask) in zip(self.executors, mem.exec_memory)]

    def mix_executors(self, o: Value, mem: Memory) -> Value:
        """Z = sum_i p_i * executor_i(O); the multi variant has one executor with weight 1."""
        outs = self.executor_outputs(o, mem)
        if self.config.variant == "multi":
            return outs[0]
        b = o.shape[0]
        terms = [ag.mul(ag.reshape(ag.getitem(mem.p, (slice(None), slice(i, i + 1))), (b, 1, 1)), out)
                 for i, out in enumerate(outs)]
        return ag.canonical_sum(ag.stack(terms, axis=0), axis=0)

    def decoder_arrays(self, batch: Batch) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Teacher-forcing inputs, targets and validity.

        The single variant prepends the target strategy's marker token.
        """
        seqs = []
        for t, s in zip(batch.targets, batch.strategy):
            seqs.append(([self._marker_ids[s]] if self.config.variant == "single" else []) + list(t))
        n = max(len(s) for s in seqs)
        y_in = np.zeros((len(seqs), n), dtype=np.int64)
        y_out = np.full((len(seqs), n), IGNORE, dtype=np.int64)
        valid = np.zeros((len(seqs), n), dtype=bool)
        for i, s in enumerate(seqs):
            y_in[i, :len(s)] = [self._bos] + s[:-1]
            y_out[i, :len(s)] = s
            valid[i, :len(s)] = True
        return y_in, y_out, valid

    def forward(self, batch: Batch, p_override: np.ndarray | None = None) -> ForwardOutput:
        mem = self.memory(batch, p_override)
        y_in, y_out, valid = self.decoder_arrays(batch)
        logits = self.decode(mem, y_in, valid)
        if self.config.variant == "single":
            strategy_logits = ag.getitem(logits, (slice(None), 0, np.asarray(self._marker_ids)))
        else:
            strategy_logits = mem.strategy_logits
        return ForwardOutput(strategy_logits, logits, mem.p, y_out)

    __call__ = forward

    def loss(self, out: ForwardOutput, batch: Batch) -> tuple[Value, Value, Value]:
        """(L, L_s, L_r): per-example sums over response tokens, averaged over the batch."""
        b = float(batch.size)
        if self.config.variant == "single":
            first = ag.getitem(out.token_logits, (slice(None), 0))
            l_s = ag.mul(ag.cross_entropy(first, out.decoder_targets[:, 0], IGNORE, "sum"), 1.0 / b)
            rest = ag.getitem(out.token_logits, (slice(None), slice(1, None)))
            l_r = ag.mul(ag.cross_entropy(rest, out.decoder_targets[:, 1:], IGNORE, "sum"), 1.0 / b)
        else:
            l_s = ag.cross_entropy(out.strategy_logits, batch.strategy, IGNORE, "sum", order_free=True)
            l_s = ag.mul(l_s, 1.0 / b)
            l_r = ag.mul(ag.cross_entropy(out.token_logits, out.decoder_targets, IGNORE, "sum"), 1.0 / b)
        return ag.add(l_s, l_r), l_s, l_r

    # relabeling ----------------------------------------------------------
    def permuted(self, perm: list[int]) -> "CauESC":
        """Copy whose strategy slot ``perm[i]`` holds what slot ``i`` holds here."""
        inv = np.argsort(perm)
        other = copy.deepcopy(self)
        other.strategy_keys.data = self.strategy_keys.data[inv].copy()
        other._descriptions = [self._descriptions[j] for j in inv]
        other._marker_ids = [self._marker_ids[j] for j in inv]
        if len(self.executors) == self.config.n_strategies:
            other.executors = [copy.deepcopy(self.executors[j]) for j in inv]
        other.assign_names()
        return other


# checkpoints -----------------------------------------------------------------

CHECKPOINT_KIND = "checkpoint"


def save_checkpoint(model: CauESC, path: str | Path, extra: dict | None = None) -> None:
    header = {"kind": CHECKPOINT_KIND, "config": model.config.to_dict(),
              "dims": {"hidden": model.config.hidden, "vocab_size": model.config.vocab_size}}
    if extra:
        header["extra"] = extra
    write_container(path, model.state_dict(), header)


def load_checkpoint(path: str | Path, vocab: Vocabulary, expected: ModelConfig | None = None,
                    seed: int = 0) -> CauESC:
    header, matrices = read_container(path)
    if header.get("kind") != CHECKPOINT_KIND:
        raise FormatError(f"{path}: not a checkpoint (kind={header.get('kind')!r})")
    config = ModelConfig.from_dict(header["config"])
    if expected is not None:
        want = {**expected.to_dict(), "vocab_size": config.vocab_size}
        diff = {k: (v, want[k]) for k, v in config.to_dict().items() if want.get(k) != v}
        if diff:
            raise ValueError(f"checkpoint config conflicts with requested config: "
                             f"{json.dumps(diff, sort_keys=True)}")
    model = CauESC.for_vocab(config, vocab, seed)
    model.load_state_dict(matrices)
    return model
