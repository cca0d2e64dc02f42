"""Attention blocks: self/cause attention, the fusion gate, cross attention, encoder layers.

Shapes: hidden states are ``[B, T, h]``; key masks are boolean ``[B, Tk]``
(valid key positions) or ``[B, Tq, Tk]`` when they vary per query.
"""

from __future__ import annotations

from collections import Counter

import numpy as np

from . import autograd as ag
from .autograd import Parameter, ShapeError, Value
from .nn import FeedForward, LayerNorm, Linear, Module

DIAGNOSTICS: Counter[str] = Counter()


def _query_mask(mask: np.ndarray, tq: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 2:
        mask = np.broadcast_to(mask[:, None, :], (mask.shape[0], tq, mask.shape[1]))
    return mask


def causal_mask(valid: np.ndarray) -> np.ndarray:
    """Combine key validity ``[B, T]`` with a lower-triangular prefix mask."""
    t = valid.shape[1]
    return np.tril(np.ones((t, t), dtype=bool))[None] & valid[:, None, :]


class MultiHeadAttention(Module):
    def __init__(self, rng: np.random.Generator, hidden: int, heads: int, std: float = 0.02):
        if hidden % heads:
            raise ShapeError(f"hidden size {hidden} is not divisible by {heads} heads")
        self.query = Linear(rng, hidden, hidden, bias=False, std=std)
        self.key = Linear(rng, hidden, hidden, bias=False, std=std)
        self.value = Linear(rng, hidden, hidden, bias=False, std=std)
        self.output = Linear(rng, hidden, hidden, bias=False, std=std)
        self._heads = heads
        self.last_weights: list[np.ndarray] = []

    @property
    def head_dim(self) -> int:
        return self.query.weight.shape[1] // self._heads

    def _split(self, x: Value) -> Value:
        b, t, _ = x.shape
        return ag.transpose(ag.reshape(x, (b, t, self._heads, self.head_dim)), (0, 2, 1, 3))

    def _merge(self, x: Value) -> Value:
        b, _, t, _ = x.shape
        return ag.reshape(ag.transpose(x, (0, 2, 1, 3)), (b, t, self._heads * self.head_dim))

    def attend(self, x: Value, memory: Value, masks: list[np.ndarray]) -> list[Value]:
        """Scaled dot-product attention of ``x`` over ``memory``, once per mask.

        All masks share the projections and the score matrix, so two masks
        that admit the same keys give bit-identical outputs.
        """
        tq = x.shape[1]
        q = self._split(self.query(x))
        k = self._split(self.key(memory))
        v = self._split(self.value(memory))
        scores = ag.mul(ag.matmul(q, ag.swap_last(k)), 1.0 / np.sqrt(self.head_dim))
        outs = []
        self.last_weights = []
        for m in masks:
            w = ag.masked_softmax(scores, _query_mask(m, tq)[:, None, :, :])
            self.last_weights.append(w.data)
            outs.append(self.output(self._merge(ag.matmul(w, v))))
        return outs

    def __call__(self, x: Value, memory: Value, mask: np.ndarray) -> Value:
        return self.attend(x, memory, [mask])[0]


def self_attention(layer: MultiHeadAttention, h: Value, padding_mask: np.ndarray) -> Value:
    """Attention of every position over the valid positions of the same sequence.

    Rows with no valid key produce zeros.
    """
    return layer(h, h, padding_mask)


def cause_key_mask(cause_mask: np.ndarray, padding_mask: np.ndarray) -> np.ndarray:
    """Keys admissible for cause attention.

    A sequence whose cause mask admits no valid key falls back to plain
    self-attention; each fallback is counted in ``DIAGNOSTICS``.
    """
    adm = np.asarray(cause_mask, dtype=bool) & np.asarray(padding_mask, dtype=bool)
    empty = ~adm.any(axis=-1)
    if empty.any():
        DIAGNOSTICS["cause_fallback"] += int(empty.sum())
        adm = np.where(empty[:, None], padding_mask, adm)
    return adm


def cause_attention(layer: MultiHeadAttention, h: Value, cause_mask: np.ndarray,
                    padding_mask: np.ndarray) -> Value:
    """Softmax over key positions restricted to cause-flagged tokens."""
    return layer(h, h, cause_key_mask(cause_mask, padding_mask))


class FusionGate(Module):
    """mu = ReLU([A_c; A_s] W + b); F = mu * A_s + (1 - mu) * A_c."""

    def __init__(self, rng: np.random.Generator, hidden: int, std: float = 0.02):
        self.weight = ag.Parameter(rng.normal(0.0, std, size=(2 * hidden, hidden)))
        self.bias = Parameter(np.zeros(hidden))

    def gate(self, a_c: Value, a_s: Value) -> Value:
        return ag.relu(ag.linear(ag.concat([a_c, a_s], axis=-1), self.weight, self.bias))

    def __call__(self, a_c: Value, a_s: Value) -> Value:
        return ag.fuse(self.gate(a_c, a_s), a_s, a_c)


def fuse(a_c: Value, a_s: Value, gate: FusionGate) -> Value:
    if a_c.shape != a_s.shape:
        raise ShapeError(f"fusion inputs differ: {a_c.shape} vs {a_s.shape}")
    return gate(a_c, a_s)


class CrossAttentionBlock(Module):
    """LayerNorm(Q + MultiHeadAttention(Q -> memory))."""

    def __init__(self, rng: np.random.Generator, hidden: int, heads: int, std: float = 0.02,
                 eps: float = 1e-5):
        self.attn = MultiHeadAttention(rng, hidden, heads, std)
        self.norm = LayerNorm(hidden, eps)

    def __call__(self, q: Value, memory: Value | None, memory_mask: np.ndarray | None) -> Value:
        if memory is None or memory.shape[1] == 0:
            DIAGNOSTICS["empty_memory"] += 1
            return self.norm(q)
        return self.norm(ag.add(q, self.attn(q, memory, memory_mask)))


def cross_att_block(block: CrossAttentionBlock, q: Value, memory: Value | None,
                    memory_mask: np.ndarray | None = None) -> Value:
    if memory is not None and memory_mask is None:
        memory_mask = np.ones(memory.shape[:2], dtype=bool)
    return block(q, memory, memory_mask)


class EncoderLayer(Module):
    """Parallel self and cause attention, fusion, then the feed-forward sublayer.

    Without a cause mask the layer is a plain post-norm transformer
    encoder layer.
    """

    def __init__(self, rng: np.random.Generator, hidden: int, heads: int, ffn: int,
                 std: float = 0.02, eps: float = 1e-5, dropout: float = 0.0):
        self.attn = MultiHeadAttention(rng, hidden, heads, std)
        self.gate = FusionGate(rng, hidden, std)
        self.attn_norm = LayerNorm(hidden, eps)
        self.ffn = FeedForward(rng, hidden, ffn, std)
        self.ffn_norm = LayerNorm(hidden, eps)
        self._dropout = dropout
        self._rng = np.random.default_rng(int(rng.integers(2 ** 32)))

    def __call__(self, h: Value, padding_mask: np.ndarray, cause_mask: np.ndarray | None = None) -> Value:
        if cause_mask is None:
            f = self.attn(h, h, padding_mask)
        else:
            a_s, a_c = self.attn.attend(h, h, [padding_mask, cause_key_mask(cause_mask, padding_mask)])
            f = self.gate(a_c, a_s)
        f = ag.dropout(f, self._dropout, self._rng, self.training)
        h = self.attn_norm(ag.add(h, f))
        z = ag.dropout(self.ffn(h), self._dropout, self._rng, self.training)
        return self.ffn_norm(ag.add(h, z))


def vanilla_encoder_layer(layer: EncoderLayer, h: Value, padding_mask: np.ndarray) -> Value:
    """Reference post-norm transformer encoder layer over ``layer``'s weights."""
    a = self_attention(layer.attn, h, padding_mask)
    h = layer.attn_norm(ag.add(h, a))
    return layer.ffn_norm(ag.add(h, layer.ffn(h)))


class DecoderLayer(Module):
    """Causal self attention, cross attention over the encoder memory, feed-forward."""

    def __init__(self, rng: np.random.Generator, hidden: int, heads: int, ffn: int,
                 std: float = 0.02, eps: float = 1e-5, dropout: float = 0.0):
        self.self_attn = MultiHeadAttention(rng, hidden, heads, std)
        self.self_norm = LayerNorm(hidden, eps)
        self.cross_attn = MultiHeadAttention(rng, hidden, heads, std)
        self.cross_norm = LayerNorm(hidden, eps)
        self.ffn = FeedForward(rng, hidden, ffn, std)
        self.ffn_norm = LayerNorm(hidden, eps)
        self._dropout = dropout
        self._rng = np.random.default_rng(int(rng.integers(2 ** 32)))

    def _drop(self, x: Value) -> Value:
        return ag.dropout(x, self._dropout, self._rng, self.training)

    def self_block(self, y: Value, self_mask: np.ndarray) -> Value:
        return self.self_norm(ag.add(y, self._drop(self.self_attn(y, y, self_mask))))

    def memory_block(self, o: Value, memory: Value, memory_mask: np.ndarray) -> Value:
        h = self.cross_norm(ag.add(o, self._drop(self.cross_attn(o, memory, memory_mask))))
        return self.ffn_norm(ag.add(h, self._drop(self.ffn(h))))

    def __call__(self, y: Value, self_mask: np.ndarray, memory: Value, memory_mask: np.ndarray) -> Value:
        return self.memory_block(self.self_block(y, self_mask), memory, memory_mask)
