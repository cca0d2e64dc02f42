"""Shared test utilities: finite-difference checks and small fixtures."""

from __future__ import annotations

import numpy as np

from cauesc import autograd as ag
from cauesc.causes import load_lexicon, resolve_annotations
from cauesc.corpus import STRATEGIES, build_vocab
from cauesc.data import collate, prepare_corpus
from cauesc.effects import HashedEffectProvider
from cauesc.model import CauESC, ModelConfig
from cauesc.synthetic import synthetic_corpus


def directional_check(fn, leaves, rng, eps=1e-6):
    """Relative error between the analytic and central-difference directional
    derivative of ``sum(fn() * R)`` along a random direction over ``leaves``."""
    out = fn()
    proj = rng.normal(size=out.shape)
    for leaf in leaves:
        leaf.grad = None
    ag.sum_(ag.mul(out, proj)).backward()
    dirs = [rng.normal(size=leaf.shape) for leaf in leaves]
    analytic = sum(float((leaf.grad * d).sum()) for leaf, d in zip(leaves, dirs) if leaf.grad is not None)
    originals = [leaf.data.copy() for leaf in leaves]

    def value(sign):
        for leaf, o, d in zip(leaves, originals, dirs):
            leaf.data = o + sign * eps * d
        with ag.no_grad():
            v = float((fn().data * proj).sum())
        return v

    numeric = (value(1.0) - value(-1.0)) / (2 * eps)
    for leaf, o in zip(leaves, originals):
        leaf.data = o
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def param(rng, *shape, scale=1.0):
    return ag.Parameter(rng.normal(0.0, scale, size=shape))


def tiny_setup(n=20, effect_dim=64, mode="last", seed=0, **corpus_kw):
    convs = synthetic_corpus(n, seed=seed, **corpus_kw)
    vocab = build_vocab(convs, extra_texts=[s.description for s in STRATEGIES])
    ann = resolve_annotations(convs, load_lexicon())
    examples = prepare_corpus(convs, vocab, ann, provider=HashedEffectProvider(effect_dim), mode=mode)
    return convs, vocab, examples


def tiny_model(vocab, seed=0, **cfg):
    base = dict(hidden=8, heads=2, encoder_layers=1, decoder_layers=2, ffn=16, effect_dim=8)
    base.update(cfg)
    return CauESC.for_vocab(ModelConfig(vocab_size=len(vocab), **base), vocab, seed)


def tiny_batch(effect_dim=8, n=4, seed=0):
    convs, vocab, examples = tiny_setup(n=n, effect_dim=effect_dim, mode="all", seed=seed, turns=3)
    return vocab, examples, collate(examples)
