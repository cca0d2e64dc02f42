import numpy as np
import pytest

from cauesc import autograd as ag
from cauesc.attention import (DIAGNOSTICS, CrossAttentionBlock, DecoderLayer, EncoderLayer, FusionGate,
                              MultiHeadAttention, causal_mask, cause_attention, cause_key_mask, cross_att_block,
                              fuse, self_attention, vanilla_encoder_layer)
from cauesc.autograd import ShapeError, Value
from helpers import directional_check, param


def test_zero_value_projection_gives_zero_output():
    rng = np.random.default_rng(0)
    mha = MultiHeadAttention(rng, 8, 2, std=0.5)
    mha.value.weight.data[:] = 0.0
    h = Value(rng.normal(size=(2, 5, 8)))
    assert np.all(self_attention(mha, h, np.ones((2, 5), bool)).data == 0.0)


def test_cause_fallback_counts_and_matches_self_attention():
    rng = np.random.default_rng(0)
    mha = MultiHeadAttention(rng, 8, 2, std=0.5)
    h = Value(rng.normal(size=(2, 4, 8)))
    pad = np.array([[1, 1, 1, 0], [1, 1, 1, 1]], bool)
    cause = np.array([[0, 0, 0, 1], [1, 0, 0, 0]], bool)
    before = DIAGNOSTICS["cause_fallback"]
    adm = cause_key_mask(cause, pad)
    assert DIAGNOSTICS["cause_fallback"] == before + 1
    assert adm.tolist() == [[True, True, True, False], [True, False, False, False]]
    out = cause_attention(mha, h, cause, pad).data
    assert np.array_equal(out[0], self_attention(mha, h, pad).data[0])


def test_causal_mask_is_lower_triangular_and_padded():
    m = causal_mask(np.array([[1, 1, 0]], bool))
    assert m[0].tolist() == [[True, False, False], [True, True, False], [True, True, False]]


def test_causal_decoder_ignores_future_tokens():
    rng = np.random.default_rng(1)
    layer = DecoderLayer(rng, 8, 2, 16, std=0.3)
    mem = Value(rng.normal(size=(1, 3, 8)))
    y = rng.normal(size=(1, 4, 8))
    y2 = y.copy()
    y2[0, 3] += 5.0
    valid = np.ones((1, 4), bool)
    a = layer(Value(y), causal_mask(valid), mem, np.ones((1, 3), bool)).data
    b = layer(Value(y2), causal_mask(valid), mem, np.ones((1, 3), bool)).data
    assert np.array_equal(a[0, :3], b[0, :3]) and not np.array_equal(a[0, 3], b[0, 3])


def test_empty_memory_cross_attention_is_layer_norm():
    rng = np.random.default_rng(0)
    block = CrossAttentionBlock(rng, 8, 2)
    q = Value(rng.normal(size=(1, 3, 8)))
    assert np.array_equal(cross_att_block(block, q, Value(np.zeros((1, 0, 8)))).data, block.norm(q).data)


def test_fusion_shape_mismatch():
    gate = FusionGate(np.random.default_rng(0), 4)
    with pytest.raises(ShapeError):
        fuse(Value(np.zeros((1, 2, 4))), Value(np.zeros((1, 3, 4))), gate)


def test_heads_must_divide_hidden():
    with pytest.raises(ShapeError):
        MultiHeadAttention(np.random.default_rng(0), 10, 3)


def test_encoder_without_cause_is_vanilla():
    rng = np.random.default_rng(0)
    layer = EncoderLayer(rng, 8, 2, 16, std=0.3)
    h = Value(rng.normal(size=(2, 5, 8)))
    pad = np.ones((2, 5), bool)
    assert np.array_equal(layer(h, pad).data, vanilla_encoder_layer(layer, h, pad).data)


@pytest.mark.parametrize("seed", range(3))
def test_decoder_layer_gradient(seed):
    rng = np.random.default_rng(seed)
    layer = DecoderLayer(rng, 8, 2, 16, std=0.3)
    y, mem = param(rng, 2, 4, 8), param(rng, 2, 3, 8)
    valid = np.ones((2, 4), bool)
    mm = np.array([[1, 1, 0], [1, 1, 1]], bool)
    err = directional_check(lambda: layer(y, causal_mask(valid), mem, mm), [y, mem] + layer.parameters(), rng)
    assert err < 1e-6
