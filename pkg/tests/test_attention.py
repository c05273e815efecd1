"""Attention block: shapes, masking semantics, parameter accounting."""

import numpy as np
import pytest

from earshot import tensor as tz
from earshot.attention import (AttentionConfig, attention_block_param_count,
                               cross_attention_block, init_attention_block,
                               multi_head_attention, self_encoder, _uniform_linear)
from earshot.errors import ConfigError, PreconditionError, ShapeError
from earshot.tensor import ParameterStore, Tensor, grad_check


CFG = AttentionConfig(d_model=16, n_heads=2, ffn_mult=2, dropout=0.0)


def block(prefix="blk", seed=0, cfg=CFG):
    store = ParameterStore()
    init_attention_block(store, prefix, cfg, np.random.default_rng(seed))
    return store


def t(data):
    x = Tensor(np.asarray(data, dtype=np.float64))
    x.requires_grad = True
    return x


def test_config_validation():
    with pytest.raises(ConfigError):
        AttentionConfig(d_model=10, n_heads=4)
    with pytest.raises(ConfigError):
        AttentionConfig(dropout=1.0)
    assert AttentionConfig(d_model=16, n_heads=4).head_dim == 4


def test_uniform_init_bounds():
    rng = np.random.default_rng(0)
    w = _uniform_linear(rng, 64, 128)
    bound = 1 / np.sqrt(64)
    assert w.shape == (64, 128)
    assert w.min() >= -bound and w.max() <= bound
    assert w.std() > bound / 4  # actually spread out, not degenerate


def test_param_count_closed_form():
    for cfg in (CFG, AttentionConfig(d_model=32, n_heads=4, ffn_mult=3, dropout=0.0)):
        store = block(cfg=cfg)
        assert store.n_scalars() == attention_block_param_count(cfg)


def test_attention_output_shape_and_weights():
    store = block()
    rng = np.random.default_rng(1)
    q = t(rng.normal(size=(2, 5, 16)))
    kv = t(rng.normal(size=(2, 7, 16)))
    out, w = multi_head_attention(q, kv, kv, store, "blk", CFG)
    assert out.shape == (2, 5, 16)
    assert w.shape == (2, 2, 5, 7)
    np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-12)


def test_attention_shape_errors():
    store = block()
    x = t(np.zeros((2, 5, 16)))
    with pytest.raises(ShapeError):
        multi_head_attention(t(np.zeros((2, 5, 8))), x, x, store, "blk", CFG)
    with pytest.raises(ShapeError):
        multi_head_attention(x, x, t(np.zeros((2, 6, 16))), store, "blk", CFG)
    with pytest.raises(ShapeError):
        multi_head_attention(x, t(np.zeros((3, 5, 16))), t(np.zeros((3, 5, 16))),
                             store, "blk", CFG)


def test_masked_keys_get_zero_weight():
    store = block()
    rng = np.random.default_rng(2)
    x = t(rng.normal(size=(1, 4, 16)))
    mask = np.array([[True, True, False, True]])
    _, w = multi_head_attention(x, x, x, store, "blk", CFG, mask)
    np.testing.assert_array_equal(w.data[:, :, :, 2], 0.0)


def test_masked_positions_inert():
    """Changing the content of masked key positions must not move the
    output for any unmasked query."""
    store = block()
    rng = np.random.default_rng(3)
    base = rng.normal(size=(1, 6, 16))
    mask = np.array([[True, True, True, False, False, True]])

    poked = base.copy()
    poked[0, 3:5] = rng.normal(size=(2, 16)) * 100
    out_a, _ = multi_head_attention(t(base), t(base), t(base), store, "blk", CFG, mask)
    out_b, _ = multi_head_attention(t(base), t(poked), t(poked), store, "blk", CFG, mask)
    assert np.max(np.abs(out_a.data - out_b.data)) <= 1e-12


def test_all_masked_query_rejected():
    store = block()
    x = t(np.zeros((1, 3, 16)))
    with pytest.raises(PreconditionError):
        multi_head_attention(x, x, x, store, "blk", CFG, np.zeros((1, 3), dtype=bool))
    bad_3d = np.ones((1, 3, 3), dtype=bool)
    bad_3d[0, 1, :] = False
    with pytest.raises(PreconditionError):
        multi_head_attention(x, x, x, store, "blk", CFG, bad_3d)


def test_mask_shape_validation():
    store = block()
    x = t(np.zeros((1, 3, 16)))
    with pytest.raises(ShapeError):
        multi_head_attention(x, x, x, store, "blk", CFG, np.ones((1, 4), dtype=bool))


def test_cross_block_shape_and_determinism():
    store = block()
    rng = np.random.default_rng(4)
    x = np.asarray(rng.normal(size=(1, 5, 16)))
    ctx = np.asarray(rng.normal(size=(1, 9, 16)))
    a = cross_attention_block(t(x), t(ctx), store, "blk", CFG)
    b = cross_attention_block(t(x), t(ctx), store, "blk", CFG)
    assert a.shape == (1, 5, 16)
    np.testing.assert_array_equal(a.data, b.data)


def test_self_encoder_is_block_with_self_context():
    store = block()
    x = np.random.default_rng(5).normal(size=(1, 4, 16))
    a = self_encoder(t(x), store, "blk", CFG)
    b = cross_attention_block(t(x), t(x), store, "blk", CFG)
    np.testing.assert_array_equal(a.data, b.data)


def test_block_end_to_end_gradients():
    store = block()
    rng = np.random.default_rng(6)
    x = t(rng.normal(size=(1, 3, 16)))
    ctx = t(rng.normal(size=(1, 4, 16)))
    params = store.tensors() + [x, ctx]
    err = grad_check(
        lambda: tz.sum_(tz.square(cross_attention_block(x, ctx, store, "blk", CFG))),
        params, rng=np.random.default_rng(7))
    assert err < 1e-4, f"block gradient error {err:.3e}"


def test_shared_block_accumulates_gradients_from_both_ears():
    """One block applied to two inputs: parameter grads must be the sum of
    the single-use grads (weight sharing across streams)."""
    store = block()
    rng = np.random.default_rng(8)
    xl, xr = rng.normal(size=(1, 3, 16)), rng.normal(size=(1, 3, 16))

    def run(*inputs):
        store.zero_grad()
        total = None
        for x in inputs:
            y = tz.sum_(tz.square(self_encoder(t(x), store, "blk", CFG)))
            total = y if total is None else tz.add(total, y)
        total.backward()
        return {k: v.grad.copy() for k, v in store.items()}

    gl = run(xl)
    gr = run(xr)
    both = run(xl, xr)
    for k in both:
        np.testing.assert_allclose(both[k], gl[k] + gr[k], atol=1e-10)
