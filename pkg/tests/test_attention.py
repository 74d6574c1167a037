import math

import numpy as np
import pytest

from modalseg import tensor as T
from modalseg.attention import AttentionParams, BlockParams, mhca, mhsa, mix_ffn, residual_fuse
from modalseg.tensor import Tensor


def set_ones(p: AttentionParams):
    for lin in (p.q, p.k, p.v, p.o):
        lin.weight.data[...] = 1.0
        lin.bias.data[...] = 0.0


def softmax_np(s):
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def per_head_oracle(xq, xkv, p: AttentionParams):
    """Loop over heads with plain numpy."""
    q = xq @ p.q.weight.data + p.q.bias.data
    k = xkv @ p.k.weight.data + p.k.bias.data
    v = xkv @ p.v.weight.data + p.v.bias.data
    heads = []
    for h in range(p.heads):
        sl = slice(h * p.d_k, (h + 1) * p.d_k)
        w = softmax_np(q[:, sl] @ k[:, sl].T / math.sqrt(p.d_k))
        heads.append(w @ v[:, sl])
    return np.concatenate(heads, axis=1) @ p.o.weight.data + p.o.bias.data


def test_single_key_attention_returns_projected_value(rng):
    blk = BlockParams(4, 1, 1, rng)
    x = rng.normal(size=(1, 4))
    out, w = mhsa(Tensor(x), blk, (1, 1), return_weights=True)
    assert w.data.reshape(-1)[0] == 1.0
    v = x @ blk.attn.v.weight.data + blk.attn.v.bias.data
    np.testing.assert_array_equal(out.data, v @ blk.attn.o.weight.data + blk.attn.o.bias.data)


def test_mhsa_sr1_matches_full_attention_oracle(rng):
    blk = BlockParams(8, 2, 1, rng)
    x = rng.normal(size=(16, 8))
    out = mhsa(Tensor(x), blk, (4, 4)).data
    np.testing.assert_allclose(out, per_head_oracle(x, x, blk.attn), rtol=0, atol=1e-9)


def test_mhsa_reduced_rows_sum_to_one(rng):
    blk = BlockParams(8, 2, 2, rng)
    out, w = mhsa(Tensor(rng.normal(size=(2, 16, 8))), blk, (4, 4), return_weights=True)
    assert out.shape == (2, 16, 8)
    assert w.shape == (2, 2, 16, 4)
    np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-6)


def test_mhsa_errors(rng):
    blk = BlockParams(8, 2, 4, rng)
    with pytest.raises(ValueError):
        mhsa(Tensor(rng.normal(size=(12, 8))), blk, (2, 6))
    with pytest.raises(ValueError):
        mhsa(Tensor(rng.normal(size=(15, 8))), BlockParams(8, 2, 1, rng), (4, 4))


def test_heads_must_divide_dim(rng):
    with pytest.raises(ValueError):
        AttentionParams(6, 4, rng)


def test_mhca_scalar_example(rng):
    p = AttentionParams(1, 1, rng)
    set_ones(p)
    out = mhca(Tensor([[2.0]]), Tensor([[5.0]]), p)
    np.testing.assert_array_equal(out.data, [[5.0]])


def test_mhca_constant_aux_gives_constant_output(rng):
    p = AttentionParams(8, 2, rng)
    aux = np.tile(rng.normal(size=(1, 8)), (6, 1))
    out = mhca(Tensor(rng.normal(size=(6, 8))), Tensor(aux), p).data
    np.testing.assert_allclose(out, np.tile(out[:1], (6, 1)), atol=1e-12)


def test_mhca_matches_per_head_loop(rng):
    p = AttentionParams(8, 2, rng)
    for lin in (p.q, p.k, p.v, p.o):
        lin.weight.data[...] = rng.normal(size=lin.weight.shape)
        lin.bias.data[...] = rng.normal(size=lin.bias.shape)
    a, b = rng.normal(size=(4, 8)), rng.normal(size=(4, 8))
    np.testing.assert_allclose(mhca(Tensor(a), Tensor(b), p).data, per_head_oracle(a, b, p), rtol=0, atol=1e-9)


def test_mhca_batched_equals_per_sample(rng):
    p = AttentionParams(8, 4, rng)
    a, b = rng.normal(size=(3, 5, 8)), rng.normal(size=(3, 5, 8))
    out = mhca(Tensor(a), Tensor(b), p).data
    for i in range(3):
        np.testing.assert_allclose(out[i], per_head_oracle(a[i], b[i], p), atol=1e-12)


def test_mhca_shape_mismatch(rng):
    with pytest.raises(ValueError):
        mhca(Tensor(np.ones((4, 8))), Tensor(np.ones((5, 8))), AttentionParams(8, 2, rng))


def test_residual_fuse_identities(rng):
    a = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(residual_fuse(Tensor(a), Tensor(np.zeros((3, 4)))).data, a)
    np.testing.assert_array_equal(residual_fuse(Tensor(a), Tensor(-a)).data, 0.0)
    b = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(residual_fuse(Tensor(a), Tensor(b)).data, a + b)
    with pytest.raises(ValueError):
        residual_fuse(Tensor(a), Tensor(np.ones((4, 3))))


def test_residual_fuse_splits_gradient_equally(rng):
    a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    w = rng.normal(size=(2, 3))
    T.backward((residual_fuse(a, b) * Tensor(w)).sum())
    np.testing.assert_array_equal(a.grad, w)
    np.testing.assert_array_equal(b.grad, w)


def test_mix_ffn_zero_projection_is_identity(rng):
    blk = BlockParams(8, 2, 1, rng)
    blk.fc2.weight.data[...] = 0.0
    blk.fc2.bias.data[...] = 0.0
    x = rng.normal(size=(2, 12, 8))
    np.testing.assert_array_equal(mix_ffn(Tensor(x), blk, (3, 4)).data, x)


def test_mix_ffn_shape_and_factorization(rng):
    blk = BlockParams(8, 2, 1, rng)
    assert mix_ffn(Tensor(rng.normal(size=(12, 8))), blk, (4, 3)).shape == (12, 8)
    with pytest.raises(ValueError):
        mix_ffn(Tensor(rng.normal(size=(12, 8))), blk, (5, 3))


def test_block_gradients(rng):
    blk = BlockParams(8, 2, 2, rng)
    x = Tensor(rng.normal(size=(2, 16, 8)), requires_grad=True)
    w = Tensor(rng.normal(size=(2, 16, 8)))
    err = T.grad_check(lambda v: (mix_ffn(v + mhsa(v, blk, (4, 4)), blk, (4, 4)) * w).sum(), x)
    assert err <= 1e-4


def test_mhca_to_cross_entropy_pipeline_gradients(rng):
    p = AttentionParams(6, 3, rng)
    aux = Tensor(rng.normal(size=(5, 6)))
    labels = rng.integers(0, 6, size=5)

    def loss(v):
        return -T.log_softmax(mhca(v, aux, p), -1)[np.arange(5), labels].mean()

    assert T.grad_check(loss, Tensor(rng.normal(size=(5, 6)), requires_grad=True)) <= 1e-4
