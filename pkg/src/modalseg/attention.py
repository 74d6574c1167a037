"""Multi-head self/cross attention, residual fusion and the Mix-FFN unit.

Sequences are ``[B, L, D]`` (a bare ``[L, D]`` is treated as batch 1) with
``L = H * W`` in row-major order.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .nn import Conv2d, LayerNorm, Linear, Module, map_to_tokens, param, tokens_to_map, trunc_normal
from .tensor import Tensor


class AttentionParams(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if heads < 1 or dim % heads:
            raise ValueError(f"embedding dim {dim} not divisible by {heads} heads")
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.o = Linear(dim, dim, rng)
        self.heads = heads
        self.dim = dim

    @property
    def d_k(self) -> int:
        return self.dim // self.heads


class BlockParams(Module):
    """Self-attention (with spatial reduction) and Mix-FFN weights for one block."""

    def __init__(self, dim: int, heads: int, sr: int, rng: np.random.Generator, mlp_ratio: int = 4):
        self.norm1 = LayerNorm(dim)
        self.attn = AttentionParams(dim, heads, rng)
        self.sr = sr
        if sr > 1:
            self.sr_conv = Conv2d(dim, dim, sr, rng, stride=sr)
            self.sr_norm = LayerNorm(dim)
        hidden = dim * mlp_ratio
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, hidden, rng)
        self.dw_weight = param(trunc_normal(rng, (hidden, 3, 3), std=math.sqrt(2.0 / 9)))
        self.dw_bias = param(np.zeros(hidden))
        self.fc2 = Linear(hidden, dim, rng)


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return x.reshape(1, *x.shape), True
    return x, False


def _split_heads(x: Tensor, heads: int) -> Tensor:
    batch, length, dim = x.shape
    return x.reshape(batch, length, heads, dim // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    batch, heads, length, d_k = x.shape
    return x.transpose(0, 2, 1, 3).reshape(batch, length, heads * d_k)


def attend(queries: Tensor, keys: Tensor, p: AttentionParams, return_weights: bool = False):
    """Softmax(Q K^T / sqrt(d_k)) V per head, concatenated and projected by W_O."""
    q = _split_heads(p.q(queries), p.heads)
    k = _split_heads(p.k(keys), p.heads)
    v = _split_heads(p.v(keys), p.heads)
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(p.d_k))
    weights = T.softmax(scores, axis=-1)
    out = p.o(_merge_heads(weights @ v))
    return (out, weights) if return_weights else out


def mhsa(x: Tensor, p: BlockParams, hw: tuple[int, int], return_weights: bool = False):
    """Self-attention whose keys/values come from an sr x sr reduced copy of ``x``."""
    x, squeeze = _batched(x)
    height, width = hw
    if height % p.sr or width % p.sr:
        raise ValueError(f"sr={p.sr} does not divide spatial extents {hw}")
    if height * width != x.shape[1]:
        raise ValueError(f"sequence length {x.shape[1]} is not {height}x{width}")
    kv = x
    if p.sr > 1:
        kv = p.sr_norm(map_to_tokens(p.sr_conv(tokens_to_map(x, hw))))
    out, weights = attend(x, kv, p.attn, return_weights=True)
    if squeeze:
        out = out.reshape(out.shape[1:])
    return (out, weights) if return_weights else out


def mhca(f_primary: Tensor, f_aux: Tensor, p: AttentionParams, return_weights: bool = False):
    """Queries from the primary feature, keys and values from the auxiliary one."""
    if f_primary.shape != f_aux.shape:
        raise ValueError(f"primary {f_primary.shape} and auxiliary {f_aux.shape} differ")
    f_primary, squeeze = _batched(f_primary)
    f_aux, _ = _batched(f_aux)
    out, weights = attend(f_primary, f_aux, p, return_weights=True)
    if squeeze:
        out = out.reshape(out.shape[1:])
    return (out, weights) if return_weights else out


def residual_fuse(f_prime: Tensor, f_c: Tensor) -> Tensor:
    if f_prime.shape != f_c.shape:
        raise ValueError(f"cannot fuse {f_prime.shape} with {f_c.shape}")
    return f_prime + f_c


def mix_ffn(x: Tensor, p: BlockParams, hw: tuple[int, int]) -> Tensor:
    """x + fc2(GELU(depthwise3x3(fc1(LN(x)))))."""
    x, squeeze = _batched(x)
    h = p.fc1(p.norm2(x))
    h = T.depthwise_conv2d(tokens_to_map(h, hw), p.dw_weight, p.dw_bias, padding=1)
    out = x + p.fc2(T.gelu(map_to_tokens(h)))
    return out.reshape(out.shape[1:]) if squeeze else out
