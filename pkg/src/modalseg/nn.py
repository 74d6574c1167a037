"""Parameter containers and small layers shared by the encoder and head."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Gaussian samples redrawn until they fall within two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Module:
    """Walks attributes to find parameters; order is attribute definition order."""

    def named_parameters(self, prefix: str = ""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
            elif isinstance(value, dict):
                for k, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{k}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch; missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
        for name, p in own.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, std: float = 0.02):
        self.weight = param(trunc_normal(rng, (d_in, d_out), std))
        self.bias = param(np.zeros(d_out))

    def forward(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        self.gain = param(np.ones(dim))
        self.bias = param(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class Conv2d(Module):
    """Convolution over channel-last maps [B, H, W, C]."""

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator, stride: int = 1, padding: int = 0):
        fan_out = kernel * kernel * c_out
        self.weight = param(rng.normal(0.0, np.sqrt(2.0 / fan_out), size=(c_out, c_in, kernel, kernel)))
        self.bias = param(np.zeros(c_out))
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding, channels_last=True)


def tokens_to_map(x: Tensor, hw: tuple[int, int]) -> Tensor:
    """[B, L, D] -> channel-last [B, H, W, D]."""
    batch, length, dim = x.shape
    height, width = hw
    if height * width != length:
        raise ValueError(f"sequence length {length} is not {height}x{width}")
    return x.reshape(batch, height, width, dim)


def map_to_tokens(x: Tensor) -> Tensor:
    """Channel-last [B, H, W, D] -> [B, L, D]."""
    batch, height, width, dim = x.shape
    return x.reshape(batch, height * width, dim)
