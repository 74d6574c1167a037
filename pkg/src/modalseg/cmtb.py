"""Cross-modal transformer blocks and the four-stage multi-branch encoder.

Each modality owns a branch. Inside a block the branch's own tokens are
self-attended, the other present modalities are condensed by the Self-Query
Hub and the Parallel Pooling Mixer, and the result is injected through
cross-attention with a residual add.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import AttentionParams, BlockParams, mhca, mhsa, mix_ffn, residual_fuse
from .nn import Conv2d, LayerNorm, Linear, Module, map_to_tokens, tokens_to_map
from .tensor import Tensor


@dataclass(frozen=True)
class StageConfig:
    embed_dim: int
    depth: int = 1
    heads: int = 1
    sr: int = 1
    patch_stride: int = 2
    patch_kernel: int = 3


def default_stages(dims=(16, 32, 64, 128), depths=(1, 1, 1, 1), heads=(1, 2, 4, 8), sr=(8, 4, 2, 1)):
    strides, kernels = (4, 2, 2, 2), (7, 3, 3, 3)
    return tuple(
        StageConfig(d, n, h, r, s, k) for d, n, h, r, s, k in zip(dims, depths, heads, sr, strides, kernels)
    )


def stage_extents(height: int, width: int, stages) -> list[tuple[int, int]]:
    sizes = []
    for st in stages:
        pad = st.patch_kernel // 2
        height = (height + 2 * pad - st.patch_kernel) // st.patch_stride + 1
        width = (width + 2 * pad - st.patch_kernel) // st.patch_stride + 1
        sizes.append((height, width))
    for (h0, _), (h1, _) in zip(sizes, sizes[1:]):
        if h1 >= h0:
            raise ValueError("stage strides must shrink the spatial extent")
    return sizes


@dataclass(frozen=True)
class Switches:
    """Ablation switches for the block (all on = full model)."""

    sq_hub_mode: str = "learned"  # or "mean"
    cross_attention: bool = True
    residual_add: bool = True

    def __post_init__(self):
        if self.sq_hub_mode not in ("learned", "mean"):
            raise ValueError(f"sq_hub_mode must be 'learned' or 'mean', got {self.sq_hub_mode!r}")


@dataclass
class ModalityBundle:
    """Aligned modality maps, each [C_in, H, W] or batched [B, C_in, H, W]."""

    maps: list
    present: list
    names: list

    def __post_init__(self):
        if not (len(self.maps) == len(self.present) == len(self.names)):
            raise ValueError("maps, present and names must have equal length")
        if not any(self.present):
            raise ValueError("at least one modality must be present")
        extents = {tuple(np.shape(m)[-2:]) for m, keep in zip(self.maps, self.present) if keep}
        if len(extents) != 1:
            raise ValueError(f"present modalities disagree on spatial extents: {extents}")

    @property
    def hw(self) -> tuple[int, int]:
        return next(tuple(np.shape(m)[-2:]) for m, keep in zip(self.maps, self.present) if keep)

    def with_present(self, present) -> ModalityBundle:
        return ModalityBundle(list(self.maps), list(present), list(self.names))


@dataclass
class StageFeatures:
    """features[i][n] is stage i, modality n as [B, L_i, D_i]; absent ones are zeros."""

    features: list
    present: list
    names: list
    extents: list = field(default_factory=list)


class SQHub(Module):
    def __init__(self, dim: int, rng: np.random.Generator):
        self.score = Linear(dim, 1, rng)


def hub_weights(aux: list[Tensor], params: SQHub) -> Tensor:
    """Per-position softmax weights over auxiliaries, shape [M, ..., L, 1]."""
    scores = T.stack([params.score(a) for a in aux], axis=0)
    return T.softmax(scores, axis=0)


def sq_hub(aux: list[Tensor], params: SQHub | None, mode: str = "learned") -> Tensor:
    """Convex, per-position combination of auxiliary features."""
    if not aux:
        raise ValueError("sq_hub needs at least one auxiliary feature")
    if len({a.shape for a in aux}) != 1:
        raise ValueError("auxiliary features must share one shape")
    if len(aux) == 1:
        return aux[0]
    if mode == "mean":
        return T.stack(aux, axis=0).mean(axis=0)
    weights = hub_weights(aux, params)
    return (weights * T.stack(aux, axis=0)).sum(axis=0)


class PPX(Module):
    def __init__(self, dim: int, rng: np.random.Generator):
        self.mix = Linear(3 * dim, dim, rng)


def ppx(x: Tensor, params: PPX, hw: tuple[int, int]) -> Tensor:
    """Identity, 3x3 average-pool and 3x3 max-pool branches mixed pointwise."""
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    spatial = tokens_to_map(x, hw)
    avg = map_to_tokens(T.avg_pool3(spatial))
    mx = map_to_tokens(T.max_pool3(spatial))
    out = params.mix(T.concat([x, avg, mx], axis=-1))
    return out.reshape(out.shape[1:]) if squeeze else out


class CMTBlock(Module):
    def __init__(self, dim: int, heads: int, sr: int, rng: np.random.Generator):
        self.block = BlockParams(dim, heads, sr, rng)
        self.hub = SQHub(dim, rng)
        self.ppx = PPX(dim, rng)
        self.norm_q = LayerNorm(dim)
        self.norm_kv = LayerNorm(dim)
        self.cross = AttentionParams(dim, heads, rng)


def cmtb_stage(primary: Tensor, aux: list[Tensor], params: CMTBlock, hw, switches: Switches = Switches()) -> Tensor:
    """One cross-modal block: f' = x + MHSA, f = f' + MHCA(f', f_aux), then Mix-FFN."""
    for a in aux:
        if a.shape != primary.shape:
            raise ValueError(f"auxiliary {a.shape} does not match primary {primary.shape}")
    f_prime = primary + mhsa(params.block.norm1(primary), params.block, hw)
    fused = f_prime
    if aux and switches.cross_attention:
        f_aux = ppx(sq_hub(aux, params.hub, switches.sq_hub_mode), params.ppx, hw)
        f_c = mhca(params.norm_q(f_prime), params.norm_kv(f_aux), params.cross)
        fused = residual_fuse(f_prime, f_c) if switches.residual_add else f_c
    return mix_ffn(fused, params.block, hw)


class Branch(Module):
    """Patch embeddings, blocks and stage norms for one modality."""

    def __init__(self, in_channels: int, stages, rng: np.random.Generator):
        self.embeds = []
        self.embed_norms = []
        self.blocks = []
        self.norms = []
        prev = in_channels
        for st in stages:
            self.embeds.append(Conv2d(prev, st.embed_dim, st.patch_kernel, rng, st.patch_stride, st.patch_kernel // 2))
            self.embed_norms.append(LayerNorm(st.embed_dim))
            self.blocks.append(_Stage([CMTBlock(st.embed_dim, st.heads, st.sr, rng) for _ in range(st.depth)]))
            self.norms.append(LayerNorm(st.embed_dim))
            prev = st.embed_dim


class _Stage(Module):
    def __init__(self, blocks):
        self.layers = blocks


class Encoder(Module):
    def __init__(self, in_channels: dict, stages, rng: np.random.Generator, share_branches: bool = False,
                 switches: Switches = Switches()):
        self.stages = tuple(stages)
        if len(self.stages) > 4:
            raise ValueError("at most four stages are supported")
        self.names = list(in_channels)
        self.switches = switches
        self.share_branches = share_branches
        if share_branches:
            if len(set(in_channels.values())) != 1:
                raise ValueError("shared branches need equal input channel counts")
            shared = Branch(next(iter(in_channels.values())), self.stages, rng)
            self.branches = {"shared": shared}
        else:
            self.branches = {name: Branch(c, self.stages, rng) for name, c in in_channels.items()}

    def branch(self, name: str) -> Branch:
        return self.branches["shared"] if self.share_branches else self.branches[name]

    def forward(self, bundle: ModalityBundle) -> StageFeatures:
        return encoder_forward(bundle, self)


def _as_batch(m) -> Tensor:
    """[C, H, W] or [B, C, H, W] -> channel-last [B, H, W, C]."""
    t = m if isinstance(m, Tensor) else Tensor(m)
    if t.ndim == 3:
        t = t.reshape(1, *t.shape)
    return t.transpose(0, 2, 3, 1)


def encoder_forward(bundle: ModalityBundle, params: Encoder) -> StageFeatures:
    names = list(bundle.names)
    live = [n for n, keep in zip(names, bundle.present) if keep]
    if not live:
        raise ValueError("no modality present")
    maps = {n: _as_batch(m) for n, m, keep in zip(names, bundle.maps, bundle.present) if keep}
    batch = next(iter(maps.values())).shape[0]
    extents = stage_extents(*bundle.hw, params.stages)
    features = []
    x = maps
    for i, (st, hw) in enumerate(zip(params.stages, extents)):
        tokens = {}
        for n in live:
            br = params.branch(n)
            tokens[n] = br.embed_norms[i](map_to_tokens(br.embeds[i](x[n])))
        for j in range(st.depth):
            inputs = tokens
            tokens = {
                n: cmtb_stage(inputs[n], [inputs[m] for m in live if m != n],
                              params.branch(n).blocks[i].layers[j], hw, params.switches)
                for n in live
            }
        tokens = {n: params.branch(n).norms[i](tokens[n]) for n in live}
        zeros = np.zeros((batch, hw[0] * hw[1], st.embed_dim), dtype=T.get_profile().dtype)
        features.append([tokens[n] if n in tokens else Tensor(zeros) for n in names])
        x = {n: tokens_to_map(tokens[n], hw) for n in live}
    return StageFeatures(features, list(bundle.present), names, extents)
