"""Finite-difference verification of every primitive and of the full model."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .attention import AttentionParams, BlockParams, mhca, mhsa, mix_ffn, residual_fuse
from .cmtb import CMTBlock, PPX, SQHub, cmtb_stage, ppx, sq_hub
from .model import ModelConfig, SegModel, SGMConfig, cross_entropy, guidance_loss, total_loss
from .sgm import frozen_teachers as sgm_frozen
from .sgm import kl_div
from .tensor import Tensor

TINY = dict(dims=(4, 8, 8, 8), heads=(1, 2, 2, 2), sr=(8, 4, 2, 1), decode_dim=8, num_classes=3,
            modalities={"rgb": 3, "depth": 1, "event": 1})


def _weights(rng, shape) -> Tensor:
    return Tensor(rng.normal(size=shape))


def _scalarize(rng, shape):
    """Random projection turning a tensor output into a scalar."""
    w = Tensor(rng.normal(size=shape))
    return lambda y: (y * w).sum()


def _check(f, x, rng, max_entries=None, eps=1e-5) -> float:
    idx = None
    if max_entries is not None and x.size > max_entries:
        idx = rng.choice(x.size, max_entries, replace=False)
    x.requires_grad = True
    return T.grad_check(f, x, eps, idx)


def primitive_cases(rng: np.random.Generator) -> dict:
    """name -> zero-argument callable returning a max relative error."""
    cases = {}

    def add_case(name, make):
        cases[name] = make

    def softmax_case():
        x = _weights(rng, (4, 5))
        proj = _scalarize(rng, (4, 5))
        return _check(lambda v: proj(T.softmax(v, axis=1)), x, rng)

    def log_softmax_case():
        x = _weights(rng, (3, 6))
        proj = _scalarize(rng, (3, 6))
        return _check(lambda v: proj(T.log_softmax(v, axis=-1)), x, rng)

    def matmul_case():
        a, b = _weights(rng, (2, 3, 4)), _weights(rng, (4, 5))
        proj = _scalarize(rng, (2, 3, 5))
        return max(_check(lambda v: proj(v @ b), a, rng), _check(lambda v: proj(a @ v), b, rng))

    def layer_norm_case():
        x, g, b = _weights(rng, (3, 6)), _weights(rng, (6,)), _weights(rng, (6,))
        proj = _scalarize(rng, (3, 6))
        return max(_check(lambda v: proj(T.layer_norm(v, g, b)), x, rng),
                   _check(lambda v: proj(T.layer_norm(x, v, b)), g, rng),
                   _check(lambda v: proj(T.layer_norm(x, g, v)), b, rng))

    def conv2d_case():
        x, k, b = _weights(rng, (2, 3, 7, 7)), _weights(rng, (4, 3, 3, 3)), _weights(rng, (4,))
        proj = _scalarize(rng, (2, 4, 4, 4))
        f = lambda xx, kk, bb: proj(T.conv2d(xx, kk, bb, stride=2, padding=1))  # noqa: E731
        return max(_check(lambda v: f(v, k, b), x, rng), _check(lambda v: f(x, v, b), k, rng),
                   _check(lambda v: f(x, k, v), b, rng))

    def depthwise_case():
        x, k, b = _weights(rng, (2, 5, 5, 3)), _weights(rng, (3, 3, 3)), _weights(rng, (3,))
        proj = _scalarize(rng, (2, 5, 5, 3))
        f = lambda xx, kk, bb: proj(T.depthwise_conv2d(xx, kk, bb))  # noqa: E731
        return max(_check(lambda v: f(v, k, b), x, rng), _check(lambda v: f(x, v, b), k, rng),
                   _check(lambda v: f(x, k, v), b, rng))

    def pool_case():
        x = _weights(rng, (2, 4, 5, 3))
        proj = _scalarize(rng, (2, 4, 5, 3))
        return max(_check(lambda v: proj(T.avg_pool3(v)), x, rng), _check(lambda v: proj(T.max_pool3(v)), x, rng))

    def upsample_case():
        x = _weights(rng, (2, 3, 3, 2))
        proj = _scalarize(rng, (2, 3, 7, 5))
        return _check(lambda v: proj(T.bilinear_upsample(v, 7, 5)), x, rng)

    def elementwise_case():
        x = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)))
        y = Tensor(rng.uniform(0.5, 2.0, size=(4,)))
        proj = _scalarize(rng, (3, 4))
        f = lambda a, b: proj(T.exp(a * 0.3) / b - T.log(a) * b + T.gelu(a - b) + (a ** 2.0).sum(axis=1, keepdims=True))  # noqa: E731
        return max(_check(lambda v: f(v, y), x, rng), _check(lambda v: f(x, v), y, rng))

    def cross_entropy_case():
        logits = _weights(rng, (3, 4, 4))
        labels = rng.integers(0, 3, size=(4, 4))
        return _check(lambda v: cross_entropy(v, labels), logits, rng)

    def kl_case():
        s = _weights(rng, (5, 6))
        t = T.softmax(_weights(rng, (5, 6)), axis=-1)
        return _check(lambda v: kl_div(t, T.softmax(v, axis=-1)).sum(), s, rng)

    for name, fn in [("softmax", softmax_case), ("log_softmax", log_softmax_case), ("matmul", matmul_case),
                     ("layer_norm", layer_norm_case), ("conv2d", conv2d_case), ("depthwise_conv2d", depthwise_case),
                     ("pooling", pool_case), ("bilinear_upsample", upsample_case),
                     ("elementwise", elementwise_case), ("cross_entropy", cross_entropy_case), ("kl_div", kl_case)]:
        add_case(name, fn)
    return cases


def _param_check(fn_of_params, params, rng, max_entries: int) -> float:
    """Check a scalar function of module parameters, sampling a few entries per tensor."""
    worst = 0.0
    for p in params:
        per = max(1, min(p.size, max_entries))
        idx = rng.choice(p.size, per, replace=False) if p.size > per else None
        worst = max(worst, T.grad_check(lambda _v: fn_of_params(), p, 1e-5, idx))
    return worst


def block_cases(rng: np.random.Generator, entries: int = 2) -> dict:
    hw = (4, 4)
    dim = 8

    def stage_input(batch=2):
        return _weights(rng, (batch, hw[0] * hw[1], dim))

    def mhsa_case():
        p = BlockParams(dim, 2, 2, rng)
        x = stage_input()
        proj = _scalarize(rng, x.shape)
        return max(_check(lambda v: proj(mhsa(v, p, hw)), x, rng),
                   _param_check(lambda: proj(mhsa(x, p, hw)), p.attn.parameters() + p.sr_conv.parameters(), rng, entries))

    def mhca_case():
        p = AttentionParams(dim, 2, rng)
        a, b = stage_input(), stage_input()
        proj = _scalarize(rng, a.shape)
        return max(_check(lambda v: proj(mhca(v, b, p)), a, rng), _check(lambda v: proj(mhca(a, v, p)), b, rng),
                   _param_check(lambda: proj(mhca(a, b, p)), p.parameters(), rng, entries))

    def residual_case():
        a, b = stage_input(), stage_input()
        proj = _scalarize(rng, a.shape)
        return max(_check(lambda v: proj(residual_fuse(v, b)), a, rng), _check(lambda v: proj(residual_fuse(a, v)), b, rng))

    def ffn_case():
        p = BlockParams(dim, 2, 1, rng)
        x = stage_input()
        proj = _scalarize(rng, x.shape)
        params = p.norm2.parameters() + p.fc1.parameters() + [p.dw_weight, p.dw_bias] + p.fc2.parameters()
        return max(_check(lambda v: proj(mix_ffn(v, p, hw)), x, rng),
                   _param_check(lambda: proj(mix_ffn(x, p, hw)), params, rng, entries))

    def hub_ppx_case():
        hub, mixer = SQHub(dim, rng), PPX(dim, rng)
        aux = [stage_input() for _ in range(3)]
        proj = _scalarize(rng, aux[0].shape)
        f = lambda: proj(ppx(sq_hub(aux, hub), mixer, hw))  # noqa: E731
        return max(_check(lambda v: proj(ppx(sq_hub([v] + aux[1:], hub), mixer, hw)), aux[0], rng),
                   _param_check(f, hub.parameters() + mixer.parameters(), rng, entries))

    def cmtb_case():
        p = CMTBlock(dim, 2, 2, rng)
        x, aux = stage_input(), [stage_input(), stage_input()]
        proj = _scalarize(rng, x.shape)
        return max(_check(lambda v: proj(cmtb_stage(v, aux, p, hw)), x, rng, max_entries=24),
                   _check(lambda v: proj(cmtb_stage(x, [v, aux[1]], p, hw)), aux[0], rng, max_entries=24),
                   _param_check(lambda: proj(cmtb_stage(x, aux, p, hw)), p.parameters(), rng, entries))

    return {"mhsa": mhsa_case, "mhca": mhca_case, "residual_fuse": residual_case, "mix_ffn": ffn_case,
            "sq_hub+ppx": hub_ppx_case, "cmtb_stage": cmtb_case}


def tiny_model(seed: int, sgm: bool = True) -> SegModel:
    return SegModel(ModelConfig(**TINY, seed=seed, sgm=SGMConfig(enabled=sgm, lam=2.0)))


def model_loss(model: SegModel, inputs, labels, pair_seed: int) -> Tensor:
    out, feats = model(model.bundle(inputs))
    l_ce = cross_entropy(out.logits, labels)
    sgm = model.config.sgm
    if not sgm.enabled:
        return l_ce
    l_s = guidance_loss(feats, labels, model.config, np.random.default_rng(pair_seed))
    return total_loss(l_ce, l_s, sgm.lam)


def full_model_case(seed: int, entries: int = 24, size: int = 32, batch: int = 2, sgm: bool = True,
                    eps: float = 1e-5, fraction: float | None = None) -> float:
    """Check d(CE + lambda * L_s)/d(params) on a random subset of tiny-model parameters.

    Teacher distributions are recorded on the analytic pass and replayed on the
    perturbed passes, which is exactly the function the stop-gradient differentiates.
    ``fraction`` overrides ``entries`` with a share of all parameter entries.
    """
    rng = np.random.default_rng(seed)
    model = tiny_model(seed, sgm)
    inputs = [rng.normal(size=(batch, c, size, size)) for c in model.config.modalities.values()]
    labels = rng.integers(0, model.config.num_classes, size=(batch, size, size))
    params = model.parameters()
    sizes = np.array([p.size for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    if fraction is not None:
        entries = max(1, int(round(fraction * total)))
    flat = rng.choice(total, size=min(entries, total), replace=False)
    teachers: list = []
    model.zero_grad()
    with sgm_frozen(teachers, replay=False):
        T.backward(model_loss(model, inputs, labels, seed))
    worst = 0.0
    with T.no_grad():
        for pos in flat:
            k = int(np.searchsorted(offsets, pos, side="right") - 1)
            p, local = params[k], int(pos - offsets[k])
            analytic = 0.0 if p.grad is None else float(p.grad.reshape(-1)[local])
            values = p.data.reshape(-1)
            orig = values[local]
            losses = []
            for delta in (eps, -eps):
                values[local] = orig + delta
                with sgm_frozen(teachers, replay=True):
                    losses.append(float(model_loss(model, inputs, labels, seed).data))
            values[local] = orig
            numeric = (losses[0] - losses[1]) / (2 * eps)
            worst = max(worst, abs(analytic - numeric) / max(1.0, abs(analytic)))
    return worst


def corrupted_case(op: str = "matmul", factor: float = 1.5, seed: int = 0) -> float:
    """Negative control: the same check with one backward rule deliberately scaled."""
    T.corrupt_gradient(op, factor)
    try:
        with T.profile("test"):
            return full_model_case(seed, entries=8)
    finally:
        T.corrupt_gradient(op, None)


def run_suite(seeds=range(20), model_entries: int = 24, log=None) -> dict:
    """Worst relative error per operation across ``seeds`` (64-bit profile)."""
    worst: dict = {}
    with T.profile("test"):
        for seed in seeds:
            rng = np.random.default_rng(seed)
            cases = {**primitive_cases(rng), **block_cases(rng)}
            for name, case in cases.items():
                worst[name] = max(worst.get(name, 0.0), case())
            worst["full_model"] = max(worst.get("full_model", 0.0), full_model_case(seed, model_entries))
            if log is not None:
                log(seed, dict(worst))
    return worst
