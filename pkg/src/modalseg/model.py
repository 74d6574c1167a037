"""Fusion, decode head, losses, mIoU and the optimization step."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .cmtb import Encoder, ModalityBundle, StageConfig, StageFeatures, Switches, default_stages
from .nn import Linear, Module, map_to_tokens, tokens_to_map
from .serialize import load_bundle, save_bundle
from .sgm import IGNORE, PrototypeSet, assign_pairs, compute_prototypes, cosine_pairs, downsample_labels
from .sgm import pixel_guidance_loss, sgm_loss
from .tensor import NonFiniteError, Tensor


@dataclass
class SGMConfig:
    enabled: bool = True
    lam: float = 60.0
    pairing_mode: str = "random"  # or "cosine"
    prototype: bool = True
    kl_axis: str = "channel"  # or "category"


@dataclass
class ModelConfig:
    modalities: dict = field(default_factory=lambda: {"rgb": 3, "depth": 1, "event": 1, "lidar": 1})
    dims: tuple = (16, 32, 64, 128)
    depths: tuple = (1, 1, 1, 1)
    heads: tuple = (1, 2, 4, 8)
    sr: tuple = (8, 4, 2, 1)
    decode_dim: int = 32
    num_classes: int = 6
    share_branches: bool = False
    sq_hub_mode: str = "learned"
    cross_attention: bool = True
    residual_add: bool = True
    sgm: SGMConfig = field(default_factory=SGMConfig)
    seed: int = 0

    def __post_init__(self):
        if not isinstance(self.modalities, dict):
            self.modalities = {str(name): int(c) for name, c in self.modalities}
        if isinstance(self.sgm, dict):
            self.sgm = SGMConfig(**self.sgm)
        for key in ("dims", "depths", "heads", "sr"):
            setattr(self, key, tuple(getattr(self, key)))
        if self.num_classes < 2:
            raise ValueError("need at least two categories")
        if self.sgm.lam < 0:
            raise ValueError("lambda must be non-negative")
        if not self.modalities:
            raise ValueError("need at least one modality")
        if self.sgm.pairing_mode not in ("random", "cosine"):
            raise ValueError(f"unknown pairing mode {self.sgm.pairing_mode!r}")
        if self.sgm.kl_axis not in ("channel", "category"):
            raise ValueError(f"unknown kl axis {self.sgm.kl_axis!r}")

    @property
    def stages(self) -> tuple[StageConfig, ...]:
        return default_stages(self.dims, self.depths, self.heads, self.sr)

    @property
    def switches(self) -> Switches:
        return Switches(self.sq_hub_mode, self.cross_attention, self.residual_add)

    def to_dict(self) -> dict:
        # modality order is meaningful; a pair list survives key-sorted JSON
        out = asdict(self)
        out["modalities"] = [[name, c] for name, c in self.modalities.items()]
        return out


@dataclass
class SegOutput:
    logits: Tensor  # [B, C, H, W]
    fused: list


class DecodeHead(Module):
    def __init__(self, dims, decode_dim: int, num_classes: int, rng: np.random.Generator):
        self.proj = [Linear(d, decode_dim, rng) for d in dims]
        self.fuse = Linear(decode_dim * len(dims), decode_dim, rng)
        self.classifier = Linear(decode_dim, num_classes, rng)


def fuse_modalities(features: StageFeatures, present=None) -> list:
    """Per-stage mean over present modalities."""
    present = features.present if present is None else present
    keep = [k for k, on in enumerate(present) if on]
    if not keep:
        raise ValueError("no modality present")
    fused = []
    for stage in features.features:
        if len(keep) == 1:
            fused.append(stage[keep[0]])
        else:
            fused.append(T.stack([stage[k] for k in keep], axis=0).mean(axis=0))
    return fused


def _channels_first(x: Tensor, inverse: bool = False) -> Tensor:
    return x.transpose(0, 2, 3, 1) if inverse else x.transpose(0, 3, 1, 2)


def decode_head(fused: list, extents: list, params: DecodeHead, out_hw) -> SegOutput:
    """Project, upsample to stage-1 resolution, concat, fuse, classify, upsample."""
    if len(fused) != len(params.proj):
        raise ValueError(f"expected {len(params.proj)} stages, got {len(fused)}")
    h1, w1 = extents[0]
    ups = []
    for f, hw, proj in zip(fused, extents, params.proj):
        m = _channels_first(tokens_to_map(proj(f), hw))
        ups.append(T.bilinear_upsample(m, h1, w1))
    x = _channels_first(T.concat(ups, axis=1), inverse=True)
    x = T.gelu(params.fuse(map_to_tokens(x)))
    logits = _channels_first(tokens_to_map(params.classifier(x), (h1, w1)))
    logits = T.bilinear_upsample(logits, *out_hw)
    return SegOutput(logits, fused)


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_id: int = IGNORE) -> Tensor:
    """Mean over non-ignored pixels of -log softmax(y)[true category].

    ``logits`` is [C, H, W] or [B, C, H, W]; ``labels`` drops the C axis.
    """
    if logits.ndim == 3:
        logits = logits.reshape(1, *logits.shape)
        labels = np.asarray(labels)[None]
    labels = np.asarray(labels)
    valid = labels != ignore_id
    count = int(valid.sum())
    if count == 0:
        raise ValueError("all pixels are ignored")
    num_classes = logits.shape[1]
    if np.any(labels[valid] < 0) or np.any(labels[valid] >= num_classes):
        raise ValueError("label out of range")
    picked = np.zeros(logits.shape, dtype=logits.dtype)
    idx = np.where(valid, labels, 0)
    np.put_along_axis(picked, idx[:, None], 1.0, axis=1)
    picked *= valid[:, None]
    logp = T.log_softmax(logits, axis=1)
    return (logp * Tensor(picked)).sum() * (-1.0 / count)


def total_loss(l_ce: Tensor, l_s: Tensor, lam: float) -> Tensor:
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if lam == 0:
        return l_ce
    return l_ce + l_s * lam


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int, ignore_id: int = IGNORE) -> np.ndarray:
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    valid = gt != ignore_id
    pred, gt = pred[valid].astype(np.int64), gt[valid].astype(np.int64)
    if np.any(pred < 0) or np.any(pred >= num_classes):
        raise ValueError("prediction out of range")
    return np.bincount(gt * num_classes + pred, minlength=num_classes**2).reshape(num_classes, num_classes)


def iou_from_confusion(cm: np.ndarray) -> tuple[float, np.ndarray]:
    """Per-category IoU (NaN where the category never occurs) and their mean."""
    tp = np.diag(cm).astype(float)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    ious = np.full(len(tp), np.nan)
    occurs = union > 0
    ious[occurs] = tp[occurs] / union[occurs]
    return (float(ious[occurs].mean()) if occurs.any() else float("nan")), ious


def miou(pred, gt, num_classes: int, ignore_id: int = IGNORE) -> tuple[float, np.ndarray]:
    return iou_from_confusion(confusion_matrix(pred, gt, num_classes, ignore_id))


class SegModel(Module):
    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.encoder = Encoder(config.modalities, config.stages, rng, config.share_branches, config.switches)
        self.head = DecodeHead(config.dims, config.decode_dim, config.num_classes, rng)

    @property
    def names(self) -> list:
        return list(self.config.modalities)

    def bundle(self, maps, present=None) -> ModalityBundle:
        present = [True] * len(self.names) if present is None else list(present)
        return ModalityBundle(list(maps), present, self.names)

    def forward(self, bundle: ModalityBundle) -> tuple[SegOutput, StageFeatures]:
        feats = self.encoder(bundle)
        out = decode_head(fuse_modalities(feats), feats.extents, self.head, bundle.hw)
        return out, feats

    def predict(self, bundle: ModalityBundle) -> np.ndarray:
        """Argmax labels [B, H, W]; ties go to the lower category id."""
        with T.no_grad():
            out, _ = self.forward(bundle)
        return out.logits.data.argmax(axis=1)

    def save(self, directory, meta: dict | None = None) -> None:
        save_bundle(directory, self.state_dict(), {"model_config": self.config.to_dict(), **(meta or {})})

    @classmethod
    def load(cls, directory) -> tuple[SegModel, dict]:
        state, meta = load_bundle(directory)
        model = cls(ModelConfig(**meta["model_config"]))
        model.load_state_dict(state)
        return model, meta


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params, lr: float = 6e-5, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data = p.data * (1.0 - self.lr * self.weight_decay)
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def lr_at(step: int, total: int, base_lr: float, warmup_fraction: float = 0.0, power: float = 0.9) -> float:
    """Linear warm-up followed by polynomial decay to zero at ``total``."""
    if total <= 0:
        return base_lr
    warm = int(round(warmup_fraction * total))
    if warm and step < warm:
        return base_lr * (step + 1) / warm
    return base_lr * (1.0 - step / total) ** power


def stage_labels(labels: np.ndarray, extents) -> list:
    return [downsample_labels(labels, hw).reshape(labels.shape[0], -1) for hw in extents]


def guidance_loss(features: StageFeatures, labels: np.ndarray, config: ModelConfig, rng: np.random.Generator) -> Tensor:
    """Self-guidance loss over the present modalities of ``features``."""
    keep = [k for k, on in enumerate(features.present) if on]
    if len(keep) < 2:
        return Tensor(0.0)
    per_stage = stage_labels(labels, features.extents)
    feats = [[features.features[i][k] for i in range(len(per_stage))] for k in keep]
    sgm = config.sgm
    if not sgm.prototype:
        pairing = assign_pairs(len(keep), rng)
        return pixel_guidance_loss(feats, per_stage, pairing)
    protos = [[None] * len(per_stage) for _ in keep]
    present = []
    for i, lab in enumerate(per_stage):
        for k in range(len(keep)):
            protos[k][i], pres = compute_prototypes(feats[k][i], lab, config.num_classes)
        present.append(pres)
    if sgm.pairing_mode == "cosine":
        pairing = cosine_pairs([protos[k][-1] for k in range(len(keep))], present[-1])
    else:
        pairing = assign_pairs(len(keep), rng)
    return sgm_loss(PrototypeSet(protos, present), pairing, sgm.kl_axis)


def train_step(bundle: ModalityBundle, labels: np.ndarray, model: SegModel, optimizer: AdamW,
               rng: np.random.Generator) -> dict:
    """One forward/backward/update; returns {L, L_CE, L_s}."""
    optimizer.zero_grad()
    out, feats = model(bundle)
    l_ce = cross_entropy(out.logits, labels)
    sgm = model.config.sgm
    l_s = guidance_loss(feats, labels, model.config, rng) if sgm.enabled else Tensor(0.0)
    loss = total_loss(l_ce, l_s, sgm.lam if sgm.enabled else 0.0)
    metrics = {"L": loss.item(), "L_CE": l_ce.item(), "L_s": l_s.item()}
    if not all(math.isfinite(v) for v in metrics.values()):
        raise NonFiniteError(f"non-finite loss: {metrics}")
    T.backward(loss)
    optimizer.step()
    return metrics
