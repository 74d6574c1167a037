"""Prototype-based self-guidance between randomly paired modalities.

Training only. Per stage, class prototypes (mean feature per labeled
category) are computed for every modality; modalities are split into
teacher/student pairs and each student's prototypes are pulled towards its
teacher's with a KL term. Teachers never receive gradient.
"""

from __future__ import annotations

import threading
import warnings
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

IGNORE = 255
PROB_FLOOR = 1e-8


_frozen = threading.local()


@contextmanager
def frozen_teachers(store: list, replay: bool):
    """Record teacher distributions into ``store``, or replay them in call order.

    The guidance loss stops gradient through the teacher, so a finite-difference
    check must hold teacher values fixed at the base point to match it.
    """
    previous = getattr(_frozen, "state", None)
    _frozen.state = (store, replay, [0])
    try:
        yield store
    finally:
        _frozen.state = previous


def _teacher_values(t: np.ndarray) -> np.ndarray:
    state = getattr(_frozen, "state", None)
    if state is None:
        return t
    store, replay, cursor = state
    if not replay:
        store.append(t.copy())
        return t
    value = store[cursor[0]]
    cursor[0] += 1
    return value


class EmptyGuidanceWarning(UserWarning):
    """No category was present at any stage, so the guidance loss is zero."""


@dataclass
class PrototypeSet:
    """protos[n][i]: [B, C, D_i] for modality n, stage i; present[i]: [B, C] bool."""

    protos: list
    present: list


@dataclass
class Pairing:
    pairs: list
    dropped: int | None = None

    def validate(self, n: int) -> None:
        used = [i for pair in self.pairs for i in pair] + ([] if self.dropped is None else [self.dropped])
        if sorted(used) != list(range(n)):
            raise ValueError(f"pairing {self} is not a partition of {n} modalities")
        if len(self.pairs) != n // 2 or (self.dropped is not None) != (n % 2 == 1):
            raise ValueError(f"pairing {self} has the wrong shape for {n} modalities")


def _one_hot(labels: np.ndarray, num_classes: int, dtype) -> np.ndarray:
    labels = np.asarray(labels)
    valid = labels != IGNORE
    if np.any(labels[valid] < 0) or np.any(labels[valid] >= num_classes):
        raise ValueError(f"labels outside 0..{num_classes - 1}")
    onehot = np.zeros(labels.shape + (num_classes,), dtype=dtype)
    idx = np.where(valid, labels, 0)
    np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
    onehot[~valid] = 0.0
    return onehot


def compute_prototypes(features: Tensor, labels: np.ndarray, num_classes: int):
    """Per-category mean of pixel features.

    ``features`` is [L, D] or [B, L, D]; ``labels`` matches the leading axes.
    Returns ``(protos [.., C, D], present [.., C])``; rows of absent categories
    are zero and must be masked by ``present``.
    """
    if num_classes <= 0:
        raise ValueError("number of categories must be positive")
    if np.shape(labels) != features.shape[:-1]:
        raise ValueError(f"labels {np.shape(labels)} do not match features {features.shape}")
    onehot = _one_hot(labels, num_classes, features.dtype)
    counts = onehot.sum(axis=-2)  # [.., C]
    present = counts > 0
    sums = T.matmul(Tensor(np.swapaxes(onehot, -1, -2)), features)
    protos = sums / Tensor(np.maximum(counts, 1.0)[..., None])
    return protos, present


def downsample_labels(labels: np.ndarray, target_hw) -> np.ndarray:
    """Nearest (top-left representative) downsampling of [.., H, W] labels."""
    labels = np.asarray(labels)
    height, width = labels.shape[-2:]
    th, tw = target_hw
    if th < 1 or tw < 1 or height % th or width % tw:
        raise ValueError(f"target {target_hw} does not divide {(height, width)}")
    return labels[..., :: height // th, :: width // tw]


def assign_pairs(n: int, rng: np.random.Generator) -> Pairing:
    """Uniformly permute modalities; drop the last if odd; pair consecutively."""
    if n < 2:
        raise ValueError("pairing needs at least two modalities")
    order = [int(i) for i in rng.permutation(n)]
    dropped = order.pop() if n % 2 else None
    return Pairing([(order[k], order[k + 1]) for k in range(0, len(order), 2)], dropped)


def cosine_pairs(stage4_protos: list, present: np.ndarray) -> Pairing:
    """Greedily pair the most similar modalities first (mean-prototype cosine)."""
    n = len(stage4_protos)
    if n < 2:
        raise ValueError("pairing needs at least two modalities")
    mask = present.astype(float)[..., None]
    denom = max(float(mask.sum()), 1.0)
    means = [np.asarray((p.data * mask).sum(axis=tuple(range(p.ndim - 1))) / denom) for p in stage4_protos]
    sims = []
    for a in range(n):
        for b in range(a + 1, n):
            na, nb = np.linalg.norm(means[a]), np.linalg.norm(means[b])
            cos = float(means[a] @ means[b] / (na * nb)) if na > 0 and nb > 0 else 0.0
            sims.append((-cos, a, b))
    sims.sort()
    used, pairs = set(), []
    for _, a, b in sims:
        if a not in used and b not in used:
            pairs.append((a, b))
            used.update((a, b))
    leftover = [k for k in range(n) if k not in used]
    return Pairing(pairs, leftover[0] if leftover else None)


def kl_div(t: Tensor, s: Tensor, axis: int = -1, atol: float = 1e-6) -> Tensor:
    """sum t * log(t / s) along ``axis``; the teacher ``t`` is detached."""
    for name, dist in (("teacher", t), ("student", s)):
        if np.any(dist.data < 0) or np.any(np.abs(dist.data.sum(axis=axis) - 1.0) > atol):
            raise ValueError(f"{name} is not a normalized distribution")
    t_data = _teacher_values(t.detach().data)
    log_ratio = Tensor(np.log(np.maximum(t_data, PROB_FLOOR))) - T.log(T.clip_min(s, PROB_FLOOR))
    return (Tensor(t_data) * log_ratio).sum(axis=axis)


def _distribution(p: Tensor, axis: int) -> Tensor:
    return T.softmax(p, axis=axis)


def pair_term(teacher: Tensor, student: Tensor, present: np.ndarray, kl_axis: str = "channel") -> tuple[Tensor, int]:
    """Guidance term for one (teacher, student) pair at one stage.

    ``teacher``/``student`` are [B, C, D] prototype rows. Channel mode: KL per
    present category over channels, mean over present categories, then mean
    over samples with any present category. Category mode: per channel, a
    distribution over the present categories, mean over channels.
    Returns the term and the number of contributing samples.
    """
    present = np.asarray(present, dtype=bool)
    live = np.flatnonzero(present.any(axis=-1))
    if live.size == 0:
        return Tensor(0.0), 0
    if kl_axis == "channel":
        kl = kl_div(_distribution(teacher, -1), _distribution(student, -1), axis=-1)  # [B, C]
        counts = present.sum(axis=-1, keepdims=True)
        weights = np.where(present, 1.0 / np.maximum(counts, 1), 0.0) / live.size
        return (kl * Tensor(weights)).sum(), live.size
    terms = []
    for b in live:
        cats = np.flatnonzero(present[b])
        t_rows = teacher[int(b)][cats]
        s_rows = student[int(b)][cats]
        if kl_axis == "channel":
            kl = kl_div(_distribution(t_rows, -1), _distribution(s_rows, -1), axis=-1)
        elif kl_axis == "category":
            kl = kl_div(_distribution(t_rows, 0), _distribution(s_rows, 0), axis=0)
        else:
            raise ValueError(f"unknown kl_axis {kl_axis!r}")
        terms.append(kl.mean())
    return T.stack(terms).mean(), live.size


def sgm_loss(protosets: PrototypeSet, pairing: Pairing, kl_axis: str = "channel") -> Tensor:
    """Sum over stages and pairs of the per-pair guidance terms."""
    n = len(protosets.protos)
    pairing.validate(n)
    total = None
    contributing = 0
    for i, present in enumerate(protosets.present):
        for teacher, student in pairing.pairs:
            term, count = pair_term(protosets.protos[teacher][i], protosets.protos[student][i], present, kl_axis)
            if count == 0:
                continue
            contributing += count
            total = term if total is None else total + term
    if total is None or contributing == 0:
        warnings.warn("no category present at any stage; guidance loss is zero", EmptyGuidanceWarning)
        return Tensor(0.0)
    return total


def pixel_guidance_loss(features: list, labels: list, pairing: Pairing) -> Tensor:
    """Guidance without the prototype step: channel KL per labeled pixel.

    ``features[n][i]`` is [B, L, D]; ``labels[i]`` is [B, L] at stage i.
    """
    pairing.validate(len(features))
    total = None
    for i, lab in enumerate(labels):
        mask = (np.asarray(lab) != IGNORE).astype(features[0][i].dtype)
        if mask.sum() == 0:
            continue
        for teacher, student in pairing.pairs:
            t = _distribution(features[teacher][i], -1)
            s = _distribution(features[student][i], -1)
            kl = kl_div(t, s, axis=-1)
            term = (kl * Tensor(mask)).sum() * (1.0 / float(mask.sum()))
            total = term if total is None else total + term
    if total is None:
        warnings.warn("no labeled pixel at any stage; guidance loss is zero", EmptyGuidanceWarning)
        return Tensor(0.0)
    return total
