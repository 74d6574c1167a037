"""Missing-modality and noisy-modality evaluation protocols.

EMM removes whole modalities (the branch is skipped), RMM zeroes random
block x block tiles of every modality map, NM adds Gaussian noise. Every
perturbation is a pure function of (input, parameters, seed).
"""

from __future__ import annotations

import itertools
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .cmtb import ModalityBundle
from .model import confusion_matrix, iou_from_confusion

PROTOCOL_VERSION = 1
NOISE_SIGMA = {"low": 0.1, "mid": 0.5}
METRICS = ("mIoU", "EMM_avg", "EMM_p", "RMM_avg", "RMM_p", "NM_low", "NM_mid")

# Reference rows (clean mIoU, EMM avg, EMM p=0.1, RMM avg, RMM p=0.1, NM low, NM mid) and Mean.
PUBLISHED_ROWS = {
    "DeLiVER": ((67.90, 48.22, 65.75, 50.96, 64.64, 34.87, 19.13), 50.21),
    "MUSES": ((50.26, 35.63, 45.06, 38.61, 47.63, 20.47, 12.62), 35.75),
}

_EMM, _RMM, _NM = 1, 2, 3


@dataclass(frozen=True)
class Protocol:
    emm_p: float = 0.1
    rmm_p: float = 0.1
    rmm_avg_ps: tuple = (0.1, 0.3, 0.5, 0.7, 0.9)
    block: int = 16
    sigma_low: float = NOISE_SIGMA["low"]
    sigma_mid: float = NOISE_SIGMA["mid"]
    seed: int = 0
    batch_size: int = 16
    version: int = PROTOCOL_VERSION

    def describe(self) -> dict:
        return {
            **asdict(self),
            "EMM_avg": "mean mIoU over every non-empty strict subset of kept modalities (absent branch skipped)",
            "EMM_p": "per sample, each modality dropped with prob emm_p; redrawn until one is kept",
            "RMM_avg": "mean of RMM over rmm_avg_ps",
            "RMM_p": "per modality, each block x block tile zeroed with prob rmm_p",
            "NM": "additive Gaussian noise on every modality, sigma_low / sigma_mid",
        }


@dataclass
class RobustnessReport:
    mIoU: float
    EMM_avg: float
    EMM_p: float
    RMM_avg: float
    RMM_p: float
    NM_low: float
    NM_mid: float
    mean: float = float("nan")
    header: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        self.mean = robustness_score({k: getattr(self, k) for k in METRICS})

    def metrics(self) -> dict:
        return {k: getattr(self, k) for k in METRICS + ("mean",)}

    def to_json(self) -> str:
        body = {"header": self.header, "metrics": self.metrics(), "details": self.details}
        return json.dumps(body, indent=2, sort_keys=True) + "\n"


def robustness_score(values) -> float:
    """Arithmetic mean of the seven benchmark metrics."""
    if isinstance(values, dict):
        missing = [k for k in METRICS if k not in values or values[k] is None]
        if missing:
            raise ValueError(f"missing metrics: {missing}")
        values = [values[k] for k in METRICS]
    values = list(values)
    if len(values) != len(METRICS) or any(v is None for v in values):
        raise ValueError(f"need exactly {len(METRICS)} metrics")
    return float(sum(values) / len(values))


def self_test() -> dict:
    """Recompute the reference means from their row values."""
    out = {}
    for name, (row, published) in PUBLISHED_ROWS.items():
        score = robustness_score(row)
        out[name] = {"computed": round(score, 2), "published": published, "ok": round(score, 2) == published}
    return out


def _rng(seed: int, kind: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, kind, index])


def rmm_perturb(bundle: ModalityBundle, p: float, block: int = 16, seed: int = 0) -> ModalityBundle:
    """Zero each block x block tile of each modality map independently with prob ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must be in [0, 1]")
    height, width = bundle.hw
    if block < 1 or height % block or width % block:
        raise ValueError(f"block {block} does not divide {(height, width)}")
    rng = np.random.default_rng(seed)
    maps = []
    for m in bundle.maps:
        m = np.asarray(m)
        lead = m.shape[:-3] if m.ndim == 4 else ()
        keep = rng.random(lead + (height // block, width // block)) >= p
        mask = np.repeat(np.repeat(keep, block, axis=-2), block, axis=-1)
        maps.append(m * np.expand_dims(mask, -3).astype(m.dtype))
    return ModalityBundle(maps, list(bundle.present), list(bundle.names))


def nm_perturb(bundle: ModalityBundle, level="low", seed: int = 0) -> ModalityBundle:
    """Add Gaussian noise to every modality; ``level`` is low/mid or a sigma."""
    sigma = NOISE_SIGMA[str(level).lower()] if isinstance(level, str) else float(level)
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    rng = np.random.default_rng(seed)
    maps = []
    for m in bundle.maps:
        m = np.asarray(m)
        noise = rng.standard_normal(m.shape)
        maps.append((m + sigma * noise).astype(m.dtype) if sigma > 0 else m.copy())
    return ModalityBundle(maps, list(bundle.present), list(bundle.names))


def keep_subsets(n: int) -> list:
    """All non-empty strict subsets of n modalities as presence masks (2^n - 2)."""
    if n < 2:
        raise ValueError("EMM avg needs at least two modalities")
    masks = [tuple(bool(b) for b in bits) for bits in itertools.product([1, 0], repeat=n)]
    return [m for m in masks if any(m) and not all(m)]


def _confusion(model, dataset, indices, present, perturb=None) -> np.ndarray:
    """Confusion matrix over ``indices`` evaluated with one presence mask.

    ``perturb(bundle, sample_index)`` transforms single-sample bundles.
    """
    c = dataset.num_classes
    cm = np.zeros((c, c), dtype=np.int64)
    indices = list(indices)
    step = 16
    for k in range(0, len(indices), step):
        chunk = np.asarray(indices[k : k + step])
        bundle = dataset.bundle(chunk, present)
        if perturb is not None:
            singles = [perturb(dataset.bundle(chunk[j : j + 1], present), int(i)) for j, i in enumerate(chunk)]
            maps = [np.concatenate([np.asarray(s.maps[m]) for s in singles]) for m in range(len(bundle.maps))]
            bundle = ModalityBundle(maps, list(present), list(dataset.names))
        pred = model.predict(bundle)
        cm += confusion_matrix(pred, dataset.labels[chunk], c)
    return cm


def evaluate(model, dataset, present=None, perturb=None) -> float:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    present = dataset.present if present is None else present
    return iou_from_confusion(_confusion(model, dataset, range(len(dataset)), present, perturb))[0]


def emm_eval(model, dataset, mode: str = "avg", p: float = 0.1, seed: int = 0, threads: int = 1, log=None):
    """EMM score. ``mode='avg'`` enumerates keep-subsets; ``mode='fixed'`` drops per sample."""
    n = len(dataset.names)
    if mode == "avg":
        subsets = keep_subsets(n)

        def one(mask):
            return evaluate(model, dataset, mask)

        if threads > 1:
            with ThreadPoolExecutor(threads) as pool:
                scores = list(pool.map(one, subsets))
        else:
            scores = [one(m) for m in subsets]
        if log is not None:
            for mask, s in zip(subsets, scores):
                log(("EMM", [nm for nm, k in zip(dataset.names, mask) if k], s))
        return float(np.mean(scores)), dict(zip(["".join("1" if b else "0" for b in m) for m in subsets], scores))
    if mode != "fixed":
        raise ValueError(f"unknown EMM mode {mode!r}")
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must be in [0, 1]")
    groups: dict = {}
    for idx in range(len(dataset)):
        rng = _rng(seed, _EMM, idx)
        while True:
            mask = tuple(bool(v) for v in rng.random(n) >= p)
            if any(mask):
                break
        groups.setdefault(mask, []).append(idx)
    c = dataset.num_classes
    cm = np.zeros((c, c), dtype=np.int64)
    for mask in sorted(groups):
        cm += _confusion(model, dataset, groups[mask], list(mask))
    return iou_from_confusion(cm)[0], {"".join("1" if b else "0" for b in m): len(v) for m, v in sorted(groups.items())}


def rmm_eval(model, dataset, p: float, block: int = 16, seed: int = 0) -> float:
    if p == 0:
        return evaluate(model, dataset)
    return evaluate(model, dataset, perturb=lambda b, i: rmm_perturb(b, p, block, seed=[seed, _RMM, i]))


def nm_eval(model, dataset, sigma: float, seed: int = 0) -> float:
    if sigma == 0:
        return evaluate(model, dataset)
    return evaluate(model, dataset, perturb=lambda b, i: nm_perturb(b, sigma, seed=[seed, _NM, i]))


def run_benchmark(model, dataset, protocol: Protocol = Protocol(), threads: int = 1, provenance=None,
                  log=None) -> RobustnessReport:
    clean = evaluate(model, dataset)
    emm_avg, emm_subsets = emm_eval(model, dataset, "avg", seed=protocol.seed, threads=threads, log=log)
    emm_p, emm_groups = emm_eval(model, dataset, "fixed", protocol.emm_p, protocol.seed)
    rmm_by_p = {str(p): rmm_eval(model, dataset, p, protocol.block, protocol.seed) for p in protocol.rmm_avg_ps}
    rmm_p = rmm_eval(model, dataset, protocol.rmm_p, protocol.block, protocol.seed)
    nm_low = nm_eval(model, dataset, protocol.sigma_low, protocol.seed)
    nm_mid = nm_eval(model, dataset, protocol.sigma_mid, protocol.seed)
    header = {"protocol": protocol.describe(), "provenance": provenance or {}, "samples": len(dataset),
              "modalities": list(dataset.names)}
    details = {"EMM_subsets": emm_subsets, "EMM_p_groups": emm_groups, "RMM_by_p": rmm_by_p}
    return RobustnessReport(clean, emm_avg, emm_p, float(np.mean(list(rmm_by_p.values()))), rmm_p, nm_low, nm_mid,
                            header=header, details=details)


def format_table(report: RobustnessReport) -> str:
    """Aligned plain-text table in percent, one row."""
    cols = ["mIoU", "EMM(Avg)", "EMM(p)", "RMM(Avg)", "RMM(p)", "NM(Low)", "NM(Mid)", "Mean"]
    vals = [f"{100 * v:.2f}" for v in report.metrics().values()]
    widths = [max(len(c), len(v)) for c, v in zip(cols, vals)]
    head = " | ".join(c.rjust(w) for c, w in zip(cols, widths))
    rule = "-+-".join("-" * w for w in widths)
    row = " | ".join(v.rjust(w) for v, w in zip(vals, widths))
    return "\n".join([head, rule, row])
