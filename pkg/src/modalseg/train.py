"""Training loop with checkpoints and a line-delimited metrics log."""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import ExperimentConfig
from .model import AdamW, SegModel, lr_at, train_step

logger = logging.getLogger(__name__)


def _rngs(seed: int):
    root = np.random.SeedSequence(seed)
    data_seq, pair_seq = root.spawn(2)
    return np.random.default_rng(data_seq), np.random.default_rng(pair_seq)


def batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless stream of index batches drawn from reshuffled epochs."""
    pending: list = []
    while True:
        while len(pending) < batch_size:
            pending.extend(int(i) for i in rng.permutation(n))
        yield np.array(pending[:batch_size])
        pending = pending[batch_size:]


def build_model(config: ExperimentConfig) -> SegModel:
    model_cfg = config.model
    model_cfg.seed = config.seed
    return SegModel(model_cfg)


def run_training(config: ExperimentConfig, dataset, out_dir, callback=None) -> SegModel:
    """Train on ``dataset``; writes ``metrics.jsonl``, ``step_*/`` and ``final/`` under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    T.set_profile(config.profile)
    dtype = T.get_profile().dtype
    dataset.maps = {n: m.astype(dtype) for n, m in dataset.maps.items()}
    model = build_model(config)
    sched = config.schedule
    optimizer = AdamW(model.parameters(), lr=sched.lr, weight_decay=sched.weight_decay)
    data_rng, pair_rng = _rngs(config.seed)
    meta = {"provenance": config.provenance(), "experiment": config.to_dict()}
    stream = batches(len(dataset), sched.batch_size, data_rng)
    with open(out_dir / "metrics.jsonl", "w") as log:
        log.write(json.dumps({"header": meta["provenance"]}, sort_keys=True) + "\n")
        for step in range(sched.steps):
            idx = next(stream)
            optimizer.lr = lr_at(step, sched.steps, sched.lr, sched.warmup_fraction, sched.poly_power)
            metrics = train_step(dataset.bundle(idx), dataset.labels[idx], model, optimizer, pair_rng)
            record = {"step": step, **metrics, "lr": optimizer.lr}
            log.write(json.dumps(record, sort_keys=True) + "\n")
            if callback is not None:
                callback(record, model)
            if (step + 1) % sched.ckpt_every == 0 and step + 1 < sched.steps:
                model.save(out_dir / f"step_{step + 1}", {**meta, "step": step + 1})
    model.save(out_dir / "final", {**meta, "step": sched.steps})
    logger.info("training finished after %d steps", sched.steps)
    return model
