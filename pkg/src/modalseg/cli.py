"""Command-line entry point: gen | train | eval | robust | gradcheck."""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import ConfigError, load
from .model import SegModel, iou_from_confusion
from .serialize import ContainerError
from .synth import SynthConfig, generate_samples, read_dataset, write_dataset

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

logger = logging.getLogger("modalseg")


class DataError(OSError):
    pass


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def _global_args(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--seed", type=int, default=default, help="global seed (default 0)")
    parser.add_argument("--threads", type=int, default=default,
                        help="worker threads for evaluation (fallback: MODALSEG_THREADS, then 1)")
    parser.add_argument("--config", default=default, help="JSON experiment config; flags override it")
    parser.add_argument("--preset", default=default, help="named ablation preset applied before --config")
    parser.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def _switch_args(parser: argparse.ArgumentParser) -> None:
    g = parser.add_argument_group("ablation switches")
    g.add_argument("--sgm", type=_on_off, help="self-guidance on/off (default off; on implies lambda 60)")
    g.add_argument("--sgm.lambda", dest="sgm_lambda", type=float, help="self-guidance weight")
    g.add_argument("--sgm.pairing", dest="sgm_pairing", choices=("random", "cosine"))
    g.add_argument("--sgm.kl-axis", dest="sgm_kl_axis", choices=("channel", "category"))
    g.add_argument("--prototype", type=_on_off, help="prototype step in self-guidance")
    g.add_argument("--sq-hub", dest="sq_hub", choices=("learned", "mean"))
    g.add_argument("--cross-attention", dest="cross_attention", type=_on_off)
    g.add_argument("--residual-add", dest="residual_add", type=_on_off)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="modalseg", description=__doc__)
    _global_args(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="write synthetic train/val splits")
    gen.add_argument("--out", default="out")
    gen.add_argument("--train-samples", type=int)
    gen.add_argument("--val-samples", type=int)
    gen.add_argument("--force", action="store_true", help="overwrite existing splits")

    train = sub.add_parser("train", help="train a model")
    train.add_argument("--data", default="out/train")
    train.add_argument("--out", default="runs/train")
    train.add_argument("--steps", type=int)
    train.add_argument("--lr", type=float)
    train.add_argument("--batch-size", dest="batch_size", type=int)
    train.add_argument("--ckpt-every", dest="ckpt_every", type=int)
    train.add_argument("--force", action="store_true", help="reuse a non-empty output directory")
    _switch_args(train)

    ev = sub.add_parser("eval", help="mIoU of a checkpoint on a split")
    ev.add_argument("--checkpoint", default="runs/train/final")
    ev.add_argument("--data", default="out/val")
    ev.add_argument("--modalities", help="comma-separated subset to keep (others absent)")
    ev.add_argument("--report", help="also write the report to this file")

    rb = sub.add_parser("robust", help="missing/noisy-modality benchmark")
    rb.add_argument("--checkpoint", default="runs/train/final")
    rb.add_argument("--data", default="out/val")
    rb.add_argument("--emm", choices=("avg", "fixed"), help="run only this EMM variant")
    rb.add_argument("--emm-p", dest="emm_p", type=float, default=0.1)
    rb.add_argument("--rmm-p", dest="rmm_p", type=float, default=0.1)
    rb.add_argument("--block", type=int, default=16)
    rb.add_argument("--self-test", dest="self_test", action="store_true",
                    help="recompute published mean scores from their rows and exit")
    rb.add_argument("--report", help="also write the report to this file")

    gc = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    gc.add_argument("--seeds", type=int, default=20)
    gc.add_argument("--entries", type=int, default=24, help="sampled parameters per full-model check")
    gc.add_argument("--tolerance", type=float, default=1e-4)
    gc.add_argument("--corrupt", metavar="OP", help="scale the backward rule of OP by 1.5 (negative control)")
    gc.add_argument("--report", help="also write the report to this file")

    for p in (gen, train, ev, rb, gc):
        _global_args(p, suppress=True)
    return parser


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("MODALSEG_THREADS")
    if env is None:
        return 1
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"MODALSEG_THREADS must be an integer, got {env!r}") from None


def _overrides(args) -> dict:
    o: dict = {"seed": args.seed, "threads": _threads(args)}
    get = lambda name: getattr(args, name, None)  # noqa: E731
    if get("sgm") is not None:
        o["model.sgm.enabled"] = args.sgm
        if args.sgm and get("sgm_lambda") is None:
            o["model.sgm.lam"] = 60.0
    o["model.sgm.lam"] = get("sgm_lambda") if get("sgm_lambda") is not None else o.get("model.sgm.lam")
    o["model.sgm.pairing_mode"] = get("sgm_pairing")
    o["model.sgm.kl_axis"] = get("sgm_kl_axis")
    o["model.sgm.prototype"] = get("prototype")
    o["model.sq_hub_mode"] = get("sq_hub")
    o["model.cross_attention"] = get("cross_attention")
    o["model.residual_add"] = get("residual_add")
    for key in ("steps", "lr", "batch_size", "ckpt_every"):
        o[f"schedule.{key}"] = get(key)
    o["data.train_samples"] = get("train_samples")
    o["data.val_samples"] = get("val_samples")
    return o


def _emit(report: dict, path=None) -> None:
    text = json.dumps(report, indent=2, sort_keys=True, allow_nan=False) + "\n"
    sys.stdout.write(text)
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)


def _clean(value):
    """NaN -> None so reports stay strict JSON."""
    if isinstance(value, float) and math.isnan(value):
        return None
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    return value


def _load_split(path, keep=None):
    try:
        return read_dataset(path, keep=keep)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from exc
    except ValueError as exc:
        if "unknown modalities" in str(exc) or "removes every" in str(exc):
            raise ConfigError(str(exc)) from exc
        raise DataError(str(exc)) from exc


def _load_checkpoint(path):
    if not (Path(path) / "manifest.json").exists():
        raise DataError(f"no checkpoint at {path}")
    return SegModel.load(path)


def cmd_gen(args, cfg) -> int:
    out = Path(args.out)
    splits = {"train": (cfg.data.train_samples, 0), "val": (cfg.data.val_samples, cfg.data.train_samples)}
    existing = [out / s for s in splits if (out / s).exists()]
    if existing and not args.force:
        raise DataError(f"{', '.join(map(str, existing))} already exists; pass --force to overwrite")
    synth = SynthConfig(height=cfg.data.height, width=cfg.data.width, num_classes=cfg.model.num_classes)
    synth.validate()
    summary = {"seed": cfg.seed, "splits": {}}
    for name, (count, start) in splits.items():
        target = out / name
        if target.exists():
            shutil.rmtree(target)
        samples = generate_samples(count, cfg.seed, synth, start=start)
        write_dataset(samples, target, synth, {"split": name, "global_seed": cfg.seed, "first_index": start})
        hist = np.bincount(np.concatenate([s.label.ravel() for s in samples]), minlength=256)
        summary["splits"][name] = {"path": str(target), "count": count, "first_index": start,
                                   "label_histogram": {str(c): int(hist[c]) for c in np.flatnonzero(hist)}}
    _emit(summary)
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    from .train import run_training

    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise DataError(f"{out} is not empty; pass --force to reuse it")
    if out.exists() and args.force:
        shutil.rmtree(out)
    dataset = _load_split(args.data)
    if dataset.names != list(cfg.model.modalities):
        raise ConfigError(f"dataset modalities {dataset.names} differ from model {list(cfg.model.modalities)}")
    last: dict = {}

    def progress(record, _model):
        last.update(record)
        if record["step"] % 100 == 0:
            logger.info("step %d loss %.4f (ce %.4f, guidance %.4f)", record["step"], record["L"],
                        record["L_CE"], record["L_s"])

    run_training(cfg, dataset, out, progress)
    _emit({"provenance": cfg.provenance(), "steps": cfg.schedule.steps, "final": last or None,
           "checkpoint": str(out / "final")})
    return EXIT_OK


def _eval_report(model, meta, dataset, data_path, threads: int) -> dict:
    from .robustness import _confusion

    c = dataset.num_classes
    cm = np.zeros((c, c), dtype=np.int64)
    cm += _confusion(model, dataset, list(range(len(dataset))), dataset.present)
    score, per_class = iou_from_confusion(cm)
    return {"provenance": meta.get("provenance", {}), "checkpoint_step": meta.get("step"), "data": str(data_path),
            "samples": len(dataset), "present": dict(zip(dataset.names, dataset.present)), "mIoU": score,
            "per_class_IoU": [float(v) for v in per_class]}


def cmd_eval(args, cfg) -> int:
    model, meta = _load_checkpoint(args.checkpoint)
    keep = args.modalities.split(",") if args.modalities else None
    dataset = _load_split(args.data, keep)
    report = _eval_report(model, meta, dataset, args.data, cfg.threads)
    report["seed"] = cfg.seed
    _emit(_clean(report), args.report)
    return EXIT_OK


def cmd_robust(args, cfg) -> int:
    from . import robustness as R

    if args.self_test:
        result = R.self_test()
        _emit({"self_test": result})
        return EXIT_OK if all(r["ok"] for r in result.values()) else EXIT_NUMERIC
    model, meta = _load_checkpoint(args.checkpoint)
    dataset = _load_split(args.data)
    protocol = R.Protocol(emm_p=args.emm_p, rmm_p=args.rmm_p, block=args.block, seed=cfg.seed)
    provenance = meta.get("provenance", {})

    def log(entry):
        kind, kept, score = entry
        logger.info("%s keep=%s mIoU=%.4f", kind, "+".join(kept), score)

    if args.emm is not None:
        score, details = R.emm_eval(model, dataset, args.emm, args.emm_p, cfg.seed, cfg.threads, log)
        report = {"header": {"protocol": protocol.describe(), "provenance": provenance, "samples": len(dataset),
                             "modalities": list(dataset.names)},
                  "metrics": {f"EMM_{'avg' if args.emm == 'avg' else 'p'}": score},
                  "details": {"EMM_subsets" if args.emm == "avg" else "EMM_p_groups": details,
                              "evaluations": len(details) if args.emm == "avg" else None}}
        _emit(_clean(report), args.report)
        return EXIT_OK
    result = R.run_benchmark(model, dataset, protocol, cfg.threads, provenance, log)
    text = result.to_json()
    sys.stdout.write(text)
    sys.stderr.write(R.format_table(result) + "\n")
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(text)
    return EXIT_OK


def cmd_gradcheck(args, cfg) -> int:
    from . import gradcheck as G

    if args.seeds < 1:
        raise ConfigError("--seeds must be >= 1")
    if args.corrupt:
        T.corrupt_gradient(args.corrupt, 1.5)
    try:
        worst = G.run_suite(range(cfg.seed, cfg.seed + args.seeds), args.entries,
                            log=lambda s, _w: logger.info("seed %d done", s))
    finally:
        if args.corrupt:
            T.corrupt_gradient(args.corrupt, None)
    passed = all(v <= args.tolerance for v in worst.values())
    report = {"seeds": args.seeds, "first_seed": cfg.seed, "tolerance": args.tolerance,
              "corrupted_op": args.corrupt, "worst_relative_error": worst,
              "status": "pass" if passed else "fail",
              "failing": sorted(k for k, v in worst.items() if v > args.tolerance)}
    _emit(report, args.report)
    return EXIT_OK if passed else EXIT_NUMERIC


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "robust": cmd_robust, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load(args.config, _overrides(args), args.preset)
        T.set_profile(cfg.profile)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        return EXIT_CONFIG
    except T.NonFiniteError as exc:
        logger.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (OSError, ContainerError) as exc:
        logger.error("i/o error: %s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
