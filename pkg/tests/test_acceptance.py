"""One check per acceptance criterion; each prints a PASS/FAIL line."""

import hashlib
import json
import math
import os
import time

import numpy as np
import pytest

from modalseg import robustness as R
from modalseg import tensor as T
from modalseg.attention import AttentionParams, mhca, residual_fuse
from modalseg.cli import main
from modalseg.cmtb import SQHub, sq_hub
from modalseg.config import load
from modalseg.gradcheck import run_suite
from modalseg.model import AdamW, cross_entropy, lr_at, miou, total_loss, train_step
from modalseg.sgm import IGNORE, Pairing, PrototypeSet, assign_pairs, compute_prototypes, kl_div, sgm_loss
from modalseg.synth import Dataset, generate_samples
from modalseg.tensor import Tensor
from modalseg.train import batches, build_model, run_training

GRAD_TOL = 1e-4
GRAD_SECONDS = 120
ORACLE_TOL = 1e-9
ORACLE_SECONDS = 60
TEACHER_FREQ_TOL = 0.02
OVERFIT_MIOU = 0.95
OVERFIT_STEPS = 2000
OVERFIT_SECONDS = 15 * 60
ABLATION_STEPS = 100
ABLATIONS = ("mean_hub", "no_cross_attention", "no_add", "no_prototype", "cosine_pairing")


# ---------------------------------------------------------------- 1


def test_gradient_suite(acceptance):
    start = time.perf_counter()
    worst = run_suite(range(20), model_entries=24)
    elapsed = time.perf_counter() - start
    top = max(worst, key=worst.get)
    ok = max(worst.values()) <= GRAD_TOL and elapsed < GRAD_SECONDS
    acceptance(1, "gradient suite over 20 seeds", ok,
               f"worst {worst[top]:.2e} on {top}, {len(worst)} cases, {elapsed:.1f}s")
    assert ok, worst


# ---------------------------------------------------------------- 2


def loop_matmul(a, b):
    return np.array([[sum(a[i, k] * b[k, j] for k in range(a.shape[1])) for j in range(b.shape[1])]
                     for i in range(a.shape[0])])


def loop_conv(x, w, stride, pad):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh, ow = (h + 2 * pad - k) // stride + 1, (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for b in range(n):
        for oc in range(o):
            for i in range(oh):
                for j in range(ow):
                    out[b, oc, i, j] = sum(xp[b, ic, i * stride + di, j * stride + dj] * w[oc, ic, di, dj]
                                           for ic in range(c) for di in range(k) for dj in range(k))
    return out


def loop_softmax(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    return [v / sum(e) for v in e]


def loop_layer_norm(row, eps=1e-6):
    mu = sum(row) / len(row)
    var = sum((v - mu) ** 2 for v in row) / len(row)
    return [(v - mu) / math.sqrt(var + eps) for v in row]


def loop_prototypes(feats, labels, c):
    out = np.zeros((c, feats.shape[1]))
    for j in range(c):
        rows = [f for f, lab in zip(feats, labels) if lab == j]
        if rows:
            out[j] = [sum(r[k] for r in rows) / len(rows) for k in range(feats.shape[1])]
    return out


def loop_miou(pred, gt, c):
    ious = []
    for j in range(c):
        if not any(g == j for g in gt):
            continue
        inter = sum(1 for p, g in zip(pred, gt) if p == j and g == j)
        union = sum(1 for p, g in zip(pred, gt) if g != IGNORE and (p == j or g == j))
        ious.append(inter / union)
    return sum(ious) / len(ious)


def loop_kl(t, s):
    return sum(a * math.log(a / b) for a, b in zip(t, s) if a > 0)


def test_oracle_suite(acceptance):
    rng = np.random.default_rng(2)
    start = time.perf_counter()
    errors = {}

    a, b = rng.integers(-9, 10, size=(6, 5)).astype(float), rng.integers(-9, 10, size=(5, 4)).astype(float)
    errors["matmul exact"] = np.abs((Tensor(a) @ Tensor(b)).data - loop_matmul(a, b)).max()
    a, b = rng.normal(size=(6, 5)), rng.normal(size=(5, 4))
    errors["matmul"] = np.abs((Tensor(a) @ Tensor(b)).data - loop_matmul(a, b)).max()

    x = rng.integers(-3, 4, size=(2, 3, 7, 7)).astype(float)
    w = rng.integers(-3, 4, size=(4, 3, 3, 3)).astype(float)
    for stride, pad in ((1, 0), (2, 1)):
        errors[f"conv2d s{stride}p{pad} exact"] = np.abs(
            T.conv2d(Tensor(x), Tensor(w), stride=stride, padding=pad).data - loop_conv(x, w, stride, pad)).max()

    logits = rng.normal(size=(5, 7)) * 3
    got = T.softmax(Tensor(logits)).data
    errors["softmax"] = max(np.abs(got[i] - loop_softmax(list(logits[i]))).max() for i in range(5))

    rows = rng.normal(size=(5, 9))
    got = T.layer_norm(Tensor(rows), Tensor(np.ones(9)), Tensor(np.zeros(9))).data
    errors["layer_norm"] = max(np.abs(got[i] - loop_layer_norm(list(rows[i]))).max() for i in range(5))

    feats = rng.normal(size=(200, 6))
    labels = rng.integers(0, 5, size=200)
    labels[rng.random(200) < 0.1] = IGNORE
    protos, _ = compute_prototypes(Tensor(feats), labels, 6)
    errors["compute_prototypes"] = np.abs(protos.data - loop_prototypes(feats, labels, 6)).max()

    pred, gt = rng.integers(0, 6, size=500), rng.integers(0, 6, size=500)
    gt[rng.random(500) < 0.05] = IGNORE
    errors["mIoU"] = abs(miou(pred, gt, 6)[0] - loop_miou(pred, gt, 6))

    for k in range(5):
        t, s = rng.dirichlet(np.ones(8)), rng.dirichlet(np.ones(8))
        errors[f"KL {k}"] = abs(kl_div(Tensor(t), Tensor(s)).item() - loop_kl(t, s))

    elapsed = time.perf_counter() - start
    exact_ok = all(v == 0 for k, v in errors.items() if k.endswith("exact"))
    ok = exact_ok and max(errors.values()) <= ORACLE_TOL and elapsed < ORACLE_SECONDS
    acceptance(2, "brute-force oracle suite", ok, f"worst {max(errors.values()):.1e}, {elapsed:.1f}s")
    assert ok, errors


# ---------------------------------------------------------------- 3


def test_sgm_invariants(acceptance):
    rng = np.random.default_rng(3)
    checks = {}

    protos = [[Tensor(rng.normal(size=(2, 6, 8))) for _ in range(4)] for _ in range(4)]
    present = [rng.random((2, 6)) < 0.7 for _ in range(4)]
    values = [sgm_loss(PrototypeSet(protos, present), assign_pairs(4, rng)).item() for _ in range(20)]
    checks["non-negative"] = min(values) >= 0

    same = [[Tensor(p.data.copy()) for p in protos[0]] for _ in range(4)]
    checks["zero on identical"] = sgm_loss(PrototypeSet(same, present), assign_pairs(4, rng)).item() <= 1e-12

    teacher = Tensor(rng.normal(size=(1, 6, 8)), requires_grad=True)
    student = Tensor(rng.normal(size=(1, 6, 8)), requires_grad=True)
    loss = sgm_loss(PrototypeSet([[teacher], [student]], [np.ones((1, 6), bool)]), Pairing([(0, 1)]))
    T.backward(loss)
    checks["teacher gradient zero"] = teacher.grad is None or not teacher.grad.any()
    checks["student gradient flows"] = student.grad is not None and bool(student.grad.any())

    counts = np.zeros(4)
    partition = True
    for _ in range(10_000):
        p = assign_pairs(4, rng)
        members = sorted(i for pair in p.pairs for i in pair)
        partition &= members == [0, 1, 2, 3] and p.dropped is None
        for t, _s in p.pairs:
            counts[t] += 1
    freq = counts / 10_000
    checks["partition"] = partition
    checks["teacher frequency"] = bool(np.all(np.abs(freq - 0.5) <= TEACHER_FREQ_TOL))

    ok = all(checks.values())
    acceptance(3, "guidance invariants", ok, "teacher freq " + " ".join(f"{f:.3f}" for f in freq))
    assert ok, checks


# ---------------------------------------------------------------- 4


def test_identities(acceptance):
    rng = np.random.default_rng(4)
    checks = {}

    a = rng.normal(size=(2, 5, 8))
    checks["residual_fuse(a, 0) = a"] = np.array_equal(residual_fuse(Tensor(a), Tensor(np.zeros_like(a))).data, a)

    p = AttentionParams(8, 2, rng)
    q, kv = rng.normal(size=(3, 1, 8)), rng.normal(size=(3, 1, 8))
    v = kv @ p.v.weight.data + p.v.bias.data
    expected = v @ p.o.weight.data + p.o.bias.data
    checks["single-key mhca"] = np.array_equal(mhca(Tensor(q), Tensor(kv), p).data, expected)

    ce = cross_entropy(Tensor(rng.normal(size=(1, 3, 4, 4))), rng.integers(0, 3, size=(1, 4, 4)))
    checks["total_loss(lambda=0)"] = total_loss(ce, Tensor(2.5), 0.0).item() == ce.item()

    aux = Tensor(rng.normal(size=(2, 6, 8)))
    checks["single-auxiliary hub"] = np.array_equal(sq_hub([aux], SQHub(8, rng)).data, aux.data)

    ok = all(checks.values())
    acceptance(4, "exact identities", ok, ", ".join(k for k, v in checks.items() if not v))
    assert ok, checks


# ---------------------------------------------------------------- 5


def test_score_arithmetic(acceptance):
    result = R.self_test()
    got = (result["DeLiVER"]["computed"], result["MUSES"]["computed"])
    ok = got == (50.21, 35.75)
    acceptance(5, "robustness score arithmetic", ok, f"DeLiVER {got[0]:.2f}, MUSES {got[1]:.2f}")
    assert ok


# ---------------------------------------------------------------- 6


def train_miou(model, ds):
    preds = np.concatenate([model.predict(ds.bundle(np.arange(k, min(k + 16, len(ds))))) for k in range(0, len(ds), 16)])
    return miou(preds, ds.labels, ds.num_classes)[0]


def test_end_to_end_overfit(acceptance):
    cfg = load(overrides={"schedule.lr": 2e-3, "schedule.batch_size": 4, "schedule.warmup_fraction": 0.05,
                          "schedule.steps": OVERFIT_STEPS, "model.sgm.lam": 0.0})
    with T.profile("train"):
        ds = Dataset.from_samples(generate_samples(64, cfg.seed), cfg.model.num_classes)
        ds.maps = {k: v.astype(np.float32) for k, v in ds.maps.items()}
        model = build_model(cfg)
        opt = AdamW(model.parameters(), lr=cfg.schedule.lr, weight_decay=cfg.schedule.weight_decay)
        stream = batches(len(ds), cfg.schedule.batch_size, np.random.default_rng(1))
        pair_rng = np.random.default_rng(0)
        start = time.perf_counter()
        score, step = 0.0, 0
        for step in range(1, OVERFIT_STEPS + 1):
            idx = next(stream)
            opt.lr = lr_at(step - 1, OVERFIT_STEPS, cfg.schedule.lr, cfg.schedule.warmup_fraction)
            train_step(ds.bundle(idx), ds.labels[idx], model, opt, pair_rng)
            if step % 100 == 0 or step == OVERFIT_STEPS:
                score = train_miou(model, ds)
                if score >= OVERFIT_MIOU:
                    break
        elapsed = time.perf_counter() - start
    ok = score >= OVERFIT_MIOU and step <= OVERFIT_STEPS and elapsed <= OVERFIT_SECONDS
    acceptance(6, "overfit 64 synthetic samples", ok, f"train mIoU {score:.3f} at step {step}, {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------- 7


def test_ablation_reachability(acceptance, tmp_path):
    samples = generate_samples(16, 0)
    headers, failures = {}, []
    for name in ABLATIONS:
        cfg = load(preset=name, overrides={"schedule.steps": ABLATION_STEPS, "schedule.ckpt_every": ABLATION_STEPS})
        ds = Dataset.from_samples(samples, cfg.model.num_classes)
        try:
            run_training(cfg, ds, tmp_path / name)
        except T.NonFiniteError as exc:
            failures.append(f"{name}: {exc}")
            continue
        lines = (tmp_path / name / "metrics.jsonl").read_text().splitlines()
        if len(lines) != ABLATION_STEPS + 1:
            failures.append(f"{name}: {len(lines) - 1} steps logged")
        headers[name] = lines[0]
    distinct = len(set(headers.values())) == len(ABLATIONS)
    ok = not failures and distinct
    acceptance(7, "ablation presets train 100 steps", ok,
               "; ".join(failures) or f"{len(set(headers.values()))} distinct headers")
    assert ok, failures


# ---------------------------------------------------------------- 8


def tree_digest(path):
    h = hashlib.sha256()
    for root, _dirs, files in sorted(os.walk(path)):
        for name in sorted(files):
            full = os.path.join(root, name)
            h.update(os.path.relpath(full, path).encode())
            with open(full, "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()


def pipeline(root):
    os.makedirs(root)
    cwd = os.getcwd()
    os.chdir(root)
    try:
        codes = [
            main(["--seed", "11", "gen", "--train-samples", "8", "--val-samples", "4"]),
            main(["--seed", "11", "train", "--steps", "6", "--ckpt-every", "3", "--sgm", "on"]),
            main(["--seed", "11", "eval", "--report", "eval.json"]),
            main(["--seed", "11", "robust", "--report", "robust.json"]),
        ]
    finally:
        os.chdir(cwd)
    return codes, {k: tree_digest(os.path.join(root, p)) if os.path.isdir(os.path.join(root, p))
                   else hashlib.sha256(open(os.path.join(root, p), "rb").read()).hexdigest()
                   for k, p in (("gen", "out"), ("train", "runs"), ("eval", "eval.json"), ("robust", "robust.json"))}


def test_determinism(acceptance, tmp_path, capsys):
    codes_a, a = pipeline(tmp_path / "a")
    codes_b, b = pipeline(tmp_path / "b")
    capsys.readouterr()
    same = [k for k in a if a[k] == b[k]]
    ok = codes_a == codes_b == [0, 0, 0, 0] and len(same) == 4
    acceptance(8, "byte-identical gen/train/eval/robust", ok, f"identical: {', '.join(same)}")
    assert ok, (codes_a, codes_b, a, b)


# ---------------------------------------------------------------- 9


def test_guidance_robustness_report(acceptance):
    # report-only: the direction of the gap is logged, never asserted
    train = Dataset.from_samples(generate_samples(64, 0), 6)
    val = Dataset.from_samples(generate_samples(16, 0, start=64), 6)
    scores = {}
    for lam in (0.0, 60.0):
        cfg = load(overrides={"model.sgm.enabled": lam > 0, "model.sgm.lam": lam, "schedule.lr": 2e-3,
                              "schedule.steps": 300})
        with T.profile("train"):
            ds = Dataset(dict(train.maps), train.labels, train.names, train.present, train.num_classes)
            ds.maps = {k: v.astype(np.float32) for k, v in ds.maps.items()}
            model = build_model(cfg)
            opt = AdamW(model.parameters(), lr=cfg.schedule.lr)
            stream = batches(len(ds), cfg.schedule.batch_size, np.random.default_rng(1))
            pair_rng = np.random.default_rng(0)
            for step in range(cfg.schedule.steps):
                idx = next(stream)
                opt.lr = lr_at(step, cfg.schedule.steps, cfg.schedule.lr, cfg.schedule.warmup_fraction)
                train_step(ds.bundle(idx), ds.labels[idx], model, opt, pair_rng)
        scores[lam] = R.emm_eval(model, val, "avg")[0]
    gap = scores[60.0] - scores[0.0]
    detail = (f"report only: EMM(avg) lambda=60 {scores[60.0]:.4f}, lambda=0 {scores[0.0]:.4f}, "
              f"gap {gap:+.4f}, expected direction positive, observed {'positive' if gap > 0 else 'non-positive'}")
    acceptance(9, "guidance vs no guidance under EMM(avg)", all(math.isfinite(v) for v in scores.values()), detail)
    assert all(math.isfinite(v) for v in scores.values())
