"""Acceptance gate: one test per criterion, each appending a PASS/FAIL line
that is printed in the terminal summary."""

import hashlib
import json
import time
from pathlib import Path

import numpy as np
import pytest

from dialectid import numerics as nx
from dialectid.cli import main
from dialectid.corpus import LabelSet, build_vocab, encode_dataset, write_tsv
from dialectid.encoder import ModelConfig, init_model
from dialectid.ensemble_eval import (
    accuracy,
    confusion_matrix,
    ensemble,
    evaluate_predictions,
    fit_erlang,
    macro_f1,
)
from dialectid.heads import predict, vertical_attention
from dialectid.numerics import Tensor
from dialectid.synthetic import make_corpus
from dialectid.training import (
    TrainConfig,
    TrainState,
    early_stop_update,
    lr_multiplier,
    tensor_digest,
    train,
    trainable_mask,
)

from conftest import ACCEPTANCE_LINES, perturbed, random_batch, tiny_datasets, toy_config
from test_ensemble_eval import brute_force_scores

pytestmark = pytest.mark.acceptance


def gate(number, title, ok, detail=""):
    line = f"{'PASS' if ok else 'FAIL'}  [{number:2d}] {title}" + (f"  ({detail})" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_01_gradient_fidelity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    model = perturbed(init_model(toy_config(dropout_hidden=0.0, dropout_cls=0.0), 0, dtype=np.float64), rng)
    ids, mask = random_batch(rng, batch=3, seq=8)
    gold = rng.integers(0, 5, size=3)

    def loss(_):
        return nx.cross_entropy(model.forward(ids, mask).logits, gold)

    # A key bias adds q.b to every score in a softmax row, a constant shift, so its
    # gradient is identically zero and relative error only measures roundoff.
    # Those tensors are checked for the zero directly.
    shift_invariant = [n for n in model.params if n.endswith("attention.key.bias")]
    with nx.Tape() as tape:
        value = loss(None)
    tape.backward(value)
    analytic_zero = max(np.abs(model.params[n].grad).max() for n in shift_invariant)
    numeric_zero = 0.0
    for n in shift_invariant:
        p = model.params[n].data
        for i in range(p.size):
            p[i] += 1e-5
            up = loss(None).data
            p[i] -= 2e-5
            down = loss(None).data
            p[i] += 1e-5
            numeric_zero = max(numeric_zero, abs(up - down) / 2e-5)
    model.zero_grad()

    worst, worst_name = 0.0, None
    for name, p in model.params.items():
        if name in shift_invariant:
            continue
        err = nx.grad_check(loss, p, h=1e-4, num_coords=min(20, p.data.size), rng=rng)
        if err > worst:
            worst, worst_name = err, name
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and analytic_zero <= 1e-12 and numeric_zero <= 1e-8 and elapsed < 60
    gate(1, "gradient fidelity", ok,
         f"{len(model.params) - len(shift_invariant)} tensors max rel err {worst:.2e} ({worst_name}); "
         f"key biases zero: analytic {analytic_zero:.0e}, numeric {numeric_zero:.0e}; {elapsed:.1f}s")


def test_02_adapter_near_identity():
    rng = np.random.default_rng(1)
    with_ad = init_model(toy_config(), 0, dtype=np.float64)
    without = init_model(toy_config(adapter_enabled=False), 0, dtype=np.float64)
    same = 0
    for _ in range(100):
        ids, mask = random_batch(rng, batch=1, seq=int(rng.integers(2, 20)))
        a = with_ad.forward(ids, mask).logits.data
        b = without.forward(ids, mask).logits.data
        same += a.tobytes() == b.tobytes()
    gate(2, "adapter near-identity at init", same == 100, f"{same}/100 bitwise equal")


def test_03_freezing_contract():
    trs, dev, vocab, labels = tiny_datasets(max_len=16)
    cfg = toy_config(vocab_size=len(vocab), num_classes=len(labels), max_positions=16, mode="adapter")
    model = init_model(cfg, 0)
    trainable = trainable_mask(model, "adapter")
    frozen = set(model.params) - trainable
    frozen_before = tensor_digest(model, frozen)
    before = {n: model.params[n].data.copy() for n in trainable}
    res = train(model, trs, dev, TrainConfig(batch_size=8, max_steps=200, eval_every=50, warmup_steps=20,
                                             patience=100, lr_rest=1e-2))
    unchanged = [n for n in trainable if np.array_equal(before[n], model.params[n].data)]
    ok = res.steps == 200 and tensor_digest(model, frozen) == frozen_before and not unchanged
    gate(3, "freezing contract", ok,
         f"{len(frozen)} frozen tensors hash-stable, {len(trainable) - len(unchanged)}/{len(trainable)} trainable moved")


def _vatt(rng, L, d, levels=None):
    p = {"level_embeddings": Tensor(rng.normal(size=(L, d)) if levels is None else levels),
         "query": Tensor(rng.normal(size=(d, d))), "key": Tensor(rng.normal(size=(d, d)))}
    p.update({f"value.{n}": Tensor(rng.normal(size=(d, d))) for n in range(L)})
    return p


def test_04_vatt_laws():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(1000):
        L, d = int(rng.integers(1, 13)), int(rng.integers(1, 9))
        z = [Tensor(rng.normal(scale=3.0, size=(1, d))) for _ in range(L)]
        _, alpha = vertical_attention(z, _vatt(rng, L, d))
        worst = max(worst, abs(alpha.data.sum() - 1.0))
        assert (alpha.data >= 0).all()
    p1 = _vatt(rng, 1, 6)
    z1 = [Tensor(rng.normal(size=(4, 6)))]
    pooled, a1 = vertical_attention(z1, p1)
    single = np.allclose(pooled.data, z1[0].data @ p1["value.0"].data, rtol=1e-12) and (a1.data == 1).all()
    pu = _vatt(rng, 6, 5, levels=np.tile(rng.normal(size=5), (6, 1)))
    _, au = vertical_attention([Tensor(rng.normal(size=(3, 5))) for _ in range(6)], pu)
    uniform = np.allclose(au.data, 1 / 6, atol=1e-12)
    gate(4, "vertical attention laws", worst <= 1e-6 and single and uniform,
         f"max |sum(alpha)-1| = {worst:.1e} over 1000 inputs, single-level and uniform cases hold")


def test_05_schedule_oracle():
    cfg = TrainConfig()
    table = {125: 0.5, 250: 1.0, 1000: 0.5}
    exact = all(lr_multiplier(s, cfg) == v for s, v in table.items())
    quantized = lr_multiplier(1009, cfg) == 0.5 and lr_multiplier(1010, cfg) < 0.5
    floor = lr_multiplier(10**9, cfg) == 0.01 and min(lr_multiplier(s, cfg) for s in range(251, 5000)) > 0.01
    gate(5, "schedule oracle", exact and quantized and floor,
         "125->0.5, 250->1.0, 1000->0.5, flat over each 10-step quantum, asymptote 0.01")


def _simulate(scores, patience):
    state = TrainState()
    for i, f in enumerate(scores):
        state.global_step = i
        if early_stop_update(state, f, patience, snapshot=lambda i=i: {"at": i}) == "halt":
            return i, state
    return None, state


def test_06_early_stopping_oracle():
    rng = np.random.default_rng(6)
    ok = True
    for _ in range(500):
        scores = np.round(rng.uniform(0, 1, size=int(rng.integers(1, 60))), 2).tolist()
        halt_at, state = _simulate(scores, 10)
        expected_halt = None
        stale, best = 0, None
        for i, f in enumerate(scores):
            if best is None or f > best:
                best, stale = f, 0
            else:
                stale += 1
                if stale == 10:
                    expected_halt = i
                    break
        seen = scores[:expected_halt + 1] if expected_halt is not None else scores
        # argmax takes the first occurrence: a tie is not an improvement
        best_i = int(np.argmax(seen))
        ok &= halt_at == expected_halt and state.best_params == {"at": best_i}
    # fixed sequence: peak at eval 3, then ten flat-or-worse evals
    halt_at, state = _simulate([0.1, 0.2, 0.3, 0.5] + [0.5, 0.4] * 5 + [0.9], 10)
    ok &= halt_at == 13 and state.best_params == {"at": 3} and state.best_dev_f1 == 0.5

    # restoration through the real loop
    trs, dev, vocab, labels = tiny_datasets()
    cfg = toy_config(num_layers=1, hidden=8, ffn_dim=16, adapter_bottleneck=4, vocab_size=len(vocab),
                     num_classes=len(labels), max_positions=16)
    model = init_model(cfg, 0)
    digests = {}
    res = train(model, trs, dev, TrainConfig(batch_size=8, eval_every=5, warmup_steps=5, max_steps=400,
                                             patience=10, lr_rest=3e-2, lr_head=3e-2),
                on_eval=lambda rec: digests.__setitem__(rec["step"], tensor_digest(model, model.params)))
    ok &= tensor_digest(model, model.params) == digests[res.best_step]
    gate(6, "early stopping oracle", ok,
         f"500 random sequences + fixed case halt at patience 10; loop restored step {res.best_step}")


def test_07_metric_oracles():
    rng = np.random.default_rng(7)
    mismatches = 0
    for _ in range(1000):
        C = int(rng.integers(2, 22))
        n = int(rng.integers(1, 80))
        gold, pred = rng.integers(0, C, n).tolist(), rng.integers(0, C, n).tolist()
        cm = confusion_matrix(gold, pred, C)
        macro, per_class = macro_f1(cm)
        b_macro, b_per_class, b_acc = brute_force_scores(gold, pred, C)
        mismatches += not (macro == b_macro and per_class == b_per_class and accuracy(cm) == b_acc)
    gate(7, "metric oracles", mismatches == 0, f"{1000 - mismatches}/1000 exact agreements, C in [2, 21]")


def test_08_ensemble_laws():
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(200):
        C, k = int(rng.integers(2, 22)), int(rng.integers(2, 6))
        dists = rng.dirichlet(np.ones(C), size=k)
        base = ensemble(list(dists))
        worst = max(worst, np.abs(ensemble(list(dists[rng.permutation(k)])) - base).max())
    p = rng.dirichlet(np.ones(7))
    identity = np.array_equal(ensemble([p]), p)
    hand = ensemble([[0.6, 0.4], [0.3, 0.7]])
    hand_ok = np.allclose(hand, [0.3913, 0.6087], atol=1e-4)
    gate(8, "ensemble laws", worst <= 1e-12 and identity and hand_ok,
         f"order invariance {worst:.1e}, identity holds, hand example {np.round(hand, 4).tolist()}")


def test_09_erlang_fit():
    fit = fit_erlang([2, 4, 4, 6])
    exact = fit.lam == 2.0 and fit.k == 8
    mc = fit_erlang(np.random.default_rng(12345).gamma(shape=2.0, scale=1.0, size=10_000))
    recovered = abs(mc.lam - 1.0) <= 0.1 and abs(mc.k - 2) <= 0.2
    gate(9, "Erlang method-of-moments fit", exact and recovered,
         f"[2,4,4,6] -> lam {fit.lam}, k {fit.k}; Monte Carlo lam {mc.lam:.3f}, k {mc.k}")


# Overfit fixture: a 64-example, 4-class synthetic corpus and a 2-layer, 64-wide encoder.
OVERFIT_VARIANTS = [("fine_tune", False), ("fine_tune", True), ("adapter", False), ("adapter", True)]


def test_10_end_to_end_overfit():
    t0 = time.perf_counter()
    ex = make_corpus(64, 4, seed=5, markers_per_example=3)
    vocab = build_vocab([e.text for e in ex], 200)
    labels = LabelSet(tuple(f"class_{c}" for c in range(4)))
    data = encode_dataset(ex, vocab, labels, 32)
    results = []
    for mode, vatt in OVERFIT_VARIANTS:
        cfg = ModelConfig(num_layers=2, hidden=64, heads=2, ffn_dim=128, vocab_size=len(vocab), max_positions=32,
                          num_classes=4, adapter_enabled=mode == "adapter", adapter_bottleneck=16,
                          vatt_enabled=vatt, mode=mode)
        model = init_model(cfg, 0)
        res = train(model, data, data, TrainConfig(max_steps=2000, lr_rest=1e-2))
        acc = evaluate_predictions(data.labels, predict(model.predict_proba(data.token_ids, data.attention_mask)),
                                   4).accuracy
        results.append((f"{mode}{'+vatt' if vatt else ''}", acc, res.steps))
    elapsed = time.perf_counter() - t0
    ok = all(acc == 1.0 and steps <= 2000 for _, acc, steps in results) and elapsed < 600
    gate(10, "end-to-end overfit", ok,
         ", ".join(f"{n} acc {a:.3f} by {s} steps" for n, a, s in results) + f", {elapsed:.0f}s")


# Ensemble fixture: noisy 4-class task, 192 train / 640 dev, independently initialized members.
# The adapter member trains adapters over a frozen random encoder, so it gets a longer budget.
ENSEMBLE_MEMBERS = [("fine_tune", False, "inv_sqrt"), ("adapter", True, "inv_sqrt"),
                    ("fine_tune", True, "inv_sqrt"), ("fine_tune", False, "linear")]


def _ensemble_trial(seed):
    kw = dict(num_classes=4, noise=0.25, lexicon_seed=seed, markers_per_example=2)
    tr = make_corpus(192, seed=seed, id_prefix="tr", **kw)
    dv = make_corpus(640, seed=seed + 1000, id_prefix="dv", **kw)
    vocab = build_vocab([e.text for e in tr], 300)
    labels = LabelSet(tuple(f"class_{c}" for c in range(4)))
    trd, dvd = encode_dataset(tr, vocab, labels, 32), encode_dataset(dv, vocab, labels, 32)
    probs, f1s = [], []
    for i, (mode, vatt, schedule) in enumerate(ENSEMBLE_MEMBERS):
        cfg = ModelConfig(num_layers=2, hidden=64, heads=2, ffn_dim=128, vocab_size=len(vocab), max_positions=32,
                          num_classes=4, adapter_enabled=mode == "adapter", adapter_bottleneck=16,
                          vatt_enabled=vatt, mode=mode)
        model = init_model(cfg, seed * 10 + i)
        steps = 2000 if mode == "adapter" else 1000
        train(model, trd, dvd, TrainConfig(max_steps=steps, seed=seed * 10 + i, lr_rest=3e-3, schedule=schedule))
        p = model.predict_proba(dvd.token_ids, dvd.attention_mask)
        probs.append(p)
        f1s.append(evaluate_predictions(dvd.labels, predict(p), 4).macro_f1)
    ens = evaluate_predictions(dvd.labels, predict(ensemble(probs)), 4).macro_f1
    return f1s, ens


def test_11_ensemble_improvement():
    trials = [_ensemble_trial(seed) for seed in range(5)]
    near_max = all(ens >= max(f1s) - 0.005 for f1s, ens in trials)
    above_mean = sum(ens > np.mean(f1s) for f1s, ens in trials)
    detail = "; ".join(f"seed {s}: ens {e:.4f} max {max(f):.4f} mean {np.mean(f):.4f}"
                       for s, (f, e) in enumerate(trials))
    gate(11, "ensemble improvement", near_max and above_mean >= 4, f"above mean in {above_mean}/5; {detail}")


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _pipeline(root: Path, out: Path):
    cfg = {"train_path": str(root / "train.tsv"), "dev_path": str(root / "dev.tsv"),
           "vocab_path": str(root / "vocab.txt"), "run_dir": str(out / "run"), "num_layers": 2, "hidden": 16,
           "heads": 2, "ffn_dim": 32, "adapter_enabled": True, "adapter_bottleneck": 4, "vatt_enabled": True,
           "batch_size": 8, "eval_every": 10, "warmup_steps": 10, "max_steps": 40, "lr_rest": 1e-2,
           "max_len": 24, "seed": 11}
    out.mkdir()
    (out / "cfg.json").write_text(json.dumps(cfg))
    steps = [
        ["build-vocab", "--corpus", root / "train.tsv", "--size", 150, "--out", out / "vocab.txt"],
        ["train", "--config", out / "cfg.json"],
        ["predict", "--checkpoint", out / "run/checkpoint", "--data", root / "dev.tsv", "--out", out / "p.jsonl"],
        ["ensemble", out / "p.jsonl", out / "p.jsonl", "--out", out / "e.jsonl", "--report", out / "e.json"],
        ["analyze", "--predictions", out / "e.jsonl", "--corpus", root / "dev.tsv", "--out", out / "a.json"],
    ]
    for argv in steps:
        assert main([str(a) for a in argv]) == 0, argv
    files = ["vocab.txt", "run/train_log.jsonl", "run/dev_report.json", "run/checkpoint/manifest.json",
             "run/checkpoint/weights.bin", "p.jsonl", "e.jsonl", "e.json", "a.json"]
    return {f: _digest(out / f) for f in files}


def test_12_reproducibility(tmp_path, capsys):
    write_tsv(tmp_path / "train.tsv", make_corpus(60, 3, seed=0, lexicon_seed=0, noise=0.2, id_prefix="tr"))
    write_tsv(tmp_path / "dev.tsv", make_corpus(30, 3, seed=1, lexicon_seed=0, noise=0.2, id_prefix="dv"))
    assert main(["build-vocab", "--corpus", str(tmp_path / "train.tsv"), "--size", "150",
                 "--out", str(tmp_path / "vocab.txt")]) == 0
    first = _pipeline(tmp_path, tmp_path / "one")
    second = _pipeline(tmp_path, tmp_path / "two")
    capsys.readouterr()
    differing = [f for f in first if first[f] != second[f]]
    gate(12, "bitwise reproducibility", not differing,
         f"{len(first)} artifacts compared" + (f", differing: {differing}" if differing else ", all identical"))
