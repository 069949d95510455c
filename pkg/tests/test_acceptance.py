"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest -s tests/test_acceptance.py` (or plain pytest; the
lines bypass capture). The statistical fixtures are seeded, so every
number here is reproducible bit for bit.
"""

import json
import math
import sys
import time

import numpy as np
import pytest
from scipy import stats

from modalbench import algorithms as A
from modalbench.checks import gradcheck_irm, gradcheck_learner
from modalbench.data import load_dataset, make_splits, sample_minibatch
from modalbench.hparams import default_hparams, sample_trial_config
from modalbench.learner import init_learner
from modalbench.report import aggregate_report, format_cell, render_text
from modalbench.rng import Rng
from modalbench.selection import evaluate, select_loo, select_oracle
from modalbench.sweep import (ResultsStore, RunPlan, _SlicedMatrix,
                              run_sweep, run_trial)

from conftest import make_dataset


def announce(number, ok, detail):
    line = "%s criterion %d: %s\n" % ("PASS" if ok else "FAIL", number, detail)
    sys.__stdout__.write(line)
    sys.__stdout__.flush()
    assert ok, line


def train_model(matrices, manifest, kind, seed, steps, overrides=None,
                test_modality="mod2"):
    """Deterministic training run used by the statistical criteria."""
    hp = default_hparams(kind)
    hp.update(overrides or {})
    train_names = [m for m in manifest.modality_names() if m != test_modality]
    train_idx, _ = make_splits(manifest.num_instances, 0.2, seed=seed)
    train_mats = {m: _SlicedMatrix(matrices[m].embeddings[train_idx],
                                   matrices[m].labels[train_idx])
                  for m in train_names}
    dim = matrices[train_names[0]].dim
    learner = init_learner(Rng.from_key("init/%s/%d" % (kind, seed), 0), dim,
                           manifest.num_classes)
    alg = A.build_algorithm(
        A.AlgorithmConfig(kind, hp, steps), learner, len(train_names),
        Rng.from_key("alg/%s/%d" % (kind, seed), 0))
    batch_rng = Rng.from_key("batch/%s/%d" % (kind, seed), 0)
    mode = "aligned" if kind in A.MML_KINDS else "independent"
    for _ in range(steps):
        drawn = sample_minibatch(batch_rng, train_mats,
                                 int(hp["batch_size"]), mode)
        alg.update([drawn[m] for m in train_names], mode)
    return alg.eval_params(), train_idx


def test_criterion_1_gradient_oracle():
    start = time.time()
    worst = gradcheck_learner(seed=2024, cases=10, input_dim=16,
                              num_classes=5, batch=4)
    elapsed = time.time() - start
    announce(1, worst <= 1e-5 and elapsed < 10.0,
             "learner backward vs central differences, max rel err %.2e"
             " in %.1fs" % (worst, elapsed))


def test_criterion_2_irm_closed_form():
    worst = gradcheck_irm(seed=2024, cases=10)
    logits = np.array([[1.0, -1.0]])
    _, _ = A.irm_penalty(logits, np.array([0]))
    pen, _ = A.irm_penalty(logits, np.array([0]))
    p0 = 1.0 / (1.0 + math.exp(-2.0))
    g = 2.0 * (p0 - 1.0)
    example_ok = round(g, 4) == -0.2384 and round(pen, 4) == 0.0568
    announce(2, worst <= 1e-4 and example_ok,
             "penalty grad max rel err %.2e; worked example g=%.4f"
             " penalty=%.4f" % (worst, g, pen))


PENALTY_OFF = [
    ("IRM", {"irm_lambda": 0.0, "irm_anneal_iters": 0}, "adam", 2),
    ("IB_ERM", {"ib_lambda": 0.0, "ib_anneal_iters": 0}, "adam", 2),
    ("CDANN", {"cdann_lambda": 0.0}, "adam", 2),
    ("CondCAD", {"ccad_lambda": 0.0}, "adam", 2),
    ("URM", {"urm_lambda": 0.0}, "adam", 2),
    ("SagNet", {"sag_w_adv": 0.0}, "adam", 2),
    ("DLMG", {"dlmg_lambda": 0.0}, "sgd", 1),
]


def test_criterion_3_penalty_off_equivalence(tmp_path):
    path = make_dataset(tmp_path, name="equiv", dim=12, classes=3, n=400,
                        invariant_dim=4, spurious_dim=2,
                        corr=[0.4, 0.4, 0.4], seed=21)
    manifest, matrices = load_dataset(path)

    def run(kind, overrides, optimizer, k, steps=50):
        hp = default_hparams(kind)
        hp.update(overrides)
        names = manifest.modality_names()[:k]
        mats = {n: matrices[n] for n in names}
        learner = init_learner(Rng.from_key("init", 7), 12, 3)
        alg = A.build_algorithm(
            A.AlgorithmConfig(kind, hp, 1000, optimizer=optimizer),
            learner, k, Rng.from_key("alg", 7))
        batch_rng = Rng.from_key("batch", 7)
        mode = "aligned" if alg.family == "mml" else "independent"
        for _ in range(steps):
            drawn = sample_minibatch(batch_rng, mats, 16, mode)
            alg.update([drawn[n] for n in names], mode)
        return alg.learner.arrays()

    mml_hp = {k: v for k, v in default_hparams("Concat").items()}
    worst = 0.0
    details = []
    for kind, overrides, opt, k in PENALTY_OFF:
        if opt == "sgd":
            base = run("ERM", {k2: v for k2, v in mml_hp.items()
                               if k2 != "dlmg_lambda"}, "sgd", k)
        else:
            base = run("ERM", {}, "adam", k)
        other = run(kind, overrides, None, k)
        dev = max(float(np.max(np.abs(a - b)))
                  for a, b in zip(base, other))
        worst = max(worst, dev)
        details.append("%s=%.1e" % (kind, dev))
    announce(3, worst <= 1e-6,
             "50-step zero-penalty trajectories vs ERM, max deviation %.2e"
             " (%s)" % (worst, ", ".join(details)))


def test_criterion_4_chance_floor(tmp_path):
    start = time.time()
    path = make_dataset(tmp_path, name="chance", k=2, dim=16, classes=10,
                        n=2000, invariant_dim=6, spurious_dim=2,
                        corr=[0.5, 0.5, 0.5], noise=0.5,
                        shuffle_labels=True, seed=30)
    manifest, matrices = load_dataset(path)
    n_test = 1600
    lo = stats.binom.ppf(0.005, n_test, 0.1) / n_test * 100
    hi = stats.binom.ppf(0.995, n_test, 0.1) / n_test * 100
    accs = {}
    for kind in A.ALGORITHMS:
        params, train_idx = train_model(matrices, manifest, kind, 0, 500)
        accs[kind] = evaluate(params, matrices["mod2"], train_idx)
    elapsed = time.time() - start
    outliers = {k: round(v, 2) for k, v in accs.items()
                if not lo <= v <= hi}
    announce(4, not outliers and elapsed < 300.0,
             "label-shuffled accuracies within [%.2f, %.2f] for all 13"
             " algorithms in %.0fs%s"
             % (lo, hi, elapsed,
                "" if not outliers else "; out: %s" % outliers))


def test_criterion_5_invariance_separation(tmp_path):
    path = make_dataset(tmp_path, name="invsep", k=2, dim=8, classes=2,
                        n=10000, invariant_dim=2, spurious_dim=1,
                        corr=[0.95, 0.75, -0.95], noise=0.5, seed=5)
    manifest, matrices = load_dataset(path)
    shared = {"batch_size": 128, "lr": 2e-4}
    gaps = []
    run_times = []
    for seed in range(3):
        t0 = time.time()
        erm_params, train_idx = train_model(
            matrices, manifest, "ERM", seed, 2000, overrides=shared)
        run_times.append(time.time() - t0)
        erm = evaluate(erm_params, matrices["mod2"], train_idx)
        t0 = time.time()
        irm_params, _ = train_model(
            matrices, manifest, "IRM", seed, 2000,
            overrides=dict(shared, irm_lambda=1e4, irm_anneal_iters=500))
        run_times.append(time.time() - t0)
        irm = evaluate(irm_params, matrices["mod2"], train_idx)
        gaps.append(irm - erm)
    mean_gap = float(np.mean(gaps))
    announce(5, mean_gap >= 10.0 and max(run_times) < 120.0,
             "IRM(1e4, anneal 500) - ERM on flipped-spurious data:"
             " gaps %s, mean %.1f pts (runs <= %.0fs)"
             % (["%.1f" % g for g in gaps], mean_gap, max(run_times)))


def test_criterion_6_selection_semantics(tmp_path):
    path = make_dataset(tmp_path, name="sel", n=300, seed=3)
    plan = RunPlan(dataset=str(path), test_modality="mod2", regime="weak",
                   algorithms=["ERM"], trials=3, seeds=2, steps=8,
                   loo=True, sweep_seed=4)
    store = ResultsStore(str(tmp_path / "sel.jsonl"))
    run_sweep(plan, store, workers=1)
    records = store.read_all()
    trials = [r for r in records if r.get("type") == "trial"]
    subruns = [r for r in records if r.get("type") == "loo_subrun"]

    # LOO bookkeeping: trials x seeds x K sub-runs plus the retrains
    expected_subruns = 3 * 2 * 2
    count_ok = (len(subruns) == expected_subruns
                and len(trials) == 3 * 2)

    chosen, _ = select_loo(trials, subruns, 2)
    loo_ok = set(chosen) == {0, 1}

    oracle = select_oracle(trials)
    argmax_ok = True
    for seed, trial in oracle.items():
        best = max(r["accuracies"]["test_val"] for r in trials
                   if r["seed_index"] == seed and r["status"] == "ok")
        got = next(r["accuracies"]["test_val"] for r in trials
                   if r["seed_index"] == seed and r["trial_index"] == trial)
        argmax_ok = argmax_ok and got == best
    announce(6, count_ok and loo_ok and argmax_ok,
             "oracle picks exact argmax; LOO ran %d sub-runs + %d retrains"
             % (len(subruns), len(trials)))


def test_criterion_7_sweep_schedule(tmp_path):
    path = make_dataset(tmp_path, name="sched", n=200, seed=3)
    plan = RunPlan(dataset=str(path), test_modality="mod2", regime="weak",
                   algorithms=["ERM"], trials=9, seeds=3, steps=4,
                   sweep_seed=9)
    store = ResultsStore(str(tmp_path / "sched.jsonl"))
    run_sweep(plan, store, workers=1)
    trials = [r for r in store.read_all() if r.get("type") == "trial"]
    schedule_ok = len(trials) == 27
    cells = {(r["trial_index"], r["seed_index"]) for r in trials}
    schedule_ok = schedule_ok and len(cells) == 27

    zero = next(r for r in trials
                if r["trial_index"] == 0 and r["seed_index"] == 0)
    defaults_ok = (
        zero["hparams"] == default_hparams("ERM")
        and zero["hparams"]["batch_size"] == 32
        and zero["hparams"]["lr"] == 5e-5
        and sample_trial_config("Concat", 0, 9)["lr"] == 1e-3
        and sample_trial_config("Concat", 0, 9)["momentum"] == 0.9
        and sample_trial_config("EQRM", 0, 9)["quantile"] == 0.75
        and sample_trial_config("OGM", 0, 9)["ogm_alpha"] == 0.1
        and sample_trial_config("Mixup", 0, 9)["mixup_alpha"] == 0.2)
    announce(7, schedule_ok and defaults_ok,
             "9 trials x 3 seeds = %d records; trial 0 carries the default"
             " configuration bit-for-bit" % len(trials))


def test_criterion_8_determinism(tmp_path):
    path = make_dataset(tmp_path, name="determ", n=250, seed=6)
    plan = RunPlan(dataset=str(path), test_modality="mod2", regime="weak",
                   algorithms=["ERM", "Concat"], trials=3, seeds=2, steps=6,
                   sweep_seed=2)
    rec_a = run_trial(plan, "ERM", 1, 1)
    rec_b = run_trial(plan, "ERM", 1, 1)
    byte_ok = (json.dumps(rec_a, sort_keys=True)
               == json.dumps(rec_b, sort_keys=True))

    s1 = ResultsStore(str(tmp_path / "w1.jsonl"))
    s8 = ResultsStore(str(tmp_path / "w8.jsonl"))
    run_sweep(plan, s1, workers=1)
    run_sweep(plan, s8, workers=8)
    set1 = sorted(json.dumps(r, sort_keys=True) for r in s1.read_all())
    set8 = sorted(json.dumps(r, sort_keys=True) for r in s8.read_all())
    announce(8, byte_ok and set1 == set8,
             "re-run trial records byte-identical; workers=1 and workers=8"
             " stores match (%d records)" % len(set1))


def test_criterion_9_report_math():
    records = []
    for modality, base in (("modA", 40.0), ("modB", 60.0)):
        for seed, acc in enumerate([base, base + 2.0, base + 4.0]):
            records.append({
                "type": "trial", "dataset": "fixture", "algorithm": "ERM",
                "test_modality": modality, "trial_index": 0,
                "seed_index": seed, "status": "ok", "perceptor": "p",
                "hparams": {},
                "accuracies": {"train_val": {"x": 1.0}, "test_val": acc,
                               "test": acc + 10.0 if modality == "modA"
                               else acc - 10.0}})
    # modA tests: 50,52,54 -> "52.0 +/- 2.0"; modB tests: 50,52,54 too
    report = aggregate_report(records)
    cell = report["fixture"]["oracle"]["ERM"]["modA"]
    cell_ok = format_cell(cell) == "52.0 ± 2.0"
    text = render_text(report)
    line = next(l for l in text.splitlines() if "ERM" in l)
    avg_ok = line.rstrip().endswith("52.0")  # mean of 52.0 and 52.0
    announce(9, cell_ok and avg_ok,
             "seed accuracies {50,52,54} render %r; Avg column equals the"
             " unweighted modality mean" % format_cell(cell))


def test_criterion_10_strong_regime_surrogate(tmp_path):
    gen = dict(k=2, classes=2, n=4000, dim=16, invariant_dim=12,
               spurious_dim=2, corr=[0.6, 0.6, 0.6], noise=0.3,
               radial=[4.0, 14.0], seed=13)
    weak_path = make_dataset(tmp_path / "w", name="radial", rotate=False,
                             **gen)
    strong_path = make_dataset(tmp_path / "s", name="radial", rotate=True,
                               **gen)
    manifest, mats_w = load_dataset(weak_path)
    _, mats_s = load_dataset(strong_path)
    n_test = 3200
    floor = stats.binom.ppf(0.995, n_test, 0.5) / n_test * 100

    worst_strong = 100.0
    worst_drop = 100.0
    for kind in A.ALGORITHMS:
        if kind in A.MML_KINDS:
            steps, overrides = 650, {"lr": 2e-3}
        else:
            steps, overrides = 400, {"lr": 1e-4}
        strongs, drops = [], []
        for seed in range(3):
            params, train_idx = train_model(mats_w, manifest, kind, seed,
                                            steps, overrides=overrides)
            weak = evaluate(params, mats_w["mod2"], train_idx)
            strong = evaluate(params, mats_s["mod2"], train_idx)
            strongs.append(strong)
            drops.append(weak - strong)
        worst_strong = min(worst_strong, float(np.mean(strongs)))
        worst_drop = min(worst_drop, float(np.mean(drops)))
    announce(10, worst_drop > 0.0 and worst_strong > floor,
             "rotation degrades every algorithm (min mean drop %.1f pts)"
             " while staying above the %.2f%% chance ceiling"
             " (min mean strong acc %.2f%%)"
             % (worst_drop, floor, worst_strong))
