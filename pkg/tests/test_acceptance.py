"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v``.
"""

import math
import time
from dataclasses import replace

import numpy as np

from fassl.autodiff import grad_check
from fassl.data import (DatasetSpec, make_longtail_counts, partition_groups, synth_gaussian_mixture)
from fassl.encoder import ParamSet, ema_update
from fassl.pipeline import RunConfig, run_pipeline, sweep
from fassl.prototypes import contrastive_loss
from fassl.rebalance import consistency_loss, rarity_weight
from helpers import gradient_tapes
from test_pipeline import audited_run

BENCH = DatasetSpec(num_classes=9, max_count=200, imbalance_factor=100.0, input_dim=16)


def report(capsys, n, name, ok, detail):
    with capsys.disabled():
        print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return ok


def bench_config(out, **overrides) -> RunConfig:
    cfg = RunConfig(data=BENCH, out=str(out))
    for key, value in overrides.items():
        section, field = key.split("__")
        cfg = replace(cfg, **{section: replace(getattr(cfg, section), **{field: value})})
    return cfg


def mean_over(table, axis, col):
    return {row[axis]: row[col] for row in table}


def test_1_gradient_fidelity(capsys):
    samples = synth_gaussian_mixture(DatasetSpec(num_classes=6, max_count=60, input_dim=8)).samples
    t0 = time.perf_counter()
    contra, reb = [], []
    for seed in range(20):
        c, r = gradient_tapes(samples, seed)
        contra.append(grad_check(c, eps=1e-6))
        reb.append(grad_check(r, eps=1e-6))
    elapsed = time.perf_counter() - t0
    worst = max(contra + reb)
    ok = worst <= 1e-4 and elapsed < 60
    report(capsys, 1, "gradient fidelity", ok,
           f"max rel err L_contra {max(contra):.2e}, L_reb {max(reb):.2e} over 20 seeds; {elapsed:.1f}s")
    assert ok


def test_2_closed_form_identities(capsys):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(200):
        a, b = rng.normal(size=8), rng.normal(size=8)
        cos = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
        worst = max(worst, abs(consistency_loss(a, b) - (2 - 2 * cos)))
    P = rng.normal(size=(6, 4))
    z = rng.normal(size=4)
    s = P.sum(axis=0)
    z_orth = z - (z @ s) / (s @ s) * s
    phi = float(rarity_weight(np.zeros(4), P)), float(rarity_weight(np.ones(4), np.zeros((3, 4))))
    ln3 = abs(contrastive_loss(np.tile(rng.normal(size=5), (4, 1)), 0.2) - math.log(3))
    T, S = ParamSet({"w": [2.0, -1.0]}), ParamSet({"w": [4.0, 3.0]})
    ema = (ema_update(T, S, 0.0)["w"].tolist() == [4.0, 3.0]
           and ema_update(T, S, 0.5)["w"].tolist() == [3.0, 1.0]
           and ema_update(T, S, 1.0)["w"].tolist() == [2.0, -1.0])
    orth = abs(rarity_weight(z_orth, P) - 1.0)
    ok = worst <= 1e-12 and phi == (1.0, 1.0) and ln3 <= 1e-12 and ema and orth <= 1e-12
    report(capsys, 2, "closed-form identities", ok,
           f"|L_consis-(2-2cos)| {worst:.1e}; phi(Sigma=0) {phi}; |NT-Xent-ln3| {ln3:.1e}; EMA exact {ema}")
    assert ok


def test_3_sampler_contract(capsys):
    bad = []
    for C in (3, 5, 9, 10, 11, 50):
        for n_max in (20, 200, 1000):
            for rho in (1, 10, 100, 500):
                counts = make_longtail_counts(C, n_max, rho)
                if any(a < b for a, b in zip(counts, counts[1:])):
                    bad.append((C, n_max, rho, "not non-increasing"))
                # rounding band: the tail count is round(n_max / rho) clamped at 1
                tail = n_max / rho
                lo, hi = max(1, math.floor(tail)), max(1, math.ceil(tail))
                if not (n_max / hi - 1e-9 <= counts[0] / counts[-1] <= n_max / lo + 1e-9):
                    bad.append((C, n_max, rho, "ratio outside band"))
                sizes = [partition_groups(counts).count(g) for g in ("Frequent", "Medium", "Rare")]
                if max(sizes) - min(sizes) > 1:
                    bad.append((C, n_max, rho, "group sizes"))
    ok = not bad
    report(capsys, 3, "sampler contract", ok, f"72 grid points, violations: {bad[:3]}")
    assert ok


def test_4_prototype_frequency_alignment(capsys, tmp_path):
    t0 = time.perf_counter()
    table = sweep(bench_config(tmp_path), "rho", [1.0, 20.0, 100.0], seeds=range(5), out=str(tmp_path))
    elapsed = time.perf_counter() - t0
    f = mean_over(table, "rho", "proto_frequent")
    m = mean_over(table, "rho", "proto_medium")
    r = mean_over(table, "rho", "proto_rare")
    balanced = all(abs(x[1.0] - 100 / 3) <= 10 for x in (f, m, r))
    monotone = f[1.0] <= f[20.0] <= f[100.0]
    skewed = f[100.0] >= 60 and r[100.0] <= 15
    ok = balanced and monotone and skewed and elapsed < 600
    rows = "; ".join(f"rho={k:g}: {f[k]:.1f}/{m[k]:.1f}/{r[k]:.1f}" for k in (1.0, 20.0, 100.0))
    report(capsys, 4, "prototype-frequency alignment", ok, f"F/M/R % {rows}; {elapsed:.0f}s")
    assert ok


def test_5_rebalancing_efficacy(capsys, tmp_path):
    seeds = range(10)
    fassl, uniform = [], []
    for seed in seeds:
        fassl.append(run_pipeline(replace(bench_config(tmp_path / f"f{seed}"), seed=seed)))
        uniform.append(run_pipeline(replace(bench_config(tmp_path / f"u{seed}", rebalance__uniform_weights=True),
                                            seed=seed)))
    rare_f = np.mean([m["acc_rare"] for m in fassl])
    rare_u = np.mean([m["acc_rare"] for m in uniform])
    std_f = np.mean([m["std_groups"] for m in fassl])
    std_u = np.mean([m["std_groups"] for m in uniform])
    wins = sum(a["acc_rare"] >= b["acc_rare"] for a, b in zip(fassl, uniform))
    ok = rare_f >= rare_u and std_f <= std_u + 2
    report(capsys, 5, "re-balancing efficacy", ok,
           f"rare {rare_f:.2f} vs uniform {rare_u:.2f} (paired wins {wins}/10); "
           f"std {std_f:.2f} vs {std_u:.2f}")
    assert ok


def test_6_tau_sensitivity(capsys, tmp_path):
    table = sweep(bench_config(tmp_path), "tau", [0.0, 0.99, 1.0], seeds=range(5), out=str(tmp_path))
    acc = mean_over(table, "tau", "acc_all")
    ok = acc[0.0] < min(acc[0.99], acc[1.0]) and acc[0.99] >= acc[1.0]
    report(capsys, 6, "tau sensitivity", ok,
           "mean acc_all " + ", ".join(f"tau={k:g}: {v:.2f}" for k, v in acc.items()))
    assert ok


def test_7_k_robustness(capsys, tmp_path):
    table = sweep(bench_config(tmp_path), "K", [64, 128, 256, 512], seeds=range(5), out=str(tmp_path))
    acc = mean_over(table, "K", "acc_all")
    spread = max(acc.values()) - min(acc.values())
    ok = spread <= 3
    report(capsys, 7, "K robustness", ok,
           "mean acc_all " + ", ".join(f"K={k}: {v:.2f}" for k, v in acc.items()) + f"; range {spread:.2f} pp")
    assert ok


def test_8_no_collapse_and_determinism(capsys, tmp_path):
    a = run_pipeline(bench_config(tmp_path / "a"))
    run_pipeline(bench_config(tmp_path / "b"))
    same = (tmp_path / "a" / "metrics.json").read_bytes() == (tmp_path / "b" / "metrics.json").read_bytes()
    low = a["stage2"]["feature_std_min"]
    ok = low > 1e-6 and not a["stage2"]["collapse_warning"] and same
    report(capsys, 8, "no collapse and determinism", ok,
           f"min batch feature std {low:.3e}; metrics files identical: {same}")
    assert ok


def test_9_label_hygiene(capsys, tmp_path):
    cfg = bench_config(tmp_path)
    data = synth_gaussian_mixture(cfg.data, test_per_class=cfg.eval.test_per_class)
    reads = audited_run(cfg, data)
    early = [s for s in reads if s in ("data", "proto", "rebalance")]
    ok = not early and "eval" in reads
    report(capsys, 9, "label hygiene", ok,
           f"{len(early)} label reads before eval; {len(reads)} reads total (stages {sorted(set(reads))})")
    assert ok
