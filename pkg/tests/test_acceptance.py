"""Acceptance criteria 1-9.

Each test records its outcome with ``record`` so the terminal summary prints one
PASS/FAIL line per criterion, then asserts at the stated tolerance.
"""
import itertools
import math
import time

import numpy as np
import pytest
from conftest import record

from latentdir import diffmath as dm
from latentdir.cli import main
from latentdir.directions import edit, init_direction_models
from latentdir.generators import (ground_truth_directions, make_synthetic_generator, sample_latents,
                                  with_bias)
from latentdir.hungarian import linear_sum_assignment
from latentdir.metrics import (alignment_score, diversity_score, identifiability_margin,
                               random_alignment_null, rescoring, transfer_eval)
from latentdir.objective import contrastive_loss, loss_oracle
from latentdir.pgm import write_pgm
from latentdir.trainer import StepGraph, TrainConfig, train

RESCORE_GRID = [-3.0, -1.5, 0.0, 1.5, 3.0]


def probes_for(cfg, n=256):
    return sample_latents(np.random.default_rng([cfg.seed, 3]), n, 8, cfg.truncation)


def heldout_for(cfg, n=64):
    return sample_latents(np.random.default_rng([cfg.seed, 4]), n, 8, cfg.truncation)


# 1 ---------------------------------------------------------------------------

def test_c1_loss_oracle_equivalence():
    t0 = time.perf_counter()
    e1, e2 = [1.0, 0.0], [0.0, 1.0]
    fixtures = [(np.array([[e1, e2], [e1, e2]]), math.log(2) - 1), (np.array([[e1, e1], [e1, e1]]), math.log(2))]
    worst = 0.0
    for f, expected in fixtures:
        v = contrastive_loss(f, 1.0).total
        worst = max(worst, abs(v - loss_oracle(f, 1.0)), abs(v - expected))
    rng = np.random.default_rng(1)
    for _ in range(50):
        N, K, F = int(rng.integers(2, 9)), int(rng.integers(2, 9)), int(rng.integers(1, 17))
        f = rng.standard_normal((N, K, F))
        tau = float(rng.uniform(0.1, 2.0))
        worst = max(worst, abs(contrastive_loss(f, tau).total - loss_oracle(f, tau)))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-10 and elapsed < 5
    record(1, ok, f"max |delta| {worst:.2e} (< 1e-10), {elapsed:.2f}s (< 5s)")
    assert ok


# 2 ---------------------------------------------------------------------------

def test_c2_gradient_fidelity():
    t0 = time.perf_counter()
    worst = {}
    for kind in ("global", "linear", "nonlinear"):
        worst[kind] = 0.0
        for seed in range(5):
            gen = make_synthetic_generator(seed, 4, 3, 32, 2.0)
            cfg = TrainConfig(batch_size=2, K=2, kind=kind, truncation=0.7, steps=1, seed=seed)
            dset = init_direction_models(kind, 2, 4, seed=seed)
            graph = StepGraph(gen, dset, cfg)
            batch = sample_latents(np.random.default_rng(seed), 2, 4, 0.7)
            params = dset.flat_params()
            report = dm.check_gradient(graph.loss, dict(params, z=batch), list(params), eps=1e-6, tol=1e-4,
                                       numeric_dtype=np.longdouble)
            worst[kind] = max(worst[kind], report.max_rel_error)
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and elapsed < 30
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record(2, ok, f"max rel error {detail} (< 1e-4), {elapsed:.1f}s (< 30s)")
    assert ok


# 3 ---------------------------------------------------------------------------

def test_c3_edit_distance_invariant():
    rng = np.random.default_rng(3)
    d = 8
    sets = {k: init_direction_models(k, 4, d, seed=5, hidden_layers=2) for k in ("global", "linear", "nonlinear")}
    kinds = list(sets)
    worst = 0.0
    for _ in range(10_000):
        kind = kinds[rng.integers(3)]
        model = sets[kind].models[rng.integers(4)]
        z = rng.standard_normal(d) * rng.uniform(0.1, 3.0)
        alpha = 0.0
        while alpha == 0.0:
            alpha = float(rng.uniform(-5, 5))
        worst = max(worst, abs(np.linalg.norm(edit(model, z, alpha) - z) - abs(alpha)))
    ok = worst <= 1e-9
    record(3, ok, f"max | ||edit-z|| - |alpha| | {worst:.1e} over 10^4 triples (<= 1e-9)")
    assert ok


# 4 ---------------------------------------------------------------------------

def test_c4_alignment(synth, recovery_config, recovery_run):
    dset, _, elapsed = recovery_run
    rep = alignment_score(dset, ground_truth_directions(synth), probes_for(recovery_config))
    ok = rep.mean_cos >= 0.70 and elapsed < 180
    record(4, ok, f"alignment {rep.mean_cos:.3f} (>= 0.70), train {elapsed:.1f}s (< 180s)")
    assert rep.mean_cos >= 0.70, f"mean assigned |cos| {rep.mean_cos:.3f} per pair {rep.pair_cos}"
    assert elapsed < 180


def test_c4_diversity(recovery_config, recovery_run):
    div = diversity_score(recovery_run[0], probes_for(recovery_config))
    record(4, div <= 0.20, f"diversity {div:.3f} (<= 0.20)")
    assert div <= 0.20


def test_c4_margin(synth, recovery_config, recovery_run):
    cfg = recovery_config
    margin = identifiability_margin(synth, recovery_run[0], heldout_for(cfg), cfg.alpha, cfg.tau)
    record(4, margin >= 0.5, f"margin {margin:.3f} (>= 0.5)")
    assert margin >= 0.5


# 5 ---------------------------------------------------------------------------

def test_c5_training_improves_objective(synth, recovery_config, recovery_run):
    from dataclasses import replace

    lines = []
    for seed in range(5):
        trace = recovery_run[1] if seed == recovery_config.seed else train(replace(recovery_config, seed=seed), synth)[1]
        loss = np.asarray(trace.loss)
        n = len(loss) // 10
        first, last = float(np.median(loss[:n])), float(np.median(loss[-n:]))
        lines.append((seed, first, last))
    wins = sum(last < first for _, first, last in lines)
    record(5, wins == 5, f"{wins}/5 seeds improve (" + ", ".join(f"{a:.3f}->{b:.3f}" for _, a, b in lines) + ")")
    assert wins == 5


# 6 ---------------------------------------------------------------------------

def test_c6_rescoring(synth, recovery_config, recovery_run):
    dset = recovery_run[0]
    probes = probes_for(recovery_config)
    rep = alignment_score(dset, ground_truth_directions(synth), probes)
    rescore_probes = sample_latents(np.random.default_rng([recovery_config.seed, 5]), 100, 8,
                                    recovery_config.truncation)
    fractions = {k: rescoring(synth, dset, k, RESCORE_GRID, rescore_probes, factor=j).monotone_fraction
                 for k, j in rep.assignment.items()}
    ok = len(fractions) > 0 and min(fractions.values()) >= 0.90
    record(6, ok, "monotone fraction per direction " + ", ".join(f"{k}:{v:.2f}" for k, v in sorted(fractions.items()))
           + " (>= 0.90)")
    assert ok


# 7 ---------------------------------------------------------------------------

def test_c7_transfer(synth, recovery_config, recovery_run):
    dset = recovery_run[0]
    probes = probes_for(recovery_config)
    home = alignment_score(dset, ground_truth_directions(synth), probes)
    shifted = transfer_eval(dset, with_bias(synth, 0.3), probes=probes)
    same = shifted.to_dict() == home.to_dict()
    redrawn = transfer_eval(dset, make_synthetic_generator(8, 8, 4, 64, 2.0), probes=probes)
    null_mean, null_std = random_alignment_null(4, 4, 8, trials=2000, seed=0)
    z = (redrawn.mean_cos - null_mean) / null_std
    ok = same and abs(z) <= 3
    record(7, ok, f"shifted-bias report identical: {same}; redrawn W {redrawn.mean_cos:.3f} vs null "
                  f"{null_mean:.3f} +/- {null_std:.3f} ({z:+.2f} sd, within 3)")
    assert ok


# 8 ---------------------------------------------------------------------------

def test_c8_hungarian():
    rng = np.random.default_rng(8)
    mismatches = 0
    for _ in range(200):
        n = int(rng.integers(1, 7))
        cost = rng.random((n, n))
        best = min(itertools.permutations(range(n)), key=lambda p: sum(cost[i, p[i]] for i in range(n)))
        rows, cols = linear_sum_assignment(cost)
        mismatches += tuple(int(c) for c in cols[np.argsort(rows)]) != best
    record(8, mismatches == 0, f"{200 - mismatches}/200 assignments equal brute force")
    assert mismatches == 0


# 9 ---------------------------------------------------------------------------

def test_c9_determinism_and_formats(tmp_path, monkeypatch):
    monkeypatch.delenv("LATENTDIR_SEED", raising=False)
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["train", "preset:synthetic-default", "--out", str(out)]) == 0
        assert main(["traverse", str(out / "directions.json"), "preset:synthetic-default", "--k", "0",
                     "--alphas", "-3,-1.5,0,1.5,3", "--n", "4", "--out", str(out)]) == 0
    files = ["directions.json", "loss_trace.ndjson", "traverse_k0.pgm"]
    same = {f: (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files}
    fixture = write_pgm(np.array([[0, 255]], dtype=np.uint8)) == b"P5\n2 1\n255\n\x00\xff"
    ok = all(same.values()) and fixture
    record(9, ok, "byte-identical " + ", ".join(f"{f}: {v}" for f, v in same.items()) + f"; PGM fixture: {fixture}")
    assert ok
