"""Acceptance criteria, one test per criterion.

Each test reports a PASS/FAIL line through the ``acceptance`` fixture; the
lines are repeated in the terminal summary so they survive output capture.
"""

import math
import time
from fractions import Fraction

import numpy as np
import pytest

from attnbench.hws import assign_weights, cap_and_normalize, fit_weight_function, frame_divergences
from attnbench.maps import ClipSequence
from attnbench.metrics import auc, bootstrap_ci, correlation_coefficient, kl_divergence, nss
from attnbench.objects import AttendedCriterion, DetectionRecord, selectivity
from attnbench.pipeline import RunConfig, run_all
from attnbench.predictor import (
    DropoutConfig,
    OptimizerConfig,
    TrainingClip,
    baseline_mean_predictor,
    forward,
)
from attnbench.predictor import train as train_predictor
from attnbench.synth import SyntheticSpec, synth_generate
from gradcheck import relative_errors, tiny_problem
from oracles import auc_oracle, cc_oracle, kl_oracle, nss_oracle, random_instance

N_SEEDS = 5


# -- 1. metric oracles ----------------------------------------------------------------


def test_criterion_1_metric_oracles(acceptance):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        gt, pred, fix = random_instance(rng, max_side=8)
        pairs = [
            (kl_divergence(gt, pred), kl_oracle(gt, pred)),
            (correlation_coefficient(gt, pred), cc_oracle(gt, pred)),
            (nss(pred, fix), nss_oracle(pred, fix)),
            (auc(pred, fix), auc_oracle(pred, fix)),
        ]
        worst = max(worst, *(abs(a - b) for a, b in pairs))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-10 and elapsed < 5.0
    assert acceptance(1, ok, f"200 instances, max |metric - oracle| = {worst:.2e} (tol 1e-10), {elapsed:.2f} s (< 5 s)")


# -- 2. gradient check ----------------------------------------------------------------


def test_criterion_2_gradient_fidelity(acceptance):
    t0 = time.perf_counter()
    params, x, gt = tiny_problem(seed=0)
    worst = worst_elem = 0.0
    for drop in (DropoutConfig(0.0, 0.0, 0.0), DropoutConfig()):
        errs = relative_errors(params, x, gt, dropout=drop)
        worst = max(worst, *(e for e, _ in errs.values()))
        worst_elem = max(worst_elem, *(e for _, e in errs.values()))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and worst_elem < 1e-4 and elapsed < 60.0
    assert acceptance(2, ok, f"{len(errs)} parameter groups: max per-group relative error {worst:.2e}, "
                             f"max elementwise {worst_elem:.2e} where |fd| > 1e-4 (tol 1e-4), "
                             f"{elapsed:.1f} s (< 60 s)")


# -- 3. HWS flattening ------------------------------------------------------------------


def test_criterion_3_hws_flattening(acceptance):
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    # mass piled up at low divergence with a long right tail
    d = 0.2 + rng.gamma(shape=2.0, scale=0.45, size=30_000)
    wf = fit_weight_function(d)
    w = cap_and_normalize(wf(d), np.zeros(d.size, dtype=bool))
    draws = d[rng.choice(d.size, size=100_000, replace=True, p=w / w.sum())]
    counts, _ = np.histogram(draws, bins=20, range=(1.0, 3.0))
    raw_counts, _ = np.histogram(d, bins=20, range=(1.0, 3.0))
    dev = float(np.max(np.abs(counts - counts.mean()) / counts.mean()))
    raw_dev = float(np.max(np.abs(raw_counts - raw_counts.mean()) / raw_counts.mean()))
    elapsed = time.perf_counter() - t0
    ok = dev < 0.10 and elapsed < 30.0
    assert acceptance(3, ok, f"{d.size} frames, 100k draws: max relative bin deviation {dev:.3f} (< 0.10; "
                             f"unweighted {raw_dev:.2f}), {elapsed:.1f} s (< 30 s)")


# -- 4. boundary cap ----------------------------------------------------------------------


def _random_clip(rng, cid, n, fps):
    frames = rng.random((n, 9, 16)) ** rng.uniform(1.0, 12.0, size=(n, 1, 1))
    # make the clip ends the most surprising frames so their raw weight is high
    for i in list(range(min(4, n))) + list(range(max(0, n - 3), n)):
        frames[i] = 1e-4
        frames[i, rng.integers(9), rng.integers(16)] = 1.0
    return ClipSequence.from_array(cid, frames, fps=fps)


def test_criterion_4_boundary_cap(acceptance):
    rng = np.random.default_rng(11)
    clips = []
    for k in range(1000):
        fps = float(rng.choice([1.0, 2.0, 2.5, 3.0, 4.0, 6.0, 10.0]))
        clips.append(_random_clip(rng, f"c{k:04d}", int(rng.integers(3, 40)), fps))
    d = [v for c in clips for _, v in frame_divergences(c)]
    table = assign_weights(clips, fit_weight_function(d), 1.0, 0.5)
    weights = table.as_dict()
    worst = 0.0
    n_boundary = 0
    for c in clips:
        n = len(c)
        fps = Fraction(c.fps)
        # frame i is shown over [i/fps, (i+1)/fps); any overlap with a boundary
        # window counts, compared exactly so touching endpoints do not overlap
        for i, w in enumerate(weights[c.clip_id]):
            head = i / fps < 1
            tail = (i + 1) / fps > n / fps - Fraction(1, 2)
            if head or tail:
                n_boundary += 1
                worst = max(worst, w)
    mean_w = float(np.mean([e.weight for e in table.entries]))
    ok = worst <= 1.0 + 1e-9 and abs(mean_w - 1.0) < 1e-9
    assert acceptance(4, ok, f"1000 clips, {n_boundary} boundary frames, max boundary weight {worst:.12f} "
                             f"(<= 1 + 1e-9), mean weight {mean_w:.12f}")


# -- 5 and 6. training experiments ----------------------------------------------------


def _training_data(corpus):
    return [TrainingClip(t.clip_id, corpus.features[t.clip_id], t) for t in corpus.targets]


def _mean_kl(test, predictions, frames_of=None):
    vals = []
    for clip in test.targets:
        keep = np.ones(len(clip), bool) if frames_of is None else frames_of[clip.clip_id]
        vals += [kl_divergence(m, predictions(clip)[i]) for i, m in enumerate(clip.maps) if keep[i]]
    return float(np.mean(vals))


@pytest.fixture(scope="module")
def seed_runs():
    """Train uniform- and HWS-sampled models for each seed and score them on held-out clips."""
    runs = []
    opt = OptimizerConfig(learning_rate=0.001, iterations=600)
    for seed in range(N_SEEDS):
        train_set = synth_generate(SyntheticSpec(n_clips=40, seed=100 + seed, event_rate=0.05))
        test_set = synth_generate(SyntheticSpec(n_clips=16, seed=900 + seed, event_rate=0.05))
        data = _training_data(train_set)
        wf = fit_weight_function([v for c in train_set.targets for _, v in frame_divergences(c)])
        table = assign_weights(train_set.targets, wf)
        base = baseline_mean_predictor(train_set.targets).values
        row = {"seed": seed, "baseline": {
            "all": _mean_kl(test_set, lambda c: [base] * len(c)),
            "events": _mean_kl(test_set, lambda c: [base] * len(c), test_set.events),
        }}
        for sampler in ("uniform", "hws"):
            t0 = time.perf_counter()
            params = train_predictor(data, opt, sampler=sampler, table=table, seed=seed).params
            preds = {cid: forward(params, f)[0] for cid, f in test_set.features.items()}
            row[sampler] = {
                "all": _mean_kl(test_set, lambda c: preds[c.clip_id]),
                "events": _mean_kl(test_set, lambda c: preds[c.clip_id], test_set.events),
                "seconds": time.perf_counter() - t0,
            }
        runs.append(row)
    return runs


def test_criterion_5_hws_training_advantage(acceptance, seed_runs):
    wins = sum(r["hws"]["events"] < r["uniform"]["events"] for r in seed_runs)
    rel = [(r["hws"]["all"] - r["uniform"]["all"]) / r["uniform"]["all"] for r in seed_runs]
    seconds = sum(r["uniform"]["seconds"] + r["hws"]["seconds"] for r in seed_runs)
    per_seed = "; ".join(
        f"seed {r['seed']} events {r['uniform']['events']:.3f}->{r['hws']['events']:.3f}" for r in seed_runs)
    ok = wins == N_SEEDS and max(rel) <= 0.05 and seconds < 600
    assert acceptance(5, ok, f"HWS lower event-frame KL on {wins}/{N_SEEDS} seeds, worst whole-set change "
                             f"{max(rel):+.1%} (<= +5%), {seconds:.0f} s (< 600 s) [{per_seed}]")


def test_criterion_6_model_beats_baseline(acceptance, seed_runs):
    wins = sum(r["uniform"]["all"] < r["baseline"]["all"] for r in seed_runs)
    seconds = sum(r["uniform"]["seconds"] for r in seed_runs)
    per_seed = "; ".join(f"seed {r['seed']} {r['baseline']['all']:.3f} vs {r['uniform']['all']:.3f}"
                         for r in seed_runs)
    ok = wins == N_SEEDS and seconds < 300
    assert acceptance(6, ok, f"model KL below mean-map baseline on {wins}/{N_SEEDS} seeds, "
                             f"{seconds:.0f} s (< 300 s) [{per_seed}]")


# -- 7. bootstrap calibration ------------------------------------------------------------


def test_criterion_7_bootstrap_coverage(acceptance):
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    true_mean = 1.5
    covered = 0
    for _ in range(500):
        sample = rng.normal(true_mean, 2.0, size=100)
        lo, hi = bootstrap_ci(sample, 10000, 0.95, rng)
        covered += lo <= true_mean <= hi
    rate = covered / 500
    elapsed = time.perf_counter() - t0
    ok = 0.92 <= rate <= 0.98 and elapsed < 30.0
    assert acceptance(7, ok, f"coverage {rate:.3f} over 500 replications (in [0.92, 0.98]), {elapsed:.1f} s (< 30 s)")


# -- 8. selectivity null ------------------------------------------------------------------


def test_criterion_8_selectivity_null(acceptance):
    rng = np.random.default_rng(5)
    t0 = time.perf_counter()
    corpus = synth_generate(SyntheticSpec(n_clips=10, frames_per_clip=30, seed=8))
    pool = [m.values for c in corpus.targets for m in c.maps]
    n = 100_000
    # every detection covers exactly 2x2 cell centres, so a position-free random
    # map attends to each one with the same probability
    cols = rng.integers(0, 15, n)
    rows = rng.integers(0, 8, n)
    dets = [DetectionRecord("d", k, "pedestrian", ((c + 0.1) / 16, (r + 0.1) / 9, (c + 1.9) / 16, (r + 1.9) / 9))
            for k, (c, r) in enumerate(zip(cols, rows))]
    human = {("d", k): pool[k % len(pool)] for k in range(n)}
    noise = rng.random((n, 9, 16))
    random_model = {("d", k): noise[k] for k in range(n)}
    crit = AttendedCriterion(0.8)
    sel = selectivity(human, random_model, dets, crit, n_resamples=1000, seed=0)
    sd = math.sqrt(sel.base_rate * (1 - sel.base_rate) / sel.n_selected)
    z = (sel.selected_rate - sel.base_rate) / sd
    copy = selectivity(human, human, dets, crit, n_resamples=1000, seed=0)
    elapsed = time.perf_counter() - t0
    ok = abs(z) <= 3.0 and copy.selected_rate == 1.0 and elapsed < 30.0
    assert acceptance(8, ok, f"random model selected_rate {sel.selected_rate:.4f} vs base_rate {sel.base_rate:.4f} "
                             f"(z = {z:+.2f}, |z| <= 3, {sel.n_selected} selected of {n}); human copy "
                             f"selected_rate {copy.selected_rate:.3f}; {elapsed:.1f} s (< 30 s)")


# -- 9. determinism -----------------------------------------------------------------------------


def test_criterion_9_determinism(acceptance, tmp_path):
    cfg = RunConfig(corpus=str(tmp_path / "corpus"), out=str(tmp_path / "run"))
    first = run_all(cfg).read_bytes()
    second = run_all(cfg).read_bytes()
    n_files = len(first.decode().splitlines()) - 1
    ok = first == second
    assert acceptance(9, ok, f"two run_all passes, manifests ({n_files} files) "
                             f"{'hash-identical' if ok else 'differ'}")
