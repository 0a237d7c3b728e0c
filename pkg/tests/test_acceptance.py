"""Acceptance checks; each prints one PASS/FAIL line in the terminal summary.

Tolerances and sizes are pinned here rather than taken from defaults so a
change elsewhere cannot silently loosen them.
"""

import json
import time

import numpy as np
import pytest

import test_data
import test_model
import test_numerics
import test_training
from conftest import ACCEPTANCE_LINES
from helpers import CASES, random_batch
from sakt.cli import run
from sakt.config import TrainConfig
from sakt.data import generate_synthetic, split_train_test
from sakt.evaluation import (
    auc,
    component_purity,
    concept_anchors,
    evaluate,
    influence_graph,
    relevance_matrix,
)
from sakt.model import forward, init_params, loss_and_grad
from sakt.numerics import finite_diff_gradient, max_relative_error
from sakt.seeding import sub_seed
from sakt.training import train

GRAD_TOL = 1e-4
GRAD_EPS = 1e-5
GRAD_SEEDS = 5
CAUSAL_TRIALS = 1000
AUC_TOL = 1e-12
AUC_INSTANCES = 200
AUC_MAX_POINTS = 200
TARGET_AUC = 0.75
TRAIN_BUDGET_S = 30 * 60
PURITY_MIN = 0.8
MIN_CASES = 100

TINY = TrainConfig(d=8, n=10, h=2, blocks=1, dropout=0.0, dtype="float64")
TINY_E = 12


def record(num, title, ok, detail):
    ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] {num}. {title}: {detail}")
    return ok


# --- 1. gradients -----------------------------------------------------------


def test_1_gradient_check():
    start = time.perf_counter()
    worst, where = 0.0, ""
    for seed in range(GRAD_SEEDS):
        rng = np.random.default_rng(seed)
        params = init_params(TINY, TINY_E, rng)
        batch = random_batch(rng, TINY_E, TINY.n, 4)
        _, grads = loss_and_grad(params, batch, TINY)
        for name in params.tensors:
            def f(x, name=name):
                trial = params.copy()
                trial.tensors[name] = x
                return loss_and_grad(trial, batch, TINY)[0]

            err = max_relative_error(grads[name], finite_diff_gradient(f, params[name], GRAD_EPS))
            if err >= worst:
                worst, where = err, f"{name} (seed {seed})"
    seconds = time.perf_counter() - start
    ok = worst <= GRAD_TOL and seconds < 60
    record(1, "gradient check", ok, f"max rel err {worst:.2e} at {where} <= {GRAD_TOL:g}, {seconds:.1f}s < 60s")
    assert ok


# --- 2. causality -----------------------------------------------------------


def test_2_causality():
    start = time.perf_counter()
    failures = 0
    for trial in range(CAUSAL_TRIALS):
        rng = np.random.default_rng(10_000 + trial)
        cfg = TINY.replace(blocks=int(rng.integers(1, 3)))
        params = init_params(cfg, TINY_E, rng)
        batch = random_batch(rng, TINY_E, cfg.n, 1, min_len=3)
        valid = np.flatnonzero(batch.valid[0])
        j = int(rng.choice(valid[1:]))
        base = forward(params, batch, cfg).p[0]
        # rewrite everything from j onwards: the interaction and the queries
        tail = slice(j, None)
        batch.interaction_ids[0, tail] = rng.integers(0, 2 * TINY_E, cfg.n - j)
        batch.query_exercise_ids[0, tail] = rng.integers(0, TINY_E, cfg.n - j)
        moved = forward(params, batch, cfg).p[0]
        failures += not np.array_equal(moved[:j], base[:j])
    seconds = time.perf_counter() - start
    ok = failures == 0 and seconds < 60
    record(2, "causality", ok, f"{CAUSAL_TRIALS - failures}/{CAUSAL_TRIALS} trials bit-exact, {seconds:.1f}s < 60s")
    assert ok


# --- 3. AUC -----------------------------------------------------------------


def test_3_auc_oracle():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(AUC_INSTANCES):
        m = int(rng.integers(2, AUC_MAX_POINTS + 1))
        labels = rng.integers(0, 2, m)
        labels[:2] = [0, 1]
        scores = rng.integers(0, int(rng.integers(1, 20)) + 1, m) / 7.0  # heavy ties
        oracle = _pairwise_auc(scores, labels)
        worst = max(worst, abs(auc(scores, labels) - oracle))
    ok = worst <= AUC_TOL
    record(3, "AUC vs pairwise oracle", ok, f"{AUC_INSTANCES} instances, max |diff| {worst:.1e} <= {AUC_TOL:g}")
    assert ok


def _pairwise_auc(scores, labels):
    """Direct O(m^2) count over positive/negative pairs."""
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = sum(float(np.sum(p > neg)) + 0.5 * float(np.sum(p == neg)) for p in pos)
    return wins / (len(pos) * len(neg))


# --- 4-6. the synthetic benchmark ---------------------------------------------


@pytest.fixture(scope="module")
def benchmark():
    seed = 0
    dataset = generate_synthetic(1000, 50, 5, seed=sub_seed(seed, "data"))
    train_set, test_set = split_train_test(dataset, 0.8, sub_seed(seed, "split"))
    cfg = TrainConfig(seed=seed, eval_every=5)
    start = time.perf_counter()
    # final-epoch weights: no model selection on the test split
    params, history = train(train_set, test_set, cfg, keep_best=False)
    seconds = time.perf_counter() - start
    return dataset, train_set, test_set, cfg, params, history, seconds


@pytest.mark.slow
def test_4_synthetic_auc(benchmark):
    _, _, test_set, cfg, params, history, seconds = benchmark
    test_auc = evaluate(params, test_set, cfg)[0]
    ok = test_auc >= TARGET_AUC and seconds < TRAIN_BUDGET_S
    record(
        4, "synthetic test AUC", ok,
        f"{test_auc:.4f} >= {TARGET_AUC} after {cfg.epochs} epochs, "
        f"{seconds / 60:.1f} min < 30 min",
    )  # fmt: skip
    assert ok


@pytest.mark.slow
def test_5_relevance_structure(benchmark):
    dataset, _, _, cfg, params, _, _ = benchmark
    rel = relevance_matrix(params, dataset, cfg)
    upper = float(np.abs(np.triu(rel.values, k=1)).max())
    anchors = concept_anchors(dataset.concept_of)
    purity = component_purity(influence_graph(rel, anchors, dataset.concept_of), dataset.concept_of)
    # diagnostic only: the single strongest edge per row
    top1 = component_purity(influence_graph(rel, anchors, dataset.concept_of, top_k=1), dataset.concept_of)
    ok = purity >= PURITY_MIN and upper == 0.0
    record(
        5, "relevance graph", ok,
        f"purity {purity:.3f} >= {PURITY_MIN}, upper-triangle max {upper:g} == 0 "
        f"(top-1 purity {top1:.3f}, diagnostic)",
    )  # fmt: skip
    assert upper == 0.0
    assert purity >= PURITY_MIN


@pytest.mark.slow
def test_6_zero_blocks_is_worse(benchmark):
    _, train_set, test_set, cfg, params, _, _ = benchmark
    default_auc = evaluate(params, test_set, cfg)[0]
    flat_cfg = cfg.replace(blocks=0)
    flat, _ = train(train_set, test_set, flat_cfg, keep_best=False)
    flat_auc = evaluate(flat, test_set, flat_cfg)[0]
    ok = flat_auc < default_auc
    record(6, "0-block ablation", ok, f"0-block AUC {flat_auc:.4f} < default {default_auc:.4f}")
    assert ok


# --- 7. reproducibility -------------------------------------------------------


def _pipeline(root):
    data = root / "syn.csv"
    assert run(["generate", "--students", "300", "--exercises", "20", "--concepts", "4",
                "--seed", "7", "--out", str(data)]) == 0  # fmt: skip
    assert run(["train", "--data", str(data), "--seed", "7", "--epochs", "3",
                "--out", str(root / "run")]) == 0  # fmt: skip
    report = root / "eval.json"
    assert run(["evaluate", "--checkpoint", str(root / "run" / "model.ckpt"),
                "--data", str(data), "--out", str(report)]) == 0  # fmt: skip
    return (root / "run" / "model.ckpt").read_bytes(), json.loads(report.read_text())["auc"]


def test_7_reproducible_pipeline(tmp_path, capsys):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    ckpt_a, auc_a = _pipeline(tmp_path / "a")
    ckpt_b, auc_b = _pipeline(tmp_path / "b")
    capsys.readouterr()
    ok = ckpt_a == ckpt_b and auc_a == auc_b
    record(
        7, "reproducibility", ok,
        f"checkpoints {'identical' if ckpt_a == ckpt_b else 'differ'} ({len(ckpt_a)} bytes), "
        f"AUC {auc_a!r} vs {auc_b!r}",
    )  # fmt: skip
    assert ok


# --- 8. property suites -------------------------------------------------------

SUITES = {
    "softmax": test_numerics.test_softmax_properties,
    "padding": test_model.test_padding_inertness_property,
    "bijection": test_data.test_encode_decode_bijection,
    "windows": test_data.test_window_coverage_and_validity,
    "checkpoint": test_training.test_checkpoint_round_trip_property,
}


def test_8_property_suites():
    counts = {}
    for tag, prop in SUITES.items():
        before = CASES[tag]
        prop()
        counts[tag] = CASES[tag] - before
    ok = all(c >= MIN_CASES for c in counts.values())
    detail = ", ".join(f"{k} {v}" for k, v in counts.items())
    record(8, "property suites", ok, f"cases run: {detail} (each >= {MIN_CASES})")
    assert ok
