"""Acceptance suite: one test per criterion, printed as pass/fail lines.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
report lines. The training-based criteria share session fixtures so the
co-training runs execute once.
"""

import numpy as np
import pytest

from gpd.data import DatasetSpec
from gpd.expand import ExpansionPlan
from gpd.losses import LossConfig, verify_stop_gradient
from gpd.ops import kd_kl_divergence
from gpd.tensor import Tensor
from gpd.train import TrainConfig, track_gap, train
from gpd.verify import suite_algo1, suite_cbr, suite_grad, suite_ir

SEEDS = (0, 1, 2, 3, 4)

# Toy-scale stand-in for the training experiments: the criterion pins
# K=10, 5k/1k samples, convnet-small, ratio 2, branches 2, 15 epochs;
# image size and noise are sized for budget and off-saturation difficulty.
ACCEPT_SHAPE = (1, 12, 12)
ACCEPT_NOISE = 5.0


def accept_config(seed: int, ratio: int, branches: int) -> TrainConfig:
    return TrainConfig(
        arch="convnet-small", epochs=15, batch_size=64, lr=0.05,
        decay_epochs=(10, 13), decay_factor=0.1, seed=seed,
        plan=ExpansionPlan(ratio=ratio, branches=branches, epsilon=0.0, seed=seed),
        loss=LossConfig(use_static_teacher=False, temperature=4.0),
        dataset=DatasetSpec(classes=10, train_samples=5000, eval_samples=1000,
                            shape=ACCEPT_SHAPE, noise=ACCEPT_NOISE, seed=seed),
    )


def report(number: int, name: str, passed: bool, detail: str) -> None:
    print(f"criterion {number:02d} ({name}): {'PASS' if passed else 'FAIL'} - {detail}")
    assert passed, f"criterion {number} ({name}): {detail}"


@pytest.fixture(scope="session")
def cotrain_runs(tmp_path_factory):
    """GPD* scratch runs for seeds 0..4, shared by criteria 9-11."""
    runs = {}
    for seed in SEEDS:
        out = str(tmp_path_factory.mktemp(f"gpd_seed{seed}"))
        _, records = train(accept_config(seed, 2, 2), out_dir=out)
        runs[seed] = (out, records)
    return runs


@pytest.fixture(scope="session")
def baseline_runs():
    """Plain cross-entropy runs with the same data, budget, and architecture."""
    runs = {}
    for seed in SEEDS:
        _, records = train(accept_config(seed, 1, 1))
        runs[seed] = records
    return runs


def test_criterion_01_expansion_preserves_function():
    results = {r.name: r for r in suite_ir(seed=0)}
    fixed = results["three-conv-ratio-2-fixed-case"]
    chains = results["bn-free-chains-preserved-x100"]
    passed = fixed.passed and chains.passed
    report(1, "expansion preserves function", passed,
           f"fixed three-conv case dev {fixed.deviation:.2e}, "
           f"100 random bn-free chains max dev {chains.deviation:.2e} (tol 1e-9)")


def test_criterion_02_bn_safe_expansion_preserves_function():
    results = {r.name: r for r in suite_ir(seed=1)}
    chains = results["bn-chains-preserved-x100"]
    report(2, "bn-safe expansion preserves function", chains.passed,
           f"100 random bn chains max dev {chains.deviation:.2e} (tol 1e-9)")


def test_criterion_03_extraction_inverts_expansion_at_init():
    results = {r.name: r for r in suite_cbr(seed=2)}
    inv = results["inverse-at-init-role-grid"]
    report(3, "extraction inverts expansion at init", inv.passed,
           f"roles x ratios {{2,3}} x branches {{1,2,6}} max dev {inv.deviation:.2e} (tol 1e-12)")


def test_criterion_04_branch_merge_sound_at_arbitrary_weights():
    results = {r.name: r for r in suite_cbr(seed=3)}
    merge = results["merge-soundness-drifted-x100"]
    report(4, "branch merge sound at drifted weights", merge.passed,
           f"100 randomized blocks max dev {merge.deviation:.2e} (tol 1e-9)")


def test_criterion_05_gradients_match_finite_differences():
    results = suite_grad(seed=4)
    fd_checks = [r for r in results if not r.name.startswith("stop-gradient")]
    worst = max(r.deviation for r in fd_checks)
    passed = all(r.passed for r in fd_checks)
    report(5, "gradients match finite differences", passed,
           f"{len(fd_checks)} op/pipeline checks, worst rel err {worst:.2e} (tol 1e-4)")


def test_criterion_06_shared_step_tracks_two_model_reference():
    results = {r.name: r for r in suite_algo1(seed=5)}
    drift = results["shared-vs-two-model-10-steps"]
    report(6, "shared step tracks two-model reference", drift.passed,
           f"10 steps, max parameter drift {drift.deviation:.2e} (tol 1e-6)")


def test_criterion_07_distillation_targets_are_detached_exactly():
    rng = np.random.default_rng(6)
    s = Tensor(rng.normal(size=(8, 10)), requires_grad=True)
    t = Tensor(rng.normal(size=(8, 10)), requires_grad=True)
    kd_kl_divergence(s, t, temperature=4.0).backward()
    structurally_detached = t.grad is None and s.grad is not None

    checks = verify_stop_gradient(seed=6)
    zero_check = checks[0]
    bit_exact_zero = zero_check.passed and zero_check.deviation == 0.0
    report(7, "distillation targets detached", structurally_detached and bit_exact_zero,
           "teacher-side logits hold no tape edge; wide-only coordinates get "
           f"exactly {zero_check.deviation} gradient from the student's distillation term")


def test_criterion_08_bn_statistics_isolated_between_views():
    results = {r.name: r for r in suite_algo1(seed=7)}
    iso = results["bn-statistics-isolated-100-steps"]
    report(8, "bn statistics isolated between views", iso.passed,
           "100 train steps: teacher forwards left student stats bit-identical and vice versa")


def test_criterion_09_gap_stays_nonnegative(cotrain_runs):
    details = []
    passed = True
    for seed in SEEDS:
        _, records = cotrain_runs[seed]
        summary = track_gap(records)
        ok = summary.epoch0_gap == 0.0 and summary.frac_nonneg >= 0.8
        passed &= ok
        details.append(f"seed {seed}: epoch0 gap {summary.epoch0_gap:+.4f}, "
                       f"gap>=0 on {summary.frac_nonneg:.0%}")
    report(9, "gap stays non-negative", passed, "; ".join(details))


def test_criterion_10_cotraining_beats_plain_training(cotrain_runs, baseline_runs):
    gpd_final = [cotrain_runs[s][1][-1].acc_s for s in SEEDS]
    base_final = [baseline_runs[s][-1].acc_s for s in SEEDS]
    wins = sum(1 for g, b in zip(gpd_final, base_final) if g > b)
    mean_gpd, mean_base = float(np.mean(gpd_final)), float(np.mean(base_final))
    passed = (mean_gpd >= mean_base - 0.005) and wins >= 3
    report(10, "co-training beats plain training", passed,
           f"mean student acc {mean_gpd:.4f} vs baseline {mean_base:.4f} "
           f"({mean_gpd - mean_base:+.4f}), strict wins {wins}/5")


def test_criterion_11_runs_are_deterministic(cotrain_runs, tmp_path_factory):
    import os

    first_dir, _ = cotrain_runs[0]
    second_dir = str(tmp_path_factory.mktemp("gpd_seed0_repeat"))
    train(accept_config(0, 2, 2), out_dir=second_dir)

    def rows_without_ms(path):
        lines = open(path).read().splitlines()
        return [",".join(line.split(",")[:-1]) for line in lines]

    csv_equal = rows_without_ms(os.path.join(first_dir, "records.csv")) == \
        rows_without_ms(os.path.join(second_dir, "records.csv"))
    ckpt_equal = open(os.path.join(first_dir, "teacher_final.ckpt"), "rb").read() == \
        open(os.path.join(second_dir, "teacher_final.ckpt"), "rb").read()
    report(11, "runs are deterministic", csv_equal and ckpt_equal,
           "record streams byte-identical (wall-clock column excluded) "
           "and final checkpoints byte-identical")
