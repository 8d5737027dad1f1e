"""Acceptance gate: one test per headline criterion.

Run with ``pytest tests/test_acceptance.py``; a PASS/FAIL line per criterion
is printed in the terminal summary.
"""
import math
import time

import numpy as np
import pytest

from conftest import MAGNITUDE_FLOOR, REL_TOL, fd_errors
from gradient_cases import loss_cases, op_cases
from mining_oracles import greedy_oracle_suite
from kaprompt import kernels
from kaprompt.checkpoint import load_checkpoint
from kaprompt.harness.ablation import shuffle_ablation
from kaprompt.harness.cli import main as cli_main
from kaprompt.harness.config import ExperimentConfig
from kaprompt.harness.experiment import avg_acc, run_experiment
from kaprompt.training import fusion_coefficients, old_prompt_weights

RESULTS = {}


def record(name, passed, detail):
    RESULTS[name] = (bool(passed), detail)
    assert passed, f"{name}: {detail}"


# -- shared runs ------------------------------------------------------------

COMPARE_SEEDS = [0, 1, 2, 3, 4]
ABLATION_SEEDS = [0, 1, 2]


@pytest.fixture(scope="module")
def comparison(tmp_path_factory):
    """Both arms with the default synthetic config over five seeds."""
    root = tmp_path_factory.mktemp("compare")
    wall, cpu = time.perf_counter(), time.process_time()
    runs = {}
    for seed in COMPARE_SEEDS:
        for method in ("ka_prompt", "baseline_independent"):
            cfg = ExperimentConfig(seed=seed, method=method, output_dir=str(root / f"{method}_{seed}"))
            runs[seed, method] = run_experiment(cfg)
    return runs, time.perf_counter() - wall, time.process_time() - cpu


# -- criteria ---------------------------------------------------------------

def test_gradient_suite():
    start = time.perf_counter()
    worst, n_checked = 0.0, 0
    for name in kernels.available_backends():
        previous = kernels.set_backend(name)
        try:
            for _, fn, arrays, wrt in op_cases(seed=0) + loss_cases(seed=0) + loss_cases(seed=1):
                errs = fd_errors(fn, arrays, n_points=20, wrt=wrt)
                worst = max(worst, *errs)
                n_checked += 1
        finally:
            kernels.set_backend(previous)
    elapsed = time.perf_counter() - start
    record("gradient suite", worst <= REL_TOL and elapsed < 60,
           f"{n_checked} cases x 20 points per input, max rel err {worst:.2e} "
           f"(abs floor {REL_TOL * MAGNITUDE_FLOOR:.0e}), {elapsed:.1f}s")


def test_greedy_oracle_suite():
    start = time.perf_counter()
    failures = greedy_oracle_suite(n_instances=200, seed=0)
    elapsed = time.perf_counter() - start
    record("greedy oracle suite", not failures and elapsed < 30,
           f"200 instances, {len(failures)} failures {failures[:3]}, {elapsed:.1f}s")


def test_fusion_algebra():
    rng = np.random.default_rng(0)
    worst_sum = 0.0
    for _ in range(1000):
        w = old_prompt_weights(rng.random(int(rng.integers(1, 11))), rng.random(), 0.01)
        worst_sum = max(worst_sum, abs(fusion_coefficients(w).sum() - 1.0))
    scores, alphas = rng.random(5000), rng.random(5000)
    scores[:500] = alphas[:500]  # exact boundary cases
    w = old_prompt_weights(scores, alphas, 0.01)
    iff = bool(np.all((w == 1.0) == (scores >= alphas)))
    alpha, tau = 0.75, 2.0 ** -6
    at_tau = float(old_prompt_weights(alpha - tau, alpha, tau))
    record("fusion algebra", worst_sum <= 1e-12 and iff and at_tau == math.exp(-1.0),
           f"max |sum-1| {worst_sum:.1e} over 1000 vectors, w=1 iff s>=alpha: {iff}, "
           f"w(alpha-tau) == e^-1: {at_tau == math.exp(-1.0)}")


def test_isolation(comparison):
    runs, *_ = comparison
    ok, checked = True, 0
    for (seed, method), res in runs.items():
        ok &= all(i["backbone_unchanged"] and i["history_unchanged"] for i in res.isolation)
        # every set in the final pool is byte-identical to the copy saved when it was frozen
        for t, path in enumerate(res.checkpoints, start=1):
            saved = load_checkpoint(path)
            ok &= saved.backbone.checksum() == res.backbone.checksum()
            ok &= res.pool.checksum(domains={t}) == saved.pool.checksum(domains={t})
            checked += 1
    record("isolation", ok, f"backbone and historical prompt/key checksums identical across "
                            f"{len(runs)} T=4 runs ({checked} checkpoints)")


def test_directional_comparison(comparison):
    runs, wall, cpu = comparison
    ka = [runs[s, "ka_prompt"].avg_acc for s in COMPARE_SEEDS]
    bl = [runs[s, "baseline_independent"].avg_acc for s in COMPARE_SEEDS]
    margin = avg_acc(ka) - avg_acc(bl)
    wins = sum(a > b for a, b in zip(ka, bl))
    record("directional comparison", margin > 0 and wins >= 4 and cpu < 600,
           f"ka_prompt {avg_acc(ka):.4f} vs baseline {avg_acc(bl):.4f}, margin {margin:+.4f}, "
           f"wins {wins}/5, {cpu:.0f} CPU-s")


def test_shuffle_ablation_direction(comparison):
    runs, *_ = comparison
    details, ok = [], True
    for seed in ABLATION_SEEDS:
        rows = shuffle_ablation(runs[seed, "ka_prompt"].checkpoints[-1], n_shuffles=4, seed=seed)
        base = rows[0].avg_acc
        shuffled = avg_acc([r.avg_acc for r in rows[1:]])
        ok &= shuffled <= base + 0.005
        details.append(f"seed {seed}: Non {base:.4f} / shuffled {shuffled:.4f}")
    record("shuffle ablation direction", ok, "; ".join(details))


def test_train_determinism(tmp_path, capsys):
    outputs = []
    for name in ("first", "second"):
        out = tmp_path / name
        assert cli_main(["train", "--seed", "7", "--output-dir", str(out)]) == 0
        outputs.append((out / "accuracy_matrix.csv").read_bytes())
    record("train determinism", outputs[0] == outputs[1] and len(outputs[0]) > 0,
           f"accuracy_matrix.csv byte-identical across two runs ({len(outputs[0])} bytes)")


def test_avg_acc_check(comparison):
    runs, *_ = comparison
    entries = [a for res in runs.values() for row in res.accuracy.rows for a in row]
    exact = avg_acc([0.5, 0.7]) == 0.6
    in_range = all(0.0 <= a <= 1.0 for a in entries)
    record("avg-acc check", exact and in_range,
           f"avg_acc([0.5, 0.7]) == 0.6: {exact}; {len(entries)} matrix entries in [0, 1]: {in_range}")
