"""Reference greedy and exhaustive search for the coverage objective."""
import itertools

import numpy as np

from kaprompt.mining import greedy_select
from kaprompt.prompt_pool import PromptEntry


def coverage_of(s0, rows):
    if not rows:
        return 0.0
    return sum(max(s0[i][j] for i in rows) for j in range(len(s0[0])))


def reference_greedy(s0, n_select):
    """Step-by-step greedy with plain loops: histogram = row sums of max(S0 - v, 0)."""
    n_rows, n_cols = len(s0), len(s0[0])
    chosen = []
    for _ in range(n_select):
        effect = [max((s0[i][j] for i in chosen), default=0.0) for j in range(n_cols)]
        best, best_h = None, 0.0
        for i in range(n_rows):
            if i in chosen:
                continue
            h = 0.0
            for j in range(n_cols):
                h += max(s0[i][j] - effect[j], 0.0)
            if h > best_h:  # strict: lowest index wins ties, zero gain never picked
                best, best_h = i, h
        if best is None:
            continue  # the implementation interpolates here; no row is consumed
        chosen.append(best)
    return chosen


def exhaustive_optimum(s0, n_select):
    n_rows = len(s0)
    size = min(n_select, n_rows)
    return max(coverage_of(s0, list(c)) for c in itertools.combinations(range(n_rows), size))


def dummy_entries(n_rows, length=2, dim=3):
    rng = np.random.default_rng(n_rows)
    return [PromptEntry(rng.normal(size=(length, dim)), rng.normal(size=dim), 1 + i // 4, i % 4)
            for i in range(n_rows)]


def random_instance(rng):
    n_rows = int(rng.integers(1, 13))
    n_cols = int(rng.integers(1, 15))
    n_select = int(rng.integers(1, 5))
    s0 = rng.random((n_rows, n_cols))
    if rng.random() < 0.3:  # include duplicate rows and dominated rows
        s0[rng.integers(0, n_rows)] = s0[rng.integers(0, n_rows)]
    return s0, n_select


def check_instance(s0, n_select, seed=0):
    """(matches_reference, greedy_coverage, optimum) for one instance."""
    memory = greedy_select(s0, dummy_entries(len(s0)), n_select, rng_seed=seed)
    ref = reference_greedy(s0.tolist(), n_select)
    got = coverage_of(s0.tolist(), memory.selected_rows)
    return memory.selected_rows == ref, got, exhaustive_optimum(s0.tolist(), n_select)


def greedy_oracle_suite(n_instances=150, seed=0):
    """Failures (index mismatch or bound violation) over seeded random instances."""
    rng = np.random.default_rng(seed)
    failures = []
    bound = 1 - 1 / np.e
    for n in range(n_instances):
        s0, n_select = random_instance(rng)
        same, got, opt = check_instance(s0, n_select, seed=n)
        if not same:
            failures.append((n, "index sequence differs from reference greedy"))
        if got < bound * opt - 1e-12:
            failures.append((n, f"coverage {got} below (1-1/e) x optimum {opt}"))
    return failures
