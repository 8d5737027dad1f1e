"""Prompt-component shuffle ablation on a trained checkpoint."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from kaprompt.checkpoint import Checkpoint, load_checkpoint
from kaprompt.prompt_pool import shuffle_components

from kaprompt.harness.config import ExperimentConfig
from kaprompt.harness.data import generate_stream
from kaprompt.harness.experiment import avg_acc, evaluate

ABLATION_COLUMNS = ("condition", "avg_acc", "accuracies", "permutations")


@dataclass
class AblationRow:
    condition: str
    avg_acc: float
    accuracies: list
    permutations: dict

    def csv_values(self):
        perms = json.dumps({str(d): list(map(int, p)) for d, p in self.permutations.items()},
                           separators=(",", ":"))
        return [self.condition, repr(self.avg_acc), json.dumps(self.accuracies), perms]


def checkpoint_test_sets(ckpt: Checkpoint):
    """Regenerate the test splits of every domain the checkpoint has seen."""
    config = ExperimentConfig.from_dict(ckpt.meta["config"])
    stream = generate_stream(config)[: ckpt.pool.n_domains]
    return config, [(d.x_test, d.y_test) for d in stream]


def random_permutations(n_domains: int, length: int, rng: np.random.Generator) -> dict:
    return {d: rng.permutation(length) for d in range(1, n_domains + 1)}


def shuffle_ablation(checkpoint, n_shuffles: int = 4, seed: int = 0, test_sets=None,
                     top_k: int | None = None, permutations=None) -> list[AblationRow]:
    """Avg-ACC unshuffled ("Non") and after ``n_shuffles`` random per-domain row shuffles.

    ``permutations`` may supply the per-condition permutation maps directly
    (one dict per shuffle) instead of drawing them from ``seed``.
    """
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    if test_sets is None or top_k is None:
        config, sets = checkpoint_test_sets(ckpt)
        test_sets = sets if test_sets is None else test_sets
        top_k = config.top_k if top_k is None else top_k
    pool = ckpt.pool
    rows = []
    base = evaluate(pool, ckpt.backbone, ckpt.head, test_sets, top_k)
    rows.append(AblationRow("Non", avg_acc(base), base, {}))
    if permutations is None:
        rng = np.random.default_rng(seed)
        permutations = [random_permutations(pool.n_domains, pool.prompt_length, rng) for _ in range(n_shuffles)]
    for n, perms in enumerate(permutations, start=1):
        shuffled = shuffle_components(pool, perms)
        accs = evaluate(shuffled, ckpt.backbone, ckpt.head, test_sets, top_k)
        rows.append(AblationRow(f"Shuffle-{n}", avg_acc(accs), accs, perms))
    return rows


def write_ablation(rows, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ABLATION_COLUMNS)
        for r in rows:
            w.writerow(r.csv_values())
    return path
