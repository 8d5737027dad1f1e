"""Sequential domain-incremental runs, inference over the unified pool, and metrics."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from kaprompt.backbone import ClassifierHead, FrozenBackbone
from kaprompt.checkpoint import save_checkpoint
from kaprompt.errors import EmptyInputError, EvaluationError
from kaprompt.mining import init_new_prompts, mine_reusable_prompts
from kaprompt.prompt_pool import PromptPool, fuse_selected, random_prompt_set, rank_top_k, score_matrix
from kaprompt.training import train_domain

from kaprompt.harness.data import generate_stream

log = logging.getLogger(__name__)

STEP_COLUMNS = ("domain", "iteration", "l_new", "l_agn", "l_key", "loss", "alpha", "mean_w")


def predict_logits(x, pool: PromptPool, backbone, head, top_k: int, chunk: int = 256) -> np.ndarray:
    prompts, keys, _ = pool.stacked()
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    out = []
    for i in range(0, len(x), chunk):
        xb = x[i:i + chunk]
        q = backbone.extract_query(xb)
        idx = rank_top_k(score_matrix(q, keys), top_k)
        out.append(backbone.forward_with_prompt(xb, fuse_selected(prompts, idx), head).data)
    return np.concatenate(out)


def infer(x, pool: PromptPool, backbone, head, top_k: int):
    """Predicted class per input using top-K matching over every domain's prompts."""
    if pool.n_domains == 0:
        raise EmptyInputError("infer: prompt pool is empty")
    single = np.asarray(x).ndim == 1
    pred = np.argmax(predict_logits(x, pool, backbone, head, top_k), axis=1)
    return int(pred[0]) if single else pred


def accuracy(pred, labels) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise EvaluationError("accuracy: empty test set")
    return float(np.count_nonzero(np.asarray(pred) == labels)) / labels.size


def evaluate(pool, backbone, head, test_sets, top_k: int) -> list[float]:
    """Accuracy on each ``(x_test, y_test)`` pair with the given pool."""
    row = []
    for i, (x, y) in enumerate(test_sets, start=1):
        if len(y) == 0:
            raise EvaluationError(f"evaluate: test set {i} is empty")
        row.append(accuracy(infer(x, pool, backbone, head, top_k), y))
    return row


def avg_acc(row) -> float:
    row = [float(a) for a in row]
    if not row:
        raise EvaluationError("avg_acc: no accuracies to average")
    return math.fsum(row) / len(row)


@dataclass
class AccuracyMatrix:
    n_domains: int
    rows: list = field(default_factory=list)

    def add_row(self, row) -> None:
        t = len(self.rows) + 1
        if len(row) != t:
            raise EvaluationError(f"AccuracyMatrix: row {t} must have {t} entries, got {len(row)}")
        if any(not 0.0 <= a <= 1.0 for a in row):
            raise EvaluationError(f"AccuracyMatrix: row {t} has entries outside [0, 1]")
        self.rows.append([float(a) for a in row])

    def entry(self, t: int, i: int) -> float:
        if not 1 <= i <= t <= len(self.rows):
            raise IndexError(f"AccuracyMatrix: entry ({t}, {i}) is undefined")
        return self.rows[t - 1][i - 1]

    def seen_avg(self) -> list[float]:
        return [avg_acc(r) for r in self.rows]

    @property
    def final_avg_acc(self) -> float:
        return avg_acc(self.rows[-1])

    def forgetting(self) -> list[float]:
        """max_t a_{t,i} - a_{T,i} for every domain but the last."""
        if not self.rows:
            return []
        last = self.rows[-1]
        return [max(r[i] for r in self.rows[i:]) - last[i] for i in range(len(last) - 1)]


@dataclass
class ExperimentResult:
    config: object
    accuracy: AccuracyMatrix
    reports: list
    mining: dict
    isolation: list
    checkpoints: list
    pool: PromptPool
    backbone: FrozenBackbone
    head: ClassifierHead

    @property
    def avg_acc(self) -> float:
        return self.accuracy.final_avg_acc


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


class _CsvLog:
    """Append-only CSV that flushes every row, so partial runs stay readable."""

    def __init__(self, path, columns):
        self.fh = open(path, "w", newline="")
        self.writer = csv.writer(self.fh)
        self.writer.writerow(columns)
        self.fh.flush()

    def write(self, values):
        self.writer.writerow([_fmt(v) for v in values])
        self.fh.flush()

    def close(self):
        self.fh.close()


def build_models(config):
    backbone = FrozenBackbone(seed=config.effective_backbone_seed, n_tokens=config.n_tokens,
                              patch_dim=config.patch_dim, dim=config.dim, n_blocks=config.n_blocks,
                              n_heads=config.n_heads, ffn_dim=config.ffn_dim)
    head = ClassifierHead(config.dim, config.n_classes, seed=config.effective_backbone_seed + 1)
    pool = PromptPool(config.n_prompts, config.prompt_length, config.dim)
    return backbone, head, pool


def run_experiment(config, stream=None, write_outputs: bool = True) -> ExperimentResult:
    """Train through every domain in order, evaluating on all seen domains after each."""
    stream = generate_stream(config) if stream is None else stream
    backbone, head, pool = build_models(config)
    tcfg = config.train_config()
    out = Path(config.output_dir)
    acc = AccuracyMatrix(config.n_domains)
    reports, mining, isolation, checkpoints = [], {}, [], []
    logs = {}
    if write_outputs:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        logs["acc"] = _CsvLog(out / "accuracy_matrix.csv", ("t", "i", "accuracy"))
        logs["avg"] = _CsvLog(out / "avg_acc.csv", ("t", "avg_acc"))
        logs["steps"] = _CsvLog(out / "steps.csv", STEP_COLUMNS)
    try:
        for dom in stream:
            t = dom.spec.index
            backbone_sum = backbone.checksum()
            history_sum = pool.checksum()
            features = backbone.extract_features_batch(dom.x_train)
            if t >= 2 and config.method == "ka_prompt":
                relation, memory = mine_reusable_prompts(pool, t, features, config.n_prompts,
                                                         rng_seed=[config.seed, t])
                new_set = init_new_prompts(memory, t, config.n_prompts)
                report = memory.report()
                report["relation_shape"] = list(relation.shape)
                mining[t] = report
            else:
                new_set = random_prompt_set(t, config.n_prompts, config.prompt_length, config.dim,
                                            np.random.default_rng([config.seed, t, 1]))
            history = pool.historical(t)[:2] if t >= 2 else None
            result = train_domain(dom.x_train, dom.y_train, new_set, backbone, head, tcfg, t,
                                  history=history, queries=features)
            reports.extend(result.reports)
            isolation.append({"domain": t,
                              "backbone_unchanged": backbone.checksum() == backbone_sum,
                              "history_unchanged": pool.checksum() == history_sum})
            new_set.freeze()
            pool.add_set(new_set)

            row = evaluate(pool, backbone, head, [(d.x_test, d.y_test) for d in stream[:t]], config.top_k)
            acc.add_row(row)
            if write_outputs:
                for r in result.reports:
                    logs["steps"].write([r.row()[c] for c in STEP_COLUMNS])
                for i, a in enumerate(row, start=1):
                    logs["acc"].write([t, i, a])
                logs["avg"].write([t, avg_acc(row)])
                ck = save_checkpoint(out / "checkpoints" / f"domain_{t}.ckpt", pool, backbone, head,
                                     meta={"config": config.to_dict(), "domain": t})
                checkpoints.append(ck)
            log.info("domain %d: seen-domain Avg-ACC %.4f", t, avg_acc(row))
    finally:
        for lg in logs.values():
            lg.close()

    if write_outputs:
        (out / "mining_report.json").write_text(json.dumps({str(k): v for k, v in mining.items()},
                                                           indent=2, sort_keys=True))
        with open(out / "per_domain.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["domain", "accuracy", "forgetting"])
            forget = acc.forgetting() + [0.0]
            for i, a in enumerate(acc.rows[-1], start=1):
                w.writerow([i, repr(a), repr(forget[i - 1])])
        (out / "pool_stats.json").write_text(json.dumps(pool.stats(), indent=2))
    return ExperimentResult(config, acc, reports, mining, isolation, checkpoints, pool, backbone, head)
