"""Reusable knowledge mining: pick the historical prompts that best cover a new domain.

Coverage of a selected row set M over the new domain's samples is the
facility-location objective F(M) = sum_j max_{i in M} S0[i, j]. The greedy
search adds the row with the largest marginal gain until N_p prompts are
chosen; when no remaining row adds coverage, a new entry is interpolated from
two already-selected ones.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from kaprompt import kernels
from kaprompt.errors import DimensionError, EmptyInputError, PreconditionError
from kaprompt.numerics import ops
from kaprompt.prompt_pool import PromptEntry, PromptSet

log = logging.getLogger(__name__)


@dataclass
class RelationMatrix:
    values: np.ndarray
    row_ids: list

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class Provenance:
    kind: str  # "source" | "interpolated" | "random"
    source: tuple | None = None
    parents: tuple | None = None

    def __str__(self):
        if self.kind == "source":
            return f"d{self.source[0]}:s{self.source[1]}"
        if self.kind == "interpolated":
            return f"interpolated({self.parents[0]},{self.parents[1]})"
        return "random"

    def to_json(self) -> dict:
        out = {"kind": self.kind}
        if self.source is not None:
            out["domain"], out["slot"] = self.source
        if self.parents is not None:
            out["parents"] = list(self.parents)
        return out


@dataclass
class ReusableMemory:
    entries: list = field(default_factory=list)
    provenance: list = field(default_factory=list)
    selected_rows: list = field(default_factory=list)
    coverage: list = field(default_factory=list)
    fallback_count: int = 0
    random_fill_count: int = 0

    def __len__(self):
        return len(self.entries)

    def report(self) -> dict:
        return {
            "selected": [p.to_json() for p in self.provenance],
            "selected_rows": list(self.selected_rows),
            "coverage": list(self.coverage),
            "fallback_count": self.fallback_count,
            "random_fill_count": self.random_fill_count,
        }


def build_base_relation(keys, features, row_ids=None) -> RelationMatrix:
    """S0 = (normalize(K) @ normalize(F).T + 1) / 2, one row per historical key."""
    keys = np.atleast_2d(np.asarray(keys, dtype=np.float64))
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if keys.shape[0] == 0 or features.shape[0] == 0:
        raise EmptyInputError("build_base_relation: need at least one key and one sample")
    if keys.shape[1] != features.shape[1]:
        raise DimensionError(f"build_base_relation: keys {keys.shape} vs features {features.shape}")
    kn = ops.l2_normalize_rows(keys).data
    fn = ops.l2_normalize_rows(features).data
    s0 = np.clip((kn @ fn.T + 1.0) / 2.0, 0.0, 1.0)
    if row_ids is None:
        row_ids = list(range(keys.shape[0]))
    return RelationMatrix(s0, list(row_ids))


def _values(relation):
    return relation.values if isinstance(relation, RelationMatrix) else np.asarray(relation, dtype=np.float64)


def sample_effect_vector(relation, selected) -> np.ndarray:
    """Column-wise max over the selected rows; zeros when nothing is selected yet."""
    s0 = _values(relation)
    rows = list(selected)
    if not rows:
        return np.zeros(s0.shape[1])
    for r in rows:
        if not 0 <= r < s0.shape[0]:
            raise IndexError(f"sample_effect_vector: row {r} outside 0..{s0.shape[0] - 1}")
    return s0[rows].max(axis=0)


def difference_matrix(relation, effect) -> np.ndarray:
    """S'[i, j] = max(S0[i, j] - v[j], 0)."""
    s0 = _values(relation)
    effect = np.asarray(effect, dtype=np.float64)
    if effect.shape != (s0.shape[1],):
        raise DimensionError(f"difference_matrix: effect length {effect.shape} vs {s0.shape[1]} columns")
    return np.maximum(s0 - effect[None, :], 0.0)


def score_histogram(diff) -> np.ndarray:
    """Row sums of the difference matrix."""
    return np.asarray(diff, dtype=np.float64).sum(axis=1)


def coverage(relation, selected) -> float:
    return float(sample_effect_vector(relation, selected).sum())


def interpolation_fallback(memory: ReusableMemory, rng: np.random.Generator) -> tuple[PromptEntry, Provenance]:
    """Mean of two distinct, uniformly drawn memory entries."""
    if len(memory.entries) < 2:
        raise PreconditionError(f"interpolation_fallback: memory holds {len(memory.entries)} entries, needs 2")
    a, b = sorted(int(i) for i in rng.choice(len(memory.entries), size=2, replace=False))
    ea, eb = memory.entries[a], memory.entries[b]
    entry = PromptEntry((ea.prompt + eb.prompt) * 0.5, (ea.key + eb.key) * 0.5,
                        domain_index=-1, slot_index=len(memory.entries))
    return entry, Provenance("interpolated", parents=(a, b))


def _random_entry(shape_prompt, dim, rng, slot) -> PromptEntry:
    s = 1.0 / np.sqrt(dim)
    return PromptEntry(rng.uniform(-0.5, 0.5, size=shape_prompt) * s,
                       rng.uniform(-0.5, 0.5, size=dim) * s, domain_index=-1, slot_index=slot)


def greedy_select(relation: RelationMatrix, entries, n_select: int, rng_seed=0) -> ReusableMemory:
    """Greedy coverage search over the rows of ``relation``.

    ``entries`` lists the historical prompt entries in row order. Each step
    recomputes the effect vector of the selected rows and takes the unselected
    row with the largest histogram value (ties to the lowest row). When that
    value is not positive, an interpolated entry is added instead.
    """
    s0 = _values(relation)
    if len(entries) != s0.shape[0]:
        raise DimensionError(f"greedy_select: {len(entries)} entries for {s0.shape[0]} relation rows")
    if s0.shape[0] == 0:
        raise EmptyInputError("greedy_select: empty historical pool")
    if n_select < 1:
        raise PreconditionError(f"greedy_select: N_p must be positive, got {n_select}")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    memory = ReusableMemory()
    unselected = np.ones(s0.shape[0], dtype=bool)
    while len(memory) < n_select:
        effect = sample_effect_vector(s0, memory.selected_rows)
        hist = kernels.coverage_histogram(s0, effect)
        hist[~unselected] = -np.inf
        best = int(np.argmax(hist)) if unselected.any() else -1
        if best >= 0 and hist[best] > 0.0:
            unselected[best] = False
            memory.selected_rows.append(best)
            memory.entries.append(entries[best].copy(trainable=False))
            memory.provenance.append(Provenance("source", source=entries[best].ident))
        else:
            try:
                entry, prov = interpolation_fallback(memory, rng)
            except PreconditionError as exc:
                missing = n_select - len(memory)
                log.warning("reusable mining: %s; filling %d remaining slot(s) with random prompts", exc, missing)
                ref = entries[0]
                for _ in range(missing):
                    memory.entries.append(_random_entry(ref.prompt.shape, ref.key.shape[0], rng, len(memory)))
                    memory.provenance.append(Provenance("random"))
                    memory.coverage.append(coverage(s0, memory.selected_rows))
                memory.random_fill_count += missing
                break
            memory.entries.append(entry)
            memory.provenance.append(prov)
            memory.fallback_count += 1
        memory.coverage.append(coverage(s0, memory.selected_rows))
    return memory


def init_new_prompts(memory: ReusableMemory, domain_index: int, n_prompts: int | None = None) -> PromptSet:
    """Deep-copy the mined memory into a fresh trainable prompt set."""
    if n_prompts is not None and len(memory) != n_prompts:
        raise PreconditionError(f"init_new_prompts: memory has {len(memory)} entries, expected {n_prompts}")
    if len(memory) == 0:
        raise PreconditionError("init_new_prompts: memory is empty")
    return PromptSet.from_entries(domain_index, memory.entries)


def mine_reusable_prompts(pool, t: int, features, n_prompts: int, rng_seed=0):
    """Relation matrix over domains 1..t-1 against ``features``, then greedy selection."""
    prompts, keys, ids = pool.historical(t)
    entries = [PromptEntry(prompts[i], keys[i], d, s) for i, (d, s) in enumerate(ids)]
    relation = build_base_relation(keys, features, row_ids=ids)
    return relation, greedy_select(relation, entries, n_prompts, rng_seed)
