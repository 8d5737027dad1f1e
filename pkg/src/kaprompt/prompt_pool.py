"""Per-domain prompt sets, key matching and linear prompt fusion."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from kaprompt.errors import CapacityError, DimensionError, EmptyInputError, ValidationError
from kaprompt.numerics import Tensor, ops
from kaprompt.numerics.ops import NORM_EPS


@dataclass
class PromptEntry:
    prompt: np.ndarray
    key: np.ndarray
    domain_index: int
    slot_index: int
    trainable: bool = False

    def __post_init__(self):
        self.prompt = np.asarray(self.prompt, dtype=np.float64)
        self.key = np.asarray(self.key, dtype=np.float64)
        if self.prompt.ndim != 2 or self.key.shape != (self.prompt.shape[1],):
            raise DimensionError(f"PromptEntry: prompt {self.prompt.shape} and key {self.key.shape} "
                                 "must be (L_p, D) and (D,)")

    @property
    def ident(self) -> tuple[int, int]:
        return (self.domain_index, self.slot_index)

    def copy(self, **changes) -> PromptEntry:
        fields = dict(prompt=self.prompt.copy(), key=self.key.copy(), domain_index=self.domain_index,
                      slot_index=self.slot_index, trainable=self.trainable)
        fields.update(changes)
        return PromptEntry(**fields)


class PromptSet:
    """The N_p (prompt, key) pairs learned for one domain.

    ``prompts`` is (N_p, L_p, D) and ``keys`` is (N_p, D). Freezing marks both
    arrays read-only, so later training cannot touch them even by accident.
    """

    def __init__(self, domain_index: int, prompts, keys, frozen: bool = False):
        self.domain_index = int(domain_index)
        self.prompts = np.array(prompts, dtype=np.float64)
        self.keys = np.array(keys, dtype=np.float64)
        if self.prompts.ndim != 3 or self.keys.shape != (self.prompts.shape[0], self.prompts.shape[2]):
            raise DimensionError(f"PromptSet: prompts {self.prompts.shape} / keys {self.keys.shape} mismatch")
        self.frozen = False
        if frozen:
            self.freeze()

    @property
    def n_prompts(self) -> int:
        return self.prompts.shape[0]

    @property
    def prompt_length(self) -> int:
        return self.prompts.shape[1]

    @property
    def dim(self) -> int:
        return self.prompts.shape[2]

    def freeze(self) -> None:
        self.prompts.flags.writeable = False
        self.keys.flags.writeable = False
        self.frozen = True

    def entries(self) -> list[PromptEntry]:
        return [PromptEntry(self.prompts[i].copy(), self.keys[i].copy(), self.domain_index, i,
                            trainable=not self.frozen) for i in range(self.n_prompts)]

    def copy(self) -> PromptSet:
        return PromptSet(self.domain_index, self.prompts, self.keys, frozen=self.frozen)

    @classmethod
    def from_entries(cls, domain_index: int, entries) -> PromptSet:
        if not entries:
            raise EmptyInputError("PromptSet.from_entries: no entries")
        return cls(domain_index, np.stack([e.prompt for e in entries]), np.stack([e.key for e in entries]))


def random_prompt_set(domain_index: int, n_prompts: int, prompt_length: int, dim: int,
                      rng: np.random.Generator) -> PromptSet:
    """Cold-start prompts and keys, uniform in [-0.5, 0.5] / sqrt(D)."""
    s = 1.0 / math.sqrt(dim)
    prompts = rng.uniform(-0.5, 0.5, size=(n_prompts, prompt_length, dim)) * s
    keys = rng.uniform(-0.5, 0.5, size=(n_prompts, dim)) * s
    return PromptSet(domain_index, prompts, keys)


@dataclass
class PromptPool:
    n_prompts: int
    prompt_length: int
    dim: int
    sets: list = field(default_factory=list)

    @property
    def n_domains(self) -> int:
        return len(self.sets)

    def add_set(self, prompt_set: PromptSet) -> None:
        expected = (self.n_prompts, self.prompt_length, self.dim)
        if prompt_set.prompts.shape != expected:
            raise DimensionError(f"PromptPool: set shape {prompt_set.prompts.shape}, expected {expected}")
        if prompt_set.domain_index != self.n_domains + 1:
            raise ValidationError(f"PromptPool: expected domain {self.n_domains + 1}, "
                                  f"got {prompt_set.domain_index}")
        self.sets.append(prompt_set)

    def domain(self, d: int) -> PromptSet:
        return self.sets[d - 1]

    def stacked(self, domains=None) -> tuple[np.ndarray, np.ndarray, list[tuple[int, int]]]:
        """Prompts (M, L_p, D), keys (M, D) and (domain, slot) ids in ascending id order."""
        chosen = [s for s in self.sets if domains is None or s.domain_index in domains]
        if not chosen:
            raise EmptyInputError("PromptPool: no prompt sets selected")
        ids = [(s.domain_index, i) for s in chosen for i in range(s.n_prompts)]
        return (np.concatenate([s.prompts for s in chosen]),
                np.concatenate([s.keys for s in chosen]), ids)

    def historical(self, t: int):
        """Stacked prompts of domains 1..t-1."""
        return self.stacked(range(1, t))

    def entries(self) -> list[PromptEntry]:
        return [e for s in self.sets for e in s.entries()]

    def copy(self) -> PromptPool:
        return PromptPool(self.n_prompts, self.prompt_length, self.dim, [s.copy() for s in self.sets])

    def checksum(self, domains=None) -> str:
        h = hashlib.sha256()
        for s in self.sets:
            if domains is not None and s.domain_index not in domains:
                continue
            h.update(np.ascontiguousarray(s.prompts).tobytes())
            h.update(np.ascontiguousarray(s.keys).tobytes())
        return h.hexdigest()

    def equals(self, other: PromptPool) -> bool:
        return (len(self.sets) == len(other.sets)
                and all(np.array_equal(a.prompts, b.prompts) and np.array_equal(a.keys, b.keys)
                        for a, b in zip(self.sets, other.sets)))

    def stats(self) -> dict:
        """Per-domain key and prompt norms, for debugging dumps."""
        return {
            "n_prompts": self.n_prompts, "prompt_length": self.prompt_length, "dim": self.dim,
            "domains": [{"domain": s.domain_index,
                         "key_norms": np.linalg.norm(s.keys, axis=1).tolist(),
                         "prompt_norms": np.linalg.norm(s.prompts.reshape(s.n_prompts, -1), axis=1).tolist()}
                        for s in self.sets],
        }


# -- matching ---------------------------------------------------------------

def score(query, key) -> float:
    """Similarity (1 + cos(query, key)) / 2, in [0, 1]."""
    cos = ops.cosine_similarity(np.asarray(query, dtype=np.float64), np.asarray(key, dtype=np.float64))
    return float(np.clip((1.0 + cos.item()) / 2.0, 0.0, 1.0))


def score_matrix(queries, keys) -> np.ndarray:
    """(B, M) similarity of every query against every key."""
    q = ops.l2_normalize_rows(np.atleast_2d(queries)).data
    k = ops.l2_normalize_rows(np.atleast_2d(keys)).data
    return np.clip((1.0 + q @ k.T) / 2.0, 0.0, 1.0)


def rank_top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Column indices of the k best scores per row; ties go to the lower index."""
    if k > scores.shape[-1]:
        raise CapacityError(f"top-K: K = {k} exceeds pool size {scores.shape[-1]}")
    if k < 1:
        raise CapacityError(f"top-K: K must be at least 1, got {k}")
    return np.argsort(-scores, axis=-1, kind="stable")[..., :k]


@dataclass
class MatchResult:
    scores: np.ndarray
    entries: list
    alpha: float

    @property
    def idents(self) -> list[tuple[int, int]]:
        return [e.ident for e in self.entries]


def top_k_match(query, entries, k: int) -> MatchResult:
    """Best ``k`` entries for ``query``; ties broken by ascending (domain, slot)."""
    if k > len(entries):
        raise CapacityError(f"top_k_match: K = {k} exceeds pool size {len(entries)}")
    ordered = sorted(entries, key=lambda e: e.ident)
    s = score_matrix(query, np.stack([e.key for e in ordered]))[0]
    idx = rank_top_k(s, k)
    top = s[idx]
    return MatchResult(scores=top, entries=[ordered[i] for i in idx], alpha=float(top[-1]))


# -- fusion and shuffling ---------------------------------------------------

def fuse_linear(prompts):
    """Elementwise mean of K prompt matrices.

    Accepts arrays (returns an array) or Tensors (returns a Tensor on the
    active tape).
    """
    prompts = list(prompts)
    if not prompts:
        raise EmptyInputError("fuse_linear: no prompts to fuse")
    shape = prompts[0].shape
    for p in prompts[1:]:
        if p.shape != shape:
            raise DimensionError(f"fuse_linear: prompt shapes {shape} and {p.shape} differ")
    if any(isinstance(p, Tensor) for p in prompts):
        total = prompts[0]
        for p in prompts[1:]:
            total = ops.add(total, p)
        return ops.scale(total, 1.0 / len(prompts))
    return np.mean(np.stack([np.asarray(p, dtype=np.float64) for p in prompts]), axis=0)


def selection_matrix(indices: np.ndarray, n_entries: int) -> np.ndarray:
    """(B, M) matrix averaging the selected rows: 1/K at each matched column."""
    b, k = indices.shape
    a = np.zeros((b, n_entries))
    np.put_along_axis(a, indices, 1.0 / k, axis=1)
    return a


def fuse_selected(prompts, indices: np.ndarray):
    """Per-sample linear fusion of prompts (M, L_p, D) at ``indices`` (B, K)."""
    m, lp, d = prompts.shape
    a = selection_matrix(indices, m)
    if isinstance(prompts, Tensor):
        return ops.reshape(ops.matmul(a, ops.reshape(prompts, (m, lp * d))), (len(a), lp, d))
    return (a @ prompts.reshape(m, lp * d)).reshape(len(a), lp, d)


def _check_permutation(perm, length: int) -> np.ndarray:
    p = np.asarray(perm)
    if p.shape != (length,) or not np.issubdtype(p.dtype, np.integer) \
            or not np.array_equal(np.sort(p), np.arange(length)):
        raise ValidationError(f"shuffle_components: {list(np.ravel(perm))} is not a permutation of 0..{length - 1}")
    return p


def shuffle_components(pool: PromptPool, permutations: dict) -> PromptPool:
    """Copy of ``pool`` with each domain's prompt rows reordered.

    ``permutations`` maps domain index to a 0-based permutation ``perm`` of the
    L_p rows: row j of every shuffled prompt is old row ``perm[j]``. Domains
    absent from the map are left alone; keys are never touched.
    """
    out = PromptPool(pool.n_prompts, pool.prompt_length, pool.dim)
    for s in pool.sets:
        prompts = s.prompts
        if s.domain_index in permutations:
            perm = _check_permutation(permutations[s.domain_index], pool.prompt_length)
            prompts = prompts[:, perm, :]
        out.sets.append(PromptSet(s.domain_index, prompts, s.keys, frozen=s.frozen))
    return out


def invert_permutation(perm) -> np.ndarray:
    p = np.asarray(perm)
    inv = np.empty_like(p)
    inv[p] = np.arange(len(p))
    return inv


__all__ = ["NORM_EPS", "PromptEntry", "PromptSet", "PromptPool", "MatchResult", "random_prompt_set",
           "score", "score_matrix", "rank_top_k", "top_k_match", "fuse_linear", "fuse_selected",
           "selection_matrix", "shuffle_components", "invert_permutation"]
