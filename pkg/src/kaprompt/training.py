"""Aligning-guided new prompt learning.

For every sample the current domain's prompts are matched and fused (new
path) and, from the second domain on, the historical pool is matched as well.
Matched historical prompts are down-weighted by how far their score falls
below the weakest new match, fused together with the new fused prompt, and
scored by a second cross-entropy term that keeps new prompts compatible with
old ones. Historical prompts, their keys and the backbone receive no updates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from kaprompt.errors import DimensionError, NotApplicableError, ValidationError
from kaprompt.numerics import AdamState, GradientTape, Tensor, adam_step, ops
from kaprompt.prompt_pool import fuse_selected, rank_top_k, score_matrix

_BELOW_ONE = np.nextafter(1.0, 0.0)
_TINY = np.finfo(np.float64).tiny


@dataclass
class TrainConfig:
    tau: float = 0.01
    lam: float = 0.1
    top_k: int = 3
    epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 0.005
    key_loss_weight: float = 1.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not self.tau > 0:
            raise ValidationError(f"TrainConfig: tau must be positive, got {self.tau}")
        if self.lam < 0:
            raise ValidationError(f"TrainConfig: lambda must be non-negative, got {self.lam}")
        if self.top_k < 1:
            raise ValidationError(f"TrainConfig: K must be at least 1, got {self.top_k}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("TrainConfig: epochs and batch_size must be positive")

    def n_iterations(self, n_samples: int) -> int:
        return self.epochs * math.ceil(n_samples / self.batch_size)


@dataclass
class StepReport:
    domain: int
    iteration: int
    l_new: float
    l_agn: float | None
    l_key: float
    loss: float
    alpha: np.ndarray
    old_weights: np.ndarray | None = None
    matched_new: np.ndarray | None = None
    matched_old: np.ndarray | None = None

    def row(self) -> dict:
        return {"domain": self.domain, "iteration": self.iteration, "l_new": self.l_new,
                "l_agn": self.l_agn, "l_key": self.l_key, "loss": self.loss,
                "alpha": float(np.mean(self.alpha)),
                "mean_w": None if self.old_weights is None else float(np.mean(self.old_weights))}


@dataclass
class NewPromptOutput:
    loss: Tensor
    alpha: np.ndarray
    fused: Tensor
    indices: np.ndarray
    scores: np.ndarray


def _batch(x, y, queries):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    yb = np.atleast_1d(np.asarray(y, dtype=np.int64))
    qb = None if queries is None else np.atleast_2d(np.asarray(queries, dtype=np.float64))
    return xb, yb, qb, single


def new_prompt_step(x, y, prompts: Tensor, keys, backbone, head, top_k: int,
                    queries=None) -> NewPromptOutput:
    """Match within the current domain's prompts, fuse, and score the fused prompt.

    ``alpha`` is the weakest matched score per sample, a constant. Works on a
    single sample or a batch (loss is then the batch mean).
    """
    xb, yb, qb, single = _batch(x, y, queries)
    if qb is None:
        qb = backbone.extract_query(xb)
    key_values = keys.data if isinstance(keys, Tensor) else np.asarray(keys, dtype=np.float64)
    prompts = prompts if isinstance(prompts, Tensor) else Tensor(prompts)
    scores = score_matrix(qb, key_values)
    idx = rank_top_k(scores, top_k)
    top = np.take_along_axis(scores, idx, axis=1)
    fused = fuse_selected(prompts, idx)
    logits = backbone.forward_with_prompt(xb, fused, head)
    loss = ops.cross_entropy(logits, yb)
    if single:
        return NewPromptOutput(loss, float(top[0, -1]), fused[0], idx[0], top[0])
    return NewPromptOutput(loss, top[:, -1].copy(), fused, idx, top)


def old_prompt_weights(old_scores, alpha, tau: float) -> np.ndarray:
    """w = exp(min(s - alpha, 0) / tau).

    Exactly 1 when s >= alpha and strictly inside (0, 1) otherwise; the value
    is clamped by at most one ulp to keep those bounds under rounding.
    """
    if not tau > 0:
        raise ValidationError(f"old_prompt_weights: tau must be positive, got {tau}")
    s = np.asarray(old_scores, dtype=np.float64)
    gap = s - alpha
    w = np.exp(np.minimum(gap, 0.0) / tau)
    below = gap < 0.0
    w = np.where(below, np.clip(w, _TINY, _BELOW_ONE), 1.0)
    return w


def aligned_fusion(old_prompts, weights, fused_new, top_k: int | None = None):
    """(sum_i w_i p_i + K p_new) / (K + sum_i w_i).

    ``old_prompts`` (K, L_p, D) or batched (B, K, L_p, D) enter as constants;
    ``fused_new`` may be a Tensor carrying gradient.
    """
    old = np.asarray(old_prompts, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    single = old.ndim == 3
    if single:
        old, w = old[None], w[None]
    if old.ndim != 4 or w.shape != old.shape[:2]:
        raise DimensionError(f"aligned_fusion: old prompts {np.shape(old_prompts)} vs weights {np.shape(weights)}")
    k = old.shape[1] if top_k is None else top_k
    new_shape = tuple(fused_new.shape)
    if new_shape != (old.shape[2:] if single else (old.shape[0],) + old.shape[2:]):
        raise DimensionError(f"aligned_fusion: new prompt {new_shape} vs old prompts {np.shape(old_prompts)}")
    denom = k + w.sum(axis=1)
    old_part = np.einsum("bk,bkld->bld", w, old) / denom[:, None, None]
    new_coef = k / denom
    if single:
        old_part, new_coef = old_part[0], new_coef[0]
    else:
        new_coef = new_coef[:, None, None]
    if isinstance(fused_new, Tensor):
        return ops.add(ops.mul(fused_new, new_coef), old_part)
    return np.asarray(fused_new, dtype=np.float64) * new_coef + old_part


def fusion_coefficients(weights, top_k: int | None = None) -> np.ndarray:
    """The K + 1 mixing coefficients of ``aligned_fusion`` (old prompts first)."""
    w = np.asarray(weights, dtype=np.float64)
    k = len(w) if top_k is None else top_k
    denom = k + w.sum()
    return np.concatenate([w / denom, [k / denom]])


@dataclass
class AlignmentOutput:
    loss: Tensor
    weights: np.ndarray
    indices: np.ndarray
    scores: np.ndarray


def alignment_step(x, y, hist_prompts, hist_keys, alpha, fused_new, backbone, head, top_k: int,
                   tau: float, queries=None) -> AlignmentOutput:
    """Cross-entropy of the prompt obtained by fusing matched old prompts with the new fused prompt."""
    hist_keys = hist_keys.data if isinstance(hist_keys, Tensor) else hist_keys
    if hist_keys is None or len(hist_keys) == 0:
        raise NotApplicableError("alignment_step: no historical prompts (first domain)")
    xb, yb, qb, single = _batch(x, y, queries)
    if qb is None:
        qb = backbone.extract_query(xb)
    # old prompts are constants here even if handed in as Tensors
    hist_prompts = np.asarray(hist_prompts.data if isinstance(hist_prompts, Tensor) else hist_prompts,
                              dtype=np.float64)
    scores = score_matrix(qb, hist_keys)
    idx = rank_top_k(scores, top_k)
    top = np.take_along_axis(scores, idx, axis=1)
    alpha_b = np.atleast_1d(np.asarray(alpha, dtype=np.float64))[:, None]
    w = old_prompt_weights(top, alpha_b, tau)
    if single:
        p_agn = aligned_fusion(hist_prompts[idx[0]], w[0], fused_new, top_k)
    else:
        p_agn = aligned_fusion(hist_prompts[idx], w, fused_new, top_k)
    logits = backbone.forward_with_prompt(xb if not single else xb[0], p_agn, head)
    loss = ops.cross_entropy(logits, yb if not single else yb[0])
    if single:
        return AlignmentOutput(loss, w[0], idx[0], top[0])
    return AlignmentOutput(loss, w, idx, top)


def key_update_loss(queries, keys, indices=None) -> Tensor:
    """Sum over matched keys of (1 - cos(query, key)); batch mean for 2-D queries.

    ``keys`` is the (N, D) key Tensor and ``indices`` the matched rows per
    sample. Without indices every key counts as matched.
    """
    keys = keys if isinstance(keys, Tensor) else Tensor(keys)
    q = np.asarray(queries, dtype=np.float64)
    single = q.ndim == 1
    qb = np.atleast_2d(q)
    idx = np.tile(np.arange(keys.shape[0]), (len(qb), 1)) if indices is None else np.atleast_2d(indices)
    qn = ops.l2_normalize_rows(qb).data
    kn = ops.l2_normalize_rows(keys)
    cos = ops.matmul(qn, ops.transpose(kn))
    mask = np.zeros(cos.shape)
    np.put_along_axis(mask, idx, 1.0, axis=1)
    matched = ops.sum(ops.mul(cos, mask))
    total = ops.sub(float(mask.sum()), matched)
    return total if single else ops.scale(total, 1.0 / len(qb))


@dataclass
class TrainResult:
    reports: list = field(default_factory=list)
    adam: AdamState | None = None


def train_domain(x_train, y_train, new_set, backbone, head, config: TrainConfig, domain_index: int,
                 history=None, queries=None) -> TrainResult:
    """Optimise ``new_set`` (in place) and the head on one domain.

    ``history`` is ``(prompts, keys)`` stacked over domains 1..t-1, or None
    for the first domain. The alignment term is skipped when history is None
    or lambda is 0.
    """
    x_train = np.asarray(x_train, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.int64)
    n = len(x_train)
    if queries is None:
        queries = backbone.extract_features_batch(x_train)
    prompts = Tensor(new_set.prompts, requires_grad=True, name="prompts")
    keys = Tensor(new_set.keys, requires_grad=True, name="keys")
    params = [prompts, keys] + head.parameters()
    adam = AdamState(lr=config.learning_rate, beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps)
    use_alignment = history is not None and config.lam > 0
    hist_prompts, hist_keys = history if history is not None else (None, None)
    rng = np.random.default_rng([config.seed, domain_index])
    result = TrainResult(adam=adam)
    iteration = 0
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            b = order[start:start + config.batch_size]
            xb, yb, qb = x_train[b], y_train[b], queries[b]
            with GradientTape() as tape:
                new = new_prompt_step(xb, yb, prompts, keys, backbone, head, config.top_k, queries=qb)
                total = new.loss
                agn = None
                if use_alignment:
                    agn = alignment_step(xb, yb, hist_prompts, hist_keys, new.alpha, new.fused, backbone,
                                         head, config.top_k, config.tau, queries=qb)
                    total = ops.add(total, ops.scale(agn.loss, config.lam))
                l_key = key_update_loss(qb, keys, new.indices)
                total = ops.add(total, ops.scale(l_key, config.key_loss_weight))
            grads = tape.gradient(total, params)
            adam_step(params, grads, adam)
            iteration += 1
            result.reports.append(StepReport(
                domain=domain_index, iteration=iteration, l_new=new.loss.item(),
                l_agn=None if agn is None else agn.loss.item(), l_key=l_key.item(), loss=total.item(),
                alpha=new.alpha, old_weights=None if agn is None else agn.weights,
                matched_new=new.indices, matched_old=None if agn is None else agn.indices))
    return result
