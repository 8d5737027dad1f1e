import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradient_cases import small_models
from kaprompt.errors import NotApplicableError, ValidationError
from kaprompt.numerics import GradientTape, Tensor, ops
from kaprompt.prompt_pool import PromptPool, random_prompt_set, score_matrix
from kaprompt.training import (TrainConfig, aligned_fusion, alignment_step, fusion_coefficients,
                               key_update_loss, new_prompt_step, old_prompt_weights, train_domain)


def test_train_config_validation():
    for bad in ({"tau": 0.0}, {"lam": -0.1}, {"top_k": 0}, {"epochs": 0}):
        with pytest.raises(ValidationError):
            TrainConfig(**bad)
    assert TrainConfig(epochs=5, batch_size=32).n_iterations(200) == 35


# -- new-prompt path --------------------------------------------------------

def test_single_prompt_k1_fuses_to_that_prompt():
    backbone, head = small_models()
    rng = np.random.default_rng(0)
    x = rng.normal(size=16)
    prompt, key = rng.normal(size=(1, 3, 16)), rng.normal(size=(1, 16))
    out = new_prompt_step(x, 2, prompt, key, backbone, head, 1)
    np.testing.assert_array_equal(out.fused.data, prompt[0])
    assert out.alpha == score_matrix(backbone.extract_query(x), key)[0, 0]


def test_logits_do_not_depend_on_label():
    backbone, head = small_models()
    rng = np.random.default_rng(1)
    x, prompts, keys = rng.normal(size=(4, 16)), rng.normal(size=(5, 3, 16)), rng.normal(size=(5, 16))
    a = new_prompt_step(x, [0, 1, 2, 3], prompts, keys, backbone, head, 2)
    b = new_prompt_step(x, [3, 3, 3, 3], prompts, keys, backbone, head, 2)
    np.testing.assert_array_equal(a.fused.data, b.fused.data)
    np.testing.assert_array_equal(a.indices, b.indices)
    assert a.loss.item() != b.loss.item()


# -- old-prompt weights -----------------------------------------------------

def test_weight_examples_exact():
    alpha, tau = 0.75, 2.0 ** -6  # dyadic, so alpha - tau and the division are exact
    assert old_prompt_weights(alpha, alpha, tau) == 1.0
    assert old_prompt_weights(alpha + 0.125, alpha, tau) == 1.0
    assert old_prompt_weights(alpha - tau, alpha, tau) == math.exp(-1.0)
    assert old_prompt_weights(0.8, 0.5, 0.01) == 1.0


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(1e-4, 1.0))
def test_weight_is_one_iff_score_reaches_alpha(s, alpha, tau):
    w = float(old_prompt_weights(s, alpha, tau))
    if s >= alpha:
        assert w == 1.0
    else:
        assert 0.0 < w < 1.0


def test_weight_rejects_bad_tau():
    with pytest.raises(ValidationError):
        old_prompt_weights(0.5, 0.5, 0.0)


# -- aligned fusion ---------------------------------------------------------

def test_fusion_all_ones_k2():
    np.testing.assert_array_equal(fusion_coefficients([1.0, 1.0]), [0.25, 0.25, 0.5])


def test_fusion_limit_small_weights():
    rng = np.random.default_rng(2)
    old, new = rng.normal(size=(3, 2, 4)), rng.normal(size=(2, 4))
    np.testing.assert_allclose(aligned_fusion(old, np.full(3, 1e-12), new), new, atol=1e-9)


def test_fusion_matches_scalar_loop():
    rng = np.random.default_rng(3)
    k, lp, d = 3, 2, 5
    old, new, w = rng.normal(size=(k, lp, d)), rng.normal(size=(lp, d)), rng.random(k)
    out = aligned_fusion(old, w, new)
    for r in range(lp):
        for c in range(d):
            num = k * new[r, c]
            for i in range(k):
                num += w[i] * old[i, r, c]
            assert abs(out[r, c] - num / (k + sum(w))) <= 1e-12


def test_fusion_batched_equals_single():
    rng = np.random.default_rng(4)
    old, new, w = rng.normal(size=(2, 3, 2, 4)), rng.normal(size=(2, 2, 4)), rng.random((2, 3))
    batched = aligned_fusion(old, w, new)
    for b in range(2):
        np.testing.assert_allclose(batched[b], aligned_fusion(old[b], w[b], new[b]), rtol=1e-14)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=8))
def test_fusion_coefficients_sum_to_one(w):
    assert abs(fusion_coefficients(w).sum() - 1.0) <= 1e-12


def test_fusion_coefficients_sum_to_one_random_1000():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        w = old_prompt_weights(rng.random(int(rng.integers(1, 10))), rng.random(), 0.01)
        assert abs(fusion_coefficients(w).sum() - 1.0) <= 1e-12


# -- alignment loss ---------------------------------------------------------

def _setup(seed=6):
    backbone, head = small_models(seed)
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(3, 16)), np.array([0, 1, 2])
    new_p, new_k = rng.normal(size=(4, 3, 16)) * 0.3, rng.normal(size=(4, 16))
    old_p, old_k = rng.normal(size=(5, 3, 16)) * 0.3, rng.normal(size=(5, 16))
    return backbone, head, x, y, new_p, new_k, old_p, old_k


def test_alignment_closed_form_when_old_scores_dominate():
    backbone, head, x, y, new_p, new_k, old_p, old_k = _setup()
    q = backbone.extract_query(x[0])
    new = new_prompt_step(x[0], 0, new_p, new_k, backbone, head, 2)
    old_k = np.tile(q, (5, 1))  # every old key matches the query perfectly: score 1 >= alpha
    out = alignment_step(x[0], 0, old_p, old_k, new.alpha, new.fused, backbone, head, 2, tau=0.01)
    np.testing.assert_array_equal(out.weights, [1.0, 1.0])
    expected = np.mean(old_p[out.indices], axis=0) / 2 + new.fused.data / 2
    logits = backbone.forward_with_prompt(x[0], expected, head)
    assert out.loss.item() == pytest.approx(ops.cross_entropy(logits, 0).item(), rel=1e-12)


def test_alignment_gradient_to_old_prompts_is_zero():
    backbone, head, x, y, new_p, new_k, old_p, old_k = _setup()
    p_new = Tensor(new_p, requires_grad=True)
    p_old = Tensor(old_p, requires_grad=True)
    k_old = Tensor(old_k, requires_grad=True)
    with GradientTape() as tape:
        new = new_prompt_step(x, y, p_new, new_k, backbone, head, 2)
        out = alignment_step(x, y, p_old, k_old, new.alpha, new.fused, backbone, head, 2, tau=0.01)
    g_new, g_old, g_key = tape.gradient(out.loss, [p_new, p_old, k_old])
    assert np.all(g_old == 0) and np.all(g_key == 0)
    assert np.any(g_new != 0)


def test_alignment_needs_history():
    backbone, head, x, y, new_p, new_k, *_ = _setup()
    new = new_prompt_step(x, y, new_p, new_k, backbone, head, 2)
    with pytest.raises(NotApplicableError):
        alignment_step(x, y, np.zeros((0, 3, 16)), np.zeros((0, 16)), new.alpha, new.fused, backbone, head, 2, 0.01)


# -- key loss ---------------------------------------------------------------

def test_key_loss_examples():
    q = np.array([0.3, -2.0, 1.0])
    assert key_update_loss(q, np.array([q * 2])).item() == pytest.approx(0.0, abs=1e-15)
    assert key_update_loss(q, np.array([-q])).item() == pytest.approx(2.0, rel=1e-15)
    both = key_update_loss(q, np.array([q, -q, [1.0, 0, 0]]), indices=[0, 1])
    assert both.item() == pytest.approx(2.0, rel=1e-15)


# -- train_domain -----------------------------------------------------------

def _domain_run(lam=0.1, seed=0, with_history=True):
    backbone, head = small_models(0)
    rng = np.random.default_rng(11)
    x, y = rng.normal(size=(40, 16)) * 1.5, rng.integers(0, 4, size=40)
    pool = PromptPool(4, 3, 16)
    old = random_prompt_set(1, 4, 3, 16, rng)
    old.freeze()
    pool.add_set(old)
    new_set = random_prompt_set(2, 4, 3, 16, np.random.default_rng(seed))
    cfg = TrainConfig(lam=lam, top_k=2, epochs=2, batch_size=16, seed=seed)
    history = pool.historical(2)[:2] if with_history else None
    before = (backbone.checksum(), pool.checksum())
    result = train_domain(x, y, new_set, backbone, head, cfg, 2, history=history)
    return result, new_set, head, before, (backbone.checksum(), pool.checksum()), cfg


def test_train_domain_loss_decomposition_and_iterations():
    result, new_set, _, _, _, cfg = _domain_run()
    assert len(result.reports) == cfg.n_iterations(40) == 6
    assert result.adam.step == 6
    for r in result.reports:
        assert r.l_agn is not None
        assert abs(r.loss - (r.l_new + cfg.lam * r.l_agn + cfg.key_loss_weight * r.l_key)) <= 1e-12
        assert np.all((r.old_weights > 0) & (r.old_weights <= 1))


def test_train_domain_isolation_and_learning():
    result, new_set, _, before, after, _ = _domain_run()
    assert before == after
    initial = random_prompt_set(2, 4, 3, 16, np.random.default_rng(0))
    assert not np.array_equal(initial.prompts, new_set.prompts)
    assert not np.array_equal(initial.keys, new_set.keys)


def test_train_domain_deterministic():
    _, a, ha, *_ = _domain_run()
    _, b, hb, *_ = _domain_run()
    np.testing.assert_array_equal(a.prompts, b.prompts)
    np.testing.assert_array_equal(a.keys, b.keys)
    assert ha.checksum() == hb.checksum()


def test_lambda_zero_skips_alignment_and_matches_no_history():
    r0, s0, h0, *_ = _domain_run(lam=0.0)
    r1, s1, h1, *_ = _domain_run(lam=0.1, with_history=False)
    assert all(r.l_agn is None for r in r0.reports)
    np.testing.assert_array_equal(s0.prompts, s1.prompts)
    assert h0.checksum() == h1.checksum()
