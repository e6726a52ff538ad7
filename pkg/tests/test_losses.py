import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qjfuse import autodiff as ad
from qjfuse.autodiff import ComplexTensor, Tape
from qjfuse.losses import (ContrastiveConfig, contrastive_loss, cross_attention_vectors, init_attention,
                           init_loss_weights, pairwise_contrastive, task_loss, total_loss)
from qjfuse.states import random_state

# log(1 + exp(-1 / 0.07)) evaluated in double precision
ORTHOGONAL_NEGATIVE_LOSS = 6.248747557120388e-07


def t(x):
    return ad.tensor(np.asarray(x, dtype=np.float64))


def test_task_loss_examples():
    assert task_loss(t(np.eye(3)), [0, 1, 2]).item() == 0.0
    uniform = np.full((4, 3), 1 / 3)
    assert task_loss(t(uniform), [0, 1, 2, 1]).item() == pytest.approx(math.log(3), abs=1e-9)
    clamped = task_loss(t([[0.0, 1.0]]), [0]).item()
    assert np.isfinite(clamped) and clamped <= -math.log(1e-12) + 1e-12
    assert clamped == pytest.approx(27.631021115928547, abs=1e-9)


def test_task_loss_rejects_bad_labels():
    with pytest.raises(ValueError):
        task_loss(t(np.full((2, 3), 1 / 3)), [0, 3])
    with pytest.raises(ValueError):
        task_loss(t(np.full((2, 3), 1 / 3)), [0])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(2, 5), st.integers(0, 2 ** 31))
def test_task_loss_is_nonnegative(B, C, seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(C), size=B)
    assert task_loss(t(p), rng.integers(0, C, size=B)).item() >= 0.0


def test_contrastive_single_sample_is_zero():
    rng = np.random.default_rng(0)
    assert contrastive_loss(t(rng.normal(size=(1, 5))), t(rng.normal(size=(1, 5)))).item() == 0.0


def test_contrastive_orthogonal_negative_fixture():
    z = t(np.eye(2))
    loss = contrastive_loss(z, z, ContrastiveConfig(0.07)).item()
    assert loss == pytest.approx(ORTHOGONAL_NEGATIVE_LOSS, rel=1e-9)
    assert loss <= 1e-5


def test_identical_positives_give_log_batch_size():
    za = t(np.tile([1.0, 2.0, -1.0], (5, 1)))
    assert contrastive_loss(za, za).item() == pytest.approx(math.log(5), abs=1e-9)


@settings(max_examples=30, deadline=None)
# the 1e-12 cosine guard is only negligible while the norm product stays well above it
@given(st.integers(2, 6), st.floats(0.1, 1e3), st.floats(0.1, 1e3), st.integers(0, 2 ** 31))
def test_contrastive_is_scale_invariant(M, sa, sb, seed):
    rng = np.random.default_rng(seed)
    za, zb = rng.normal(size=(M, 4)), rng.normal(size=(M, 4))
    base = contrastive_loss(t(za), t(zb)).item()
    assert contrastive_loss(t(sa * za), t(sb * zb)).item() == pytest.approx(base, abs=1e-9)


def test_contrastive_config_validation():
    with pytest.raises(ValueError):
        ContrastiveConfig(temperature=0.0)
    with pytest.raises(ValueError):
        ContrastiveConfig(similarity="dot")


def test_cross_attention_symmetry_and_zero_values():
    rng = np.random.default_rng(1)
    params = init_attention(4, 3, rng)
    s = ComplexTensor.from_numpy(random_state(4, rng, (3,)))
    za, zb = cross_attention_vectors(s, s, params)
    np.testing.assert_allclose(za.numpy(), zb.numpy(), atol=1e-15)
    params["attn.Wv"] = ad.parameter(np.zeros_like(params["attn.Wv"].data), "attn.Wv")
    other = ComplexTensor.from_numpy(random_state(4, rng, (3,)))
    za, zb = cross_attention_vectors(s, other, params)
    assert np.all(za.numpy() == 0) and np.all(zb.numpy() == 0)


def test_attention_tokenization_falls_back_when_width_is_odd_multiple():
    rng = np.random.default_rng(2)
    params = init_attention(3, 2, rng)          # width 6 -> 2 tokens of 3
    s = ComplexTensor.from_numpy(random_state(3, rng, (2,)))
    za, _ = cross_attention_vectors(s, s, params)
    assert za.shape == (2, 4)


def test_cross_attention_grad_check():
    rng = np.random.default_rng(3)
    params = init_attention(4, 3, rng)
    a = ComplexTensor.from_numpy(random_state(4, rng, (3,)), requires_grad=True)
    b = ComplexTensor.from_numpy(random_state(4, rng, (3,)), requires_grad=True)
    w = rng.normal(size=(3, 12))

    def build():
        za, zb = cross_attention_vectors(a, b, params)
        return ad.sum(ad.mul(ad.add(za, ad.mul(zb, 0.5)), w))

    rep = ad.grad_check(build, {**params, "a.re": a.re, "a.im": a.im, "b.re": b.re})
    assert rep.passed, rep.lines()


def test_contrastive_and_task_grad_check():
    rng = np.random.default_rng(4)
    za = ad.parameter(rng.normal(size=(4, 3)), "za")
    zb = ad.parameter(rng.normal(size=(4, 3)), "zb")
    rep = ad.grad_check(lambda: contrastive_loss(za, zb, ContrastiveConfig(0.5)), {"za": za, "zb": zb})
    assert rep.passed, rep.lines()
    logits = ad.parameter(rng.normal(size=(5, 3)), "logits")
    labels = rng.integers(0, 3, size=5)
    rep = ad.grad_check(lambda: task_loss(ad.softmax(logits), labels), {"logits": logits})
    assert rep.passed, rep.lines()


def test_pairwise_contrastive_averages_all_pairs():
    rng = np.random.default_rng(5)
    params = init_attention(4, 3, rng)
    states = [ComplexTensor.from_numpy(random_state(4, rng, (3,))) for _ in range(3)]
    expected = np.mean([contrastive_loss(*cross_attention_vectors(states[i], states[j], params)).item()
                        for i, j in [(0, 1), (0, 2), (1, 2)]])
    assert pairwise_contrastive(states, params).item() == pytest.approx(expected, abs=1e-12)
    assert pairwise_contrastive(states[:1], params).item() == 0.0


def test_total_loss_examples():
    w = init_loss_weights()
    assert total_loss(t(1.3), t(0.4), w).item() == pytest.approx(1.7, abs=1e-12)
    zero = total_loss(t(0.0), t(0.0), w).item()
    assert zero == pytest.approx(0.0, abs=1e-12)
    w2 = {"loss.w_task": ad.parameter(0.3), "loss.w_con": ad.parameter(-1.0)}
    a, b = math.log1p(math.exp(0.3)), math.log1p(math.exp(-1.0))
    assert total_loss(t(0.0), t(0.0), w2).item() == pytest.approx(-0.5 * (math.log(a) + math.log(b)), abs=1e-12)


def test_weight_gradient_pushes_alpha_down_for_large_task_loss():
    w = init_loss_weights()
    with Tape() as tape:
        loss = total_loss(t(2.0), t(0.1), w)
    tape.backward(loss)
    g = tape.grad(w["loss.w_task"])
    assert g > 0
    rep = ad.grad_check(lambda: total_loss(t(2.0), t(0.1), w), w)
    assert rep.passed, rep.lines()


@pytest.mark.parametrize("ell", [0.25, 1.0, 3.0])
def test_barrier_optimum_is_one_over_two_ell(ell):
    seeds = np.linspace(-8, 4, 24001)
    vals = total_loss(t(ell), t(0.0), {"loss.w_task": t(seeds), "loss.w_con": t(0.0)}).numpy()
    alpha = math.log1p(math.exp(seeds[int(np.argmin(vals))]))
    assert alpha == pytest.approx(1 / (2 * ell), rel=1e-3)
