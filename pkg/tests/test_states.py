import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qjfuse import autodiff as ad
from qjfuse.autodiff import ComplexTensor
from qjfuse.states import (NearZeroNorm, basis_state, density_from_pure, density_matrix, entropy_of_density,
                           maximally_entangled, measure_prob, normalize, partial_trace, random_state,
                           schmidt_coefficients, tensor_product, uniform_state, von_neumann_entropy)


def ct(z):
    return ComplexTensor.from_numpy(np.asarray(z, dtype=np.complex128))


def test_normalize_examples():
    np.testing.assert_allclose(normalize(ct([2.0, 0.0])).numpy(), [1.0, 0.0])
    out = normalize(ct([1 + 1j, 0.0])).numpy()
    np.testing.assert_allclose(out, [(1 + 1j) / math.sqrt(2), 0.0], atol=1e-15)
    assert np.linalg.norm(out) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(NearZeroNorm):
        normalize(ct([0.0, 0.0, 0.0]))


def test_tensor_product_examples():
    e0 = basis_state(2, 0)
    np.testing.assert_array_equal(tensor_product(ct(e0), ct(e0)).numpy(), [1, 0, 0, 0])
    plus = np.array([1, 1]) / math.sqrt(2)
    np.testing.assert_allclose(tensor_product(ct(plus), ct(e0)).numpy(), [1 / math.sqrt(2), 0, 1 / math.sqrt(2), 0])
    with pytest.raises(ValueError):
        tensor_product(ct(np.ones(2)), ct(np.ones(3)))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2 ** 31))
def test_norm_is_multiplicative(d, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=d) + 1j * rng.normal(size=d)
    b = rng.normal(size=d) + 1j * rng.normal(size=d)
    n = np.linalg.norm(tensor_product(ct(a), ct(b)).numpy())
    assert n == pytest.approx(np.linalg.norm(a) * np.linalg.norm(b), rel=1e-12)


def test_measure_prob_examples():
    s = ct(np.array([1, 1]) / math.sqrt(2))
    assert measure_prob(ct(basis_state(2, 0)), s).item() == pytest.approx(0.5, abs=1e-15)
    assert measure_prob(s, s).item() == pytest.approx(1.0, abs=1e-15)
    assert measure_prob(ct(np.array([1, -1]) / math.sqrt(2)), s).item() == pytest.approx(0.0, abs=1e-15)


def test_complete_bank_probabilities_sum_to_one():
    rng = np.random.default_rng(0)
    J = 9
    Q, _ = np.linalg.qr(rng.normal(size=(J, J)) + 1j * rng.normal(size=(J, J)))
    s = ct(random_state(J, rng))
    total = sum(measure_prob(ct(Q[:, i]), s).item() for i in range(J))
    assert total == pytest.approx(1.0, abs=1e-9)


def test_density_from_pure_examples():
    e0, e1 = basis_state(2, 0), basis_state(2, 1)
    np.testing.assert_array_equal(density_from_pure([e0], [1.0]), [[1, 0], [0, 0]])
    np.testing.assert_allclose(density_from_pure([e0, e1], [0.5, 0.5]), np.eye(2) / 2)
    with pytest.raises(ValueError):
        density_from_pure([e0, e1], [0.5, 0.6])


def test_random_ensemble_is_a_density_matrix():
    rng = np.random.default_rng(1)
    states = random_state(5, rng, (7,))
    p = rng.random(7)
    rho = density_from_pure(list(states), p / p.sum())
    np.testing.assert_allclose(rho, rho.conj().T, atol=1e-12)
    assert np.trace(rho).real == pytest.approx(1.0, abs=1e-9)
    assert np.linalg.eigvalsh(rho).min() >= -1e-9


def test_differentiable_density_matrix_matches_outer_product():
    rng = np.random.default_rng(2)
    psi = random_state(4, rng, (3,))
    rho = density_matrix(ct(psi)).numpy()
    np.testing.assert_allclose(rho, np.einsum("bi,bj->bij", psi, psi.conj()), atol=1e-15)


def test_partial_trace_examples():
    rng = np.random.default_rng(3)
    a, b = random_state(3, rng), random_state(3, rng)
    ab = np.kron(a, b)
    np.testing.assert_allclose(partial_trace(ab, "A"), np.outer(a, a.conj()), atol=1e-12)
    rho = density_from_pure([ab], [1.0])
    np.testing.assert_allclose(partial_trace(rho, "A"), np.outer(a, a.conj()), atol=1e-9)
    np.testing.assert_allclose(partial_trace(rho, "B"), np.outer(b, b.conj()), atol=1e-9)
    bell = maximally_entangled(2)
    np.testing.assert_allclose(partial_trace(bell, "A"), np.eye(2) / 2, atol=1e-15)
    for _ in range(20):
        s = random_state(16, rng)
        assert np.trace(partial_trace(s, "B")).real == pytest.approx(1.0, abs=1e-9)


def test_partial_trace_of_vector_matches_density_path():
    rng = np.random.default_rng(4)
    s = random_state(12, rng)
    rho = np.outer(s, s.conj())
    for keep in "AB":
        np.testing.assert_allclose(partial_trace(s, keep, (3, 4)), partial_trace(rho, keep, (3, 4)), atol=1e-12)


def test_schmidt_examples():
    rng = np.random.default_rng(5)
    lam = schmidt_coefficients(np.kron(random_state(4, rng), random_state(4, rng)))
    np.testing.assert_allclose(lam, [1, 0, 0, 0], atol=1e-12)
    np.testing.assert_allclose(schmidt_coefficients(maximally_entangled(2)), [1 / math.sqrt(2)] * 2, atol=1e-15)
    s = random_state(9, rng)
    lam = schmidt_coefficients(s)
    assert np.all(np.diff(lam) <= 0) and np.all(lam >= 0)
    np.testing.assert_allclose(np.sort(lam ** 2), np.sort(np.linalg.eigvalsh(partial_trace(s, "A"))), atol=1e-12)


def test_schmidt_rejects_non_finite():
    with pytest.raises(np.linalg.LinAlgError):
        schmidt_coefficients(np.array([np.nan, 0, 0, 1.0]))


def test_entropy_examples():
    rng = np.random.default_rng(6)
    assert von_neumann_entropy(np.kron(random_state(5, rng), random_state(5, rng))) == pytest.approx(0, abs=1e-9)
    assert von_neumann_entropy(maximally_entangled(2)) == pytest.approx(math.log(2), abs=1e-9)
    assert von_neumann_entropy(maximally_entangled(10)) == pytest.approx(math.log(10), abs=1e-9)
    assert von_neumann_entropy(maximally_entangled(2), base=2) == pytest.approx(1.0, abs=1e-12)


def test_entropy_is_symmetric_and_bounded():
    rng = np.random.default_rng(7)
    states = random_state(16, rng, (200,))
    S = von_neumann_entropy(states)
    assert S.shape == (200,)
    assert np.all(S >= 0) and np.all(S <= math.log(4) + 1e-12)
    for s, val in zip(states[:50], S[:50]):
        assert entropy_of_density(partial_trace(s, "A")) == pytest.approx(val, abs=1e-9)
        assert entropy_of_density(partial_trace(s, "B")) == pytest.approx(val, abs=1e-9)


def test_uniform_state_has_unit_norm():
    assert np.linalg.norm(uniform_state(7)) == pytest.approx(1.0, abs=1e-15)


def test_analysis_ops_stay_off_the_tape():
    v = ComplexTensor.from_numpy(np.array([1.0, 0, 0, 1.0]) / math.sqrt(2), requires_grad=True)
    with ad.Tape() as tape:
        S = von_neumann_entropy(v)
    assert isinstance(S, float) and tape.nodes == []
