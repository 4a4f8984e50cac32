from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quantum_decision.errors import ValidationError
from quantum_decision.model import (
    BehaviorParams,
    DecisionModel,
    ModelDims,
    action_choice_probs,
    apply_generator,
    argmax_choice_probs,
    as_density,
    basis_index,
    basis_state,
    build_generator,
    build_gamma,
    build_hamiltonian,
    build_K,
    build_Pi,
    check_density,
    exact_propagate,
    maximally_mixed,
    random_density,
    steady_state,
    unvec,
    vec,
)


def _default_generator(alpha=0.3, eta=(0.5, 0.5)):
    model = DecisionModel(ModelDims(2, 2), BehaviorParams(alpha, 1.0, 0.5), np.array([[2.0, 1.0], [1.0, 2.0]]))
    return model.generator(eta)


# -- basis and Hamiltonian ---------------------------------------------------


def test_basis_index_is_state_major():
    assert [basis_index(l, j, 3) for l in range(2) for j in range(3)] == list(range(6))
    assert ModelDims(2, 3).state_action(4) == (1, 1)


def test_hamiltonian_two_by_two_blocks():
    expected = np.array([[1, 1, 0, 0], [1, 1, 0, 0], [0, 0, 1, 1], [0, 0, 1, 1]], dtype=float)
    np.testing.assert_array_equal(build_hamiltonian(ModelDims(2, 2)), expected)


def test_hamiltonian_trivial_shapes():
    np.testing.assert_array_equal(build_hamiltonian(ModelDims(1, 1)), [[1.0]])
    np.testing.assert_array_equal(build_hamiltonian(ModelDims(3, 1)), np.eye(3))


def test_hamiltonian_spectrum():
    ev = np.linalg.eigvalsh(build_hamiltonian(ModelDims(2, 3)))
    np.testing.assert_allclose(np.sort(ev), [0, 0, 0, 0, 3, 3], atol=1e-12)


@pytest.mark.parametrize("n,m", [(0, 1), (1, 0), (1.5, 2)])
def test_dims_reject_nonpositive(n, m):
    with pytest.raises(ValidationError):
        ModelDims(n, m)


# -- choice probabilities ----------------------------------------------------


def test_choice_probs_lambda_zero_uniform():
    p = action_choice_probs(np.array([[2.0, 5.0], [1.0, 3.0], [7.0, 1.0]]), 0.0)
    np.testing.assert_allclose(p, np.full((3, 2), 1 / 3))


def test_choice_probs_lambda_one():
    np.testing.assert_allclose(action_choice_probs(np.array([[2.0], [1.0]]), 1.0)[:, 0], [2 / 3, 1 / 3])


def test_choice_probs_lambda_ten_exact_rational():
    p = action_choice_probs(np.array([[2.0], [1.0]]), 10.0)[:, 0]
    oracle = [Fraction(1024, 1025), Fraction(1, 1025)]
    np.testing.assert_allclose(p, [float(x) for x in oracle], rtol=1e-14)


def test_choice_probs_huge_lambda_no_overflow():
    p = action_choice_probs(np.array([[2.0], [1.0]]), 5000.0)
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p[:, 0], [1.0, 0.0])


def test_choice_probs_reject_infinite_lambda():
    with pytest.raises(ValidationError):
        action_choice_probs(np.ones((2, 2)), np.inf)


def test_argmax_ties_go_to_lowest_action():
    p = argmax_choice_probs(np.array([[1.0, 2.0], [1.0, 3.0]]))
    np.testing.assert_array_equal(p, [[1, 0], [0, 1]])


@pytest.mark.parametrize("alpha,lam,phi", [(-0.1, 1, 0.5), (1.1, 1, 0.5), (0.3, -1, 0.5), (0.3, 1, 0.0), (0.3, 1, 1.0)])
def test_behavior_params_bounds(alpha, lam, phi):
    with pytest.raises(ValidationError):
        BehaviorParams(alpha, lam, phi)


# -- Pi, K, gamma ------------------------------------------------------------


def test_Pi_single_state_hand_expansion():
    Pi = build_Pi(np.array([[0.5], [0.5]]), ModelDims(1, 2))
    np.testing.assert_array_equal(Pi, [[0.5, 0.5], [0.5, 0.5]])


def test_Pi_two_by_two_hand_expansion():
    p = np.array([[0.7, 0.2], [0.3, 0.8]])  # p[j, l] = p(a_j | E_l)
    expected = np.array(
        [
            [0.7, 0.3, 0.0, 0.0],
            [0.7, 0.3, 0.0, 0.0],
            [0.0, 0.0, 0.2, 0.8],
            [0.0, 0.0, 0.2, 0.8],
        ]
    )
    np.testing.assert_allclose(build_Pi(p, ModelDims(2, 2)), expected)


def test_Pi_uniform_at_lambda_zero():
    dims = ModelDims(2, 2)
    Pi = build_Pi(action_choice_probs(np.array([[2.0, 1.0], [1.0, 2.0]]), 0.0), dims)
    assert set(np.unique(Pi[Pi > 0])) == {0.5}
    assert np.all(Pi >= 0)


def test_Pi_shape_mismatch():
    with pytest.raises(ValidationError):
        build_Pi(np.ones((3, 2)) / 3, ModelDims(2, 2))


def test_K_two_by_two_hand_expansion():
    eta = (0.25, 0.75)
    expected = np.array(
        [
            [0.25, 0.0, 0.75, 0.0],
            [0.0, 0.25, 0.0, 0.75],
            [0.25, 0.0, 0.75, 0.0],
            [0.0, 0.25, 0.0, 0.75],
        ]
    )
    np.testing.assert_allclose(build_K(eta, ModelDims(2, 2)), expected)


def test_K_single_state_is_identity():
    np.testing.assert_array_equal(build_K((1.0,), ModelDims(1, 2)), np.eye(2))


def test_K_uniform_nonzero_entries():
    K = build_K((1 / 3, 1 / 3, 1 / 3), ModelDims(3, 2))
    np.testing.assert_allclose(K[K > 0], 1 / 3)
    assert K.min() >= 0 and K.max() <= 1


def test_K_rejects_bad_belief():
    with pytest.raises(ValidationError):
        build_K((0.5, 0.6), ModelDims(2, 2))
    with pytest.raises(ValidationError):
        build_K((1.0,), ModelDims(2, 2))


def test_gamma_limits():
    dims = ModelDims(2, 2)
    Pi = build_Pi(np.array([[0.7, 0.2], [0.3, 0.8]]), dims)
    K = build_K((0.4, 0.6), dims)
    np.testing.assert_array_equal(build_gamma(Pi, K, 0.0), Pi.T)
    np.testing.assert_array_equal(build_gamma(Pi, K, 1.0), K.T)
    np.testing.assert_allclose(build_gamma(Pi, Pi, 0.5), Pi.T)


def test_gamma_shape_mismatch():
    with pytest.raises(ValidationError):
        build_gamma(np.eye(4), np.eye(2), 0.5)


@settings(max_examples=40, deadline=None)
@given(
    n=st.integers(1, 3),
    m=st.integers(1, 3),
    lam=st.floats(0, 20),
    phi=st.floats(0.01, 0.99),
    seed=st.integers(0, 2**31),
)
def test_gamma_columns_are_probability_vectors(n, m, lam, phi, seed):
    rng = np.random.default_rng(seed)
    dims = ModelDims(n, m)
    util = rng.uniform(0.5, 3.0, size=(m, n))
    eta = rng.dirichlet(np.ones(n))
    gam = build_gamma(build_Pi(action_choice_probs(util, lam), dims), build_K(eta, dims), phi)
    assert np.all(gam >= 0)
    np.testing.assert_allclose(gam.sum(axis=0), 1.0, atol=1e-12)


# -- generator ---------------------------------------------------------------


def test_generator_alpha_one_has_no_hamiltonian_part(rng):
    gen = _default_generator(alpha=1.0)
    rho = random_density(4, rng)
    np.testing.assert_allclose(gen.hamiltonian_part(rho), 0.0, atol=1e-15)
    np.testing.assert_allclose(apply_generator(gen, rho), gen.dissipator_part(rho), atol=1e-15)


def test_generator_alpha_zero_fixes_maximally_mixed():
    gen = _default_generator(alpha=0.0)
    np.testing.assert_allclose(apply_generator(gen, maximally_mixed(4)), 0.0, atol=1e-15)


def test_generator_alpha_zero_commuting_state_is_fixed():
    gen = _default_generator(alpha=0.0)
    _, vecs = np.linalg.eigh(gen.H)
    rho = vecs @ np.diag([0.4, 0.3, 0.2, 0.1]) @ vecs.T
    np.testing.assert_allclose(apply_generator(gen, rho), 0.0, atol=1e-14)


def test_generator_trace_zero_and_hermitian(rng):
    gen = _default_generator()
    for _ in range(100):
        out = apply_generator(gen, random_density(4, rng))
        assert abs(np.trace(out)) < 1e-12
        np.testing.assert_allclose(out, out.conj().T, atol=1e-12)


def test_superoperator_matches_direct_application(rng):
    gen = _default_generator()
    rho = random_density(4, rng)
    np.testing.assert_allclose(unvec(gen.superoperator() @ vec(rho), 4), apply_generator(gen, rho), atol=1e-13)


def test_vec_is_column_stacking():
    a = np.array([[1, 2], [3, 4]])
    np.testing.assert_array_equal(vec(a), [1, 3, 2, 4])
    np.testing.assert_array_equal(unvec(vec(a), 2), a)


def test_steady_state_is_annihilated():
    gen = _default_generator()
    rho = steady_state(gen)
    assert check_density(rho) == []
    np.testing.assert_allclose(apply_generator(gen, rho), 0.0, atol=1e-12)


def test_exact_propagate_zero_time(rng):
    gen = _default_generator()
    rho = random_density(4, rng)
    np.testing.assert_allclose(exact_propagate(gen, rho, 0.0), rho, atol=1e-15)


@pytest.mark.parametrize("t", [0.1, 1.0, 10.0])
def test_exact_propagate_preserves_trace(rng, t):
    gen = _default_generator()
    out = exact_propagate(gen, random_density(4, rng), t)
    assert abs(np.trace(out) - 1) < 1e-12
    assert check_density(out) == []


def test_exact_propagate_semigroup(rng):
    gen = _default_generator()
    rho = random_density(4, rng)
    two_step = exact_propagate(gen, exact_propagate(gen, rho, 0.3), 0.7)
    np.testing.assert_allclose(two_step, exact_propagate(gen, rho, 1.0), atol=1e-9)


def test_exact_propagate_rejects_negative_time(rng):
    with pytest.raises(ValidationError):
        exact_propagate(_default_generator(), maximally_mixed(4), -1.0)


# -- density helpers ---------------------------------------------------------


def test_check_density_reports_each_failure():
    assert check_density(maximally_mixed(3)) == []
    assert check_density(np.diag([0.5, 0.6])) != []
    assert check_density(np.diag([1.5, -0.5])) != []
    assert check_density(np.array([[0.5, 1.0], [0.0, 0.5]])) != []


def test_as_density_rejects_invalid():
    with pytest.raises(ValidationError):
        as_density(np.diag([1.0, 1.0]))


def test_random_density_rank(rng):
    rho = random_density(4, rng, rank=1)
    assert check_density(rho) == []
    assert np.linalg.matrix_rank(rho, tol=1e-10) == 1
    assert basis_state(2, 4)[2, 2] == 1.0


def test_generator_rejects_wrong_gamma_shape():
    with pytest.raises(ValidationError):
        build_generator(BehaviorParams(0.3, 1.0, 0.5), np.ones((3, 3)) / 3, ModelDims(2, 2))
