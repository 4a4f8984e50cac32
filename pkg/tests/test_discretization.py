import numpy as np
import pytest

from quantum_decision.discretization import (
    EXACT,
    PAPER,
    ActionProjectors,
    action_outcome_table,
    apply_outcome,
    average_map,
    build_kraus,
    check_validity,
    convergence_order,
    measure_action,
    one_step_error,
    outcome_probs,
    population_drift,
    step_interval,
)
from quantum_decision.errors import (
    DegenerateDistribution,
    ValidationError,
    ValidityBoundViolated,
    ZeroProbabilityOutcome,
)
from quantum_decision.model import (
    BehaviorParams,
    DecisionModel,
    LindbladGenerator,
    ModelDims,
    basis_state,
    build_generator,
    build_hamiltonian,
    check_density,
    exact_propagate,
    maximally_mixed,
    random_density,
)

DIMS = ModelDims(2, 2)


def _generator(alpha=0.3, eta=(0.5, 0.5), lam=1.0, phi=0.5, dims=DIMS, util=None):
    util = np.array([[2.0, 1.0], [1.0, 2.0]]) if util is None else util
    return DecisionModel(dims, BehaviorParams(alpha, lam, phi), util).generator(eta)


def _rate_free(alpha=0.3, dims=DIMS):
    return build_generator(BehaviorParams(alpha, 1.0, 0.5), np.zeros((dims.d, dims.d)), dims)


# -- Kraus construction ------------------------------------------------------


def test_rate_free_set_is_single_first_order_unitary():
    gen = _rate_free(alpha=0.3)
    ks = build_kraus(gen, 2, 0.01, PAPER)
    assert len(ks) == 1
    expected = np.eye(4) - 1j * 0.02 * 0.7 * build_hamiltonian(DIMS)
    np.testing.assert_allclose(ks.ops[0], expected, atol=1e-15)


def test_rate_free_exact_mode_is_unitary():
    ks = build_kraus(_rate_free(alpha=0.0), 3, 0.01, EXACT)
    U = ks.ops[0]
    np.testing.assert_allclose(U.conj().T @ U, np.eye(4), atol=1e-13)


def test_exact_mode_completeness_on_random_models():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(50):
        n, m = rng.integers(1, 4, size=2)
        dims = ModelDims(int(n), int(m))
        gen = _generator(
            alpha=rng.uniform(), eta=rng.dirichlet(np.ones(dims.n)), lam=rng.uniform(0, 5),
            phi=rng.uniform(0.05, 0.95), dims=dims, util=rng.uniform(0.5, 3, size=(dims.m, dims.n)),
        )
        ks = build_kraus(gen, int(rng.integers(1, 4)), 0.01, EXACT)
        worst = max(worst, ks.completeness_residual)
    assert worst <= 1e-12


def test_first_order_mode_completeness_defect_is_second_order():
    gen = _generator()
    for T in (1, 2, 3):
        ks = build_kraus(gen, T, 0.01, PAPER)
        assert 0 < ks.completeness_residual <= 10 * ks.step**2


def test_jump_operators_carry_alpha_weighted_rates():
    gen = _generator(alpha=0.4)
    ks = build_kraus(gen, 1, 0.01, PAPER)
    for M, (a, b) in zip(ks.ops[1:], ks.labels[1:]):
        assert np.count_nonzero(M) == 1
        assert M[a, b] ** 2 == pytest.approx(0.01 * 0.4 * gen.gamma[a, b])


def test_validity_bound_is_a_hard_error():
    gen = _generator()
    with pytest.raises(ValidityBoundViolated):
        build_kraus(gen, 3, 0.5, PAPER)
    assert check_validity(gen, 3, 0.01) < 1


def test_unknown_mode_rejected():
    with pytest.raises(ValidationError):
        build_kraus(_generator(), 1, 0.01, "second-order")


# -- outcomes ----------------------------------------------------------------


def test_exact_mode_probabilities_sum_to_one(rng):
    ks = build_kraus(_generator(), 2, 0.01, EXACT)
    for _ in range(20):
        _, total = outcome_probs(random_density(4, rng), ks)
        assert abs(total - 1) <= 1e-12


def test_first_order_mode_prenormalization_sum(rng):
    for T in (1, 2, 3):
        ks = build_kraus(_generator(), T, 0.01, PAPER)
        for _ in range(50):
            p, total = outcome_probs(random_density(4, rng), ks)
            assert abs(total - 1) <= 10 * ks.step**2
            assert abs(p.sum() - 1) <= 1e-12


def test_rate_free_single_outcome_is_certain(rng):
    p, _ = outcome_probs(random_density(4, rng), build_kraus(_rate_free(), 1, 0.01, PAPER))
    np.testing.assert_array_equal(p, [1.0])


def test_degenerate_distribution():
    zero = LindbladGenerator(H=np.zeros((2, 2)), gamma=np.zeros((2, 2)), alpha=0.0)
    ks = build_kraus(zero, 1, 0.01, PAPER)
    with pytest.raises(DegenerateDistribution):
        outcome_probs(np.zeros((2, 2)), ks)


def test_identity_outcome_leaves_state_unchanged(rng):
    ks = build_kraus(_rate_free(alpha=1.0), 1, 0.01, PAPER)
    np.testing.assert_array_equal(ks.ops[0], np.eye(4))
    rho = random_density(4, rng)
    np.testing.assert_allclose(apply_outcome(rho, ks, 0), rho, atol=1e-15)


def test_jump_outcome_collapses_onto_target_basis_state(rng):
    ks = build_kraus(_generator(), 1, 0.01, PAPER)
    rho = random_density(4, rng)
    for mu in range(1, len(ks)):
        a, _ = ks.labels[mu]
        np.testing.assert_allclose(apply_outcome(rho, ks, mu), basis_state(a, 4), atol=1e-15)


def test_zero_probability_outcome():
    ks = build_kraus(_generator(), 1, 0.01, PAPER)
    mu = next(i for i, lab in enumerate(ks.labels) if lab is not None and lab[1] == 1)
    with pytest.raises(ZeroProbabilityOutcome):
        apply_outcome(basis_state(0, 4), ks, mu)


@pytest.mark.parametrize("mode", [PAPER, EXACT])
def test_post_outcome_states_are_valid(rng, mode):
    ks = build_kraus(_generator(), 3, 0.01, mode)
    rho = random_density(4, rng)
    for mu in range(len(ks)):
        out = apply_outcome(rho, ks, mu)
        assert abs(np.trace(out) - 1) <= 1e-12
        assert check_density(out) == []


@pytest.mark.parametrize("mode", [PAPER, EXACT])
def test_average_map_is_probability_weighted_mixture(rng, mode):
    ks = build_kraus(_generator(), 2, 0.01, mode)
    rho = random_density(4, rng)
    p, _ = outcome_probs(rho, ks)
    mixture = sum(pm * apply_outcome(rho, ks, mu) for mu, pm in enumerate(p))
    np.testing.assert_allclose(average_map(rho, ks), mixture, atol=1e-12)


def test_exact_mode_average_map_keeps_trace(rng):
    ks = build_kraus(_generator(), 3, 0.01, EXACT)
    ops = ks.ops
    rho = random_density(4, rng)
    raw = np.einsum("kij,jl,kml->im", ops, rho, ops.conj())
    assert abs(np.trace(raw) - 1) <= 1e-12


@pytest.mark.parametrize("T", [1, 2, 3])
def test_average_map_tracks_exact_propagator(rng, T):
    gen = _generator()
    ks = build_kraus(gen, T, 0.01, PAPER)
    rho = random_density(4, rng)
    err = np.linalg.norm(average_map(rho, ks) - exact_propagate(gen, rho, ks.step))
    assert err <= 5 * ks.step**2


# -- action measurement ------------------------------------------------------


def test_projector_algebra_exact():
    proj = ActionProjectors(ModelDims(3, 2))
    P = proj.projectors
    assert P.dtype.kind == "i"
    for a in range(2):
        np.testing.assert_array_equal(P[a] @ P[a], P[a])
        for b in range(a + 1, 2):
            np.testing.assert_array_equal(P[a] @ P[b], 0)
    np.testing.assert_array_equal(P.sum(axis=0), np.eye(6, dtype=int))


def test_measuring_an_action_eigenstate(rng):
    proj = ActionProjectors(DIMS)
    rho = basis_state(3, 4)  # state E_2, action a_2
    a, post = measure_action(rho, proj, rng)
    assert a == 1
    np.testing.assert_allclose(post, rho)


def test_maximally_mixed_action_probabilities():
    proj = ActionProjectors(ModelDims(3, 4))
    np.testing.assert_allclose(proj.probs(maximally_mixed(12)), 0.25)


def test_measurement_frequencies_match_born_rule():
    proj = ActionProjectors(DIMS)
    rho = random_density(4, np.random.default_rng(3))
    exact = proj.probs(rho)
    rng = np.random.default_rng(4)
    n = 100_000
    counts = np.bincount([measure_action(rho, proj, rng)[0] for _ in range(n)], minlength=2)
    freq = counts / n
    assert np.all(np.abs(freq - exact) <= 3 * np.sqrt(exact * (1 - exact) / n))


def test_measurement_is_repeatable(rng):
    proj = ActionProjectors(DIMS)
    a, post = measure_action(random_density(4, rng), proj, rng)
    b, again = measure_action(post, proj, rng)
    assert a == b
    np.testing.assert_allclose(again, post, atol=1e-15)


def test_measurement_reproducible_from_seed():
    proj = ActionProjectors(DIMS)
    rho = maximally_mixed(4)
    first = [measure_action(rho, proj, np.random.default_rng(9))[0] for _ in range(3)]
    assert len(set(first)) == 1


def test_measurement_on_null_matrix():
    with pytest.raises(DegenerateDistribution):
        measure_action(np.zeros((4, 4)), ActionProjectors(DIMS), np.random.default_rng(0))


# -- full interaction --------------------------------------------------------


def test_step_interval_marginal_action_law():
    gen = _generator()
    proj = ActionProjectors(DIMS)
    rho = random_density(4, np.random.default_rng(5))
    ks = build_kraus(gen, 2, 0.01, PAPER)
    exact = np.zeros(2)
    for _, a, p, _ in action_outcome_table(rho, ks, proj):
        exact[a] += p
    rng = np.random.default_rng(6)
    n = 100_000
    ks_cache = build_kraus(gen, 2, 0.01, PAPER)
    p_mu, _ = outcome_probs(rho, ks_cache)
    # vectorized replay of step_interval's two-stage sampling
    mus = rng.choice(len(p_mu), size=n, p=p_mu)
    mids = [apply_outcome(rho, ks_cache, mu) for mu in range(len(p_mu))]
    pa = np.array([proj.probs(m) for m in mids])
    actions = (rng.random(n) >= pa[mus, 0]).astype(int)
    freq = np.bincount(actions, minlength=2) / n
    assert np.all(np.abs(freq - exact) <= 3 * np.sqrt(exact * (1 - exact) / n))
    # and the real composition returns valid states with the sampled action's support
    for _ in range(200):
        mu, a, post = step_interval(rho, gen, 2, 0.01, rng, proj)
        assert check_density(post) == []
        assert proj.probs(post)[a] == pytest.approx(1.0)


def test_step_interval_rate_free_reduces_to_measurement(rng):
    gen = _rate_free()
    mu, a, post = step_interval(basis_state(0, 4), gen, 1, 0.01, rng, ActionProjectors(DIMS))
    assert mu == 0
    assert ActionProjectors(DIMS).probs(post)[a] == pytest.approx(1.0)


def test_outcome_table_probabilities_sum_to_one(rng):
    ks = build_kraus(_generator(), 3, 0.01, EXACT)
    rows = action_outcome_table(random_density(4, rng), ks, ActionProjectors(DIMS))
    assert sum(p for _, _, p, _ in rows) == pytest.approx(1.0, abs=1e-12)


# -- accuracy ----------------------------------------------------------------


def test_one_step_error_at_default_step(rng):
    gen = _generator()
    for mode in (PAPER, EXACT):
        assert one_step_error(gen, 0.01, random_density(4, rng), mode) <= 1e-3


@pytest.mark.parametrize("mode", [PAPER, EXACT])
def test_convergence_order_is_two(rng, mode):
    rhos = [random_density(4, rng) for _ in range(5)]
    errs, slope = convergence_order(_generator(), (0.04, 0.02, 0.01, 0.005), rhos, mode)
    assert 1.8 <= slope <= 2.2
    assert np.all(np.diff(errs) > 0)


def test_convergence_order_unitary_part(rng):
    rhos = [random_density(4, rng) for _ in range(5)]
    _, slope = convergence_order(_rate_free(alpha=0.0), (0.04, 0.02, 0.01, 0.005), rhos, PAPER)
    assert slope == pytest.approx(2.0, abs=0.05)


@pytest.mark.parametrize("ladder", [(0.01,), (0.01, 0.02), (0.01, 0.01, 0.02), (0.01, 0.02, -0.04)])
def test_convergence_order_rejects_bad_ladder(ladder):
    with pytest.raises(ValidationError):
        convergence_order(_generator(), ladder, [maximally_mixed(4)])


# -- population drift --------------------------------------------------------


def test_population_drift_matches_enumeration(rng):
    ks = build_kraus(_generator(), 2, 0.01, EXACT)
    rho = random_density(4, rng)
    mean = sum(p * np.real(np.diagonal(post)) for _, _, p, post in action_outcome_table(rho, ks, ActionProjectors(DIMS)))
    np.testing.assert_allclose(population_drift(rho, ks), mean - np.real(np.diagonal(rho)), atol=1e-14)


def test_populations_move_under_jumps(rng):
    """Jump branches relocate population, so expected populations are not conserved."""
    ks = build_kraus(_generator(), 1, 0.01, EXACT)
    drift = population_drift(random_density(4, rng), ks)
    assert abs(drift.sum()) <= 1e-14
    assert np.max(np.abs(drift)) > 1e-4
