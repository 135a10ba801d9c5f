import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pulsedrf.engine import (
    IntegratorError,
    System,
    UnconvergedTailError,
    build_basis,
    build_moment_matrix,
    build_sandwich_map,
    evolve_linear,
    horizon,
    moments_on_grid,
    propagate_density,
    propagate_moments,
    solve_linear,
    step_propagators,
    tail_residual,
)
from pulsedrf.model import (
    PulseEnvelope,
    excited_state,
    ground_state,
    liouvillian_parts,
    make_model,
    unvec,
    vec,
)

from conftest import random_density

MODELS = [
    make_model(math.pi),
    make_model(3 * math.pi, detuning=0.5, sensors=[(0.0, 2.0)]),
    make_model(4 * math.pi, sensors=[(1.0, 0.2), (-1.0, 0.2)]),
]


def test_basis_sizes_and_identity_first():
    b1 = build_basis(make_model(1.0))
    assert b1.labels == (("1",), ("a",), ("ad",), ("n",))
    np.testing.assert_array_equal(b1.matrices[0], np.eye(2))
    b3 = build_basis(make_model(1.0, sensors=[(0, 1), (0, 1)]))
    assert b3.size == 64
    np.testing.assert_array_equal(b3.matrices[0], np.eye(8))


def test_basis_elements_distinct():
    b = build_basis(make_model(1.0, sensors=[(0, 1), (0, 1)]))
    flat = b.matrices.reshape(b.size, -1)
    # linearly independent, hence pairwise distinct
    assert np.linalg.matrix_rank(flat) == b.size


@pytest.mark.parametrize("model", MODELS)
def test_identity_row_is_zero(model):
    M = build_moment_matrix(model, build_basis(model))
    assert np.all(M.static[0] == 0) and np.all(M.drive[0] == 0)


def test_optical_bloch_equations():
    delta, omega = 0.7, 2.3
    m = make_model(1.0, detuning=delta)
    M = build_moment_matrix(m, build_basis(m))
    A = M.static + omega * M.drive
    s, sd, n = 1, 2, 3
    assert A[s, 0] == pytest.approx(-0.5j * omega)
    assert A[s, s] == pytest.approx(-1j * delta - 0.5)
    assert A[s, n] == pytest.approx(1j * omega)
    assert A[sd, sd] == pytest.approx(1j * delta - 0.5)
    assert A[n, s] == pytest.approx(0.5j * omega)
    assert A[n, sd] == pytest.approx(-0.5j * omega)
    assert A[n, n] == pytest.approx(-1.0)


@pytest.mark.parametrize("model", MODELS)
def test_adjoint_consistency(model, rng):
    basis = build_basis(model)
    M = build_moment_matrix(model, basis)
    l0, l1 = liouvillian_parts(model)
    for _ in range(100 // len(MODELS)):
        t = rng.uniform(0, 1.0)
        om = model.pulse(t)
        rho = random_density(model.hilbert_dim, rng)
        drho = unvec((l0 + om * l1) @ vec(rho))
        lhs = basis.expectations(drho)
        rhs = M(t) @ basis.expectations(rho)
        assert np.max(np.abs(lhs - rhs)) < 1e-10


@pytest.mark.parametrize("model", MODELS)
def test_sandwich_map_direct_evaluation(model, rng):
    basis = build_basis(model)
    for mode in range(model.n_modes):
        C = build_sandwich_map(model, basis, mode)
        a = model.lowering(mode)
        for _ in range(50 // len(MODELS) + 1):
            rho = random_density(model.hilbert_dim, rng)
            direct = basis.expectations(a @ rho @ a.conj().T)
            assert np.max(np.abs(direct - C @ basis.expectations(rho))) < 1e-12


def test_sandwich_of_identity_and_number():
    m = make_model(1.0, sensors=[(0, 1)])
    basis = build_basis(m)
    for mode in (0, 1):
        C = build_sandwich_map(m, basis, mode)
        n = basis.number_index(mode)
        # the identity picks up the occupation, the occupation picks up nothing
        expected = np.zeros(basis.size)
        expected[n] = 1
        np.testing.assert_allclose(C[0], expected, atol=1e-14)
        np.testing.assert_allclose(C[n], 0, atol=1e-14)


def test_free_decay_moments():
    m = make_model(0.0)
    s = System.from_model(m)
    t = np.linspace(0, 5, 51)
    traj = propagate_moments(s.moments, s.initial_moments(excited_state(m)), 0, 5, t_eval=t)
    np.testing.assert_allclose(traj.values[3].real, np.exp(-t), atol=1e-8)
    np.testing.assert_allclose(traj.values[0], 1, atol=1e-12)


def test_pi_pulse_moments_match_density():
    m = make_model(math.pi)
    s = System.from_model(m)
    t = np.linspace(0, 2, 201)
    mt = propagate_moments(s.moments, s.initial_moments(), 0, 2, t_eval=t)
    dt = propagate_density(m, ground_state(m), 0, 2, t_eval=t)
    ex = np.array([s.basis.expectations(r) for r in dt.rho]).T
    assert np.max(np.abs(mt.values - ex)) < 1e-8
    # inversion right after the pulse, reduced by decay during it
    k = np.searchsorted(t, m.pulse.t_center + 3 * m.pulse.tau_d)
    assert math.exp(-4 * m.pulse.tau_d) < mt.values[3, k].real < 1.0


def test_two_pi_returns_to_ground():
    m = make_model(2 * math.pi)
    end = m.pulse.t_center + 5 * m.pulse.tau_d
    d = propagate_density(m, ground_state(m), 0, end, t_eval=[end])
    assert d.rho[-1][1, 1].real < 0.1


def test_zero_area_keeps_ground_state():
    m = make_model(0.0)
    d = propagate_density(m, ground_state(m), 0, 3, t_eval=[1.0, 3.0])
    np.testing.assert_allclose(d.rho, [ground_state(m)] * 2, atol=1e-14)


@pytest.mark.parametrize("theta", [1.0, 2 * math.pi, 4 * math.pi])
def test_density_positivity_and_trace(theta):
    m = make_model(theta, sensors=[(0, 2.0)])
    d = propagate_density(m, ground_state(m), 0, 3, t_eval=np.linspace(0, 3, 61))
    for r in d.rho:
        assert abs(np.trace(r) - 1) < 1e-8
        assert np.linalg.eigvalsh(0.5 * (r + r.conj().T)).min() > -1e-8


def test_density_rejects_invalid_start():
    m = make_model(1.0)
    with pytest.raises(ValueError):
        propagate_density(m, np.diag([0.5, 0.6]), 0, 1)
    with pytest.raises(ValueError):
        propagate_density(m, np.array([[1.0, 0.5], [0.0, 0.0]]), 0, 1)


def test_integrator_failure_reports_time():
    bad = np.array([[np.nan, 0], [0, 0]])
    with pytest.warns(RuntimeWarning), pytest.raises(IntegratorError) as err:
        solve_linear(np.zeros((2, 2)), bad, PulseEnvelope(1.0, 0.1), [1, 0], 0.0, 2.0)
    assert err.value.t is not None


@given(st.floats(0.35, 4.0))
def test_evolve_linear_matches_solver(t_end):
    m = make_model(2.0)
    s = System.from_model(m)
    y0 = s.initial_moments()
    ev = evolve_linear(s.moments.static, s.moments.drive, m.pulse, y0, 0.0, [0.3, t_end])
    ref = solve_linear(s.moments.static, s.moments.drive, m.pulse, y0, 0.0, t_end,
                       rtol=1e-11, atol=1e-13)
    assert np.max(np.abs(ev.y[:, -1] - ref.y[:, -1])) < 1e-7


def test_step_propagators_compose():
    m = make_model(3 * math.pi)
    s = System.from_model(m)
    grid = np.linspace(0, 3, 31)
    cs, _ = moments_on_grid(s, grid)
    mt = propagate_moments(s.moments, s.initial_moments(), 0, 3, t_eval=grid, tol=1e-11,
                           atol=1e-13)
    assert np.max(np.abs(cs.T - mt.values)) < 1e-8
    P = step_propagators(s.moments.static, s.moments.drive, m.pulse, grid[-3:])
    assert P.shape == (2, 4, 4)


def test_horizon_and_tail_residual():
    m = make_model(math.pi, sensors=[(0.0, 0.2)])
    assert horizon(m) == pytest.approx(m.pulse.t_center + 15 / 0.2)
    s = System.from_model(m)
    c = s.initial_moments(excited_state(m))
    assert tail_residual(m, s.basis, c) == pytest.approx(1.0)
    assert issubclass(UnconvergedTailError, RuntimeError)
