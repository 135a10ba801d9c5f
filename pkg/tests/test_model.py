import math
import warnings
from functools import reduce

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import quad

from pulsedrf.model import (
    JointModel,
    ModelError,
    PulseEnvelope,
    Sensor,
    SensorBank,
    TabulatedEnvelope,
    build_hamiltonian,
    build_liouvillian,
    collapse_operators,
    embed,
    envelope_at,
    excited_state,
    ground_state,
    liouvillian_parts,
    make_model,
    sensor_bank,
    unvec,
    vec,
)

from conftest import random_density, random_hermitian

SIG = np.array([[0, 1], [0, 0]], dtype=complex)
I2 = np.eye(2)


def test_envelope_zero_area():
    assert envelope_at(PulseEnvelope(0.0), 0.37) == 0.0


def test_envelope_peak_value():
    p = PulseEnvelope(math.pi, 0.1)
    assert envelope_at(p, p.t_center) == pytest.approx(math.pi / (math.sqrt(2 * math.pi) * 0.1),
                                                      rel=1e-15)


def test_default_center_is_five_widths():
    assert PulseEnvelope(1.0, 0.2).t_center == pytest.approx(1.0)


@pytest.mark.parametrize("theta", [math.pi, 3.3, 10 * math.pi])
def test_envelope_quadrature_matches_area(theta):
    p = PulseEnvelope(theta, 0.1)
    val, _ = quad(p, p.t_center - 1.0, p.t_center + 1.0, epsabs=1e-13, epsrel=1e-13,
                  points=[p.t_center])
    assert abs(val - theta) < 1e-10
    assert p.area() == pytest.approx(theta, rel=1e-15)


@given(st.integers(0, 4096), st.floats(0.01, 1.0))
def test_envelope_symmetry(k, tau):
    # dyadic offsets keep t_center +- delta exactly representable
    p = PulseEnvelope(2.0, tau, t_center=4.0)
    delta = k / 1024
    assert envelope_at(p, p.t_center + delta) == envelope_at(p, p.t_center - delta)


def test_invalid_parameters_rejected():
    with pytest.raises(ModelError):
        PulseEnvelope(1.0, 0.0)
    with pytest.raises(ModelError):
        Sensor(0.0, -1.0)
    with pytest.raises(ModelError):
        make_model(1.0, gamma_sigma=0.0)
    with pytest.raises(ModelError):
        sensor_bank((0, 1), (0, 1), (0, 1))


def test_strong_coupling_warns():
    with pytest.warns(UserWarning, match="perturb"):
        make_model(1.0, sensors=[(0.0, 0.2)], coupling=0.05)


def test_weak_coupling_is_silent():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        make_model(1.0, sensors=[(0.0, 0.2)], coupling=1e-3)


@pytest.mark.parametrize("n,dim", [(0, 2), (1, 4), (2, 8)])
def test_hilbert_dimension(n, dim):
    m = make_model(1.0, sensors=[(0.0, 1.0)] * n)
    assert m.hilbert_dim == dim
    assert build_hamiltonian(m, 0.3).shape == (dim, dim)


def test_undriven_resonant_hamiltonian_vanishes():
    assert np.all(build_hamiltonian(make_model(0.0), 0.5) == 0)


@given(st.floats(0.0, 3.0), st.floats(-30, 30), st.floats(-30, 30), st.floats(0, 12.0))
def test_hamiltonian_hermitian(t, w1, w2, theta):
    m = make_model(theta, detuning=w1, sensors=[(w1, 1.0), (w2, 2.0)])
    h = build_hamiltonian(m, t)
    assert np.max(np.abs(h - h.conj().T)) < 1e-13


def test_two_sensor_hamiltonian_against_explicit_kron():
    theta, wd, w1, w2, eps = 3 * math.pi, 1.5, -2.0, 4.0, 1e-3
    m = make_model(theta, detuning=wd, sensors=[(w1, 0.5), (w2, 2.0)], coupling=eps)
    t = m.pulse.t_center
    om = theta / (math.sqrt(2 * math.pi) * 0.1)
    sig = np.kron(np.kron(SIG, I2), I2)
    z1 = np.kron(np.kron(I2, SIG), I2)
    z2 = np.kron(np.kron(I2, I2), SIG)
    d = lambda a: a.conj().T  # noqa: E731
    ref = (wd * d(sig) @ sig + 0.5 * om * (sig + d(sig)) + w1 * d(z1) @ z1 + w2 * d(z2) @ z2
           + eps * (d(sig) @ z1 + d(z1) @ sig) + eps * (d(sig) @ z2 + d(z2) @ sig))
    np.testing.assert_allclose(build_hamiltonian(m, t), ref, atol=1e-13)


def test_embedded_operators_commute_across_factors():
    a = embed(SIG, 0, 3)
    b = embed(SIG.T, 2, 3)
    np.testing.assert_array_equal(a @ b, b @ a)
    with pytest.raises(ModelError):
        embed(SIG, 3, 3)


def test_vec_roundtrip(rng):
    x = rng.normal(size=(4, 4))
    np.testing.assert_array_equal(unvec(vec(x)), x)


@pytest.mark.parametrize("sensors", [(), ((0.0, 2.0),), ((1.0, 0.5), (-3.0, 2.0))])
def test_liouvillian_annihilates_trace(sensors, rng):
    m = make_model(2.0, detuning=0.3, sensors=sensors)
    d = m.hilbert_dim
    L = build_liouvillian(m, m.pulse.t_center)
    tr = vec(np.eye(d)).conj()
    for _ in range(10):
        rho = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
        assert abs(tr @ L @ vec(rho)) < 1e-12 * np.linalg.norm(rho)


def test_liouvillian_matches_termwise_rhs(rng):
    m = make_model(3.0, detuning=0.7, sensors=[(0.5, 1.3), (-1.0, 0.4)], coupling=2e-3)
    t = m.pulse.t_center + 0.05
    rho = random_density(8, rng)
    h = build_hamiltonian(m, t)
    ref = 1j * (rho @ h - h @ rho)
    for rate, c in collapse_operators(m):
        cd = c.conj().T
        ref = ref + 0.5 * rate * (2 * c @ rho @ cd - cd @ c @ rho - rho @ cd @ c)
    np.testing.assert_allclose(unvec(build_liouvillian(m, t) @ vec(rho)), ref, atol=1e-12)


def test_free_decay_closed_form():
    from scipy.linalg import expm
    m = make_model(0.0)
    l0, _ = liouvillian_parts(m)
    for t in (0.1, 1.0, 3.0):
        rho = unvec(expm(l0 * t) @ vec(excited_state(m)))
        assert rho[1, 1].real == pytest.approx(math.exp(-t), rel=1e-12)


def test_hamiltonian_hermitian_random_times(rng):
    m = make_model(4 * math.pi, sensors=[(0.0, 0.2), (3.0, 0.2)])
    for t in rng.uniform(0, 2, size=20):
        h = build_hamiltonian(m, t)
        assert np.max(np.abs(h - h.conj().T)) < 1e-13


def test_bare_and_with_sensors_roundtrip():
    m = make_model(1.0, sensors=[(0.0, 2.0)])
    assert m.bare().n_modes == 1
    assert m.bare().with_sensors(m.sensors) == m
    assert m.with_pulse(theta=2.0).pulse.theta == 2.0
    assert m.rates() == (1.0, 2.0)


def test_tabulated_envelope():
    env = TabulatedEnvelope((0.0, 1.0, 2.0), (0.0, 2.0, 0.0))
    assert env(1.0) == 2.0
    assert env(5.0) == 0.0
    assert env.area() == pytest.approx(2.0)
    with pytest.raises(ModelError):
        TabulatedEnvelope((0.0, 0.0), (1.0, 1.0))


def test_state_helpers():
    m = make_model(0.0, sensors=[(0, 1)])
    assert np.trace(ground_state(m)) == 1
    assert excited_state(m)[2, 2] == 1


def test_joint_model_sensor_bank_type():
    bank = SensorBank((Sensor(0.0, 1.0),), 1e-3)
    assert JointModel(make_model(1.0).tls, PulseEnvelope(1.0), bank).n_modes == 2
