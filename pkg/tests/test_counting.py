import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from pulsedrf.correlators import DegenerateInputError
from pulsedrf.counting import (
    CLAMP_TOLERANCE,
    EARLY,
    LATE,
    IntensityMoments,
    bin_moments_one_mode,
    filtered_flux_fraction,
    intensity_moments_one_mode,
    pmn_from_moments,
    pmn_one_mode_2pa,
    pn_from_moments,
    purities,
    scan_pmn_filtered,
    scan_pmn_one_mode,
    scan_pmn_two_mode,
    two_mode_2pa,
)
from pulsedrf.engine import horizon
from pulsedrf.model import make_model


def counting_oracle(theta, T, n_max=4, t_end=20.0):
    """Photon-number resolved master equation for the bare emitter.

    ``rho[m, n]`` is the state conditioned on m clicks before ``T`` and n
    after; the no-jump evolution is the non-Hermitian part and every jump
    moves weight one step up in the current bin.
    """
    m = make_model(theta)
    s = np.array([[0, 1], [0, 0]], dtype=complex)
    n_op = s.conj().T @ s

    def rhs_factory(late):
        def rhs(t, y):
            r = y.reshape(n_max + 1, n_max + 1, 2, 2)
            H = 0.5 * m.pulse(t) * (s + s.conj().T)
            d = -1j * (np.einsum("ij,mnjk->mnik", H, r) - np.einsum("mnij,jk->mnik", r, H))
            d -= 0.5 * (np.einsum("ij,mnjk->mnik", n_op, r) + np.einsum("mnij,jk->mnik", r, n_op))
            jump = np.einsum("ij,mnjk,kl->mnil", s, r, s.conj().T)
            if late:
                d[:, 1:] += jump[:, :-1]
            else:
                d[1:, :] += jump[:-1, :]
            return d.ravel()
        return rhs

    y = np.zeros((n_max + 1, n_max + 1, 2, 2), dtype=complex)
    y[0, 0, 0, 0] = 1
    opts = dict(rtol=1e-11, atol=1e-14, method="DOP853")
    if T > 0:
        y = solve_ivp(rhs_factory(False), (0, T), y.ravel(), **opts).y[:, -1]
    y = solve_ivp(rhs_factory(True), (T, t_end), np.ravel(y), **opts).y[:, -1]
    r = y.reshape(n_max + 1, n_max + 1, 2, 2)
    return np.einsum("mnii->mn", r).real


@pytest.mark.parametrize("theta", [math.pi, 2 * math.pi])
def test_photon_numbers_match_counting_oracle(theta):
    m = make_model(theta)
    pn = pn_from_moments(intensity_moments_one_mode(m, 0, n_max=4)).pn
    ref = counting_oracle(theta, 0.0)
    for n in range(4):
        assert pn[n] == pytest.approx(ref[0, n], abs=2e-5)


def test_pi_pulse_photon_numbers():
    pn = pn_from_moments(intensity_moments_one_mode(make_model(math.pi), 0, n_max=4)).pn
    assert pn[1] == pytest.approx(0.96466, abs=5e-5)
    assert pn[2] == pytest.approx(0.0326, abs=2e-4)
    assert 0.0 < pn[0] < 0.005


def test_ten_pi_higher_orders_stay_small():
    bp = pn_from_moments(intensity_moments_one_mode(make_model(10 * math.pi), 0, n_max=4))
    assert bp.pn[3] < 1e-2 and bp.pn[4] < 1e-3
    assert bp.converged


def test_early_late_probabilities_match_counting_oracle():
    theta, T = 3 * math.pi, 0.55
    m = make_model(theta)
    got = pmn_from_moments(bin_moments_one_mode(m, 0, [T], 4)[0], 0, 4).pmn
    ref = counting_oracle(theta, T)
    for (i, j), p in got.items():
        if i + j <= 3:
            assert p == pytest.approx(ref[i, j], abs=3e-4), (i, j)


def test_zero_area_is_vacuum():
    bp = pn_from_moments(intensity_moments_one_mode(make_model(0.0), 0, n_max=3))
    assert bp.pn[0] == pytest.approx(1.0)
    assert all(abs(bp.pn[n]) < 1e-14 for n in (1, 2, 3))
    with pytest.raises(DegenerateInputError):
        filtered_flux_fraction(make_model(0.0), 2.0)


def test_two_photon_approximation_is_low_order_mandel():
    m = make_model(2 * math.pi)
    mom = bin_moments_one_mode(m, 0, [0.6], 2)[0]
    a = pmn_from_moments(mom, 0, 2).pmn
    b = pmn_one_mode_2pa(intensity_moments_one_mode(m, 0, T=0.6, n_max=2)).pmn
    for k in a:
        assert a[k] == pytest.approx(b[k], abs=1e-9)


def test_truncation_order_converges():
    m = make_model(math.pi)
    mom = bin_moments_one_mode(m, 0, [0.6], 4)[0]
    p3 = pmn_from_moments(mom, 0, 3).pmn
    p4 = pmn_from_moments(mom, 0, 4).pmn
    assert max(abs(p3[k] - p4[k]) for k in p3) < 1e-3


@pytest.mark.parametrize("T", [0.3, 0.6, 1.5])
def test_probabilities_normalised_and_nonnegative(T):
    m = make_model(4 * math.pi)
    bp = pmn_from_moments(bin_moments_one_mode(m, 0, [T], 4)[0], 0, 4)
    assert bp.total() == pytest.approx(1.0 + bp.residual, abs=1e-12)
    assert min(bp.pmn.values()) >= 0
    assert bp.residual < CLAMP_TOLERANCE


@given(st.floats(0.0, 1.0), st.floats(0.0, 0.1), st.floats(0.0, 0.2))
def test_clamp_accounts_for_negative_weight(e, ee, el):
    mom = IntensityMoments({}, {0: 1.0}, {0: 1.0}, 0.5)
    mom.set([(0, EARLY)], e)
    mom.set([(0, LATE)], e)
    mom.set([(0, EARLY)] * 2, ee)
    mom.set([(0, EARLY), (0, LATE)], el)
    mom.set([(0, LATE)] * 2, ee)
    bp = pmn_one_mode_2pa(mom, 0)
    assert all(p >= 0 for p in bp.pmn.values())
    assert bp.total() == pytest.approx(1.0 + bp.residual, abs=1e-12)


def test_two_mode_symmetry_and_collapse():
    m = make_model(3 * math.pi, sensors=[(0.0, 2.0), (0.0, 2.0)])
    T = [0.5, 1.0]
    two = scan_pmn_two_mode(m, T)
    single = scan_pmn_filtered(m, T)
    for tm, sg in zip(two, single):
        p = tm.probs
        assert p[(1, 0, 0, 0)] == pytest.approx(p[(0, 0, 1, 0)], rel=1e-6)
        assert p[(1, 0, 0, 1)] == pytest.approx(p[(0, 1, 1, 0)], rel=1e-6)
        col = tm.collapsed().pmn
        for k, v in sg.pmn.items():
            assert col[k] == pytest.approx(v, rel=1e-6, abs=1e-12)


def test_two_mode_rejects_zero_flux():
    mom = IntensityMoments({}, {1: 1.0, 2: 1.0}, {1: 1.0, 2: 1.0}, 0.5)
    for mode in (1, 2):
        for b in (EARLY, LATE):
            mom.set([(mode, b)], 0.0)
    with pytest.raises(DegenerateInputError):
        two_mode_2pa(mom, (1, 2))


def test_purities_normalised():
    pr = scan_pmn_one_mode(make_model(3 * math.pi), [0.6])[0]
    pur = purities(pr)
    assert (0, 0) not in pur
    assert sum(pur.values()) == pytest.approx(1.0)
    with pytest.raises(DegenerateInputError):
        purities({(0, 0): 1.0, (1, 0): 0.0})


def test_wide_filter_keeps_almost_all_flux():
    assert filtered_flux_fraction(make_model(math.pi), 50.0) == pytest.approx(1.0, abs=0.05)


def test_bin_scan_rejects_split_past_horizon():
    m = make_model(math.pi)
    with pytest.raises(ValueError):
        bin_moments_one_mode(m, 0, [2 * horizon(m)], 2)
