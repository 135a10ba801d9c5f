"""Two-time and time-integrated photon correlators.

Production path: augmented linear ODE systems whose solution carries the
integrated correlators along with the one-time moments (``integrated_g2``,
``integrated_gn``, ``two_bin_extension``). Grid path: regression-theorem
propagation of conditioned moments on explicit time grids, used for the
two-time maps, the spectrum and as brute-force quadrature checks.

Modes are integers: 0 is the emitter, 1 and 2 the sensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.integrate import simpson

from .engine import (
    DEFAULT_ATOL,
    DEFAULT_RTOL,
    TAIL_TOLERANCE,
    System,
    UnconvergedTailError,
    build_product_map,
    horizon,
    moments_on_grid,
    evolve_linear,
    solve_linear,
    tail_residual,
)
from .model import JointModel, make_model


class DegenerateInputError(ValueError):
    """A normalisation would divide by a vanishing flux or population."""


@lru_cache(maxsize=64)
def get_system(model: JointModel) -> System:
    return System.from_model(model)


def _system(model_or_system) -> System:
    if isinstance(model_or_system, System):
        return model_or_system
    return get_system(model_or_system)


def _pair(pair) -> tuple[int, int]:
    a, b = pair
    return int(a), int(b)


# ---------------------------------------------------------------------------
# integrated correlators: ODE path


@dataclass
class IntegratedCorrelators:
    pair: tuple[int, int]
    T: np.ndarray
    forward: np.ndarray       # G_{a->b}[0, T]
    backward: np.ndarray      # G_{b->a}[0, T]
    V_a: np.ndarray = field(repr=False)   # (size, len(T))
    V_b: np.ndarray = field(repr=False)
    moments: np.ndarray = field(repr=False)
    rtol: float = DEFAULT_RTOL
    atol: float = DEFAULT_ATOL
    tail: float | None = None

    @property
    def symmetric(self) -> np.ndarray:
        return self.forward + self.backward

    @property
    def populations(self) -> tuple[np.ndarray, np.ndarray]:
        """Integrated populations ``int_0^T <a^+ a>`` of both modes."""
        return self.V_a[0].real, self.V_b[0].real


def _block_system(system: System, pair, with_moments=True):
    """Static/drive matrices of the stacked (c, V_a, V_b, G_ab, G_ba) system."""
    a, b = pair
    K = system.basis.size
    m0, m1 = system.moments.static, system.moments.drive
    same = a == b
    nv = 1 if same else 2
    n = K * (1 + nv) + nv
    A0 = np.zeros((n, n), dtype=complex)
    A1 = np.zeros((n, n), dtype=complex)
    A0[:K, :K] = m0
    A1[:K, :K] = m1
    modes = (a,) if same else (a, b)
    targets = (a,) if same else (b, a)
    for k, (mode, tgt) in enumerate(zip(modes, targets)):
        s = slice(K * (k + 1), K * (k + 2))
        A0[s, s] = m0
        A1[s, s] = m1
        A0[s, :K] = system.sandwich[mode]
        A0[K * (1 + nv) + k, K * (k + 1) + system.basis.number_index(tgt)] = 1.0
    scale = system.basis.scale
    bs = system.basis.mode_scale
    sc = [scale] + [scale * bs(mode) for mode in modes]
    sc.append(np.array([bs(a) * bs(b)] * nv))
    return A0, A1, np.concatenate(sc)


def integrated_g2(model, pair, T_grid, *, rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL,
                  rho0=None, check_tail=False) -> IntegratedCorrelators:
    """Ordered and symmetric ``G2[0, T]`` for every ``T`` in ``T_grid``.

    All ``T`` are measured from the simulation origin, where the state is
    ``rho0`` (ground state by default). With ``check_tail`` the excitation
    left at the last ``T`` is verified to be negligible, as needed when that
    point stands in for ``T -> infinity``.
    """
    system = _system(model)
    a, b = _pair(pair)
    T_grid = np.atleast_1d(np.asarray(T_grid, dtype=float))
    if np.any(np.diff(T_grid) < 0) or T_grid[0] < 0:
        raise ValueError("T grid must be ascending and non-negative")
    K = system.basis.size
    A0, A1, scale = _block_system(system, (a, b))
    y0 = np.zeros(A0.shape[0], dtype=complex)
    y0[:K] = system.initial_moments(rho0)
    out = np.empty((A0.shape[0], T_grid.size), dtype=complex)
    mask = T_grid > 0
    out[:, ~mask] = y0[:, None]
    if mask.any():
        sol = evolve_linear(A0, A1, system.model.pulse, y0, 0.0, T_grid[mask],
                            rtol=rtol, atol=atol * scale)
        out[:, mask] = sol.y
    same = a == b
    V_a = out[K:2 * K]
    V_b = V_a if same else out[2 * K:3 * K]
    g = out[-1 if same else -2:]
    forward = g[0].real
    backward = forward if same else g[1].real
    res = IntegratedCorrelators((a, b), T_grid, forward, backward, V_a, V_b, out[:K],
                                rtol, atol)
    if check_tail:
        pops = np.array([0.0] * system.model.n_modes)
        for mode, v in ((a, V_a), (b, V_b)):
            pops[mode] = v[0, -1].real
        res.tail = tail_residual(system.model, system.basis, out[:K, -1], pops)
        if res.tail > TAIL_TOLERANCE:
            raise UnconvergedTailError(
                f"residual excitation {res.tail:.2e} at t={T_grid[-1]:.4g}")
    return res


def integrated_total(model, pair, **kw) -> IntegratedCorrelators:
    """``T -> infinity`` values; extends the horizon once if the tail is not converged."""
    system = _system(model)
    t_end = horizon(system.model)
    try:
        return integrated_g2(system, pair, [t_end], check_tail=True, **kw)
    except UnconvergedTailError:
        return integrated_g2(system, pair, [2 * t_end], check_tail=True, **kw)


@dataclass
class HigherCorrelators:
    mode: int
    T: np.ndarray
    G: dict[int, np.ndarray]            # order -> G^(k)[0, T]
    V: list[np.ndarray] = field(repr=False)

    def total(self, k: int) -> float:
        return float(self.G[k][-1])


def integrated_gn(model, mode: int, n_max: int, T_grid, *, rtol=DEFAULT_RTOL,
                  atol=DEFAULT_ATOL, rho0=None) -> HigherCorrelators:
    """Same-mode integrated correlators ``G^(k)[0, T]`` for ``k = 1..n_max``.

    One forward solve of the chain ``V_k' = M V_k + k C V_{k-1}`` (``V_0`` being
    the moment vector); ``G^(k) = [V_k]_0`` and the top order has its own
    accumulator.
    """
    if n_max < 1:
        raise ValueError("n_max must be at least 1")
    system = _system(model)
    T_grid = np.atleast_1d(np.asarray(T_grid, dtype=float))
    K = system.basis.size
    m0, m1 = system.moments.static, system.moments.drive
    C = system.sandwich[mode]
    n = K * n_max + 1
    A0 = np.zeros((n, n), dtype=complex)
    A1 = np.zeros((n, n), dtype=complex)
    for k in range(n_max):
        s = slice(K * k, K * (k + 1))
        A0[s, s] = m0
        A1[s, s] = m1
        if k:
            A0[s, K * (k - 1):K * k] = k * C
    A0[-1, K * (n_max - 1) + system.basis.number_index(mode)] = n_max
    ms = system.basis.mode_scale(mode)
    scale = np.concatenate([system.basis.scale * ms ** k for k in range(n_max)]
                           + [np.array([ms ** n_max])])
    y0 = np.zeros(n, dtype=complex)
    y0[:K] = system.initial_moments(rho0)
    out = np.empty((n, T_grid.size), dtype=complex)
    mask = T_grid > 0
    out[:, ~mask] = y0[:, None]
    if mask.any():
        sol = evolve_linear(A0, A1, system.model.pulse, y0, 0.0, T_grid[mask],
                            rtol=rtol, atol=atol * scale)
        out[:, mask] = sol.y
    V = [out[K * k:K * (k + 1)] for k in range(n_max)]
    G = {k: V[k][0].real.copy() for k in range(1, n_max)}
    G[n_max] = out[-1].real.copy()
    return HigherCorrelators(mode, T_grid, G, V)


# ---------------------------------------------------------------------------
# Early/Late bins


@dataclass
class TwoBinCorrelators:
    pair: tuple[int, int]
    T: float
    EE: float
    EL: float   # mode a early, mode b late
    LE: float   # mode a late, mode b early
    LL: float
    total: float
    early_pops: tuple[float, float]
    total_pops: tuple[float, float]
    tau_max: float = 0.0


def _bins_from_forward(system, a, b, fwd, k, t_split, t_end, rtol, atol):
    K = system.basis.size
    same = a == b
    m0, m1 = system.moments.static, system.moments.drive
    V_a = fwd.V_a[:, k]
    V_b = fwd.V_b[:, k]
    EE = float(fwd.symmetric[k])
    total = float(fwd.symmetric[-1])
    if t_end - t_split > 1e-12:
        nv = 1 if same else 2
        n = K * nv + nv
        A0 = np.zeros((n, n), dtype=complex)
        A1 = np.zeros((n, n), dtype=complex)
        targets = (a,) if same else (b, a)
        for j, tgt in enumerate(targets):
            s = slice(K * j, K * (j + 1))
            A0[s, s] = m0
            A1[s, s] = m1
            A0[K * nv + j, K * j + system.basis.number_index(tgt)] = 1.0
        y0 = np.zeros(n, dtype=complex)
        y0[:K] = V_a
        if not same:
            y0[K:2 * K] = V_b
        bs = system.basis.mode_scale
        scale = np.concatenate([system.basis.scale * bs(a)]
                               + ([] if same else [system.basis.scale * bs(b)])
                               + [np.array([bs(a) * bs(b)] * nv)])
        sol = evolve_linear(A0, A1, system.model.pulse, y0, t_split, [t_end],
                            rtol=rtol, atol=atol * scale)
        yend = sol.y[:, -1]
        EL = float(yend[K * nv].real)
        LE = EL if same else float(yend[K * nv + 1].real)
        # pending tail of the late-bin integrand, estimated from the slowest decay
        slowest = min(system.model.rates())
        pending = max(abs(yend[K * j + system.basis.number_index(t)])
                      for j, t in enumerate(targets)) / slowest
        if total > 0 and pending > TAIL_TOLERANCE * total:
            raise UnconvergedTailError(
                f"late-bin integrand still {pending:.2e} at tau={t_end - t_split:.4g}")
    else:
        EL = LE = 0.0
    LL = total - EE - EL - LE
    pops_T = (float(V_a[0].real), float(V_b[0].real))
    pa, pb = fwd.populations
    return TwoBinCorrelators((a, b), float(t_split), EE, EL, LE, LL, total, pops_T,
                             (float(pa[-1]), float(pb[-1])), t_end - t_split)


def two_bin_scan(model, pair, T_values, *, rtol=DEFAULT_RTOL,
                 atol=DEFAULT_ATOL, rho0=None) -> list[TwoBinCorrelators]:
    """Early/Late bin integrals for every split in ``T_values``.

    One forward solve supplies ``V(T)``; each split then needs a single
    regression-type solve of ``U(T, tau)`` over the rest of the horizon. The
    LL bin follows from the total by subtraction.
    """
    system = _system(model)
    a, b = _pair(pair)
    T_values = np.atleast_1d(np.asarray(T_values, dtype=float))
    t_end = horizon(system.model)
    if np.any(T_values > t_end) or np.any(T_values < 0):
        raise ValueError(f"bin splits must lie in [0, {t_end:.4g}]")
    order = np.argsort(T_values)
    for attempt in range(2):
        try:
            return _two_bin_solve(system, a, b, T_values, order, t_end, rtol, atol, rho0)
        except UnconvergedTailError:
            if attempt:
                raise
            t_end *= 2.0


def _two_bin_solve(system, a, b, T_values, order, t_end, rtol, atol, rho0):
    fwd = integrated_g2(system, (a, b), np.append(T_values[order], t_end), rtol=rtol,
                        atol=atol, rho0=rho0, check_tail=True)
    results = [None] * T_values.size
    for pos, idx in enumerate(order):
        results[idx] = _bins_from_forward(system, a, b, fwd, pos, T_values[idx], t_end,
                                          rtol, atol)
    return results


def two_bin_extension(model, pair, T: float, **kw) -> TwoBinCorrelators:
    return two_bin_scan(model, pair, [T], **kw)[0]


def _chain_blocks(system, mode, n, coeff):
    """Block matrices of ``W_j' = M W_j + coeff(j) C W_{j-1}`` for ``j = 0..n``."""
    K = system.basis.size
    C = system.sandwich[mode]
    A0 = np.zeros((K * (n + 1),) * 2, dtype=complex)
    A1 = np.zeros_like(A0)
    for j in range(n + 1):
        s = slice(K * j, K * (j + 1))
        A0[s, s] = system.moments.static
        A1[s, s] = system.moments.drive
        if j and coeff(j):
            A0[s, K * (j - 1):K * j] = coeff(j) * C
    return A0, A1


def bin_moment_scan(model, mode: int, T_values, n_max: int, *, rtol=DEFAULT_RTOL,
                    atol=DEFAULT_ATOL, rho0=None) -> list[dict]:
    """Raw ``<:N_E^i N_L^j:>`` of one mode for ``i + j <= n_max``, per split.

    ``N_E`` and ``N_L`` are the Early and Late integrated photon-number
    operators. The Early chain ``V_k`` is integrated up to each split; from
    there a Late chain seeded with ``V_k(T)`` accumulates the remaining
    factors. Returned dictionaries are keyed by ``(i, j)`` with ``(0, 0) = 1``.
    """
    system = _system(model)
    K = system.basis.size
    T_values = np.atleast_1d(np.asarray(T_values, dtype=float))
    t_end = horizon(system.model)
    if np.any(T_values > t_end) or np.any(T_values < 0):
        raise ValueError(f"bin splits must lie in [0, {t_end:.4g}]")
    ms = system.basis.mode_scale(mode)
    scale = np.concatenate([system.basis.scale * ms ** k for k in range(n_max + 1)])
    A0, A1 = _chain_blocks(system, mode, n_max, lambda k: k)
    y0 = np.zeros(A0.shape[0], dtype=complex)
    y0[:K] = system.initial_moments(rho0)
    order = np.argsort(T_values)
    Ts = T_values[order]
    fwd = np.empty((y0.size, Ts.size), dtype=complex)
    pos = Ts > 0
    fwd[:, ~pos] = y0[:, None]
    if pos.any():
        fwd[:, pos] = evolve_linear(A0, A1, system.model.pulse, y0, 0.0, Ts[pos],
                                    rtol=rtol, atol=atol * scale).y
    out = [None] * T_values.size
    for p, idx in enumerate(order):
        T = Ts[p]
        V = [fwd[K * k:K * (k + 1), p] for k in range(n_max + 1)]
        table = {(k, 0): float(V[k][0].real) for k in range(n_max + 1)}
        # late chain for each early order k, up to n_max - k further factors
        for k in range(n_max):
            depth = n_max - k
            B0, B1 = _chain_blocks(system, mode, depth, lambda j: j)
            z0 = np.zeros(B0.shape[0], dtype=complex)
            z0[:K] = V[k]
            sc = np.concatenate([system.basis.scale * ms ** (k + j) for j in range(depth + 1)])
            z = evolve_linear(B0, B1, system.model.pulse, z0, T, [t_end],
                              rtol=rtol, atol=atol * sc).y[:, -1]
            for j in range(1, depth + 1):
                table[(k, j)] = float(z[K * j].real)
        table[(0, 0)] = 1.0
        out[idx] = table
    return out


# ---------------------------------------------------------------------------
# normalised correlations


def normalized_integrated_g2(model, pair, T: float, **kw) -> float:
    """``G2[0, T] / (N_a(T) N_b(T))``; NaN for an empty bin (``T = 0``)."""
    res = integrated_g2(model, pair, [T], **kw)
    pa, pb = res.populations
    den = pa[-1] * pb[-1]
    if T == 0 or den == 0:
        return math.nan
    return float(res.symmetric[-1] / den)


def normalized_g2_zero(model, pair=(1, 2), **kw) -> float:
    """Frequency-filtered ``g2_ab[0; Gamma]`` over the whole emission."""
    system = _system(model)
    res = integrated_total(system, pair, **kw)
    pa, pb = res.populations
    den = pa[-1] * pb[-1]
    floor = system.basis.mode_scale(pair[0]) * system.basis.mode_scale(pair[1]) * 1e-300
    if not den > floor:
        raise DegenerateInputError("sensor populations vanish; g2 is undefined")
    return float(res.symmetric[-1] / den)


def g2_frequency_point(theta, tau_d, detuning, w_a, w_b, linewidth, coupling=1e-3) -> float:
    """One tile of a frequency map (picklable entry point for sweeps)."""
    model = make_model(theta, tau_d, detuning, sensors=[(w_a, linewidth), (w_b, linewidth)],
                       coupling=coupling)
    return normalized_g2_zero(model)


# ---------------------------------------------------------------------------
# grid path: regression theorem on explicit time grids


@dataclass
class TwoTimeGrid:
    pair: tuple[int, int]
    t: np.ndarray
    tau: np.ndarray
    values: np.ndarray  # values[i, j] = G_ab(t_i, tau_j)


def two_time_g2_grid(model, pair, t_grid, tau_grid, *, rtol=DEFAULT_RTOL,
                     atol=DEFAULT_ATOL, rho0=None) -> TwoTimeGrid:
    """``<a^+(t) b^+ b(t + tau) a(t)>`` on a (t, tau) grid.

    Each row seeds ``C_a <c(t)>`` and propagates it with the moment matrix.
    """
    system = _system(model)
    a, b = _pair(pair)
    t_grid = np.asarray(t_grid, dtype=float)
    tau_grid = np.asarray(tau_grid, dtype=float)
    m = system.moments
    scale = system.basis.scale
    c0 = system.initial_moments(rho0)
    if t_grid[0] > 0:
        sol = solve_linear(m.static, m.drive, m.pulse, c0, 0.0, float(t_grid[-1]),
                           rtol=rtol, atol=atol * scale, t_eval=t_grid, dense=False)
        cs = sol.y
    else:
        cs = np.empty((m.size, t_grid.size), dtype=complex)
        cs[:, 0] = c0
        if t_grid.size > 1:
            sol = solve_linear(m.static, m.drive, m.pulse, c0, 0.0, float(t_grid[-1]),
                               rtol=rtol, atol=atol * scale, t_eval=t_grid[1:])
            cs[:, 1:] = sol.y
    ib = system.basis.number_index(b)
    vs = scale * system.basis.mode_scale(a)
    out = np.empty((t_grid.size, tau_grid.size))
    for i, t in enumerate(t_grid):
        seed = system.sandwich[a] @ cs[:, i]
        row = np.empty(tau_grid.size, dtype=complex)
        zero = tau_grid == 0
        row[zero] = seed[ib]
        if (~zero).any():
            sol = solve_linear(m.static, m.drive, m.pulse, seed, t, t + float(tau_grid[-1]),
                               rtol=rtol, atol=atol * vs, t_eval=t + tau_grid[~zero])
            row[~zero] = sol.y[ib]
        out[i] = row.real
    return TwoTimeGrid((a, b), t_grid, tau_grid, out)


def ordered_g2_matrix(model, a: int, b: int, times, rho0=None) -> np.ndarray:
    """``G_{a->b}(t_j, t_k)`` for ``k >= j`` on one time grid (NaN below the diagonal).

    Uses exact step propagators between grid nodes, independently of the
    adaptive ODE path.
    """
    system = _system(model)
    times = np.asarray(times, dtype=float)
    cs, props = moments_on_grid(system, times, rho0)
    ib = system.basis.number_index(b)
    seeds = (system.sandwich[a] @ cs.T)  # (size, n)
    n = times.size
    out = np.full((n, n), np.nan)
    out[np.arange(n), np.arange(n)] = seeds[ib].real
    X = seeds.copy()
    for k in range(n - 1):
        X[:, :k + 1] = props[k] @ X[:, :k + 1]
        out[:k + 1, k + 1] = X[ib, :k + 1].real
    return out


def symmetric_g2_matrix(model, a: int, b: int, times, rho0=None) -> np.ndarray:
    """Full ``G_ab(t1, t2)`` assembled from the two ordered pieces."""
    up = ordered_g2_matrix(model, a, b, times, rho0)
    if a == b:
        lo = up
    else:
        lo = ordered_g2_matrix(model, b, a, times, rho0)
    out = np.triu(np.nan_to_num(up)) + np.triu(np.nan_to_num(lo), 1).T
    return out


def _simpson(y, x) -> float:
    if x.size < 2:
        return 0.0
    if x.size == 2:
        return float(0.5 * (x[1] - x[0]) * (y[0] + y[1]))
    return float(simpson(y, x=x))


def triangle_integral(ordered: np.ndarray, times, upto: int | None = None,
                      start: int = 0) -> float:
    """Integral of an ordered correlator over ``times[start] <= t1 <= t2 <= times[upto]``.

    Iterated composite Simpson rule on the (possibly non-uniform) grid: each
    row is integrated in ``t2`` from the diagonal onwards, then the row
    integrals in ``t1``.
    """
    t = np.asarray(times, dtype=float)
    stop = t.size - 1 if upto is None else upto
    if stop - start < 1:
        return 0.0
    g = np.nan_to_num(ordered)
    rows = np.array([_simpson(g[j, j:stop + 1], t[j:stop + 1]) for j in range(start, stop + 1)])
    return _simpson(rows, t[start:stop + 1])


def rectangle_integral(ordered: np.ndarray, times, split: int) -> float:
    """Integral of an ordered correlator over ``t1 <= times[split] <= t2``."""
    t = np.asarray(times, dtype=float)
    g = np.nan_to_num(ordered[:split + 1, split:])
    rows = np.array([_simpson(g[j], t[split:]) for j in range(split + 1)])
    return _simpson(rows, t[:split + 1])


def quadrature_grid(model: JointModel, n: int = 400, t_end: float | None = None,
                    pulse_fraction: float = 0.5) -> np.ndarray:
    """Time nodes concentrated on the pulse and on the fastest decay.

    Node density follows ``1 + f (peak / rate_max) sqrt(|Omega(t)| / peak)``.
    The square root keeps the pulse flanks, where the drive is weak but the
    state still rotates, from being starved of nodes.
    """
    t_end = horizon(model) if t_end is None else t_end
    fine = np.linspace(0.0, t_end, 200001)
    rate = max(model.rates())
    drive = np.abs(model.pulse(fine))
    peak = drive.max()
    dens = np.ones_like(fine)
    if peak > 0:
        dens += pulse_fraction * peak / rate * np.sqrt(drive / peak)
    # decay envelope: keep spacing ~ proportional to (1 + rate t) after the pulse
    lag = np.clip(fine - model.pulse.t_center, 0.0, None)
    dens = dens / (1.0 + 0.25 * min(model.rates()) * lag)
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(fine))])
    targets = np.linspace(0.0, cum[-1], n)
    return np.interp(targets, cum, fine)


# ---------------------------------------------------------------------------
# spectrum


@dataclass
class Spectrum:
    omega: np.ndarray
    S: np.ndarray
    dtau: float
    t_end: float
    method: str = "qrt"


def spectrum(model, omegas, *, dtau: float | None = None, rho0=None) -> Spectrum:
    """Emission spectrum ``Re int dt int dtau <s^+(t+tau) s(t)> exp(-i w tau)``.

    ``w`` is measured from the laser frequency with the same sign as the
    detunings of emitter and sensors, so a detuned emitter line shows up at
    ``w = detuning``, where a sensor tuned to it lights up. Computed on a
    uniform grid; the t-integral is done per delay first so the Fourier
    factor multiplies a single delay profile. Arbitrary units.
    """
    base = model.model.bare() if isinstance(model, System) else model.bare()
    system = get_system(base)
    omegas = np.atleast_1d(np.asarray(omegas, dtype=float))
    gamma = base.gamma
    w_max = float(np.max(np.abs(omegas))) if omegas.size else 0.0
    if dtau is None:
        dtau = 0.02 / gamma
        if w_max > 0:
            dtau = min(dtau, 2 * math.pi / (20 * w_max))
    t_end = horizon(base)
    n = int(math.ceil(t_end / dtau)) + 1
    times = np.linspace(0.0, (n - 1) * dtau, n)
    cs, props = moments_on_grid(system, times, rho0)
    if abs(cs[-1, system.basis.number_index(0)]) > TAIL_TOLERANCE:
        raise UnconvergedTailError("emitter still excited at the end of the grid")
    sig = base.lowering(0)
    R = build_product_map(system.basis, sig, side="right")
    i_up = system.basis.raising_index(0)
    X = R @ cs.T
    # g1[j, m] = G1(t_j, m * dtau)
    g1 = np.zeros((n, n), dtype=complex)
    g1[:, 0] = X[i_up]
    for k in range(n - 1):
        X[:, :k + 1] = props[k] @ X[:, :k + 1]
        j = np.arange(k + 1)
        g1[j, k + 1 - j] = X[i_up, :k + 1]
    # trapezoid in t for each delay (row count shrinks with the delay)
    wt = np.full(n, dtau)
    F = np.empty(n, dtype=complex)
    for mlag in range(n):
        rows = n - mlag
        w = wt[:rows].copy()
        w[0] *= 0.5
        w[-1] *= 0.5
        F[mlag] = w @ g1[:rows, mlag] if rows > 1 else 0.0
    tau = times
    wtau = np.full(n, dtau)
    wtau[0] *= 0.5
    wtau[-1] *= 0.5
    S = np.real(np.exp(-1j * np.outer(omegas, tau)) @ (wtau * F))
    return Spectrum(omegas, S, dtau, t_end)


def sensor_spectrum(model, omegas, linewidth: float = 0.05, coupling: float = 1e-3) -> Spectrum:
    """Spectrum from the integrated population of one narrow sensor.

    For a narrow sensor the filtered flux is ``gamma * Gamma * S / 2`` with
    ``S`` normalised as in :func:`spectrum`, which fixes the scale here.
    """
    base = model.model.bare() if isinstance(model, System) else model.bare()
    omegas = np.atleast_1d(np.asarray(omegas, dtype=float))
    S = np.empty(omegas.size)
    for i, w in enumerate(omegas):
        m = make_model(base.pulse.theta, base.pulse.tau_d, base.tls.detuning,
                       sensors=[(w, linewidth)], coupling=coupling,
                       t_center=base.pulse.t_center, gamma_sigma=base.gamma)
        res = integrated_gn(m, 1, 1, [horizon(m)])
        S[i] = linewidth / (2 * coupling ** 2) * res.total(1)
    return Spectrum(omegas, S, 0.0, horizon(make_model(0.0, sensors=[(0, linewidth)])),
                    method="sensor")
