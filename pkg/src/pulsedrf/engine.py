"""Closed moment equations over a complete operator basis and time propagation.

For ``n`` two-level modes the operator products over ``{1, a, a^+, a^+ a}``
form a complete basis of the ``4**n``-dimensional operator space, so the
equations ``d<c>/dt = M(t) <c>`` close exactly and the sandwich map
``a^+ c a`` re-expands with no remainder.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.integrate import solve_ivp
from scipy.linalg import expm

from .model import (
    LOWERING,
    IDENTITY2,
    JointModel,
    collapse_operators,
    ground_state,
    hamiltonian_parts,
    liouvillian_parts,
    vec,
)

DEFAULT_RTOL = 1e-9
DEFAULT_ATOL = 1e-12

# single-mode factors of the basis, in order
FACTOR_LABELS = ("1", "a", "ad", "n")
_FACTOR_MATRICES = {
    "1": IDENTITY2,
    "a": LOWERING,
    "ad": LOWERING.conj().T,
    "n": LOWERING.conj().T @ LOWERING,
}
# number of ladder operators in each factor (sets the size of sensor moments)
_FACTOR_ORDER = {"1": 0, "a": 1, "ad": 1, "n": 2}


class IntegratorError(RuntimeError):
    """The adaptive integrator could not reach the requested end time."""

    def __init__(self, message: str, t: float | None = None):
        super().__init__(message if t is None else f"{message} (at t={t:.6g})")
        self.t = t


class UnconvergedTailError(RuntimeError):
    """Excitation left at the end of the horizon is too large for T -> infinity."""


@dataclass(frozen=True)
class ObservableBasis:
    labels: tuple[tuple[str, ...], ...]
    matrices: np.ndarray = field(repr=False)
    coupling: float = 1.0

    @cached_property
    def index(self) -> dict[tuple[str, ...], int]:
        return {lab: i for i, lab in enumerate(self.labels)}

    @property
    def size(self) -> int:
        return len(self.labels)

    @property
    def n_modes(self) -> int:
        return len(self.labels[0])

    def element(self, ops: dict[int, str]) -> int:
        """Index of the product with ``ops[mode]`` on the given modes, identity elsewhere."""
        lab = tuple(ops.get(m, "1") for m in range(self.n_modes))
        return self.index[lab]

    def number_index(self, mode: int) -> int:
        return self.element({mode: "n"})

    def lowering_index(self, mode: int) -> int:
        return self.element({mode: "a"})

    def raising_index(self, mode: int) -> int:
        return self.element({mode: "ad"})

    @cached_property
    def columns(self) -> np.ndarray:
        """Column-stacked basis matrices as columns (dim^2 x size)."""
        return np.stack([vec(m) for m in self.matrices], axis=1)

    @cached_property
    def _inverse(self) -> np.ndarray:
        return np.linalg.inv(self.columns)

    def expand(self, op: np.ndarray) -> np.ndarray:
        """Coefficients ``x`` with ``op = sum_j x_j c_j``."""
        return self._inverse @ vec(op)

    def superop_matrix(self, superop: np.ndarray) -> np.ndarray:
        """Matrix ``A`` with ``S(c_i) = sum_j A_ij c_j`` for a superoperator ``S``."""
        return (self._inverse @ superop @ self.columns).T

    def expectations(self, rho: np.ndarray) -> np.ndarray:
        """``Tr(c_i rho)`` for every basis element."""
        return np.einsum("kij,ji->k", self.matrices, rho)

    @cached_property
    def scale(self) -> np.ndarray:
        """Typical magnitude of each moment: ``coupling**(sensor ladder order)``.

        Sensor moments vanish with the coupling; integrator absolute
        tolerances are scaled by this vector so they stay resolved.
        """
        orders = [sum(_FACTOR_ORDER[f] for f in lab[1:]) for lab in self.labels]
        return np.array([self.coupling ** k for k in orders], dtype=float)

    def mode_scale(self, mode: int) -> float:
        """Extra magnitude picked up by sandwiching with mode ``mode``."""
        return 1.0 if mode == 0 else self.coupling ** 2


def build_basis(model: JointModel) -> ObservableBasis:
    n = model.n_modes
    if n > 3:
        raise ValueError("basis construction supports at most three modes")
    labels = tuple(itertools.product(FACTOR_LABELS, repeat=n))
    mats = []
    for lab in labels:
        m = np.ones((1, 1), dtype=complex)
        for f in lab:
            m = np.kron(m, _FACTOR_MATRICES[f])
        mats.append(m)
    coupling = model.sensors.coupling if model.sensors.count else 1.0
    return ObservableBasis(labels, np.array(mats), coupling)


@dataclass(frozen=True)
class MomentMatrix:
    """``M(t) = static + Omega(t) * drive`` acting on the moment vector."""

    static: np.ndarray
    drive: np.ndarray
    pulse: object

    def __call__(self, t: float) -> np.ndarray:
        return self.static + self.pulse(t) * self.drive

    @property
    def size(self) -> int:
        return self.static.shape[0]


def heisenberg_super(model: JointModel) -> tuple[np.ndarray, np.ndarray]:
    """Adjoint generator ``L^+(X) = i[H, X] + sum r (c^+ X c - {c^+ c, X}/2)``."""
    h0, h1 = hamiltonian_parts(model)
    eye = np.eye(model.hilbert_dim)

    def comm(h):
        # vec(i[H, X]) = i (1 kron H - H^T kron 1) vec(X)
        return 1j * (np.kron(eye, h) - np.kron(h.T, eye))

    s0 = comm(h0)
    for rate, c in collapse_operators(model):
        cdc = c.conj().T @ c
        s0 = s0 + rate * (np.kron(c.T, c.conj().T)
                          - 0.5 * (np.kron(eye, cdc) + np.kron(cdc.T, eye)))
    return s0, comm(h1)


def build_moment_matrix(model: JointModel, basis: ObservableBasis) -> MomentMatrix:
    s0, s1 = heisenberg_super(model)
    m0 = basis.superop_matrix(s0)
    m1 = basis.superop_matrix(s1)
    # exact zeros in the identity row (round-off otherwise)
    m0[0, :] = 0.0
    m1[0, :] = 0.0
    return MomentMatrix(_clean(m0), _clean(m1), model.pulse)


def build_sandwich_map(model: JointModel, basis: ObservableBasis, mode: int) -> np.ndarray:
    """Constant ``C`` with ``<a^+ c_i a> = sum_j C_ij <c_j>`` for ``a`` the mode's lowering op."""
    a = model.lowering(mode)
    return _clean(basis.superop_matrix(np.kron(a.T, a.conj().T)))


def build_product_map(basis: ObservableBasis, op: np.ndarray, side: str = "right") -> np.ndarray:
    """Constant ``R`` with ``<c_i op> = sum_j R_ij <c_j>`` (or ``<op c_i>`` for ``side='left'``)."""
    eye = np.eye(op.shape[0])
    s = np.kron(op.T, eye) if side == "right" else np.kron(eye, op)
    return _clean(basis.superop_matrix(s))


def _clean(a: np.ndarray, tol: float = 1e-13) -> np.ndarray:
    a = np.array(a, dtype=complex)
    a.real[np.abs(a.real) < tol] = 0.0
    a.imag[np.abs(a.imag) < tol] = 0.0
    return a


@dataclass
class System:
    """Everything derived once per model: basis, M(t), sandwich maps."""

    model: JointModel
    basis: ObservableBasis
    moments: MomentMatrix
    sandwich: tuple[np.ndarray, ...]

    @classmethod
    def from_model(cls, model: JointModel) -> "System":
        basis = build_basis(model)
        mm = build_moment_matrix(model, basis)
        sw = tuple(build_sandwich_map(model, basis, m) for m in range(model.n_modes))
        return cls(model, basis, mm, sw)

    def initial_moments(self, rho0: np.ndarray | None = None) -> np.ndarray:
        if rho0 is None:
            rho0 = ground_state(self.model)
        return self.basis.expectations(rho0)


def horizon(model: JointModel) -> float:
    """End time after which all modes are treated as empty."""
    slowest = min(model.rates())
    return model.pulse.t_center + max(15.0 / slowest, 10.0 * model.pulse.tau_d)


TAIL_TOLERANCE = 1e-6


def tail_residual(model: JointModel, basis: ObservableBasis, c_end: np.ndarray,
                  integrated_pops: np.ndarray | None = None) -> float:
    """Largest fraction of a mode's emission still pending at the horizon.

    For the emitter the population left over is used directly; sensor
    populations are compared with their own integrated emission.
    """
    worst = abs(c_end[basis.number_index(0)].real)
    for m in range(1, model.n_modes):
        pop = abs(c_end[basis.number_index(m)].real)
        if integrated_pops is not None and integrated_pops[m] > 0:
            rate = model.rates()[m]
            worst = max(worst, pop / (rate * integrated_pops[m]))
        else:
            worst = max(worst, pop / basis.coupling ** 2)
    return worst


def _pulse_window(pulse, t0: float, t1: float) -> bool:
    lo, hi = pulse.support
    return t1 > lo and t0 < hi


def linear_rhs(static: np.ndarray, drive: np.ndarray, pulse):
    lo, hi = pulse.support

    def rhs(t, y):
        if lo < t < hi:
            return static @ y + pulse(t) * (drive @ y)
        return static @ y

    return rhs


def solve_linear(static, drive, pulse, y0, t0, t1, *, rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL,
                 t_eval=None, dense=False, method="RK45"):
    """Integrate ``y' = (static + Omega(t) drive) y`` with an embedded RK pair."""
    rhs = linear_rhs(static, drive, pulse)
    y0 = np.asarray(y0, dtype=complex)
    if t1 <= t0:
        raise ValueError(f"end time {t1} must exceed start time {t0}")
    # keep the first step from jumping over the pulse
    lo, hi = pulse.support
    first = None
    if t0 < hi:
        first = max(min(0.05 * (hi - lo), t1 - t0), 1e-12) if (hi - lo) > 0 else None
    sol = solve_ivp(rhs, (t0, t1), y0, method=method, rtol=rtol, atol=atol,
                    t_eval=t_eval, dense_output=dense, first_step=first)
    if sol.status != 0:
        tfail = float(sol.t[-1]) if sol.t.size else t0
        raise IntegratorError(f"integration failed: {sol.message}", tfail)
    return sol


@dataclass
class LinearSolution:
    t: np.ndarray
    y: np.ndarray


def evolve_linear(static, drive, pulse, y0, t0, t_eval, *, rtol=DEFAULT_RTOL,
                  atol=DEFAULT_ATOL, method="RK45") -> LinearSolution:
    """Values of ``y' = (static + Omega(t) drive) y`` at the times ``t_eval``.

    The adaptive integrator only covers the part of ``[t0, t_eval[-1]]`` where
    the drive is on; past the pulse the generator is constant and the
    solution is advanced with exact matrix exponentials.
    """
    t_eval = np.asarray(t_eval, dtype=float)
    if t_eval.size == 0:
        return LinearSolution(t_eval, np.empty((len(y0), 0), dtype=complex))
    if np.any(np.diff(t_eval) < 0) or t_eval[0] < t0:
        raise ValueError("evaluation times must be ascending and not before t0")
    y0 = np.asarray(y0, dtype=complex)
    out = np.empty((y0.size, t_eval.size), dtype=complex)
    t_off = max(t0, pulse.support[1])
    driven = t_eval <= t_off
    y, t = y0, t0
    if driven.any() or t0 < t_off:
        stop = min(t_off, float(t_eval[-1]))
        at = t_eval[driven]
        at_pos = at[at > t0]
        out[:, driven & (t_eval <= t0)] = y0[:, None]
        if stop > t0:
            teval = np.unique(np.append(at_pos, stop))
            sol = solve_linear(static, drive, pulse, y0, t0, stop, rtol=rtol, atol=atol,
                               t_eval=teval, method=method)
            idx = np.searchsorted(teval, at_pos)
            out[:, driven & (t_eval > t0)] = sol.y[:, idx]
            y, t = sol.y[:, -1], stop
    for k in np.flatnonzero(~driven):
        dt = t_eval[k] - t
        if dt > 0:
            y = expm(static * dt) @ y
            t = t_eval[k]
        out[:, k] = y
    return LinearSolution(t_eval, out)


@dataclass
class MomentTrajectory:
    t: np.ndarray
    values: np.ndarray  # (size, len(t))
    rtol: float
    atol: float
    sol: object = field(default=None, repr=False)

    def __call__(self, t):
        if self.sol is None:
            raise ValueError("trajectory was computed without dense output")
        return self.sol(t)


def propagate_moments(M: MomentMatrix, init, t0: float, t1: float, tol: float | None = None,
                      *, t_eval=None, atol=None, scale=None) -> MomentTrajectory:
    """Solve ``d<c>/dt = M(t) <c>`` from ``t0`` to ``t1``.

    ``tol`` is the relative tolerance (default ``1e-9``); the absolute
    tolerance is ``atol * scale`` elementwise.
    """
    rtol = DEFAULT_RTOL if tol is None else tol
    atol = DEFAULT_ATOL if atol is None else atol
    atol_vec = atol if scale is None else atol * np.asarray(scale)
    sol = solve_linear(M.static, M.drive, M.pulse, init, t0, t1, rtol=rtol, atol=atol_vec,
                       t_eval=t_eval, dense=True)
    init = np.asarray(init)
    if abs(init[0] - 1.0) < 1e-12:
        drift = np.max(np.abs(sol.y[0] - 1.0))
        if drift > 1e-8:
            raise IntegratorError(f"identity moment drifted by {drift:.2e}")
    return MomentTrajectory(sol.t, sol.y, rtol, atol, sol.sol)


@dataclass
class DensityTrajectory:
    t: np.ndarray
    rho: np.ndarray  # (len(t), dim, dim)
    rtol: float
    atol: float


def propagate_density(model: JointModel, rho0: np.ndarray, t0: float, t1: float,
                      tol: float | None = None, *, t_eval=None, atol=None) -> DensityTrajectory:
    """Solve the master equation for the column-stacked density matrix."""
    rho0 = np.asarray(rho0, dtype=complex)
    if not np.allclose(rho0, rho0.conj().T, atol=1e-12):
        raise ValueError("initial density matrix is not Hermitian")
    if abs(np.trace(rho0) - 1) > 1e-10:
        raise ValueError("initial density matrix does not have unit trace")
    if np.linalg.eigvalsh(rho0).min() < -1e-12:
        raise ValueError("initial density matrix is not positive semidefinite")
    rtol = DEFAULT_RTOL if tol is None else tol
    atol = DEFAULT_ATOL if atol is None else atol
    l0, l1 = liouvillian_parts(model)
    sol = solve_linear(l0, l1, model.pulse, vec(rho0), t0, t1, rtol=rtol, atol=atol,
                       t_eval=t_eval)
    d = model.hilbert_dim
    rho = sol.y.T.reshape(-1, d, d).transpose(0, 2, 1)
    return DensityTrajectory(sol.t, rho, rtol, atol)


def step_propagators(static: np.ndarray, drive: np.ndarray, pulse, grid, *,
                     rtol: float = 1e-11, atol: float = 1e-13) -> np.ndarray:
    """Exact propagators of ``y' = (static + Omega(t) drive) y`` between grid nodes.

    Returns ``P`` of shape ``(len(grid) - 1, n, n)`` with
    ``y(grid[k+1]) = P[k] @ y(grid[k])``. Intervals where the drive is off
    use the matrix exponential; the rest integrate the matrix equation.
    """
    grid = np.asarray(grid, dtype=float)
    n = static.shape[0]
    out = np.empty((grid.size - 1, n, n), dtype=complex)
    cache: dict[float, np.ndarray] = {}
    eye = np.eye(n, dtype=complex)
    rhs = linear_rhs(static, drive, pulse)
    for k in range(grid.size - 1):
        t0, t1 = grid[k], grid[k + 1]
        dt = t1 - t0
        if not _pulse_window(pulse, t0, t1):
            key = round(dt, 14)
            if key not in cache:
                cache[key] = expm(static * dt)
            out[k] = cache[key]
            continue

        def mrhs(t, y):
            return rhs(t, y.reshape(n, n)).reshape(-1)

        sol = solve_ivp(mrhs, (t0, t1), eye.reshape(-1), method="DOP853",
                        rtol=rtol, atol=atol)
        if sol.status != 0:
            raise IntegratorError(f"propagator integration failed: {sol.message}", t0)
        out[k] = sol.y[:, -1].reshape(n, n)
    return out


def moments_on_grid(system: System, grid, rho0=None) -> np.ndarray:
    """Moments at every grid node from the same propagators used by grid oracles."""
    m = system.moments
    props = step_propagators(m.static, m.drive, m.pulse, grid)
    out = np.empty((len(grid), m.size), dtype=complex)
    out[0] = system.initial_moments(rho0)
    for k, p in enumerate(props):
        out[k + 1] = p @ out[k]
    return out, props
