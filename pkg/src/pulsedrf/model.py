"""Operators, Hamiltonians and Liouvillians for a pulsed two-level emitter
with an optional bank of weakly coupled two-level sensors.

Conventions
-----------
* Units: the emitter decay rate ``gamma_sigma`` sets the scale (default 1).
* Local basis of every two-level factor is ``(|G>, |X>)`` so the lowering
  operator is ``[[0, 1], [0, 0]]``.
* Tensor ordering: emitter first, then sensors in bank order.
* Superoperators act on column-stacked density matrices,
  ``vec(A X B) = (B^T kron A) vec(X)``; use :func:`vec` / :func:`unvec`.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property, reduce
from typing import Sequence

import numpy as np

SQRT_2PI = math.sqrt(2.0 * math.pi)

LOWERING = np.array([[0.0, 1.0], [0.0, 0.0]], dtype=complex)
IDENTITY2 = np.eye(2, dtype=complex)

# envelope is treated as switched off beyond this many pulse durations
PULSE_SUPPORT_WIDTHS = 8.0


class ModelError(ValueError):
    """Invalid model parametrisation."""


def vec(rho: np.ndarray) -> np.ndarray:
    return np.asarray(rho).reshape(-1, order="F")


def unvec(v: np.ndarray, dim: int | None = None) -> np.ndarray:
    v = np.asarray(v)
    if dim is None:
        dim = math.isqrt(v.shape[0])
    return v.reshape((dim, dim), order="F")


@dataclass(frozen=True)
class PulseEnvelope:
    """Gaussian drive envelope with area ``theta`` and width ``tau_d``.

    ``t_center`` defaults to ``5 * tau_d`` so that the simulation origin
    ``t = 0`` precedes essentially all of the pulse.
    """

    theta: float
    tau_d: float = 0.1
    t_center: float | None = None

    def __post_init__(self):
        if not self.tau_d > 0:
            raise ModelError(f"pulse duration must be positive, got {self.tau_d}")
        if self.t_center is None:
            object.__setattr__(self, "t_center", 5.0 * self.tau_d)

    @property
    def peak(self) -> float:
        return self.theta / (SQRT_2PI * self.tau_d)

    def __call__(self, t):
        x = (np.asarray(t, dtype=float) - self.t_center) / self.tau_d
        out = self.peak * np.exp(-0.5 * x * x)
        return float(out) if out.ndim == 0 else out

    def area(self, t0: float = -np.inf, t1: float = np.inf) -> float:
        """Closed-form integral of the envelope over ``[t0, t1]``."""
        s = math.sqrt(2.0) * self.tau_d
        return 0.5 * self.theta * (math.erf((t1 - self.t_center) / s)
                                   - math.erf((t0 - self.t_center) / s))

    @property
    def support(self) -> tuple[float, float]:
        """Interval outside of which the drive is numerically zero."""
        w = PULSE_SUPPORT_WIDTHS * self.tau_d
        return (self.t_center - w, self.t_center + w)


@dataclass(frozen=True)
class TabulatedEnvelope:
    """Piecewise-linear envelope from samples (zero outside the table).

    Only provided as an escape hatch for non-Gaussian drives; everything in
    the package is validated against :class:`PulseEnvelope`.
    """

    times: tuple
    values: tuple

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or t.size < 2 or np.any(np.diff(t) <= 0):
            raise ModelError("tabulated envelope needs strictly increasing times")
        if len(self.values) != t.size:
            raise ModelError("times and values differ in length")

    def __call__(self, t):
        out = np.interp(t, self.times, self.values, left=0.0, right=0.0)
        return float(out) if np.ndim(out) == 0 else out

    def area(self, t0: float = -np.inf, t1: float = np.inf) -> float:
        t = np.asarray(self.times)
        y = np.asarray(self.values)
        mask = (t >= t0) & (t <= t1)
        return float(np.trapezoid(y[mask], t[mask]))

    @property
    def support(self) -> tuple[float, float]:
        return (float(self.times[0]), float(self.times[-1]))

    @property
    def theta(self) -> float:
        return self.area()

    @property
    def tau_d(self) -> float:
        # rough width estimate, only used to choose horizons and grids
        return 0.25 * (self.times[-1] - self.times[0])

    @property
    def t_center(self) -> float:
        return 0.5 * (self.times[0] + self.times[-1])


def envelope_at(pulse, t):
    """Rabi frequency of the drive at time(s) ``t``."""
    return pulse(t)


@dataclass(frozen=True)
class TwoLevelParams:
    detuning: float = 0.0
    gamma_sigma: float = 1.0

    def __post_init__(self):
        if not self.gamma_sigma > 0:
            raise ModelError(f"gamma_sigma must be positive, got {self.gamma_sigma}")


@dataclass(frozen=True)
class Sensor:
    detuning: float
    linewidth: float

    def __post_init__(self):
        if not self.linewidth > 0:
            raise ModelError(f"sensor linewidth must be positive, got {self.linewidth}")


@dataclass(frozen=True)
class SensorBank:
    sensors: tuple[Sensor, ...] = ()
    coupling: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "sensors", tuple(self.sensors))
        if len(self.sensors) > 2:
            raise ModelError("at most two sensors are supported")
        if self.sensors and not self.coupling > 0:
            raise ModelError(f"sensor coupling must be positive, got {self.coupling}")

    @property
    def count(self) -> int:
        return len(self.sensors)


def sensor_bank(*specs: tuple[float, float], coupling: float = 1e-3) -> SensorBank:
    """Shorthand: ``sensor_bank((w_a, G_a), (w_b, G_b))``."""
    return SensorBank(tuple(Sensor(w, g) for w, g in specs), coupling)


# coupling must stay below this fraction of the smallest rate
WEAK_COUPLING_FRACTION = 0.05


@dataclass(frozen=True)
class JointModel:
    """Driven emitter plus sensors; mode 0 is the emitter, mode j the j-th sensor."""

    tls: TwoLevelParams
    pulse: PulseEnvelope
    sensors: SensorBank = field(default_factory=SensorBank)

    def __post_init__(self):
        if self.sensors.count:
            smallest = min([s.linewidth for s in self.sensors.sensors]
                           + [self.tls.gamma_sigma])
            if self.sensors.coupling > WEAK_COUPLING_FRACTION * smallest:
                warnings.warn(
                    f"sensor coupling {self.sensors.coupling:g} is not small against "
                    f"the smallest rate {smallest:g}; sensors will perturb the emitter",
                    stacklevel=3,
                )

    @property
    def n_modes(self) -> int:
        return 1 + self.sensors.count

    @property
    def hilbert_dim(self) -> int:
        return 2 ** self.n_modes

    @property
    def gamma(self) -> float:
        return self.tls.gamma_sigma

    def rates(self) -> tuple[float, ...]:
        """Decay rate of each mode."""
        return (self.tls.gamma_sigma,) + tuple(s.linewidth for s in self.sensors.sensors)

    def frequencies(self) -> tuple[float, ...]:
        return (self.tls.detuning,) + tuple(s.detuning for s in self.sensors.sensors)

    def bare(self) -> "JointModel":
        """Same emitter and pulse without sensors."""
        return JointModel(self.tls, self.pulse)

    def with_sensors(self, bank: SensorBank) -> "JointModel":
        return JointModel(self.tls, self.pulse, bank)

    def with_pulse(self, **changes) -> "JointModel":
        kw = dict(theta=self.pulse.theta, tau_d=self.pulse.tau_d,
                  t_center=self.pulse.t_center)
        kw.update(changes)
        return JointModel(self.tls, PulseEnvelope(**kw), self.sensors)

    def lowering(self, mode: int) -> np.ndarray:
        return self._lowering[mode]

    @cached_property
    def _lowering(self) -> tuple[np.ndarray, ...]:
        return tuple(embed(LOWERING, m, self.n_modes) for m in range(self.n_modes))


def embed(op: np.ndarray, mode: int, n_modes: int) -> np.ndarray:
    """Place a single-qubit operator on tensor factor ``mode``."""
    if not 0 <= mode < n_modes:
        raise ModelError(f"mode {mode} outside 0..{n_modes - 1}")
    factors = [IDENTITY2] * n_modes
    factors[mode] = op
    return reduce(np.kron, factors)


def make_model(theta: float, tau_d: float = 0.1, detuning: float = 0.0,
               sensors: Sequence[tuple[float, float]] = (), coupling: float = 1e-3,
               t_center: float | None = None, gamma_sigma: float = 1.0) -> JointModel:
    """Convenience constructor used throughout tests and the CLI."""
    return JointModel(
        TwoLevelParams(detuning, gamma_sigma),
        PulseEnvelope(theta, tau_d, t_center),
        sensor_bank(*sensors, coupling=coupling),
    )


def hamiltonian_parts(model: JointModel) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(H_static, H_drive)`` with ``H(t) = H_static + Omega(t) H_drive``."""
    n = model.n_modes
    sig = model.lowering(0)
    h0 = model.tls.detuning * sig.conj().T @ sig
    eps = model.sensors.coupling
    for j, sensor in enumerate(model.sensors.sensors, start=1):
        z = model.lowering(j)
        h0 = h0 + sensor.detuning * z.conj().T @ z
        h0 = h0 + eps * (sig.conj().T @ z + z.conj().T @ sig)
    h1 = 0.5 * (sig + sig.conj().T)
    assert h0.shape == (2 ** n, 2 ** n)
    return h0, h1


def build_hamiltonian(model: JointModel, t: float) -> np.ndarray:
    h0, h1 = hamiltonian_parts(model)
    return h0 + model.pulse(t) * h1


def collapse_operators(model: JointModel) -> list[tuple[float, np.ndarray]]:
    """``(rate, c)`` pairs; the dissipator is ``rate * D[c]``."""
    return [(rate, model.lowering(m)) for m, rate in enumerate(model.rates())]


def _commutator_super(h: np.ndarray) -> np.ndarray:
    eye = np.eye(h.shape[0])
    # vec(i[rho, H]) = i (H^T kron 1 - 1 kron H) vec(rho)
    return 1j * (np.kron(h.T, eye) - np.kron(eye, h))


def dissipator_super(c: np.ndarray) -> np.ndarray:
    """Superoperator of ``D[c] rho = c rho c^+ - (c^+ c rho + rho c^+ c) / 2``."""
    eye = np.eye(c.shape[0])
    cdc = c.conj().T @ c
    return np.kron(c.conj(), c) - 0.5 * (np.kron(eye, cdc) + np.kron(cdc.T, eye))


def liouvillian_parts(model: JointModel) -> tuple[np.ndarray, np.ndarray]:
    """``(L_static, L_drive)`` such that ``L(t) = L_static + Omega(t) L_drive``."""
    h0, h1 = hamiltonian_parts(model)
    l0 = _commutator_super(h0)
    for rate, c in collapse_operators(model):
        l0 = l0 + rate * dissipator_super(c)
    return l0, _commutator_super(h1)


def build_liouvillian(model: JointModel, t: float) -> np.ndarray:
    l0, l1 = liouvillian_parts(model)
    return l0 + model.pulse(t) * l1


def ground_state(model: JointModel) -> np.ndarray:
    rho = np.zeros((model.hilbert_dim,) * 2, dtype=complex)
    rho[0, 0] = 1.0
    return rho


def excited_state(model: JointModel) -> np.ndarray:
    """Emitter excited, sensors empty."""
    psi = np.zeros(model.hilbert_dim, dtype=complex)
    psi[model.hilbert_dim // 2] = 1.0
    return np.outer(psi, psi)
