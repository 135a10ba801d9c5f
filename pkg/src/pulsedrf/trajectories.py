"""Quantum-jump (Monte Carlo wave-function) simulation of pulsed emission.

Three unravelings are available:

``bare``
    emitter decay is the only channel; every jump is a detected photon.
``sensor``
    the emitter plus weakly coupled two-level sensors; sensor decays are
    the detection channels. With a vanishing coupling these clicks are rare,
    so this unraveling is mostly useful at moderate couplings.
``filter``
    the emitter output is cascaded into a harmonic filter mode of energy
    decay rate ``Gamma`` with two equal output ports. Light leaving the
    transmission port is detected; the other port (interfering with the
    directly scattered field) is not. The transmission is a Lorentzian of
    full width ``Gamma`` and unit peak, the same filter function as a sensor
    with the ``gamma_sigma (Gamma / 2 eps)^2`` detection rate.

Every trajectory draws its random numbers from a counter-based generator
keyed by ``(seed, index)``, so results do not depend on how trajectories are
grouped or distributed.
"""

from __future__ import annotations

import hashlib
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .engine import IntegratorError, step_propagators
from .model import LOWERING, JointModel, collapse_operators, hamiltonian_parts

MAX_JUMPS = 32
DRAWS = MAX_JUMPS + 1
TIME_TOLERANCE = 1e-10
DEFAULT_CHUNK = 25000
TAIL_FACTOR = 15.0


class RootFindingError(RuntimeError):
    def __init__(self, message: str, t: float):
        super().__init__(f"{message} (t={t:.6g})")
        self.t = t


@dataclass(frozen=True)
class Unraveling:
    """Everything a jump simulation needs.

    ``channels`` hold operators that already include the square root of
    their rate; ``detected`` lists the channel ids that count as clicks.
    """

    kind: str
    h_static: np.ndarray
    h_drive: np.ndarray
    pulse: object
    channels: tuple
    names: tuple
    detected: tuple
    psi0: np.ndarray
    t_end: float
    ground_index: int = 0

    @property
    def dim(self) -> int:
        return self.h_static.shape[0]

    def effective_parts(self):
        """Generators of ``psi' = -i H_eff psi`` split into static and drive."""
        damp = sum(c.conj().T @ c for c in self.channels)
        return -1j * (self.h_static - 0.5j * damp), -1j * self.h_drive


def _tail_end(pulse, slowest: float) -> float:
    return pulse.t_center + max(TAIL_FACTOR / slowest, 10.0 * pulse.tau_d)


def bare_unraveling(model: JointModel) -> Unraveling:
    model = model.bare()
    h0, h1 = hamiltonian_parts(model)
    (rate, c), = collapse_operators(model)
    psi0 = np.zeros(2, dtype=complex)
    psi0[0] = 1.0
    return Unraveling("bare", h0, h1, model.pulse, (math.sqrt(rate) * c,), ("emitter",),
                      (0,), psi0, _tail_end(model.pulse, model.gamma))


def sensor_unraveling(model: JointModel) -> Unraveling:
    """Sensor clicks as detection channels (emitter decay undetected)."""
    if not model.sensors.count:
        raise ValueError("model has no sensors")
    h0, h1 = hamiltonian_parts(model)
    ops = tuple(math.sqrt(r) * c for r, c in collapse_operators(model))
    names = ("emitter",) + tuple(f"sensor{j}" for j in range(1, model.n_modes))
    psi0 = np.zeros(model.hilbert_dim, dtype=complex)
    psi0[0] = 1.0
    return Unraveling("sensor", h0, h1, model.pulse, ops, names,
                      tuple(range(1, model.n_modes)), psi0,
                      _tail_end(model.pulse, min(model.rates())))


def filter_unraveling(model: JointModel, linewidth: float, detuning: float = 0.0,
                      n_fock: int = 4) -> Unraveling:
    """Emitter cascaded into a two-port harmonic filter, Fock space cut at ``n_fock``."""
    if not linewidth > 0:
        raise ValueError("filter linewidth must be positive")
    model = model.bare()
    h0s, h1s = hamiltonian_parts(model)
    nf = n_fock + 1
    a = np.diag(np.sqrt(np.arange(1, nf)), 1).astype(complex)
    eye_f, eye_s = np.eye(nf), np.eye(2)
    sig = np.kron(LOWERING, eye_f)
    af = np.kron(eye_s, a)
    c1 = math.sqrt(model.gamma) * sig
    c2 = math.sqrt(0.5 * linewidth) * af
    h0 = np.kron(h0s, eye_f) + detuning * af.conj().T @ af
    h0 = h0 + 0.5j * (c1.conj().T @ c2 - c2.conj().T @ c1)
    h1 = np.kron(h1s, eye_f)
    psi0 = np.zeros(2 * nf, dtype=complex)
    psi0[0] = 1.0
    return Unraveling("filter", h0, h1, model.pulse, (c1 + c2, c2),
                      ("reflected", "transmitted"), (1,), psi0,
                      _tail_end(model.pulse, min(model.gamma, linewidth)))


def make_unraveling(model: JointModel, kind: str = "bare", **kw) -> Unraveling:
    if kind == "bare":
        return bare_unraveling(model)
    if kind == "sensor":
        return sensor_unraveling(model)
    if kind == "filter":
        return filter_unraveling(model, **kw)
    raise ValueError(f"unknown unraveling {kind!r}")


# ---------------------------------------------------------------------------
# random streams


def _key_for(seed: int) -> np.ndarray:
    return np.random.SeedSequence(seed).generate_state(2, np.uint64)


def trajectory_uniforms(seed: int, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Thresholds and channel draws of trajectory ``index`` (``DRAWS`` each)."""
    gen = np.random.Generator(np.random.Philox(key=_key_for(seed),
                                               counter=[0, int(index), 0, 0]))
    u = gen.random(2 * DRAWS)
    # thresholds must be strictly positive
    return np.maximum(u[:DRAWS], np.finfo(float).tiny), u[DRAWS:]


def _uniform_block(seed: int, indices) -> tuple[np.ndarray, np.ndarray]:
    key = _key_for(seed)
    thr = np.empty((len(indices), DRAWS))
    ch = np.empty((len(indices), DRAWS))
    for r, i in enumerate(indices):
        gen = np.random.Generator(np.random.Philox(key=key, counter=[0, int(i), 0, 0]))
        u = gen.random(2 * DRAWS)
        thr[r], ch[r] = u[:DRAWS], u[DRAWS:]
    return np.maximum(thr, np.finfo(float).tiny), ch


# ---------------------------------------------------------------------------
# records


@dataclass(frozen=True)
class TrajectoryRecord:
    seed: int
    index: int
    jumps: tuple  # ((t, channel), ...)
    overflow: bool = False

    @property
    def times(self) -> tuple:
        return tuple(t for t, _ in self.jumps)


@dataclass
class TrajectoryEnsemble:
    """Jump records of many trajectories in array form.

    ``times[i, k]`` and ``channels[i, k]`` describe the ``k``-th jump of
    trajectory ``i`` (NaN / -1 beyond ``n_jumps[i]``).
    """

    seed: int
    kind: str
    detected: tuple
    start: int
    times: np.ndarray
    channels: np.ndarray
    n_jumps: np.ndarray
    overflow: np.ndarray
    t_end: float = 0.0

    @property
    def size(self) -> int:
        return self.n_jumps.size

    def record(self, i: int) -> TrajectoryRecord:
        n = int(self.n_jumps[i])
        jumps = tuple((float(self.times[i, k]), int(self.channels[i, k])) for k in range(n))
        return TrajectoryRecord(self.seed, self.start + i, jumps, bool(self.overflow[i]))

    def records(self):
        for i in range(self.size):
            yield self.record(i)

    @classmethod
    def merge(cls, parts: list["TrajectoryEnsemble"]) -> "TrajectoryEnsemble":
        parts = sorted(parts, key=lambda p: p.start)
        first = parts[0]
        return cls(first.seed, first.kind, first.detected, first.start,
                   np.concatenate([p.times for p in parts]),
                   np.concatenate([p.channels for p in parts]),
                   np.concatenate([p.n_jumps for p in parts]),
                   np.concatenate([p.overflow for p in parts]), first.t_end)

    def mean_clicks(self, channels=None) -> tuple[float, float]:
        """Mean and standard error of the number of jumps in ``channels``."""
        counts = self.click_counts(channels)
        n = counts.size
        return float(counts.mean()), float(counts.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0

    def click_counts(self, channels=None, t0: float = -np.inf, t1: float = np.inf):
        chans = self.detected if channels is None else tuple(channels)
        ok = ~self.overflow
        mask = np.isin(self.channels, chans) & (self.times >= t0) & (self.times < t1)
        return mask[ok].sum(axis=1)


# ---------------------------------------------------------------------------
# batched propagation


def time_grid(unr: Unraveling, fine: float | None = None, coarse: float = 0.02) -> np.ndarray:
    """Step grid: ``tau_d / 50`` across the pulse, ``coarse`` elsewhere."""
    lo, hi = unr.pulse.support
    fine = unr.pulse.tau_d / 50.0 if fine is None else fine
    lo = max(lo, 0.0)
    parts = []
    if lo > 0:
        parts.append(np.linspace(0.0, lo, max(int(math.ceil(lo / coarse)), 1) + 1)[:-1])
    parts.append(np.linspace(lo, hi, max(int(math.ceil((hi - lo) / fine)), 1) + 1))
    tail = unr.t_end - hi
    if tail > 0:
        parts.append(np.linspace(hi, unr.t_end, max(int(math.ceil(tail / coarse)), 1) + 1)[1:])
    return np.concatenate(parts)


class _Stepper:
    def __init__(self, unr: Unraveling, grid):
        self.unr = unr
        self.grid = np.asarray(grid, dtype=float)
        self.A0, self.A1 = unr.effective_parts()
        # row-vector convention: psi_next = psi @ P[k].T
        self.props = step_propagators(self.A0, self.A1, unr.pulse, self.grid,
                                      rtol=1e-12, atol=1e-14)
        self.propsT = np.ascontiguousarray(np.transpose(self.props, (0, 2, 1)))
        self.A0T = self.A0.T.copy()
        self.A1T = self.A1.T.copy()
        self.ops = np.array(unr.channels)
        self.opsT = np.ascontiguousarray(np.transpose(self.ops, (0, 2, 1)))
        self.off = unr.pulse.support[1]

    def rhs(self, t, psi):
        om = self.unr.pulse(t)
        return psi @ self.A0T + np.asarray(om)[:, None] * (psi @ self.A1T)

    def advance(self, psi, t0, t1, substeps=8):
        """RK4 from per-row ``t0`` to ``t1``."""
        h = (t1 - t0) / substeps
        t = t0.copy()
        hc = h[:, None]
        for _ in range(substeps):
            k1 = self.rhs(t, psi)
            k2 = self.rhs(t + 0.5 * h, psi + 0.5 * hc * k1)
            k3 = self.rhs(t + 0.5 * h, psi + 0.5 * hc * k2)
            k4 = self.rhs(t + h, psi + hc * k3)
            psi = psi + hc / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            t = t + h
        return psi

    def decay_rate(self, psi):
        """``-d|psi|^2/dt`` for each row."""
        return sum(np.sum(np.abs(psi @ oT) ** 2, axis=1) for oT in self.opsT)

    def crossing(self, psi0, t0, t1, thr, n1=None):
        """Per-row time in ``[t0, t1]`` where ``|psi|^2`` falls to ``thr``.

        Safeguarded Newton iteration on the norm with bisection fallback,
        started from linear interpolation when the end-point norms ``n1``
        are known.
        """
        lo, hi = t0.copy(), t1.copy()
        t = 0.5 * (lo + hi)
        if n1 is not None:
            n0 = np.sum(np.abs(psi0) ** 2, axis=1)
            with np.errstate(divide="ignore", invalid="ignore"):
                frac = (n0 - thr) / (n0 - n1)
            t = np.where(np.isfinite(frac), lo + np.clip(frac, 0.01, 0.99) * (hi - lo), t)
        for _ in range(200):
            psi = self.advance(psi0, t0, t)
            f = np.sum(np.abs(psi) ** 2, axis=1) - thr
            above = f > 0
            lo = np.where(above, t, lo)
            hi = np.where(above, hi, t)
            rate = self.decay_rate(psi)
            with np.errstate(divide="ignore", invalid="ignore"):
                newton = t + f / rate
            bad = ~np.isfinite(newton) | (newton <= lo) | (newton >= hi)
            t_new = np.where(bad, 0.5 * (lo + hi), newton)
            done = (np.abs(t_new - t) <= TIME_TOLERANCE * np.maximum(1.0, np.abs(t))) | \
                   (hi - lo <= TIME_TOLERANCE * np.maximum(1.0, np.abs(t)))
            t = t_new
            if done.all():
                return t, self.advance(psi0, t0, t)
        raise RootFindingError("norm crossing did not converge", float(t[0]))


def _simulate_block(unr: Unraveling, stepper: _Stepper, seed: int, start: int, count: int):
    idx = np.arange(start, start + count)
    thr_all, ch_all = _uniform_block(seed, idx)
    d = unr.dim
    psi = np.tile(unr.psi0, (count, 1))
    thr = thr_all[:, 0].copy()
    nj = np.zeros(count, dtype=int)
    times = np.full((count, MAX_JUMPS), np.nan)
    chans = np.full((count, MAX_JUMPS), -1, dtype=np.int16)
    overflow = np.zeros(count, dtype=bool)
    active = np.ones(count, dtype=bool)
    grid = stepper.grid
    ground = np.zeros(d, dtype=bool)
    ground[unr.ground_index] = True
    for k in range(grid.size - 1):
        rows = np.flatnonzero(active)
        if rows.size == 0:
            break
        t0, t1 = grid[k], grid[k + 1]
        start_psi = psi[rows]
        new = start_psi @ stepper.propsT[k]
        norm = np.sum(np.abs(new) ** 2, axis=1)
        hit = norm < thr[rows]
        if hit.any():
            hr = rows[hit]
            cur = start_psi[hit]
            tc = np.full(hr.size, t0)
            pending = np.ones(hr.size, dtype=bool)
            end_psi = new[hit].copy()
            while pending.any():
                p = np.flatnonzero(pending)
                r = hr[p]
                tj, pj = stepper.crossing(cur[p], tc[p], np.full(p.size, t1), thr[r],
                                          np.sum(np.abs(end_psi[p]) ** 2, axis=1))
                # channel choice proportional to the jump weights
                w = np.stack([np.sum(np.abs(pj @ oT) ** 2, axis=1) for oT in stepper.opsT], 1)
                cw = np.cumsum(w, axis=1)
                draw = ch_all[r, nj[r]] * cw[:, -1]
                c = np.minimum((cw <= draw[:, None]).sum(axis=1), len(unr.channels) - 1)
                jumped = np.einsum("rij,rj->ri", stepper.ops[c], pj)
                jumped /= np.linalg.norm(jumped, axis=1)[:, None]
                times[r, nj[r]] = tj
                chans[r, nj[r]] = c
                nj[r] += 1
                over = nj[r] >= MAX_JUMPS
                if over.any():
                    overflow[r[over]] = True
                    active[r[over]] = False
                thr[r] = np.where(over, thr[r], thr_all[r, np.minimum(nj[r], DRAWS - 1)])
                cur[p] = jumped
                tc[p] = tj
                fin = stepper.advance(jumped, tj, np.full(p.size, t1))
                end_psi[p] = fin
                again = (np.sum(np.abs(fin) ** 2, axis=1) < thr[r]) & ~over
                pending[p] = again
            new[hit] = end_psi
        psi[rows] = new
        if t1 >= stepper.off:
            # pure ground states cannot emit once the drive is gone
            exc = np.sum(np.abs(new[:, ~ground]) ** 2, axis=1)
            tot = np.sum(np.abs(new) ** 2, axis=1)
            quiet = exc <= 1e-16 * tot
            active[rows[quiet]] = False
    return TrajectoryEnsemble(seed, unr.kind, unr.detected, start, times, chans, nj, overflow,
                              unr.t_end)


def _chunks(n: int, chunk: int):
    return [(s, min(chunk, n - s)) for s in range(0, n, chunk)]


def _run_chunk(args):
    unr, grid, seed, start, count = args
    return _simulate_block(unr, _stepper_for(unr, grid), seed, start, count)


_STEPPER_CACHE: dict = {}


def _fingerprint(unr: Unraveling, grid) -> str:
    h = hashlib.sha1()
    for arr in (unr.h_static, unr.h_drive, *unr.channels, np.asarray(grid)):
        h.update(np.ascontiguousarray(arr).tobytes())
    h.update(repr((unr.kind, unr.pulse, unr.t_end)).encode())
    return h.hexdigest()


def _stepper_for(unr: Unraveling, grid) -> _Stepper:
    key = _fingerprint(unr, grid)
    st = _STEPPER_CACHE.get(key)
    if st is None:
        if len(_STEPPER_CACHE) > 8:
            _STEPPER_CACHE.clear()
        st = _STEPPER_CACHE[key] = _Stepper(unr, grid)
    return st


def run_ensemble(unr: Unraveling, n_traj: int, seed: int = 0, *, workers: int = 1,
                 chunk: int = DEFAULT_CHUNK, grid=None) -> TrajectoryEnsemble:
    """Simulate trajectories ``0 .. n_traj - 1`` of the stream ``seed``.

    The split into chunks is fixed by ``chunk`` alone, so the result is the
    same for any number of workers.
    """
    if n_traj < 1:
        raise ValueError("need at least one trajectory")
    grid = time_grid(unr) if grid is None else np.asarray(grid, dtype=float)
    tasks = [(unr, grid, seed, s, c) for s, c in _chunks(n_traj, chunk)]
    if workers <= 1 or len(tasks) == 1:
        parts = [_run_chunk(t) for t in tasks]
    else:
        from .sweep import sweep_parallel
        parts = sweep_parallel(_run_chunk, tasks, workers=workers)
    return TrajectoryEnsemble.merge(parts)


# ---------------------------------------------------------------------------
# single trajectory with the adaptive integrator


def run_trajectory(model, seed: int, index: int = 0, *, kind: str = "bare",
                   rtol: float = 1e-9, atol: float = 1e-12, **kw) -> TrajectoryRecord:
    """One trajectory integrated with an adaptive RK45 stepper.

    Between jumps the unnormalised state follows ``-i H_eff``; the jump time
    is located on the dense output by bisection of ``|psi|^2 = u``.
    """
    unr = model if isinstance(model, Unraveling) else make_unraveling(model, kind, **kw)
    A0, A1 = unr.effective_parts()
    pulse = unr.pulse
    thr, chd = trajectory_uniforms(seed, index)

    def rhs(t, y):
        return A0 @ y + pulse(t) * (A1 @ y)

    def event(t, y):
        return float(np.vdot(y, y).real) - threshold

    event.terminal = True
    event.direction = -1
    t, psi = 0.0, unr.psi0.astype(complex)
    jumps = []
    threshold = thr[0]
    lo, hi = pulse.support
    while t < unr.t_end:
        first = min(0.05 * (hi - lo), unr.t_end - t) if t < hi else None
        sol = solve_ivp(rhs, (t, unr.t_end), psi, method="RK45", rtol=rtol, atol=atol,
                        dense_output=True, events=event, first_step=first)
        if sol.status == -1:
            raise IntegratorError(sol.message, float(sol.t[-1]))
        if sol.status == 0:
            break
        # refine the event on the dense output
        a, b = float(sol.t[-2]) if sol.t.size > 1 else t, float(sol.t_events[0][0])
        fa = np.vdot(sol.sol(a), sol.sol(a)).real - threshold
        if fa < 0:
            a = t
        for _ in range(200):
            if b - a <= TIME_TOLERANCE * max(1.0, b):
                break
            m = 0.5 * (a + b)
            y = sol.sol(m)
            if np.vdot(y, y).real > threshold:
                a = m
            else:
                b = m
        else:
            raise RootFindingError("bisection did not converge", b)
        tj = 0.5 * (a + b)
        yj = sol.sol(tj)
        w = np.array([np.vdot(c @ yj, c @ yj).real for c in unr.channels])
        cw = np.cumsum(w)
        c = int(min(np.searchsorted(cw, chd[len(jumps)] * cw[-1], side="right"),
                    len(w) - 1))
        jumps.append((tj, c))
        if len(jumps) >= MAX_JUMPS:
            return TrajectoryRecord(seed, index, tuple(jumps), True)
        psi = unr.channels[c] @ yj
        psi = psi / np.linalg.norm(psi)
        threshold = thr[len(jumps)]
        t = tj
    return TrajectoryRecord(seed, index, tuple(jumps), False)


# ---------------------------------------------------------------------------
# counting statistics


@dataclass
class CountingHistogram:
    """Frequencies of (Early, Late) click counts with a split at ``T``.

    Keys are ``(m, n)`` when channels are pooled and
    ``(m_1, n_1, m_2, n_2, ...)`` per channel otherwise.
    """

    T: float
    counts: dict
    n_traj: int
    overflowed: int = 0
    channels: tuple = ()

    def probabilities(self) -> dict:
        """``key -> (P, standard error)`` with binomial errors."""
        n = self.n_traj
        out = {}
        for k, c in sorted(self.counts.items()):
            p = c / n
            out[k] = (p, math.sqrt(max(p * (1 - p), 0.0) / n))
        return out

    def p(self, key) -> float:
        return self.counts.get(key, 0) / self.n_traj

    def se(self, key) -> float:
        p = self.p(key)
        # one pseudo-count keeps the error finite for empty cells
        p_eff = p if self.counts.get(key, 0) else 1.0 / self.n_traj
        return math.sqrt(p_eff * (1 - p_eff) / self.n_traj)

    def pn(self) -> dict:
        out: dict = {}
        for k, c in self.counts.items():
            tot = sum(k)
            out[tot] = out.get(tot, 0) + c
        return {k: v / self.n_traj for k, v in sorted(out.items())}


def estimate_probabilities(ensemble, T: float, channels=None,
                           per_channel: bool = False) -> CountingHistogram:
    """Empirical Early/Late counting statistics of an ensemble.

    Accepts a :class:`TrajectoryEnsemble` or an iterable of
    :class:`TrajectoryRecord`. Overflowed trajectories are excluded and
    reported separately.
    """
    if not isinstance(ensemble, TrajectoryEnsemble):
        recs = list(ensemble)
        if not recs:
            raise ValueError("empty ensemble")
        chans = tuple(channels) if channels is not None else None
        if per_channel and chans is None:
            raise ValueError("per-channel counts need an explicit channel list")
        counts: Counter = Counter()
        over = 0
        for rec in recs:
            if rec.overflow:
                over += 1
                continue
            counts[_key_from(rec.jumps, T, chans, per_channel)] += 1
        return CountingHistogram(T, dict(counts), len(recs) - over, over, chans or ())
    chans = ensemble.detected if channels is None else tuple(channels)
    ok = ~ensemble.overflow
    t = ensemble.times[ok]
    ch = ensemble.channels[ok]
    early = t < T
    if per_channel:
        cols = []
        for c in chans:
            sel = ch == c
            cols += [(sel & early).sum(1), (sel & ~early).sum(1)]
        keys = np.stack(cols, 1)
    else:
        sel = np.isin(ch, chans)
        keys = np.stack([(sel & early).sum(1), (sel & ~early & ~np.isnan(t)).sum(1)], 1)
    uniq, cnt = np.unique(keys, axis=0, return_counts=True)
    counts = {tuple(int(x) for x in u): int(c) for u, c in zip(uniq, cnt)}
    return CountingHistogram(T, counts, int(ok.sum()), int((~ok).sum()), chans)


def _key_from(jumps, T, chans, per_channel):
    groups = [(c,) for c in chans] if per_channel else [chans]
    key = []
    for g in groups:
        ts = [t for t, c in jumps if g is None or c in g]
        m = sum(1 for t in ts if t < T)
        key += [m, len(ts) - m]
    return tuple(key)
