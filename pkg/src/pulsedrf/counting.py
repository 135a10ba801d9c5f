"""Photon-counting probabilities from time-integrated correlators.

Detections of mode ``a`` inside a time window are described by the
integrated intensity ``Omega_a = xi_a * r_a * int a^+ a dt`` where ``r_a`` is
the detector rate of the mode (the emitter decay rate, or
``gamma_sigma (Gamma / 2 eps)^2`` for a sensor) and ``xi_a`` an efficiency.
Normal-ordered moments of these intensities feed the Mandel-type formulas.

Bins are labelled ``"E"`` (``[0, T]``), ``"L"`` (``[T, inf)``) and ``"T"``
(the whole emission).
"""

from __future__ import annotations

import itertools
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .correlators import (
    DegenerateInputError,
    bin_moment_scan,
    get_system,
    integrated_gn,
    integrated_total,
    two_bin_scan,
)
from .engine import horizon
from .model import JointModel, make_model

EARLY, LATE, TOTAL = "E", "L", "T"

CONVERGENCE_THRESHOLD = 1e-3
CLAMP_TOLERANCE = 1e-4


def detector_rate(model: JointModel, mode: int) -> float:
    """Rate converting the integrated population of ``mode`` into detections."""
    if mode == 0:
        return model.gamma
    linewidth = model.sensors.sensors[mode - 1].linewidth
    return model.gamma * (linewidth / (2.0 * model.sensors.coupling)) ** 2


def _key(*factors) -> tuple:
    return tuple(sorted(factors))


@dataclass
class IntensityMoments:
    """Table of ``<:prod Omega_(mode, bin):>`` keyed by sorted factor tuples.

    A key such as ``((1, "E"), (2, "L"))`` stands for
    ``<:Omega_{1,E} Omega_{2,L}:>``; single factors give mean intensities.
    """

    values: dict = field(default_factory=dict)
    rates: dict = field(default_factory=dict)
    efficiency: dict = field(default_factory=dict)
    split: float | None = None

    def __getitem__(self, factors) -> float:
        return self.values[_key(*factors)]

    def get(self, *factors) -> float:
        return self.values[_key(*factors)]

    def has(self, *factors) -> bool:
        return _key(*factors) in self.values

    @property
    def modes(self) -> tuple[int, ...]:
        return tuple(sorted(self.rates))

    def set(self, factors, raw: float):
        """Store a raw integrated correlator, applying detector rates."""
        w = 1.0
        for mode, _ in factors:
            w *= self.rates[mode] * self.efficiency.get(mode, 1.0)
        self.values[_key(*factors)] = w * float(raw)

    def total_moment(self, order: int, modes=None) -> float:
        """``<:(sum_modes Omega_{mode,T})^order:>`` via the multinomial expansion."""
        modes = tuple(modes) if modes is not None else self.modes
        if order == 0:
            return 1.0
        out = 0.0
        for combo in itertools.combinations_with_replacement(modes, order):
            counts = Counter(combo)
            mult = math.factorial(order)
            for c in counts.values():
                mult //= math.factorial(c)
            out += mult * self.get(*((m, TOTAL) for m in combo))
        return out


def _base(model, modes, efficiency, T) -> IntensityMoments:
    eff = efficiency if isinstance(efficiency, dict) else {m: float(efficiency) for m in modes}
    return IntensityMoments({}, {m: detector_rate(model, m) for m in modes}, eff,
                             None if T is None else float(T))


def intensity_moments_one_mode(model, mode: int = 0, T: float | None = None, n_max: int = 2,
                               *, efficiency=1.0, **kw) -> IntensityMoments:
    """Intensity moments of a single mode.

    Total-emission moments are filled up to ``n_max``. When a split ``T`` is
    given the Early/Late first and second moments are added too, with the
    Late entries following from the totals by subtraction.
    """
    system = get_system(model) if isinstance(model, JointModel) else model
    model = system.model
    out = _base(model, (mode,), efficiency, T)
    t_end = horizon(model)
    hc = integrated_gn(system, mode, max(n_max, 1), [t_end], **kw)
    for k in range(1, n_max + 1):
        out.set([(mode, TOTAL)] * k, hc.G[k][-1])
    if T is not None:
        bins = two_bin_scan(system, (mode, mode), [T], **kw)[0]
        early = bins.early_pops[0]
        total = bins.total_pops[0]
        out.set([(mode, EARLY)], early)
        out.set([(mode, LATE)], total - early)
        out.set([(mode, EARLY)] * 2, bins.EE)
        out.set([(mode, EARLY), (mode, LATE)], bins.EL)
        out.set([(mode, LATE)] * 2, bins.LL)
        if n_max < 2:
            out.set([(mode, TOTAL)] * 2, bins.total)
    return out


SPLITTER_EFFICIENCY = 0.5


def identical_sensors(model: JointModel, a: int, b: int) -> bool:
    if a == 0 or b == 0:
        return False
    bank = model.sensors.sensors
    return bank[a - 1] == bank[b - 1]


def _resolve_self_terms(model, a, b, self_terms):
    if self_terms == "auto":
        return "twin" if identical_sensors(model, a, b) else "sensor"
    if self_terms == "twin" and not identical_sensors(model, a, b):
        raise ValueError("twin self-correlations need two identical sensors")
    if self_terms not in ("twin", "sensor"):
        raise ValueError(f"unknown self_terms {self_terms!r}")
    return self_terms


def _pair_scans(system, a, b, T_values, self_terms, **kw):
    cross = two_bin_scan(system, (a, b), T_values, **kw)
    if self_terms == "twin":
        return cross, cross, cross
    return cross, two_bin_scan(system, (a, a), T_values, **kw), \
        two_bin_scan(system, (b, b), T_values, **kw)


def _fill_bins(mom, p, q, bins):
    mom.set([(p, EARLY), (q, EARLY)], bins.EE)
    mom.set([(p, EARLY), (q, LATE)], bins.EL)
    mom.set([(p, LATE), (q, EARLY)], bins.LE)
    mom.set([(p, LATE), (q, LATE)], bins.LL)
    mom.set([(p, TOTAL), (q, TOTAL)], bins.total)


def _fill_first(mom, mode, bins, j=0):
    early, total = bins.early_pops[j], bins.total_pops[j]
    mom.set([(mode, EARLY)], early)
    mom.set([(mode, LATE)], total - early)
    mom.set([(mode, TOTAL)], total)


def intensity_moments_two_mode(model, modes=(1, 2), T: float = 0.0, *,
                               efficiency=SPLITTER_EFFICIENCY, self_terms="auto",
                               **kw) -> IntensityMoments:
    """All first and second moments over ``{a, b} x {E, L}`` plus whole-emission ones.

    Each sensor on its own sees the complete emission, so two detectors
    fed from one source are modelled behind a balanced beam splitter: the
    default efficiency of one half per detector.

    A two-level sensor cannot hold two excitations, so its own delayed
    coincidences underestimate those of the filtered field. With
    ``self_terms="twin"`` (the default for identical sensors) the
    same-detector moments are taken from the cross-correlation of the twin
    sensor instead; ``"sensor"`` keeps the single-sensor values.
    """
    return scan_moments_two_mode(model, [T], modes, efficiency=efficiency,
                                 self_terms=self_terms, **kw)[0]


def scan_moments_two_mode(model, T_values, modes=(1, 2), *, efficiency=SPLITTER_EFFICIENCY,
                          self_terms="auto", **kw) -> list[IntensityMoments]:
    system = get_system(model) if isinstance(model, JointModel) else model
    a, b = modes
    if a == b:
        raise ValueError("two distinct modes are required")
    mode_kind = _resolve_self_terms(system.model, a, b, self_terms)
    cross, saa, sbb = _pair_scans(system, a, b, T_values, mode_kind, **kw)
    out = []
    for i in range(len(cross)):
        mom = _base(system.model, (a, b), efficiency, cross[i].T)
        _fill_bins(mom, a, a, saa[i])
        _fill_bins(mom, b, b, sbb[i])
        _fill_bins(mom, a, b, cross[i])
        _fill_first(mom, a, cross[i], 0)
        _fill_first(mom, b, cross[i], 1)
        out.append(mom)
    return out


def scan_moments_filtered(model, T_values, pair=(1, 2), **kw) -> list[IntensityMoments]:
    """Moments of one filtered detector, built from a pair of identical sensors.

    First moments come from the first sensor's population, second moments
    from the cross-correlation of the two sensors, which reproduces the
    intensity correlations of the filtered field. Results are keyed by the
    first sensor's mode id.
    """
    system = get_system(model) if isinstance(model, JointModel) else model
    a, b = pair
    if not identical_sensors(system.model, a, b):
        raise ValueError("filtered moments need two identical sensors")
    out = []
    for bins in two_bin_scan(system, (a, b), T_values, **kw):
        mom = _base(system.model, (a,), 1.0, bins.T)
        _fill_first(mom, a, bins, 0)
        mom.set([(a, EARLY)] * 2, bins.EE)
        mom.set([(a, EARLY), (a, LATE)], 0.5 * (bins.EL + bins.LE))
        mom.set([(a, LATE)] * 2, bins.LL)
        mom.set([(a, TOTAL)] * 2, bins.total)
        out.append(mom)
    return out


# ---------------------------------------------------------------------------
# probabilities


def _clamp(probs: dict) -> tuple[dict, float]:
    residual = 0.0
    out = {}
    for k, p in probs.items():
        if p < 0.0:
            residual += -p
            p = 0.0
        out[k] = p
    return out, residual


@dataclass
class BinProbabilities:
    """Photon-number probabilities.

    ``pn`` maps ``n -> P_n``; ``pmn`` maps ``(m, n) -> P_mn`` (Early, Late)
    when a bin split was used.
    """

    pn: dict = field(default_factory=dict)
    pmn: dict = field(default_factory=dict)
    order: int = 2
    converged: bool = True
    residual: float = 0.0

    @property
    def clamp_exceeded(self) -> bool:
        """True when clamped negative weight exceeds the tolerance."""
        return self.residual > CLAMP_TOLERANCE

    def total(self) -> float:
        src = self.pmn if self.pmn else self.pn
        return float(sum(src.values()))


def pn_from_moments(moments: IntensityMoments, N: int | None = None, modes=None,
                    threshold: float = CONVERGENCE_THRESHOLD) -> BinProbabilities:
    """Mandel's formula truncated at order ``N`` with ``P_0`` by closure.

    ``P_n = sum_k (-1)^k <:Omega^(n+k):> / (n! k!)`` keeping moments up to
    order ``N``. The result is flagged as unconverged when ``P_N`` exceeds
    ``threshold``.
    """
    if N is None:
        N = 1
        while all(moments.has(*((m, TOTAL),) * (N + 1)) for m in (modes or moments.modes)):
            N += 1
    mom = [moments.total_moment(k, modes) for k in range(N + 1)]
    pn = {}
    for n in range(1, N + 1):
        s = sum((-1) ** k / math.factorial(k) * mom[n + k] for k in range(N - n + 1))
        pn[n] = s / math.factorial(n)
    pn[0] = 1.0 - sum(pn.values())
    pn, residual = _clamp(dict(sorted(pn.items())))
    return BinProbabilities(pn=pn, order=N, converged=pn[N] <= threshold, residual=residual)


def pmn_one_mode_2pa(moments: IntensityMoments, mode: int | None = None) -> BinProbabilities:
    """Early/Late probabilities of one mode in the two-photon approximation."""
    if mode is None:
        (mode,) = moments.modes
    E, L = (mode, EARLY), (mode, LATE)
    if not moments.has(E):
        raise ValueError("moments carry no bin split")
    ee, el, ll = moments.get(E, E), moments.get(E, L), moments.get(L, L)
    p = {
        (2, 0): 0.5 * ee,
        (1, 1): el,
        (0, 2): 0.5 * ll,
        (1, 0): moments.get(E) - ee - el,
        (0, 1): moments.get(L) - ll - el,
    }
    p[(0, 0)] = 1.0 - sum(p.values())
    p, residual = _clamp(dict(sorted(p.items())))
    pn = {0: p[(0, 0)], 1: p[(1, 0)] + p[(0, 1)], 2: p[(2, 0)] + p[(1, 1)] + p[(0, 2)]}
    return BinProbabilities(pn=pn, pmn=p, order=2, residual=residual)


def bin_moments_one_mode(model, mode: int, T_values, n_max: int = 4, *, efficiency=1.0,
                         **kw) -> list[IntensityMoments]:
    """Early/Late moments ``<:Omega_E^i Omega_L^j:>`` of one mode up to ``i + j = n_max``."""
    system = get_system(model) if isinstance(model, JointModel) else model
    T_values = np.atleast_1d(np.asarray(T_values, dtype=float))
    out = []
    for T, table in zip(T_values, bin_moment_scan(system, mode, T_values, n_max, **kw)):
        mom = _base(system.model, (mode,), efficiency, T)
        for (i, j), raw in table.items():
            if i + j:
                mom.set([(mode, EARLY)] * i + [(mode, LATE)] * j, raw)
        out.append(mom)
    return out


def pmn_from_moments(moments: IntensityMoments, mode: int | None = None,
                     N: int | None = None) -> BinProbabilities:
    """Generalized Mandel formula for Early/Late counts truncated at total order ``N``.

    ``P_mn = sum_{k,l} (-1)^(k+l) <:Omega_E^(m+k) Omega_L^(n+l):> / (m! n! k! l!)``
    over ``m + k + n + l <= N``; ``P_00`` follows from normalisation. With
    ``N = 2`` this is the two-photon approximation.
    """
    if mode is None:
        (mode,) = moments.modes
    if N is None:
        N = 1
        while moments.has(*[(mode, EARLY)] * (N + 1)):
            N += 1

    def mom(i, j):
        return moments.get(*([(mode, EARLY)] * i + [(mode, LATE)] * j))

    f = math.factorial
    p = {}
    for m in range(N + 1):
        for n in range(N + 1 - m):
            if m + n == 0:
                continue
            acc = 0.0
            for k in range(N - m - n + 1):
                for l in range(N - m - n - k + 1):
                    acc += (-1) ** (k + l) / (f(k) * f(l)) * mom(m + k, n + l)
            p[(m, n)] = acc / (f(m) * f(n))
    p[(0, 0)] = 1.0 - sum(p.values())
    p, residual = _clamp(dict(sorted(p.items())))
    pn: dict = {}
    for (m, n), v in p.items():
        pn[m + n] = pn.get(m + n, 0.0) + v
    top = sum(v for (m, n), v in p.items() if m + n == N)
    return BinProbabilities(pn=dict(sorted(pn.items())), pmn=p, order=N,
                            converged=top <= CONVERGENCE_THRESHOLD, residual=residual)


@dataclass
class TwoModeProbabilities:
    """``(m_a, n_a, m_b, n_b) -> P`` under the two-photon approximation."""

    modes: tuple[int, int]
    probs: dict
    residual: float = 0.0

    @property
    def clamp_exceeded(self) -> bool:
        return self.residual > CLAMP_TOLERANCE

    def total(self) -> float:
        return float(sum(self.probs.values()))

    def collapsed(self) -> BinProbabilities:
        """Sum outcomes by total Early and total Late counts."""
        pmn: dict = {}
        for (ma, na, mb, nb), p in self.probs.items():
            k = (ma + mb, na + nb)
            pmn[k] = pmn.get(k, 0.0) + p
        pmn = dict(sorted(pmn.items()))
        pn: dict = {}
        for (m, n), p in pmn.items():
            pn[m + n] = pn.get(m + n, 0.0) + p
        return BinProbabilities(pn=dict(sorted(pn.items())), pmn=pmn, order=2,
                                residual=self.residual)


_SLOTS = ("aE", "aL", "bE", "bL")


def two_mode_2pa(moments: IntensityMoments, modes=None) -> TwoModeProbabilities:
    """Joint Early/Late statistics of two detectors, up to two detections in total."""
    a, b = modes if modes is not None else moments.modes
    fac = {"aE": (a, EARLY), "aL": (a, LATE), "bE": (b, EARLY), "bL": (b, LATE)}
    flux = moments.get(fac["aE"]) + moments.get(fac["aL"]) \
        + moments.get(fac["bE"]) + moments.get(fac["bL"])
    if not flux > 0:
        raise DegenerateInputError("no filtered flux reaches the detectors")

    def outcome(*slots):
        v = [0, 0, 0, 0]
        for s in slots:
            v[_SLOTS.index(s)] += 1
        return tuple(v)

    probs = {}
    for i, x in enumerate(_SLOTS):
        for y in _SLOTS[i:]:
            m2 = moments.get(fac[x], fac[y])
            probs[outcome(x, y)] = 0.5 * m2 if x == y else m2
    for x in _SLOTS:
        probs[outcome(x)] = moments.get(fac[x]) - sum(moments.get(fac[x], fac[y])
                                                      for y in _SLOTS)
    probs[(0, 0, 0, 0)] = 1.0 - sum(probs.values())
    probs, residual = _clamp(dict(sorted(probs.items())))
    return TwoModeProbabilities((a, b), probs, residual)


def purities(probabilities) -> dict:
    """Vacuum-removed distribution ``pi_mn = P_mn / sum_{m+n>0} P_mn``."""
    if isinstance(probabilities, TwoModeProbabilities):
        probabilities = probabilities.collapsed()
    if isinstance(probabilities, BinProbabilities):
        probabilities = probabilities.pmn
    nonvac = {k: p for k, p in probabilities.items() if sum(k) > 0}
    norm = sum(nonvac.values())
    if not norm > 0:
        raise DegenerateInputError("all probability sits in the vacuum outcome")
    return {k: p / norm for k, p in nonvac.items()}


def filtered_flux_fraction(model: JointModel, linewidth: float, detuning: float = 0.0,
                           coupling: float = 1e-3, **kw) -> float:
    """Detections behind one filter relative to the unfiltered emission.

    ``model`` supplies emitter and pulse; any sensors it carries are replaced
    by a single filter of the given ``linewidth`` and ``detuning``.
    """
    bare = model.bare()
    filt = make_model(model.pulse.theta, model.pulse.tau_d, model.tls.detuning,
                      sensors=[(detuning, linewidth)], coupling=coupling,
                      t_center=model.pulse.t_center, gamma_sigma=model.gamma)
    emitted = detector_rate(bare, 0) * integrated_total(bare, (0, 0), **kw).populations[0][-1]
    if not emitted > 1e-14:
        raise DegenerateInputError("the pulse produces no emission")
    captured = detector_rate(filt, 1) * integrated_total(filt, (1, 1), **kw).populations[0][-1]
    return float(captured / emitted)


def scan_pmn_one_mode(model, T_values, mode: int = 0, **kw) -> list[BinProbabilities]:
    """:func:`pmn_one_mode_2pa` along a grid of splits, using the mode's own correlators."""
    system = get_system(model) if isinstance(model, JointModel) else model
    out = []
    for bins in two_bin_scan(system, (mode, mode), T_values, **kw):
        mom = _base(system.model, (mode,), 1.0, bins.T)
        _fill_first(mom, mode, bins, 0)
        mom.set([(mode, EARLY)] * 2, bins.EE)
        mom.set([(mode, EARLY), (mode, LATE)], bins.EL)
        mom.set([(mode, LATE)] * 2, bins.LL)
        mom.set([(mode, TOTAL)] * 2, bins.total)
        out.append(pmn_one_mode_2pa(mom, mode))
    return out


def scan_pmn_filtered(model, T_values, pair=(1, 2), **kw) -> list[BinProbabilities]:
    """Two-photon-approximation ``P_mn`` of one filtered detector (see :func:`scan_moments_filtered`)."""
    return [pmn_one_mode_2pa(m, pair[0]) for m in scan_moments_filtered(model, T_values, pair, **kw)]


def scan_pmn_two_mode(model, T_values, modes=(1, 2), *, efficiency=SPLITTER_EFFICIENCY,
                      self_terms="auto", **kw) -> list[TwoModeProbabilities]:
    """:func:`two_mode_2pa` along a grid of splits."""
    return [two_mode_2pa(m, modes) for m in
            scan_moments_two_mode(model, T_values, modes, efficiency=efficiency,
                                  self_terms=self_terms, **kw)]
