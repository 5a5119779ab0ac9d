"""Weak-coupling model of the outcoupled beam.

With the trapped state left undepleted, the untrapped amplitude is the
time convolution of a complex drive *rate* with the free-falling image of
the trapped state::

    Psi_U(x, t) = int_0^t ds  Omega(s) * Phi(x, t - s)

where ``Phi(x, tau)`` is the trapped wave function released at ``tau = 0``
and propagated under ``p^2/2m - m g x``.  Expanding the trapped state in
the Airy continuum gives an equivalent spectral route: each energy channel
E accumulates ``c_E(t) = f(E) e^{-iEt/hbar} int_0^t Omega(s) e^{iEs/hbar} ds``.
Both routes are implemented and are expected to agree to quadrature
accuracy.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .airy import ComplexField, EnergySpectrum, inverse_transform
from .errors import GridMismatchError, GridOverflowError, UnresolvedError
from .physconfig import (
    AtomSpecies,
    BoxEnvelope,
    NaturalUnits,
    PhysicalConstants,
    RfComponent,
    Setup,
    effective_coupling,
)

WEAK_COUPLING_LIMIT = 0.10
_GL_ORDER = 8
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(_GL_ORDER)
_NODES_PER_SCALE = 40  # default resolution: GL nodes per shortest time scale
_MIN_NODES_PER_SCALE = 20
_EDGE_TOL = 1e-6


# ---------------------------------------------------------------------------
# rate function


@dataclass(frozen=True)
class RateTerm:
    """One tone as seen by the T -> U transition."""

    effective_coupling: float
    omega_rf: float
    theta: float
    envelope: object = field(default_factory=BoxEnvelope)


@dataclass(frozen=True)
class RateFunction:
    """Complex drive rate ``Omega(t)`` with the trapped energy carrier kept.

    ``E0`` is the trapped-state energy (J) and ``hbar`` the action unit used
    to turn it into an angular frequency.
    """

    components: tuple[RateTerm, ...]
    E0: float
    hbar: float

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))
        if not self.hbar > 0:
            raise ValueError("hbar must be > 0")

    @classmethod
    def from_setup(cls, setup: Setup, E0: float | None = None) -> "RateFunction":
        terms = tuple(
            RateTerm(effective_coupling(rf, setup.species), rf.omega_rf, rf.coupling_phase, rf.envelope)
            for rf in setup.rf
        )
        return cls(terms, setup.E0 if E0 is None else E0, setup.constants.hbar)

    def detunings(self) -> np.ndarray:
        """``E0/hbar - omega_rf`` per component (rad/s)."""
        return np.array([self.E0 / self.hbar - c.omega_rf for c in self.components])

    def support(self) -> tuple[float, float]:
        if not self.components:
            return (0.0, 0.0)
        starts, ends = zip(*(c.envelope.support() for c in self.components))
        return (min(starts), max(ends))

    def breakpoints(self) -> list[float]:
        return sorted({p for c in self.components for p in c.envelope.support()})

    def scaled(self, factor: float) -> "RateFunction":
        return RateFunction(
            tuple(RateTerm(c.effective_coupling * factor, c.omega_rf, c.theta, c.envelope) for c in self.components),
            self.E0,
            self.hbar,
        )


def rate_function_eval(rate: RateFunction, t):
    """Omega(t) = sum_i -i Omega_i env_i(t) exp(-i[(E0/hbar - w_i) t + theta_i]) in rad/s."""
    t_arr = np.asarray(t, dtype=float)
    out = np.zeros(t_arr.shape, dtype=complex)
    carrier = rate.E0 / rate.hbar
    for c in rate.components:
        env = c.envelope(t_arr)
        phase = (carrier - c.omega_rf) * t_arr + c.theta
        out = out - 1j * c.effective_coupling * env * np.exp(-1j * phase)
    return out if out.ndim else complex(out)


def drive_intensity(rate: RateFunction, t) -> np.ndarray:
    """|Omega(t)|^2 in (rad/s)^2."""
    return np.abs(rate_function_eval(rate, t)) ** 2


# ---------------------------------------------------------------------------
# free fall


@dataclass(frozen=True)
class FreeFallGaussian:
    """Minimum-uncertainty Gaussian released at ``t_offset`` into gravity.

    Evaluated with the exact propagator of ``p^2/2m - m g x``: the classical
    boost ``exp(i(m g t x / hbar - m g^2 t^3 / 6 hbar))`` times a freely
    spreading Gaussian centred on ``x0 + g t^2 / 2``.
    """

    sigma0: float
    x0: float
    mass: float
    g_earth: float
    hbar: float
    t_offset: float = 0.0

    def __post_init__(self):
        for name in ("sigma0", "mass", "g_earth", "hbar"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")

    @classmethod
    def from_setup(cls, setup: Setup, t_offset: float = 0.0) -> "FreeFallGaussian":
        return cls(setup.sigma0, setup.sag, setup.species.mass, setup.constants.g_earth, setup.constants.hbar, t_offset)

    @property
    def units(self) -> NaturalUnits:
        length = (self.hbar**2 / (2.0 * self.g_earth * self.mass**2)) ** (1.0 / 3.0)
        energy = self.mass * self.g_earth * length
        return NaturalUnits(length, energy, self.hbar / energy)

    def width(self, t) -> np.ndarray:
        tau = np.asarray(t, dtype=float) - self.t_offset
        return self.sigma0 * np.sqrt(1.0 + (self.hbar * tau / (self.mass * self.sigma0**2)) ** 2)

    def center(self, t) -> np.ndarray:
        tau = np.asarray(t, dtype=float) - self.t_offset
        return self.x0 + 0.5 * self.g_earth * tau**2

    def _natural(self, xi, tau):
        """Phi in natural units; ``xi`` and ``tau`` broadcast against each other."""
        u = self.units
        s = self.sigma0 / u.length_l
        xi0 = self.x0 / u.length_l
        a = 1.0 + 2j * tau / s**2
        boost = np.exp(1j * (tau * xi - tau**3 / 3.0))
        return boost * (math.pi * s**2) ** -0.25 / np.sqrt(a) * np.exp(-((xi - tau**2 - xi0) ** 2) / (2 * s**2 * a))


def free_fall_eval(wp: FreeFallGaussian, x, t: float):
    """Complex amplitude Phi(x, t) in 1/sqrt(m); t measured in seconds."""
    tau_si = float(t) - wp.t_offset
    if tau_si < 0:
        raise ValueError("free fall is only defined after release (t >= t_offset)")
    u = wp.units
    out = wp._natural(np.asarray(u.length(x), dtype=float), float(u.time(tau_si)))
    return u.amplitude_si(out)


def smoothing_time(sigma0: float, species: AtomSpecies, constants: PhysicalConstants) -> float:
    """tau_s = hbar / (m g sigma0): shortest passage time of the free-falling packet."""
    if not sigma0 > 0:
        raise ValueError("sigma0 must be > 0")
    return constants.hbar / (species.mass * constants.g_earth * sigma0)


def relative_phase(f1: RfComponent, f2: RfComponent) -> float:
    """Phase difference of the two tones' coupling circular components in (-pi, pi]."""
    if f1.polarization_factor == 0 or f2.polarization_factor == 0:
        raise ValueError("a tone with zero projection on the coupling polarization has no defined phase")
    d = math.remainder(f1.coupling_phase - f2.coupling_phase, 2 * math.pi)
    return math.pi if d <= -math.pi + 1e-15 else d


# ---------------------------------------------------------------------------
# convolution route


def resolution_scales(rate: RateFunction, wp: FreeFallGaussian) -> dict[str, float]:
    """Time scales the convolution quadrature has to resolve (s).

    ``carrier``: period of the fastest integrand phase, i.e. the largest
    detuning of a tone from the trapped energy plus six overlap widths;
    ``beat``: shortest period between two tones; ``smoothing``: tau_s.
    """
    tau_s = wp.hbar / (wp.mass * wp.g_earth * wp.sigma0)
    scales = {"smoothing": tau_s}
    if rate.components:
        spread = 6.0 / tau_s
        scales["carrier"] = 2 * math.pi / (np.max(np.abs(rate.detunings())) + spread)
        omegas = sorted({c.omega_rf for c in rate.components})
        gaps = np.diff(omegas)
        if gaps.size:
            scales["beat"] = 2 * math.pi / gaps.max()
    return scales


def _gl_panels(a: float, b: float, width: float) -> tuple[np.ndarray, np.ndarray]:
    n = max(1, math.ceil((b - a) / width - 1e-9))
    edges = np.linspace(a, b, n + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    nodes = (mid[:, None] + half[:, None] * _GL_NODES[None, :]).ravel()
    weights = (half[:, None] * _GL_WEIGHTS[None, :]).ravel()
    return nodes, weights


def convolution_nodes(rate: RateFunction, wp: FreeFallGaussian, t: float, step: float | None = None):
    """Quadrature nodes and weights for ``int_0^t ds Omega(s) (...)``.

    Composite 8-point Gauss-Legendre with panel breaks at every envelope
    edge.  ``step`` is the mean node spacing; by default 1/40 of the
    shortest scale from :func:`resolution_scales`.
    """
    shortest = min(resolution_scales(rate, wp).values())
    if step is None:
        step = shortest / _NODES_PER_SCALE
    elif step > shortest / _MIN_NODES_PER_SCALE:
        raise UnresolvedError(
            f"quadrature step {step:.3g} s gives fewer than {_MIN_NODES_PER_SCALE} nodes per {shortest:.3g} s"
        )
    lo, hi = rate.support()
    cuts = sorted({0.0, t} | {p for p in rate.breakpoints() if 0.0 < p < t})
    nodes, weights = [], []
    for a, b in zip(cuts[:-1], cuts[1:]):
        if b <= lo or a >= hi or b - a <= 0:
            continue
        n, w = _gl_panels(a, b, step * _GL_ORDER)
        nodes.append(n)
        weights.append(w)
    if not nodes:
        return np.empty(0), np.empty(0)
    return np.concatenate(nodes), np.concatenate(weights)


def _check_edges(samples: np.ndarray) -> None:
    mag = np.abs(samples)
    peak = mag.max() if mag.size else 0.0
    if peak > 0 and max(mag[0], mag[-1]) > _EDGE_TOL * peak:
        raise GridOverflowError(
            f"outcoupled field reaches the grid edge at {max(mag[0], mag[-1]) / peak:.2e} of its maximum"
        )


def outcoupled_convolution(
    rate: RateFunction,
    wp: FreeFallGaussian,
    t: float,
    x_grid,
    step: float | None = None,
    check_edges: bool = True,
) -> ComplexField:
    """Psi_U(x, t) = int_0^t Omega(s) Phi(x, t - s) ds on a uniform grid."""
    x = np.asarray(x_grid, dtype=float)
    if t < 0:
        raise ValueError("t must be >= 0")
    nodes, weights = convolution_nodes(rate, wp, t, step)
    out = np.zeros(x.size, dtype=complex)
    if nodes.size:
        u = wp.units
        xi = u.length(x)
        omega = rate_function_eval(rate, nodes) * weights
        taus = u.time(t - nodes - wp.t_offset)
        for w, tau in zip(omega, taus):
            if w != 0:
                out += w * wp._natural(xi, float(tau))
        out = u.amplitude_si(out)
    if check_edges:
        _check_edges(out)
    return ComplexField(float(x[0]), float(x[-1]), out, float(t))


def outcoupled_at_points(
    rate: RateFunction, wp: FreeFallGaussian, xs, times, step: float | None = None
) -> np.ndarray:
    """Psi_U at a few positions for many times, shape (n_times, n_x), 1/sqrt(m)."""
    times = np.asarray(times, dtype=float)
    u = wp.units
    xi = np.atleast_1d(u.length(np.asarray(xs, dtype=float)))
    out = np.zeros((times.size, xi.size), dtype=complex)
    for i, t in enumerate(times):
        nodes, weights = convolution_nodes(rate, wp, float(t), step)
        if nodes.size == 0:
            continue
        omega = rate_function_eval(rate, nodes) * weights
        taus = u.time(t - nodes - wp.t_offset)
        out[i] = wp._natural(xi[:, None], taus[None, :]) @ omega
    return u.amplitude_si(out)


# ---------------------------------------------------------------------------
# spectral route


def _box_time_integral(nu: np.ndarray, a: float, b: float) -> np.ndarray:
    """int_a^b exp(i nu s) ds, stable at nu -> 0."""
    if b <= a:
        return np.zeros_like(nu, dtype=complex)
    half = 0.5 * (b - a)
    return np.exp(1j * nu * 0.5 * (a + b)) * (b - a) * np.sinc(nu * half / math.pi)


def _smooth_time_integral(nu: np.ndarray, env, a: float, b: float, step: float) -> np.ndarray:
    if b <= a:
        return np.zeros_like(nu, dtype=complex)
    nodes, weights = _gl_panels(a, b, step * _GL_ORDER)
    out = np.zeros(nu.size, dtype=complex)
    wenv = weights * env(nodes)
    for j in range(0, nu.size, 256):
        out[j : j + 256] = np.exp(1j * np.outer(nu[j : j + 256], nodes)) @ wenv
    return out


def spectral_coefficients(
    rate: RateFunction,
    spectrum: EnergySpectrum,
    t: float,
    counter_rotating: bool = False,
    step: float | None = None,
) -> np.ndarray:
    """c_E(t) for every energy on the spectrum grid (J^-1/2)."""
    E = spectrum.energies
    hbar = rate.hbar
    if rate.components:
        pulse = max(c.envelope.support()[1] - c.envelope.support()[0] for c in rate.components)
        if spectrum.grid_spacing > 2 * math.pi * hbar / (10 * pulse):
            raise UnresolvedError("energy grid does not resolve the sinc main lobe: need dE < h / (10 T)")
    acc = np.zeros(E.size, dtype=complex)
    for c in rate.components:
        a, b = c.envelope.support()
        a, b = max(a, 0.0), min(b, t)
        terms = [(E - rate.E0) / hbar + c.omega_rf]  # co-rotating: resonant at E0 - hbar w
        signs = [1.0]
        if counter_rotating:
            terms.append((E - rate.E0) / hbar - c.omega_rf)
            signs.append(-1.0)
        for nu, sgn in zip(terms, signs):
            if isinstance(c.envelope, BoxEnvelope):
                integral = _box_time_integral(nu, a, b)
            else:
                dt = step if step is not None else 2 * math.pi / (np.max(np.abs(nu)) + 1e-30) / 40
                integral = _smooth_time_integral(nu, c.envelope, a, b, dt)
            acc += -1j * c.effective_coupling * np.exp(-1j * sgn * c.theta) * integral
    return spectrum.amplitudes * np.exp(-1j * E * t / hbar) * acc


def implied_outcoupled_norm(rate: RateFunction, spectrum: EnergySpectrum, t: float) -> float:
    """sum |c_E(t)|^2 dE: the population the weak-coupling model has moved out."""
    c = spectral_coefficients(rate, spectrum, t)
    return float(np.sum(np.abs(c) ** 2) * spectrum.grid_spacing)


def check_weak_coupling(norm: float, limit: float = WEAK_COUPLING_LIMIT) -> bool:
    """Warn when the outcoupled population invalidates an undepleted source."""
    if norm > limit:
        warnings.warn(
            f"outcoupled fraction {norm:.3f} exceeds {limit:.0%}; the undepleted-source model is unreliable",
            RuntimeWarning,
            stacklevel=2,
        )
        return False
    return True


def outcoupled_spectral(
    rate: RateFunction,
    spectrum: EnergySpectrum,
    t: float,
    x_grid,
    units: NaturalUnits,
    counter_rotating: bool = False,
) -> ComplexField:
    """Psi_U(x, t) = sum_E c_E(t) psi_E(x) dE."""
    c = spectral_coefficients(rate, spectrum, t, counter_rotating)
    check_weak_coupling(float(np.sum(np.abs(c) ** 2) * spectrum.grid_spacing))
    coeff = EnergySpectrum(spectrum.energies, c)
    return inverse_transform(coeff, np.asarray(x_grid, dtype=float), units, timestamp=float(t))


# ---------------------------------------------------------------------------
# streams


@dataclass(frozen=True)
class StreamResult:
    """Untrapped-component snapshots of one run.

    ``metadata`` carries at least ``rf`` (the tones) and ``engine``;
    ``diagnostics`` holds engine-specific bookkeeping (norm history,
    populations, final state) that is not part of the stream itself.
    """

    times: np.ndarray
    fields: tuple[ComplexField, ...]
    metadata: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        fields = tuple(self.fields)
        if times.ndim != 1 or times.size != len(fields):
            raise ValueError("one field per time stamp is required")
        if times.size > 1 and np.any(np.diff(times) <= 0):
            raise ValueError("times must be strictly increasing")
        if fields and not all(f.same_grid(fields[0]) for f in fields):
            raise GridMismatchError("all stream fields must share one grid")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "fields", fields)

    @property
    def x(self) -> np.ndarray:
        return self.fields[0].x

    def samples(self) -> np.ndarray:
        """(n_times, n_x) complex array."""
        return np.stack([f.samples for f in self.fields])

    def at(self, t: float) -> ComplexField:
        i = int(np.argmin(np.abs(self.times - t)))
        if not math.isclose(self.times[i], t, rel_tol=1e-9, abs_tol=1e-12):
            raise KeyError(f"no snapshot at t = {t}")
        return self.fields[i]


def superpose_streams(streams: Sequence[StreamResult]) -> StreamResult:
    """Pointwise complex sum of streams recorded on one grid at one set of times."""
    if not streams:
        raise ValueError("nothing to superpose")
    first = streams[0]
    for s in streams[1:]:
        if s.times.shape != first.times.shape or not np.allclose(s.times, first.times, rtol=0, atol=1e-15):
            raise GridMismatchError("streams have different time stamps")
        if s.fields and first.fields and not s.fields[0].same_grid(first.fields[0]):
            raise GridMismatchError("streams live on different spatial grids")
    fields = []
    for i, f in enumerate(first.fields):
        total = sum((s.fields[i].samples for s in streams[1:]), f.samples.copy())
        fields.append(f.with_samples(total))
    rf = tuple(r for s in streams for r in s.metadata.get("rf", ()))
    engines = {s.metadata.get("engine") for s in streams}
    meta = {**first.metadata, "rf": rf, "engine": engines.pop() if len(engines) == 1 else "mixed"}
    return StreamResult(first.times, tuple(fields), meta)


def analytic_stream(
    setup: Setup,
    times,
    x_grid,
    E0: float | None = None,
    step: float | None = None,
    check_edges: bool = True,
) -> StreamResult:
    """Convolution-route snapshots of the untrapped field."""
    rate = RateFunction.from_setup(setup, E0)
    wp = FreeFallGaussian.from_setup(setup)
    fields = tuple(outcoupled_convolution(rate, wp, float(t), x_grid, step, check_edges) for t in times)
    return StreamResult(np.asarray(times, dtype=float), fields, {"rf": setup.rf, "engine": "analytic"})


def analytic_point_stream(
    setup: Setup, x_d: float, times, half_width: float = 0.15e-6, n: int = 7, E0: float | None = None
) -> StreamResult:
    """Dense-in-time snapshots on a small window around a detector point."""
    rate = RateFunction.from_setup(setup, E0)
    wp = FreeFallGaussian.from_setup(setup)
    xs = np.linspace(x_d - half_width, x_d + half_width, n)
    values = outcoupled_at_points(rate, wp, xs, times)
    fields = tuple(ComplexField(float(xs[0]), float(xs[-1]), row, float(t)) for row, t in zip(values, times))
    return StreamResult(np.asarray(times, dtype=float), fields, {"rf": setup.rf, "engine": "analytic"})
