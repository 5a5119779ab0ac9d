"""Continuum eigenstates of the gravitational potential.

The untrapped Hamiltonian ``p^2/2m - m g x`` has, for every real energy E,
the delta-normalised eigenfunction::

    psi_E(x) = N * Ai(-(x + E/(m g)) / l),   N = 1 / (l sqrt(m g))

with ``l = (hbar^2 / 2 g m^2)^(1/3)``.  The minus sign in the argument
follows from gravity pointing along +x: the classically allowed region
lies below (at larger x than) the turning point ``x = -E / (m g)``.

Everything here is evaluated in natural units internally (see
:class:`~atomlaser.physconfig.NaturalUnits`) and converted at the edges.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import mpmath
import numpy as np

from .errors import AiryRangeError, TruncatedSpectrumError, UnconvergedQuadratureError
from .physconfig import (
    AtomSpecies,
    NaturalUnits,
    PhysicalConstants,
    derive_natural_units,
    gravitational_sag,
    ground_state_width,
)

# ---------------------------------------------------------------------------
# Ai(z)
#
# |z| <= 10   Taylor series about the nearest anchor z_k = k/4, with anchor
#             values from the Maclaurin series summed at 50 digits.
# z > 10      exponential asymptotic expansion (DLMF 9.7.5)
# z < -10     oscillatory asymptotic expansion (DLMF 9.7.9)
#
# Below AIRY_MIN_ARGUMENT the phase (2/3)|z|^(3/2) carries an absolute
# rounding error above ~1e-7 rad and evaluation is refused.

AIRY_CROSSOVER = 10.0
AIRY_MIN_ARGUMENT = -1.0e6
_ANCHOR_STEP = 0.25
_TAYLOR_TERMS = 22
_ASYMPTOTIC_TERMS = 26


def _maclaurin_anchor(z: mpmath.mpf) -> tuple[mpmath.mpf, mpmath.mpf]:
    """Ai(z), Ai'(z) from the two power series f, g of the Airy equation."""
    c1 = 1 / (mpmath.power(3, mpmath.mpf(2) / 3) * mpmath.gamma(mpmath.mpf(2) / 3))
    c2 = 1 / (mpmath.power(3, mpmath.mpf(1) / 3) * mpmath.gamma(mpmath.mpf(1) / 3))
    # f = sum a_k z^(3k), g = sum b_k z^(3k+1); a_{k+1} = a_k / ((3k+2)(3k+3))
    f = df = mpmath.mpf(0)
    g = dg = mpmath.mpf(0)
    a = mpmath.mpf(1)
    b = mpmath.mpf(1)
    k = 0
    z3 = z**3
    zp = mpmath.mpf(1)  # z^(3k)
    while True:
        term_f = a * zp
        term_g = b * zp * z
        f += term_f
        g += term_g
        if k > 0:
            df += 3 * k * a * zp / z if z != 0 else 0
        dg += (3 * k + 1) * b * zp
        if k > 5 and abs(term_f) + abs(term_g) < mpmath.mpf(10) ** (-45) * (abs(f) + abs(g) + 1):
            break
        a = a / ((3 * k + 2) * (3 * k + 3))
        b = b / ((3 * k + 3) * (3 * k + 4))
        zp *= z3
        k += 1
    return c1 * f - c2 * g, c1 * df - c2 * dg


@lru_cache(maxsize=1)
def _taylor_table() -> tuple[np.ndarray, np.ndarray]:
    n_anchor = int(round(2 * AIRY_CROSSOVER / _ANCHOR_STEP)) + 1
    anchors = -AIRY_CROSSOVER + _ANCHOR_STEP * np.arange(n_anchor)
    table = np.empty((n_anchor, _TAYLOR_TERMS))
    with mpmath.workdps(50):
        for i, z0 in enumerate(anchors):
            z = mpmath.mpf(float(z0))
            coef = [None] * _TAYLOR_TERMS
            coef[0], coef[1] = _maclaurin_anchor(z)
            # y'' = z y  =>  (n+2)(n+1) a_{n+2} = z0 a_n + a_{n-1}
            for n in range(_TAYLOR_TERMS - 2):
                prev = coef[n - 1] if n >= 1 else 0
                coef[n + 2] = (z * coef[n] + prev) / ((n + 1) * (n + 2))
            table[i] = [float(c) for c in coef]
    return anchors, table


@lru_cache(maxsize=1)
def _asymptotic_u() -> np.ndarray:
    # u_k = (6k-5)(6k-3)(6k-1) / ((2k-1) 216 k) u_{k-1}
    u = np.empty(_ASYMPTOTIC_TERMS)
    u[0] = 1.0
    for k in range(1, _ASYMPTOTIC_TERMS):
        u[k] = u[k - 1] * (6 * k - 5) * (6 * k - 3) * (6 * k - 1) / ((2 * k - 1) * 216.0 * k)
    return u


def _ai_taylor(z: np.ndarray) -> np.ndarray:
    anchors, table = _taylor_table()
    idx = np.rint((z + AIRY_CROSSOVER) / _ANCHOR_STEP).astype(np.intp)
    h = z - anchors[idx]
    acc = table[idx, _TAYLOR_TERMS - 1]
    for n in range(_TAYLOR_TERMS - 2, -1, -1):
        acc = acc * h + table[idx, n]
    return acc


def _ai_positive(z: np.ndarray) -> np.ndarray:
    u = _asymptotic_u()
    zeta = (2.0 / 3.0) * z * np.sqrt(z)
    inv = -1.0 / zeta
    series = np.full_like(z, u[-1])
    for k in range(_ASYMPTOTIC_TERMS - 2, -1, -1):
        series = series * inv + u[k]
    with np.errstate(under="ignore"):
        return np.exp(-zeta) / (2.0 * math.sqrt(math.pi) * z**0.25) * series


def _ai_negative(z: np.ndarray) -> np.ndarray:
    u = _asymptotic_u()
    x = -z
    zeta = (2.0 / 3.0) * x * np.sqrt(x)
    inv2 = -1.0 / zeta**2
    evens = u[0::2]
    odds = u[1::2]
    even = np.full_like(x, evens[-1])
    for c in evens[-2::-1]:
        even = even * inv2 + c
    odd = np.full_like(x, odds[-1])
    for c in odds[-2::-1]:
        odd = odd * inv2 + c
    odd = odd / zeta
    phase = zeta - 0.25 * math.pi
    return (np.cos(phase) * even + np.sin(phase) * odd) / (math.sqrt(math.pi) * x**0.25)


def airy_ai(z):
    """Airy function Ai for real arguments.

    Relative accuracy is better than 1e-10 for |z| <= 100 (absolute,
    relative to the envelope ``|z|^(-1/4)/sqrt(pi)``, near the zeros on the
    negative axis).  Large positive arguments underflow to 0.

    Raises
    ------
    AiryRangeError
        If any ``z < AIRY_MIN_ARGUMENT`` or ``z`` is not finite.
    """
    z_arr = np.asarray(z, dtype=float)
    scalar = z_arr.ndim == 0
    z_arr = np.atleast_1d(z_arr)
    if not np.all(np.isfinite(z_arr)):
        raise AiryRangeError("Airy argument must be finite")
    if z_arr.size and z_arr.min() < AIRY_MIN_ARGUMENT:
        raise AiryRangeError(
            f"Airy argument {z_arr.min():.3g} below {AIRY_MIN_ARGUMENT:g}: oscillation phase unresolvable"
        )
    out = np.empty_like(z_arr)
    mid = np.abs(z_arr) <= AIRY_CROSSOVER
    pos = z_arr > AIRY_CROSSOVER
    neg = z_arr < -AIRY_CROSSOVER
    if mid.any():
        out[mid] = _ai_taylor(z_arr[mid])
    if pos.any():
        out[pos] = _ai_positive(z_arr[pos])
    if neg.any():
        out[neg] = _ai_negative(z_arr[neg])
    return float(out[0]) if scalar else out


# ---------------------------------------------------------------------------
# data types


@dataclass(frozen=True)
class ComplexField:
    """Complex amplitude on ``n`` uniform samples spanning [x_min, x_max].

    Amplitudes are SI (1/sqrt(m)); ``timestamp`` in seconds.
    """

    x_min: float
    x_max: float
    samples: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=complex)
        if samples.ndim != 1 or samples.size < 2:
            raise ValueError("a field needs at least 2 samples")
        if not self.x_max > self.x_min:
            raise ValueError("x_max must exceed x_min")
        object.__setattr__(self, "samples", samples)

    @property
    def n(self) -> int:
        return self.samples.size

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.n)

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.n - 1)

    def norm2(self) -> float:
        return float(np.trapezoid(np.abs(self.samples) ** 2, dx=self.dx))

    def same_grid(self, other: "ComplexField") -> bool:
        return self.n == other.n and self.x_min == other.x_min and self.x_max == other.x_max

    def with_samples(self, samples, timestamp: float | None = None) -> "ComplexField":
        return ComplexField(self.x_min, self.x_max, samples, self.timestamp if timestamp is None else timestamp)

    @classmethod
    def from_function(cls, func, x_min: float, x_max: float, n: int, timestamp: float = 0.0) -> "ComplexField":
        x = np.linspace(x_min, x_max, n)
        return cls(x_min, x_max, func(x), timestamp)


@dataclass(frozen=True)
class GeneralizedEigenstate:
    energy_E: float
    normalization_N: float
    length_l: float
    slope_mg: float

    def __post_init__(self):
        expected = 1.0 / (self.length_l * math.sqrt(self.slope_mg))
        if not math.isclose(self.normalization_N, expected, rel_tol=1e-12):
            raise ValueError("normalization_N must equal 1 / (l sqrt(m g))")

    @classmethod
    def at_energy(cls, energy: float, units: NaturalUnits) -> "GeneralizedEigenstate":
        l, mg = units.length_l, units.slope_mg
        return cls(energy, 1.0 / (l * math.sqrt(mg)), l, mg)

    def turning_point(self) -> float:
        return -self.energy_E / self.slope_mg


def eigenstate_eval(state: GeneralizedEigenstate, x) -> np.ndarray | float:
    """psi_E(x) in SI units, (J m)^(-1/2)."""
    z = -(np.asarray(x, dtype=float) + state.energy_E / state.slope_mg) / state.length_l
    return state.normalization_N * airy_ai(z)


@dataclass(frozen=True)
class EnergySpectrum:
    """Amplitudes f(E) on a uniform energy grid; SI units (J and J^-1/2)."""

    energies: np.ndarray
    amplitudes: np.ndarray
    grid_spacing: float = field(default=0.0)

    def __post_init__(self):
        energies = np.asarray(self.energies, dtype=float)
        amplitudes = np.asarray(self.amplitudes, dtype=complex)
        if energies.ndim != 1 or energies.size < 2 or energies.shape != amplitudes.shape:
            raise ValueError("energies and amplitudes must be 1D arrays of equal length >= 2")
        steps = np.diff(energies)
        if np.any(steps <= 0):
            raise ValueError("energies must be strictly increasing")
        spacing = steps.mean()
        if np.max(np.abs(steps - spacing)) > 1e-6 * spacing:
            raise ValueError("energy grid must be uniform")
        object.__setattr__(self, "energies", energies)
        object.__setattr__(self, "amplitudes", amplitudes)
        object.__setattr__(self, "grid_spacing", float(spacing))

    def norm2(self) -> float:
        return float(np.sum(np.abs(self.amplitudes) ** 2) * self.grid_spacing)


def energy_grid(center: float, half_width: float, n: int = 4096) -> np.ndarray:
    """Uniform grid of ``n`` energies covering ``center +- half_width``."""
    return np.linspace(center - half_width, center + half_width, n)


def default_energy_grid(trap, species: AtomSpecies, constants: PhysicalConstants, n: int = 4096, span: float = 8.0):
    """``+- span * m g sigma0`` about the overlap peak ``-m g x0``."""
    mg = species.mass * constants.g_earth
    sigma0 = ground_state_width(trap, species, constants)
    return energy_grid(-mg * gravitational_sag(trap, constants), span * mg * sigma0, n)


# ---------------------------------------------------------------------------
# overlaps and transforms

_NEGLIGIBLE = 1e-8
_MIN_SAMPLES_PER_PERIOD = 4
_GOOD_SAMPLES_PER_PERIOD = 8
_CHUNK = 1 << 21


def _check_decay(phi: ComplexField) -> None:
    mag = np.abs(phi.samples)
    peak = mag.max()
    if peak == 0:
        return
    if max(mag[0], mag[-1]) > _NEGLIGIBLE * peak:
        raise UnconvergedQuadratureError(
            "field does not decay to 1e-8 of its maximum at the grid ends; widen the grid"
        )


def _check_resolution(phi: ComplexField, e_max_nat: float, units: NaturalUnits) -> None:
    """Airy period vs. grid spacing wherever phi is non-negligible."""
    mag = np.abs(phi.samples)
    if mag.max() == 0:
        return
    live = phi.x[mag > _NEGLIGIBLE * mag.max()]
    xi_max = units.length(live.max())
    z_min = -(xi_max + e_max_nat)
    k_local = math.sqrt(max(-z_min, 1.0))
    samples = 2 * math.pi / k_local / units.length(phi.dx)
    if samples < _MIN_SAMPLES_PER_PERIOD:
        raise UnconvergedQuadratureError(
            f"Airy oscillation resolved by {samples:.2f} samples per period (< {_MIN_SAMPLES_PER_PERIOD})"
        )
    if samples < _GOOD_SAMPLES_PER_PERIOD:
        warnings.warn(
            f"Airy oscillation resolved by only {samples:.2f} samples per period",
            RuntimeWarning,
            stacklevel=3,
        )


def _airy_matrix(xi: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """A[i, j] = Ai(-(xi_i + eps_j)), natural units (N = 1)."""
    return airy_ai(-(xi[:, None] + eps[None, :]))


def overlap_numeric(phi: ComplexField, state: GeneralizedEigenstate) -> complex:
    """<psi_E | phi> by trapezoid quadrature, J^(-1/2)."""
    units = NaturalUnits(state.length_l, state.slope_mg * state.length_l, 1.0)
    _check_decay(phi)
    eps = state.energy_E / units.energy_unit
    _check_resolution(phi, eps, units)
    xi = units.length(phi.x)
    weights = np.full(phi.n, units.length(phi.dx))
    weights[[0, -1]] *= 0.5
    psi = airy_ai(-(xi + eps))
    # natural amplitude of phi is phi_SI * sqrt(l); result scales by 1/sqrt(mgl)
    value = np.sum(weights * psi * phi.samples) * math.sqrt(units.length_l)
    return complex(value / math.sqrt(units.energy_unit))


def overlap_gaussian_approx(sigma: float, x0: float, E, species: AtomSpecies, constants: PhysicalConstants):
    """Gaussian approximation of <psi_E|phi0> valid for sigma >> l, J^(-1/2)."""
    units = derive_natural_units(species, constants)
    if sigma < 5 * units.length_l:
        warnings.warn(
            f"sigma = {sigma / units.length_l:.2f} l; the Gaussian overlap approximation needs sigma >> l",
            RuntimeWarning,
            stacklevel=2,
        )
    w = species.mass * constants.g_earth * sigma
    E = np.asarray(E, dtype=float)
    return (math.pi * w**2) ** (-0.25) * np.exp(-((E + species.mass * constants.g_earth * x0) ** 2) / (2 * w**2))


def spectral_transform(phi: ComplexField, energies, units: NaturalUnits, check_truncation: bool = True) -> EnergySpectrum:
    """f(E) = <psi_E|phi> on an energy grid (J)."""
    energies = np.asarray(energies, dtype=float)
    _check_decay(phi)
    eps = units.energy(energies)
    _check_resolution(phi, eps.max(), units)
    xi = units.length(phi.x)
    weights = np.full(phi.n, units.length(phi.dx))
    weights[[0, -1]] *= 0.5
    vec = weights * units.amplitude(phi.samples)
    out = np.empty(eps.size, dtype=complex)
    step = max(1, _CHUNK // max(xi.size, 1))
    for j in range(0, eps.size, step):
        out[j : j + step] = vec @ _airy_matrix(xi, eps[j : j + step])
    amplitudes = out / math.sqrt(units.energy_unit)
    spectrum = EnergySpectrum(energies, amplitudes)
    if check_truncation:
        check_spectrum_truncation(spectrum)
    return spectrum


def check_spectrum_truncation(spectrum: EnergySpectrum, tol: float = 1e-6) -> None:
    mag = np.abs(spectrum.amplitudes)
    peak = mag.max()
    if peak > 0 and max(mag[0], mag[-1]) > tol * peak:
        raise TruncatedSpectrumError(
            f"spectrum amplitude at the grid boundary is {max(mag[0], mag[-1]) / peak:.2e} of the peak"
        )


def inverse_transform(spectrum: EnergySpectrum, x, units: NaturalUnits, timestamp: float = 0.0) -> ComplexField:
    """phi(x) = sum_E f(E) psi_E(x) dE on the uniform grid ``x``."""
    x = np.asarray(x, dtype=float)
    xi = units.length(x)
    eps = units.energy(spectrum.energies)
    d_eps = units.energy(spectrum.grid_spacing)
    coef = spectrum.amplitudes * math.sqrt(units.energy_unit) * d_eps
    out = np.empty(xi.size, dtype=complex)
    step = max(1, _CHUNK // eps.size)
    for i in range(0, xi.size, step):
        out[i : i + step] = _airy_matrix(xi[i : i + step], eps) @ coef
    return ComplexField(float(x[0]), float(x[-1]), units.amplitude_si(out), timestamp)


def gaussian_field(x0: float, sigma: float, x_min: float, x_max: float, n: int) -> ComplexField:
    """Normalised real Gaussian (pi sigma^2)^(-1/4) exp(-(x-x0)^2 / 2 sigma^2)."""
    return ComplexField.from_function(
        lambda x: (math.pi * sigma**2) ** -0.25 * np.exp(-((x - x0) ** 2) / (2 * sigma**2)) + 0j, x_min, x_max, n
    )
