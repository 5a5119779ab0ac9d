"""Physical constants, experiment parameters and natural units.

All public quantities are SI.  Angular frequencies are in rad/s; the
``*_over_2pi`` spellings used in configuration files are in Hz.

Coordinates: ``x`` points along gravity (downwards), the unsagged trap
centre is at ``x = 0`` and the potential of gravity is ``-m g x``.  The
harmonic trap minimum therefore sits at the sag ``x0 = g / omega_x**2``.

Configuration files are INI-style text read with :mod:`configparser`::

    [constants]
    hbar = 1.054571817e-34
    [species]
    mass = 1.4431606e-25
    F = 1
    g_F = -0.5
    scattering_length = 5.665e-9
    [trap]
    omega_x_over_2pi = 160
    ...
    [rf.1]
    peak_rabi_over_2pi = 50
    omega_rf_over_2pi = 910e3
    theta = 0
    polarization_factor = 0.7071067811865476
    envelope = box
    envelope_start = 0
    envelope_duration = 5e-3

Missing sections fall back to the reference Rb-87 defaults defined here.
"""
from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, fields, replace
from typing import Callable

import numpy as np

from .errors import ConfigError

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class PhysicalConstants:
    hbar: float = 1.054571817e-34
    g_earth: float = 9.81
    bohr_magneton: float = 9.2740100783e-24
    atomic_mass_unit: float = 1.66053906660e-27
    # conventional rounded value, not CODATA
    bohr_radius: float = 5.5e-11

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{f.name} must be finite and > 0, got {value!r}")

    @property
    def h(self) -> float:
        return TWO_PI * self.hbar


@dataclass(frozen=True)
class AtomSpecies:
    mass: float
    F: int
    g_F: float
    scattering_length: float = 0.0

    def __post_init__(self):
        if not self.mass > 0:
            raise ValueError("mass must be > 0")
        if int(self.F) != self.F or self.F < 1:
            raise ValueError("F must be an integer >= 1")
        if self.g_F == 0:
            raise ValueError("g_F must be non-zero")
        if self.scattering_length < 0:
            raise ValueError("scattering_length must be >= 0")

    @property
    def trapped_sublevel(self) -> int:
        """M_F of the low-field-seeking trapped state, sgn(g_F)."""
        return 1 if self.g_F > 0 else -1

    @classmethod
    def rb87(cls, constants: PhysicalConstants | None = None) -> "AtomSpecies":
        """87Rb in F = 1 with a = 103 Bohr radii."""
        constants = constants or PhysicalConstants()
        return cls(
            mass=86.909180527 * constants.atomic_mass_unit,
            F=1,
            g_F=-0.5,
            scattering_length=103 * constants.bohr_radius,
        )


@dataclass(frozen=True)
class TrapConfig:
    omega_x: float
    omega_y: float
    omega_z: float
    omega_bias: float

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{f.name} must be finite and > 0, got {value!r}")
        if self.omega_bias < 100 * self.omega_x:
            raise ValueError("omega_bias must greatly exceed omega_x (linear Zeeman regime)")

    @classmethod
    def reference(cls) -> "TrapConfig":
        return cls(
            omega_x=TWO_PI * 160.0,
            omega_y=TWO_PI * 6.7,
            omega_z=TWO_PI * 160.0,
            omega_bias=TWO_PI * 900e3,
        )


# ---------------------------------------------------------------------------
# pulse envelopes


@dataclass(frozen=True)
class BoxEnvelope:
    """Unit amplitude on ``[start, start + duration)``, zero elsewhere."""

    start: float = 0.0
    duration: float = 5e-3
    name = "box"

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError("envelope duration must be > 0")

    @property
    def end(self) -> float:
        return self.start + self.duration

    def support(self) -> tuple[float, float]:
        return self.start, self.end

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        return ((t >= self.start) & (t < self.end)).astype(float)


@dataclass(frozen=True)
class Sin2Envelope:
    """Smooth ``sin^2`` pulse of total length ``duration``."""

    start: float = 0.0
    duration: float = 5e-3
    name = "sin2"

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError("envelope duration must be > 0")

    @property
    def end(self) -> float:
        return self.start + self.duration

    def support(self) -> tuple[float, float]:
        return self.start, self.end

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        u = (t - self.start) / self.duration
        inside = (u >= 0) & (u < 1)
        return np.where(inside, np.sin(np.pi * u) ** 2, 0.0)


ENVELOPES: dict[str, Callable[..., object]] = {
    "box": BoxEnvelope,
    "sin2": Sin2Envelope,
}


def make_envelope(name: str, start: float, duration: float):
    try:
        cls = ENVELOPES[name]
    except KeyError:
        raise ValueError(f"unknown envelope {name!r}; known: {sorted(ENVELOPES)}") from None
    return cls(start=start, duration=duration)


@dataclass(frozen=True)
class RfComponent:
    """One rf tone.

    ``peak_rabi`` is the T -> U Rabi frequency of the pure circular drive
    for F = 1; ``polarization_factor`` is the magnitude of the projection
    of the field on the coupling circular component and
    ``polarization_phase`` its argument.
    """

    peak_rabi: float
    omega_rf: float
    theta: float = 0.0
    polarization_factor: float = 1.0
    envelope: BoxEnvelope | Sin2Envelope = field(default_factory=BoxEnvelope)
    polarization_phase: float = 0.0

    def __post_init__(self):
        if not self.peak_rabi > 0:
            raise ValueError("peak_rabi must be > 0")
        if not self.omega_rf > 0:
            raise ValueError("omega_rf must be > 0")
        if not 0 < self.polarization_factor <= 1:
            raise ValueError("polarization_factor must lie in (0, 1]")

    @property
    def coupling_phase(self) -> float:
        """Phase of the circular projection including the rf phase."""
        return self.theta + self.polarization_phase


LINEAR_POLARIZATION = 1.0 / math.sqrt(2.0)


def reference_rf(frequency_hz: float, theta: float = 0.0, duration: float = 5e-3) -> RfComponent:
    """50 Hz peak Rabi, linearly polarised box pulse starting at t = 0."""
    return RfComponent(
        peak_rabi=TWO_PI * 50.0,
        omega_rf=TWO_PI * frequency_hz,
        theta=theta,
        polarization_factor=LINEAR_POLARIZATION,
        envelope=BoxEnvelope(0.0, duration),
    )


# ---------------------------------------------------------------------------
# natural units


@dataclass(frozen=True)
class NaturalUnits:
    """Length ``l``, energy ``m g l`` and time ``hbar / (m g l)``.

    In these units hbar = 1, m = 1/2 and g = 2, so the untrapped
    Hamiltonian reads ``-d^2/dxi^2 - xi``.
    """

    length_l: float
    energy_unit: float
    time_unit: float

    @property
    def hbar(self) -> float:
        return self.energy_unit * self.time_unit

    @property
    def slope_mg(self) -> float:
        return self.energy_unit / self.length_l

    # SI -> natural
    def length(self, x):
        return np.asarray(x) / self.length_l

    def energy(self, e):
        return np.asarray(e) / self.energy_unit

    def time(self, t):
        return np.asarray(t) / self.time_unit

    def rate(self, omega):
        return np.asarray(omega) * self.time_unit

    # natural -> SI
    def length_si(self, xi):
        return np.asarray(xi) * self.length_l

    def energy_si(self, eps):
        return np.asarray(eps) * self.energy_unit

    def time_si(self, tau):
        return np.asarray(tau) * self.time_unit

    def rate_si(self, w):
        return np.asarray(w) / self.time_unit

    def amplitude_si(self, a):
        """Wave-function amplitude: natural (1/sqrt(l)) -> 1/sqrt(m)."""
        return np.asarray(a) / math.sqrt(self.length_l)

    def amplitude(self, a):
        return np.asarray(a) * math.sqrt(self.length_l)


def derive_natural_units(species: AtomSpecies, constants: PhysicalConstants) -> NaturalUnits:
    m, g, hbar = species.mass, constants.g_earth, constants.hbar
    length = (hbar**2 / (2.0 * g * m**2)) ** (1.0 / 3.0)
    energy = m * g * length
    return NaturalUnits(length_l=length, energy_unit=energy, time_unit=hbar / energy)


# ---------------------------------------------------------------------------
# derived quantities


def angular_matrix_element(F: int, M: int, raising: bool) -> float:
    """<F, M +- 1| F_+- |F, M> / hbar."""
    step = 1 if raising else -1
    value = F * (F + 1) - M * (M + step)
    return math.sqrt(max(value, 0))


def effective_coupling(rf: RfComponent, species: AtomSpecies) -> float:
    """Peak T -> U coupling rate |Omega| in rad/s.

    Convention: ``peak_rabi`` is quoted for the F = 1 pure circular drive,
    where the matrix element <0|F_-+|+-1> = sqrt(2) hbar combines with the
    1/sqrt(2) of the circular projection into unity.  Other F scale as
    sqrt(F(F+1)/2).
    """
    if species.F < 1:
        raise ValueError("F = 0 has no M_F = +-1 sublevel")
    M_T = species.trapped_sublevel
    element = angular_matrix_element(species.F, M_T, raising=M_T < 0)
    return rf.peak_rabi * rf.polarization_factor * element / math.sqrt(2.0)


def gravitational_sag(trap: TrapConfig, constants: PhysicalConstants) -> float:
    return constants.g_earth / trap.omega_x**2


def ground_state_width(trap: TrapConfig, species: AtomSpecies, constants: PhysicalConstants) -> float:
    """Harmonic oscillator length sqrt(hbar / m omega_x)."""
    return math.sqrt(constants.hbar / (species.mass * trap.omega_x))


def trapped_energy(trap: TrapConfig, species: AtomSpecies, constants: PhysicalConstants) -> float:
    """Ground-state energy E0 of the sagged non-interacting trap (J)."""
    hbar = constants.hbar
    x0 = gravitational_sag(trap, constants)
    return hbar * trap.omega_bias + 0.5 * hbar * trap.omega_x - 0.5 * species.mass * constants.g_earth * x0


def predict_resonance(trap: TrapConfig, species: AtomSpecies, constants: PhysicalConstants) -> float:
    """rf angular frequency resonant with the centre of the Gaussian source.

    ``omega_bias + omega_x / 2 + m g x0 / (2 hbar)``: the trapped energy
    minus the continuum energy ``-m g x0`` at which the overlap peaks.
    """
    x0 = gravitational_sag(trap, constants)
    return trap.omega_bias + 0.5 * trap.omega_x + species.mass * constants.g_earth * x0 / (2.0 * constants.hbar)


def thomas_fermi_chemical_potential(trap: TrapConfig, species: AtomSpecies, g1d: float) -> float:
    """1D Thomas-Fermi chemical potential for a unit-normalised cloud."""
    m = species.mass
    return (0.75 * g1d * trap.omega_x * math.sqrt(m / 2.0)) ** (2.0 / 3.0)


def thomas_fermi_radius(trap: TrapConfig, species: AtomSpecies, g1d: float) -> float:
    mu = thomas_fermi_chemical_potential(trap, species, g1d)
    return math.sqrt(2.0 * mu / (species.mass * trap.omega_x**2))


def local_resonance(x, trap: TrapConfig, species: AtomSpecies, constants: PhysicalConstants) -> np.ndarray:
    """rf angular frequency resonant with T -> U at position x.

    Mean-field shifts cancel for a state-independent interaction, so this
    holds inside a Thomas-Fermi cloud too.
    """
    x = np.asarray(x, dtype=float)
    return trap.omega_bias + 0.5 * species.mass * trap.omega_x**2 * x**2 / constants.hbar


# ---------------------------------------------------------------------------
# configuration file


@dataclass(frozen=True)
class Setup:
    """Everything physical: constants, species, trap and rf tones."""

    constants: PhysicalConstants
    species: AtomSpecies
    trap: TrapConfig
    rf: tuple[RfComponent, ...]
    n_atoms: float = 1e5

    @property
    def units(self) -> NaturalUnits:
        return derive_natural_units(self.species, self.constants)

    @property
    def sag(self) -> float:
        return gravitational_sag(self.trap, self.constants)

    @property
    def sigma0(self) -> float:
        return ground_state_width(self.trap, self.species, self.constants)

    @property
    def E0(self) -> float:
        return trapped_energy(self.trap, self.species, self.constants)

    def with_rf(self, rf) -> "Setup":
        return replace(self, rf=tuple(rf))


def reference_setup(frequencies_hz=(910e3,), thetas=None, duration: float = 5e-3) -> Setup:
    constants = PhysicalConstants()
    thetas = thetas if thetas is not None else [0.0] * len(frequencies_hz)
    return Setup(
        constants=constants,
        species=AtomSpecies.rb87(constants),
        trap=TrapConfig.reference(),
        rf=tuple(reference_rf(f, th, duration) for f, th in zip(frequencies_hz, thetas)),
        n_atoms=1e5,
    )


def _get_float(section: configparser.SectionProxy, key: str, default: float | None = None) -> float:
    """Read ``key`` (SI) or ``key_over_2pi`` (Hz -> rad/s)."""
    name = f"[{section.name}] {key}"
    has_plain = key in section
    has_hz = f"{key}_over_2pi" in section
    if has_plain and has_hz:
        raise ConfigError(f"{name}: give either {key} or {key}_over_2pi, not both")
    try:
        if has_plain:
            value = float(section[key])
        elif has_hz:
            value = TWO_PI * float(section[f"{key}_over_2pi"])
        elif default is not None:
            return default
        else:
            raise ConfigError(f"{name}: missing required key")
    except ValueError as exc:
        raise ConfigError(f"{name}: not a number ({exc})") from None
    if not math.isfinite(value):
        raise ConfigError(f"{name}: must be finite")
    return value


def _build(cls, name: str, **kwargs):
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{name}] {exc}") from None


def parse_setup(parser: configparser.ConfigParser) -> Setup:
    """Build a :class:`Setup` from the physical sections of a parsed config."""
    known = {"constants", "species", "trap", "run", "grid", "evolution", "compare", "sweep"}
    for section in parser.sections():
        if section in known or section.startswith("rf.") or section.startswith("output."):
            continue
        raise ConfigError(f"[{section}] unknown section")

    c_default = PhysicalConstants()
    if parser.has_section("constants"):
        sec = parser["constants"]
        _reject_unknown(sec, {f.name for f in fields(PhysicalConstants)})
        constants = _build(
            PhysicalConstants,
            "constants",
            **{f.name: _get_float(sec, f.name, getattr(c_default, f.name)) for f in fields(PhysicalConstants)},
        )
    else:
        constants = c_default

    s_default = AtomSpecies.rb87(constants)
    if parser.has_section("species"):
        sec = parser["species"]
        _reject_unknown(sec, {"mass", "F", "g_F", "scattering_length"})
        F = _get_float(sec, "F", s_default.F)
        if F != int(F):
            raise ConfigError("[species] F: must be an integer")
        species = _build(
            AtomSpecies,
            "species",
            mass=_get_float(sec, "mass", s_default.mass),
            F=int(F),
            g_F=_get_float(sec, "g_F", s_default.g_F),
            scattering_length=_get_float(sec, "scattering_length", s_default.scattering_length),
        )
    else:
        species = s_default

    t_default = TrapConfig.reference()
    if parser.has_section("trap"):
        sec = parser["trap"]
        names = [f.name for f in fields(TrapConfig)]
        _reject_unknown(sec, set(names) | {f"{n}_over_2pi" for n in names})
        trap = _build(TrapConfig, "trap", **{n: _get_float(sec, n, getattr(t_default, n)) for n in names})
    else:
        trap = t_default

    rf_sections = sorted(
        (s for s in parser.sections() if s.startswith("rf.")),
        key=lambda s: _rf_index(s),
    )
    rf = []
    for name in rf_sections:
        sec = parser[name]
        _reject_unknown(
            sec,
            {
                "peak_rabi", "peak_rabi_over_2pi", "omega_rf", "omega_rf_over_2pi", "theta",
                "polarization_factor", "polarization_phase", "envelope", "envelope_start",
                "envelope_duration",
            },
        )
        try:
            envelope = make_envelope(
                sec.get("envelope", "box").strip(),
                _get_float(sec, "envelope_start", 0.0),
                _get_float(sec, "envelope_duration", 5e-3),
            )
        except ValueError as exc:
            raise ConfigError(f"[{name}] envelope: {exc}") from None
        rf.append(
            _build(
                RfComponent,
                name,
                peak_rabi=_get_float(sec, "peak_rabi"),
                omega_rf=_get_float(sec, "omega_rf"),
                theta=_get_float(sec, "theta", 0.0),
                polarization_factor=_get_float(sec, "polarization_factor", 1.0),
                polarization_phase=_get_float(sec, "polarization_phase", 0.0),
                envelope=envelope,
            )
        )
    n_atoms = 1e5
    if parser.has_section("run"):
        n_atoms = _get_float(parser["run"], "n_atoms", 1e5)
    return Setup(constants=constants, species=species, trap=trap, rf=tuple(rf), n_atoms=n_atoms)


def _rf_index(name: str) -> int:
    try:
        index = int(name.split(".", 1)[1])
    except ValueError:
        raise ConfigError(f"[{name}] rf sections are named rf.1, rf.2, ...") from None
    if index < 1:
        raise ConfigError(f"[{name}] rf index must be >= 1")
    return index


def _reject_unknown(section: configparser.SectionProxy, allowed: set[str]) -> None:
    for key in section:
        if key not in allowed:
            raise ConfigError(f"[{section.name}] {key}: unknown key")


def make_parser() -> configparser.ConfigParser:
    # keys are case sensitive (F, g_F)
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    parser.optionxform = str
    return parser


def load_config(path) -> Setup:
    parser = make_parser()
    with open(path) as fh:
        parser.read_file(fh)
    return parse_setup(parser)


def format_setup(setup: Setup) -> str:
    """Inverse of :func:`parse_setup`: INI text that reproduces ``setup``."""
    lines = ["[constants]"]
    for f in fields(PhysicalConstants):
        lines.append(f"{f.name} = {getattr(setup.constants, f.name)!r}")
    sp = setup.species
    lines += [
        "",
        "[species]",
        f"mass = {sp.mass!r}",
        f"F = {sp.F}",
        f"g_F = {sp.g_F!r}",
        f"scattering_length = {sp.scattering_length!r}",
        "",
        "[trap]",
    ]
    for f in fields(TrapConfig):
        lines.append(f"{f.name} = {getattr(setup.trap, f.name)!r}")
    for i, rf in enumerate(setup.rf, start=1):
        lines += [
            "",
            f"[rf.{i}]",
            f"peak_rabi = {rf.peak_rabi!r}",
            f"omega_rf = {rf.omega_rf!r}",
            f"theta = {rf.theta!r}",
            f"polarization_factor = {rf.polarization_factor!r}",
            f"polarization_phase = {rf.polarization_phase!r}",
            f"envelope = {rf.envelope.name}",
            f"envelope_start = {rf.envelope.start!r}",
            f"envelope_duration = {rf.envelope.duration!r}",
        ]
    return "\n".join(lines) + "\n"
