"""Split-step evolution of the three Zeeman components of an F = 1 atom.

State layout: a complex array of shape ``(3, n)`` ordered by
``M_F = -1, 0, +1`` on a uniform grid that includes both end points.
Internally lengths, times and energies are in natural units (``hbar = 1``,
``m = 1/2``, ``g = 2``, kinetic operator ``-d^2/dxi^2``); every public
function takes and returns SI values.

Each step is a symmetric (Strang) splitting::

    exp(-i V dt/2)  exp(-i (T + K(t + dt/2)) dt)  exp(-i V dt/2)

``V`` holds the diagonal potentials, the mean field on the total density
and an optional absorber.  The rf coupling ``K`` is uniform in space and
acts only on the internal state, so it commutes with the kinetic energy
and ``exp(-i(T + K)dt)`` factorises exactly.  ``K`` couples the untrapped
level to the two others only, which makes ``K^3 = r^2 K`` and gives its
exponential in closed form.

Phases: in a frame rotating at ``omega_R`` (``psi_M = exp(-i s_M omega_R t)
psi~_M`` with ``s_M = sgn(g_F) M``) the untrapped <- trapped element of
the rf Hamiltonian is ``hbar Omega_eff env(t) exp(i[(w_rf - omega_R)t - theta])``
for every tone; the anti-trapped <- untrapped element carries the same
phase.  This is the convention under which the weak-coupling model of
:mod:`atomlaser.analytic` is the first-order limit of this engine.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.fft

from .airy import ComplexField
from .analytic import StreamResult
from .errors import (
    ConvergenceError,
    GridMismatchError,
    GridOverflowError,
    InstabilityError,
    UnresolvedError,
)
from .physconfig import (
    AtomSpecies,
    NaturalUnits,
    PhysicalConstants,
    RfComponent,
    Setup,
    TrapConfig,
    angular_matrix_element,
    derive_natural_units,
    effective_coupling,
    gravitational_sag,
    ground_state_width,
    thomas_fermi_chemical_potential,
    thomas_fermi_radius,
)

SUBLEVELS = (-1, 0, 1)
CHECKPOINT_FORMAT_VERSION = 1
_EDGE_TOL = 1e-6
_DRIFT_LIMIT = 1e-6


# ---------------------------------------------------------------------------
# grid and state


@dataclass(frozen=True)
class Grid1D:
    """``n_points`` samples from ``x_min`` to ``x_max`` inclusive (m)."""

    x_min: float
    x_max: float
    n_points: int = 8192

    def __post_init__(self):
        if not self.x_max > self.x_min:
            raise ValueError("x_max must exceed x_min")
        if int(self.n_points) != self.n_points or self.n_points < 256:
            raise ValueError("n_points must be an integer >= 256")
        if self.n_points & (self.n_points - 1):
            warnings.warn("n_points is not a power of two; FFTs will be slower", RuntimeWarning, stacklevel=3)

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.n_points - 1)

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.n_points)

    @property
    def k_max(self) -> float:
        return math.pi / self.dx

    @classmethod
    def default(cls, setup: Setup) -> "Grid1D":
        """[x0 - 50 um, x0 + 450 um] with 8192 points."""
        x0 = setup.sag
        return cls(x0 - 50e-6, x0 + 450e-6, 8192)

    @classmethod
    def for_fall(
        cls,
        setup: Setup,
        t_final: float,
        above: float = 30e-6,
        margin: float = 0.2,
        source_width: float | None = None,
    ) -> "Grid1D":
        """Grid that holds the source and resolves atoms falling for ``t_final``.

        The lower edge sits ``(1 + margin)`` fall distances (at least one
        fall distance plus 20 source widths) below the trap centre; the
        spacing resolves the momentum ``m g t_final`` plus six inverse source
        widths.
        """
        x0 = setup.sag
        g = setup.constants.g_earth
        sigma = source_width or setup.sigma0
        fall = 0.5 * g * t_final**2
        x_min = x0 - above
        x_max = x0 + max((1 + margin) * fall, fall + 20 * sigma)
        k_need = setup.species.mass * g * t_final / setup.constants.hbar + 6.0 / sigma
        n = 256
        while math.pi * (n - 1) / (x_max - x_min) < k_need:
            n *= 2
        return cls(x_min, x_max, n)

    def contains(self, other: "Grid1D") -> bool:
        return self.x_min <= other.x_min and other.x_max <= self.x_max


@dataclass(frozen=True)
class SpinorField:
    """Three components (M_F = -1, 0, +1) on one grid at one time; SI amplitudes."""

    components: tuple[ComplexField, ComplexField, ComplexField]
    time: float = 0.0

    def __post_init__(self):
        comps = tuple(self.components)
        if len(comps) != 3:
            raise ValueError("a spinor has exactly three components")
        if not all(c.same_grid(comps[0]) for c in comps):
            raise GridMismatchError("spinor components must share one grid")
        object.__setattr__(self, "components", comps)

    @property
    def grid(self) -> Grid1D:
        c = self.components[0]
        return Grid1D(c.x_min, c.x_max, c.n)

    def array(self) -> np.ndarray:
        return np.stack([c.samples for c in self.components])

    def component(self, M: int) -> ComplexField:
        return self.components[SUBLEVELS.index(M)]

    def populations(self) -> np.ndarray:
        return np.array([c.norm2() for c in self.components])

    def norm2(self) -> float:
        return float(self.populations().sum())

    @classmethod
    def from_array(cls, grid: Grid1D, psi: np.ndarray, time: float = 0.0) -> "SpinorField":
        psi = np.asarray(psi, dtype=complex)
        if psi.shape != (3, grid.n_points):
            raise GridMismatchError(f"expected shape (3, {grid.n_points}), got {psi.shape}")
        return cls(tuple(ComplexField(grid.x_min, grid.x_max, p, time) for p in psi), time)

    @classmethod
    def single(cls, field_: ComplexField, M: int) -> "SpinorField":
        """Spinor with ``field_`` in sublevel ``M`` and the others empty."""
        psi = np.zeros((3, field_.n), dtype=complex)
        psi[SUBLEVELS.index(M)] = field_.samples
        grid = Grid1D(field_.x_min, field_.x_max, field_.n)
        return cls.from_array(grid, psi, field_.timestamp)


@dataclass(frozen=True)
class Absorber:
    """``sin^2`` ramp of imaginary potential over ``width`` at the grid edge(s).

    ``strength`` is the peak loss rate (1/s) reached at the edge; ``edges``
    is ``"lower"`` (large x, where the beam leaves) or ``"both"``.
    """

    width: float
    strength: float
    edges: str = "lower"

    def __post_init__(self):
        if not (self.width > 0 and self.strength > 0):
            raise ValueError("absorber width and strength must be > 0")
        if self.edges not in ("lower", "both"):
            raise ValueError("absorber edges must be 'lower' or 'both'")

    def profile(self, x: np.ndarray) -> np.ndarray:
        u = np.clip((x - (x[-1] - self.width)) / self.width, 0.0, 1.0)
        if self.edges == "both":
            u = np.maximum(u, np.clip(((x[0] + self.width) - x) / self.width, 0.0, 1.0))
        return self.strength * np.sin(0.5 * math.pi * u) ** 2


@dataclass(frozen=True)
class EvolutionParams:
    """Time stepping and model switches for :func:`evolve`.

    ``rotating_frame_omega`` of ``None`` selects ``omega_bias``.
    ``couple_antitrapped`` zeroes the (0, +-1) anti-trapped coupling when
    false; ``debug`` asserts Hermiticity of the coupling every step.
    """

    dt: float = 1e-7
    t_final: float = 8e-3
    rotating_frame_omega: float | None = None
    interaction_g1d: float = 0.0
    absorber: Absorber | None = None
    couple_antitrapped: bool = True
    debug: bool = False

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if not self.t_final >= 0:
            raise ValueError("t_final must be >= 0")
        if self.interaction_g1d < 0:
            raise ValueError("interaction_g1d must be >= 0")

    def frame(self, trap: TrapConfig) -> float:
        return trap.omega_bias if self.rotating_frame_omega is None else self.rotating_frame_omega

    @property
    def n_steps(self) -> int:
        return steps_for(self.t_final, self.dt)


def steps_for(t: float, dt: float) -> int:
    n = round(t / dt)
    if abs(n * dt - t) > 1e-6 * dt:
        raise ValueError(f"time {t!r} is not a multiple of dt = {dt!r}")
    return int(n)


# ---------------------------------------------------------------------------
# Hamiltonian pieces


def _zeeman_sign(M: int, species: AtomSpecies) -> int:
    return int(math.copysign(1, species.g_F)) * M


def _check_sublevel(M: int, species: AtomSpecies) -> None:
    if species.F != 1:
        raise ValueError(f"only F = 1 is supported, got F = {species.F}")
    if M not in SUBLEVELS:
        raise ValueError(f"unsupported sublevel M_F = {M}")


def potentials(M: int, x, trap: TrapConfig, species: AtomSpecies, constants: PhysicalConstants):
    """sgn(g_F) M (m w_x^2 x^2 / 2 + hbar w_bias) - m g x in J."""
    _check_sublevel(M, species)
    x = np.asarray(x, dtype=float)
    m = species.mass
    zeeman = 0.5 * m * trap.omega_x**2 * x**2 + constants.hbar * trap.omega_bias
    return _zeeman_sign(M, species) * zeeman - m * constants.g_earth * x


def g1d_coefficient(species: AtomSpecies, omega_t1: float, omega_t2: float, N: float, constants: PhysicalConstants) -> float:
    """Transversely integrated contact coupling 2 hbar sqrt(w1 w2) a N (J m)."""
    if not (omega_t1 > 0 and omega_t2 > 0 and N > 0):
        raise ValueError("transverse frequencies and atom number must be > 0")
    return 2.0 * constants.hbar * math.sqrt(omega_t1 * omega_t2) * species.scattering_length * N


def setup_g1d(setup: Setup, axes: tuple[str, str] = ("y", "z")) -> float:
    omegas = [getattr(setup.trap, f"omega_{a}") for a in axes]
    return g1d_coefficient(setup.species, omegas[0], omegas[1], setup.n_atoms, setup.constants)


def _coupling_elements(fields: Sequence[RfComponent], t: float, frame: float, species: AtomSpecies) -> tuple[complex, complex]:
    """(untrapped <- trapped, anti-trapped <- untrapped) elements in units of hbar."""
    M_T = species.trapped_sublevel
    lower = angular_matrix_element(species.F, M_T, raising=M_T < 0)
    upper = angular_matrix_element(species.F, 0, raising=M_T < 0)
    k_ut = 0j
    for rf in fields:
        env = float(rf.envelope(t))
        if env == 0.0:
            continue
        k_ut += effective_coupling(rf, species) * env * np.exp(1j * ((rf.omega_rf - frame) * t - rf.coupling_phase))
    return k_ut, k_ut * (upper / lower)


def coupling_matrix(
    fields: Sequence[RfComponent],
    t: float,
    rotating_frame_omega: float,
    species: AtomSpecies,
    constants: PhysicalConstants,
    couple_antitrapped: bool = True,
) -> np.ndarray:
    """3x3 rf Hamiltonian (J) in the rotating frame, rows/columns M_F = -1, 0, +1."""
    _check_sublevel(0, species)
    for rf in fields:
        if abs(rf.omega_rf - rotating_frame_omega) > 0.1 * rotating_frame_omega:
            warnings.warn(
                f"tone at {rf.omega_rf / (2 * math.pi):.4g} Hz is far from the rotating frame; RWA is doubtful",
                RuntimeWarning,
                stacklevel=2,
            )
    k_ut, k_au = _coupling_elements(fields, t, rotating_frame_omega, species)
    if not couple_antitrapped:
        k_au = 0j
    iT = SUBLEVELS.index(species.trapped_sublevel)
    iA = SUBLEVELS.index(-species.trapped_sublevel)
    iU = 1
    K = np.zeros((3, 3), dtype=complex)
    K[iU, iT] = k_ut
    K[iT, iU] = np.conj(k_ut)
    K[iA, iU] = k_au
    K[iU, iA] = np.conj(k_au)
    return constants.hbar * K


def _coupling_propagator(K: np.ndarray, dt: float) -> np.ndarray:
    """exp(-i K dt) for a Hermitian star-shaped K (K^3 = r^2 K)."""
    r2 = float(np.sum(np.abs(K) ** 2) / 2)
    if r2 == 0:
        return np.eye(3, dtype=complex)
    r = math.sqrt(r2)
    return np.eye(3) - 1j * (math.sin(r * dt) / r) * K + ((math.cos(r * dt) - 1.0) / r2) * (K @ K)


# ---------------------------------------------------------------------------
# ground state


def _kinetic_k2(n: int, dxi: float) -> np.ndarray:
    k = 2 * math.pi * scipy.fft.fftfreq(n, dxi)
    return k * k


def _energy(psi: np.ndarray, V: np.ndarray, g: float, k2: np.ndarray, dxi: float) -> tuple[float, float]:
    """(energy per particle, chemical potential) of a normalised state."""
    psik = scipy.fft.fft(psi)
    kin = float(np.sum(k2 * np.abs(psik) ** 2).real) * dxi / psi.size
    dens = np.abs(psi) ** 2
    pot = float(np.sum(V * dens)) * dxi
    inter = float(np.sum(dens**2)) * dxi * g
    return kin + pot + 0.5 * inter, kin + pot + inter


def ground_state_imaginary_time(
    trap: TrapConfig,
    species: AtomSpecies,
    g1d: float,
    grid: Grid1D,
    constants: PhysicalConstants | None = None,
    tol: float = 1e-12,
    max_steps: int = 2_000_000,
) -> ComplexField:
    """Real, positive, normalised trapped ground state on ``grid``.

    Imaginary-time split-step on a window of the grid around the trap
    minimum (same spacing), with a decreasing step schedule; the last stage
    runs until the energy changes by less than ``tol * |E|`` per step and
    the residual ``||(H - mu) psi||`` has stopped decreasing.  Energies are
    measured from the potential minimum.
    """
    constants = constants or PhysicalConstants()
    units = derive_natural_units(species, constants)
    x0 = gravitational_sag(trap, constants)
    sigma0 = ground_state_width(trap, species, constants)
    extent = 12 * sigma0
    if g1d > 0:
        extent = max(extent, 2.0 * thomas_fermi_radius(trap, species, g1d))
    if x0 - extent < grid.x_min or x0 + extent > grid.x_max:
        raise ValueError("grid does not hold the trapped cloud with a 10 sigma margin")
    x = grid.x
    lo = int(np.searchsorted(x, x0 - extent))
    hi = int(np.searchsorted(x, x0 + extent))
    n_sub = max(256, 1 << math.ceil(math.log2(hi - lo)))
    centre = int(np.argmin(np.abs(x - x0)))
    lo = max(0, centre - n_sub // 2)
    hi = min(grid.n_points, lo + n_sub)
    lo = hi - n_sub
    xs = x[lo:hi]

    M_T = species.trapped_sublevel
    V = units.energy(potentials(M_T, xs, trap, species, constants))
    V = V - V.min()
    dxi = float(units.length(grid.dx))
    g = g1d / (units.energy_unit * units.length_l)
    k2 = _kinetic_k2(n_sub, dxi)

    xi = units.length(xs)
    s = sigma0 / units.length_l
    psi = np.exp(-((xi - units.length(x0)) ** 2) / (2 * s**2)).astype(complex)
    if g > 0:
        # start from the Thomas-Fermi shape to save iterations
        R = thomas_fermi_radius(trap, species, g1d) / units.length_l
        psi = np.sqrt(np.clip(1 - ((xi - units.length(x0)) / R) ** 2, 0, None)) + 1e-3 * psi
    psi /= math.sqrt(np.sum(np.abs(psi) ** 2) * dxi)

    omega = trap.omega_x * units.time_unit
    rate = omega
    if g > 0:
        rate = max(omega, thomas_fermi_chemical_potential(trap, species, g1d) / units.energy_unit)
    # (step, relaxation time in units of 1 / omega_x) per stage; steps scale
    # with the fastest of trap frequency and chemical potential
    schedule = [
        (0.2 / rate, 6.0),
        (0.05 / rate, 6.0),
        (0.01 / rate, 6.0),
        (min(0.002 / omega, 0.01 / rate), 10.0),
    ]
    steps_used = 0
    converged = False
    for stage, (dtau, relax) in enumerate(schedule):
        half_v = np.exp(-0.5 * dtau * V)
        kin = np.exp(-dtau * k2)
        E_prev = _energy(psi, V, g, k2, dxi)[0]
        quiet = 0
        stage_done = False
        while steps_used < max_steps:
            psi = psi * half_v * np.exp(-0.5 * dtau * g * np.abs(psi) ** 2)
            psi = scipy.fft.ifft(kin * scipy.fft.fft(psi))
            psi = psi * half_v * np.exp(-0.5 * dtau * g * np.abs(psi) ** 2)
            psi /= math.sqrt(np.sum(np.abs(psi) ** 2) * dxi)
            steps_used += 1
            E = _energy(psi, V, g, k2, dxi)[0]
            change = abs(E - E_prev)
            E_prev = E
            # change per unit of rate * tau (stricter than per step since
            # rate * dtau < 1, floored at round-off); once quiet, keep
            # relaxing the excited admixture, which the energy only sees
            # quadratically
            threshold = abs(E) * max(tol * dtau * rate, 64 * np.finfo(float).eps)
            quiet = quiet + 1 if change < threshold else 0
            if quiet * dtau * omega > relax:
                stage_done = True
                break
        if not stage_done:
            break
        converged = stage == len(schedule) - 1
    if not converged:
        raise ConvergenceError(f"imaginary-time iteration did not converge in {max_steps} steps")

    psi = np.abs(psi)
    full = np.zeros(grid.n_points, dtype=complex)
    full[lo:hi] = psi
    return ComplexField(grid.x_min, grid.x_max, units.amplitude_si(full), 0.0)


def initial_spinor(setup: Setup, grid: Grid1D, g1d: float = 0.0) -> SpinorField:
    """Trapped ground state in the trapped sublevel, other sublevels empty."""
    gs = ground_state_imaginary_time(setup.trap, setup.species, g1d, grid, setup.constants)
    return SpinorField.single(gs, setup.species.trapped_sublevel)


# ---------------------------------------------------------------------------
# time evolution


@dataclass
class _Recorder:
    times: np.ndarray
    lo: int
    hi: int
    components: tuple[int, ...]
    steps: np.ndarray = field(init=False)
    data: list = field(default_factory=list)

    def __post_init__(self):
        self.steps = np.empty(0, dtype=int)


class SplitStepSolver:
    """Stateful integrator; see the module docstring for the scheme.

    Typical use::

        solver = SplitStepSolver(setup, params, initial)
        solver.record(times=[8e-3])                       # full grid, U only
        solver.record(times=dense, window=(x_d - 1e-6, x_d + 1e-6))
        result = solver.run()
    """

    def __init__(self, setup: Setup, params: EvolutionParams, initial: SpinorField, rf: Sequence[RfComponent] | None = None):
        self.setup = setup
        self.params = params
        self.rf = tuple(setup.rf if rf is None else rf)
        self.grid = initial.grid
        self.units = derive_natural_units(setup.species, setup.constants)
        self.frame = params.frame(setup.trap)
        _check_sublevel(0, setup.species)
        self._check_dt()
        u = self.units
        x = self.grid.x
        self.dtau = float(u.time(params.dt))
        self.dxi = float(u.length(self.grid.dx))
        V = np.empty((3, x.size))
        hbar = setup.constants.hbar
        for i, M in enumerate(SUBLEVELS):
            V[i] = potentials(M, x, setup.trap, setup.species, setup.constants)
            V[i] -= _zeeman_sign(M, setup.species) * hbar * self.frame
        self.V = u.energy(V)
        self.g = params.interaction_g1d / (u.energy_unit * u.length_l)
        loss = np.zeros(x.size) if params.absorber is None else params.absorber.profile(x) * u.time_unit
        self._half_static = np.exp(-0.5j * self.dtau * self.V) * np.exp(-0.5 * self.dtau * loss)[None, :]
        self._kinetic = np.exp(-1j * self.dtau * _kinetic_k2(x.size, self.dxi))
        self.psi = u.amplitude(initial.array()).astype(complex)
        self.step_index = 0
        self.t0 = float(initial.time)
        self.recorders: list[_Recorder] = []
        self.norm_history: list[tuple[float, float]] = []
        self._lossless = params.absorber is None and self.g == 0

    # -- configuration -------------------------------------------------------

    def _check_dt(self) -> None:
        detunings = [abs(rf.omega_rf - self.frame) for rf in self.rf]
        if detunings and max(detunings) > 0:
            limit = 2 * math.pi / (20 * max(detunings))
            if self.params.dt >= limit:
                raise UnresolvedError(
                    f"dt = {self.params.dt:.3g} s does not resolve the rotating-frame detuning; need dt < {limit:.3g} s"
                )

    def record(self, times: Iterable[float], window: tuple[float, float] | None = None, components=(1,)) -> int:
        """Request snapshots at ``times`` (s) of ``components`` (indices 0..2) on ``window``."""
        x = self.grid.x
        if window is None:
            lo, hi = 0, x.size
        else:
            lo = max(0, int(np.searchsorted(x, window[0])) - 1)
            hi = min(x.size, int(np.searchsorted(x, window[1])) + 1)
            if hi - lo < 2:
                raise ValueError("window holds fewer than two grid points")
        times = np.asarray(sorted(times), dtype=float)
        rec = _Recorder(times, lo, hi, tuple(components))
        rec.steps = np.array([steps_for(t - self.t0, self.params.dt) for t in times], dtype=int)
        if np.any(rec.steps < 0) or (rec.steps.size and rec.steps.max() > self.params.n_steps):
            raise ValueError("snapshot times must lie within the evolution interval")
        self.recorders.append(rec)
        return len(self.recorders) - 1

    # -- stepping ------------------------------------------------------------

    def time(self) -> float:
        return self.t0 + self.step_index * self.params.dt

    def norm2(self) -> float:
        return float(np.sum(np.abs(self.psi) ** 2) * self.dxi)

    def _half_potential(self) -> None:
        if self.g:
            density = np.sum(np.abs(self.psi) ** 2, axis=0)
            self.psi *= self._half_static * np.exp(-0.5j * self.dtau * self.g * density)[None, :]
        else:
            self.psi *= self._half_static

    def step(self) -> None:
        t_mid = self.time() + 0.5 * self.params.dt
        self._half_potential()
        K = coupling_matrix(
            self.rf, t_mid, self.frame, self.setup.species, self.setup.constants, self.params.couple_antitrapped
        )
        K = K / self.setup.constants.hbar * self.units.time_unit  # natural units
        if self.params.debug:
            assert np.allclose(K, K.conj().T, rtol=0, atol=1e-15 * (np.abs(K).max() + 1)), "coupling not Hermitian"
        psik = scipy.fft.fft(self.psi, axis=1)
        psik *= self._kinetic[None, :]
        if np.any(K):
            psik = _coupling_propagator(K, self.dtau) @ psik
        self.psi = scipy.fft.ifft(psik, axis=1)
        self._half_potential()
        self.step_index += 1

    def _check_edges(self) -> None:
        if self.params.absorber is not None:
            return
        u = np.abs(self.psi[1])
        peak = u.max()
        if peak > 0 and max(u[0], u[-1]) > _EDGE_TOL * peak:
            raise GridOverflowError(
                f"untrapped component reaches the grid edge at t = {self.time():.4g} s "
                f"({max(u[0], u[-1]) / peak:.2e} of its maximum)"
            )

    def run(self, n_norm_samples: int = 200) -> StreamResult:
        n_steps = self.params.n_steps
        due: dict[int, list[tuple[int, int]]] = {}
        for r_index, rec in enumerate(self.recorders):
            for j, s in enumerate(rec.steps):
                due.setdefault(int(s), []).append((r_index, j))
        norm_every = max(1, n_steps // n_norm_samples)
        prev_norm, prev_step = self.norm2(), 0
        self.norm_history = [(self.time(), prev_norm)]
        self._snap(due.get(0, []))
        while self.step_index < n_steps:
            self.step()
            s = self.step_index
            if s % norm_every == 0 or s == n_steps:
                norm = self.norm2()
                if not math.isfinite(norm):
                    raise InstabilityError(f"state became non-finite at step {s}")
                if self._lossless and abs(norm - prev_norm) > _DRIFT_LIMIT * (s - prev_step):
                    raise InstabilityError(
                        f"norm drift {abs(norm - prev_norm) / (s - prev_step):.3g} per step exceeds {_DRIFT_LIMIT:g}"
                    )
                prev_norm, prev_step = norm, s
                self.norm_history.append((self.time(), norm))
            if s in due:
                self._check_edges()
                self._snap(due[s])
        self._check_edges()
        return self._result()

    def _snap(self, items) -> None:
        for r_index, j in items:
            rec = self.recorders[r_index]
            rec.data.append((j, self.psi[list(rec.components), rec.lo : rec.hi].copy()))

    def spinor(self) -> SpinorField:
        return SpinorField.from_array(self.grid, self.units.amplitude_si(self.psi), self.time())

    def recorded(self, index: int) -> list[SpinorField | ComplexField]:
        rec = self.recorders[index]
        x = self.grid.x[rec.lo : rec.hi]
        out = []
        for j, data in sorted(rec.data, key=lambda item: item[0]):
            samples = self.units.amplitude_si(data[0])
            out.append(ComplexField(float(x[0]), float(x[-1]), samples, float(rec.times[j])))
        return out

    def stream(self, index: int = 0) -> StreamResult:
        rec = self.recorders[index]
        fields_ = tuple(self.recorded(index))
        return StreamResult(rec.times, fields_, {"rf": self.rf, "engine": "numeric"}, self._diagnostics())

    def _diagnostics(self) -> dict:
        final = self.spinor()
        return {
            "norm_history": np.array(self.norm_history),
            "populations": final.populations(),
            "final_spinor": final,
            "dt": self.params.dt,
            "grid": self.grid,
        }

    def _result(self) -> StreamResult:
        if self.recorders:
            return self.stream(0)
        return StreamResult(np.empty(0), (), {"rf": self.rf, "engine": "numeric"}, self._diagnostics())


def evolve(
    initial: SpinorField,
    fields: Sequence[RfComponent],
    params: EvolutionParams,
    setup: Setup,
    snapshot_times: Iterable[float] | None = None,
) -> StreamResult:
    """Propagate ``initial`` to ``params.t_final`` and return untrapped snapshots.

    Snapshots default to every 1e-4 s (rounded to whole steps).  The
    returned diagnostics hold the norm history, the final populations and
    the final spinor.
    """
    solver = SplitStepSolver(setup, params, initial, fields)
    if snapshot_times is None:
        every = max(1, round(1e-4 / params.dt))
        snapshot_times = initial.time + params.dt * np.arange(0, params.n_steps + 1, every)
    solver.record(snapshot_times)
    return solver.run()


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, state: SpinorField) -> Path:
    """Write ``state`` as an ``.npz`` archive (written to a temp file, then renamed)."""
    path = Path(path)
    psi = state.array()
    grid = state.grid
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(
            fh,
            format_version=np.int64(CHECKPOINT_FORMAT_VERSION),
            x_min=np.float64(grid.x_min),
            x_max=np.float64(grid.x_max),
            n_points=np.int64(grid.n_points),
            time=np.float64(state.time),
            psi_m1=psi[0],
            psi_0=psi[1],
            psi_p1=psi[2],
        )
    tmp.replace(path)
    return path


def load_checkpoint(path) -> SpinorField:
    with np.load(Path(path)) as data:
        version = int(data["format_version"])
        if version != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format version {version}")
        grid = Grid1D(float(data["x_min"]), float(data["x_max"]), int(data["n_points"]))
        psi = np.stack([data["psi_m1"], data["psi_0"], data["psi_p1"]])
        return SpinorField.from_array(grid, psi, float(data["time"]))
