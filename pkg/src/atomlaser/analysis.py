"""Observables of an outcoupled stream: profiles, detector traces, contrast.

Visibility of a beat is defined here as::

    V = (<I_max> - <I_min>) / (<I_max> + <I_min>)

averaged over all interior extrema of the trace inside the analysis window.
Each extremum value comes from a least-squares fit of
``a + b cos(w t) + c sin(w t)`` to the samples within a quarter beat period
of the extremum (``a +- sqrt(b^2 + c^2)``), with ``w`` the beat frequency
measured on the whole window.  This is insensitive to where the samples
fall relative to the true extremum and exact for a pure two-tone beat.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.optimize import least_squares
from scipy.signal import find_peaks

from .airy import ComplexField
from .analytic import RateFunction, RateTerm, StreamResult, drive_intensity
from .errors import GridMismatchError, TooFewPeriodsError, UndersampledError
from .physconfig import AtomSpecies, PhysicalConstants, RfComponent, effective_coupling

MIN_PERIODS = 3.0
MIN_SAMPLES_PER_BEAT = 10
NOISE_FLOOR = 1e-12


@dataclass(frozen=True)
class DensityProfile:
    x: np.ndarray
    density: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        d = np.asarray(self.density, dtype=float)
        if x.shape != d.shape or x.ndim != 1:
            raise ValueError("x and density must be 1D arrays of equal length")
        if np.any(d < 0):
            raise ValueError("density must be non-negative")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "density", d)

    def integral(self) -> float:
        return float(np.trapezoid(self.density, self.x))

    def peak(self) -> float:
        return float(self.density.max()) if self.density.size else 0.0


@dataclass(frozen=True)
class DetectorTrace:
    """Density (1/m) at ``detector_x`` as a function of time (s)."""

    detector_x: float
    times: np.ndarray
    density: np.ndarray
    beat_hint: float | None = None  # largest tone separation (rad/s), if known


@dataclass(frozen=True)
class VisibilityReport:
    detector_x: float
    window: tuple[float, float]
    V: float
    beat_frequency_measured: float  # rad/s
    envelope_phase: float  # rad, I ~ a + A cos(w t - phase)
    n_maxima: int = 0
    n_minima: int = 0

    def to_json(self) -> dict:
        return {
            "detector_x": self.detector_x,
            "V": self.V,
            "beat_hz": self.beat_frequency_measured / (2 * math.pi),
            "phase_rad": self.envelope_phase,
        }


@dataclass(frozen=True)
class RfStreamReport:
    """Drive intensity and stream density on common time stamps."""

    detector_x: float
    times: np.ndarray
    drive_intensity: np.ndarray
    stream_density: np.ndarray
    drive_visibility: float
    stream_visibility: VisibilityReport | None = field(default=None)


# ---------------------------------------------------------------------------
# profiles


def density(f: ComplexField) -> DensityProfile:
    return DensityProfile(f.x, np.abs(f.samples) ** 2, f.timestamp)


def flux(f: ComplexField, mass: float, hbar: float) -> np.ndarray:
    """Probability current (hbar / m) Im(psi* d psi / dx) in 1/s."""
    dpsi = np.gradient(f.samples, f.dx)
    return hbar / mass * np.imag(np.conj(f.samples) * dpsi)


def compare_profiles(a: DensityProfile, b: DensityProfile, rescale: bool = False) -> float:
    """||a - b|| / ||a|| on a's grid.

    ``b`` is interpolated onto a's grid when the grids differ but b covers
    a's range.  With ``rescale`` b is first scaled to a's integral, which
    compares shapes only.  Two empty profiles compare as 0.
    """
    if a.x.shape == b.x.shape and np.array_equal(a.x, b.x):
        db = b.density
    elif b.x[0] <= a.x[0] and a.x[-1] <= b.x[-1]:
        db = np.interp(a.x, b.x, b.density)
    else:
        raise GridMismatchError("profile b does not cover the grid of profile a")
    if rescale:
        ib = np.trapezoid(db, a.x)
        if ib > 0:
            db = db * (a.integral() / ib)
    norm_a = np.linalg.norm(a.density)
    diff = np.linalg.norm(a.density - db)
    if norm_a == 0:
        return 0.0 if diff == 0 else math.inf
    return float(diff / norm_a)


# ---------------------------------------------------------------------------
# traces


def _tone_separation(rf: Sequence[RfComponent]) -> float | None:
    omegas = sorted({r.omega_rf for r in rf})
    if len(omegas) < 2:
        return None
    return omegas[-1] - omegas[0]


def detector_trace(stream: StreamResult, x_d: float) -> DetectorTrace:
    """|Psi_U(x_d, t)|^2 by cubic interpolation of each snapshot."""
    if not stream.fields:
        raise ValueError("stream has no snapshots")
    x = stream.x
    if not x[0] <= x_d <= x[-1]:
        raise ValueError(f"detector position {x_d!r} lies outside the stream grid")
    beat = _tone_separation(stream.metadata.get("rf", ()))
    if beat and stream.times.size > 1:
        cadence = float(np.max(np.diff(stream.times)))
        if cadence > 2 * math.pi / (MIN_SAMPLES_PER_BEAT * beat):
            raise UndersampledError(
                f"snapshot spacing {cadence:.3g} s gives fewer than {MIN_SAMPLES_PER_BEAT} samples per beat"
            )
    i = int(np.clip(np.searchsorted(x, x_d), 2, x.size - 2))
    lo, hi = max(0, i - 3), min(x.size, i + 3)
    values = np.empty(stream.times.size, dtype=complex)
    for k, f in enumerate(stream.fields):
        seg = f.samples[lo:hi]
        values[k] = CubicSpline(x[lo:hi], seg.real)(x_d) + 1j * CubicSpline(x[lo:hi], seg.imag)(x_d)
    return DetectorTrace(float(x_d), stream.times.copy(), np.abs(values) ** 2, beat)


def _harmonic_fit(t: np.ndarray, y: np.ndarray, omega: float) -> tuple[np.ndarray, np.ndarray]:
    """Least squares of y ~ a + b t + c cos(w t) + d sin(w t)."""
    A = np.column_stack([np.ones_like(t), t - t.mean(), np.cos(omega * t), np.sin(omega * t)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    return coef, A @ coef


def _measure_beat(t: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """(angular frequency, phase) of the dominant oscillation of y(t)."""
    n = t.size
    dt = (t[-1] - t[0]) / (n - 1)
    detrended = y - np.polyval(np.polyfit(t - t.mean(), y, 1), t - t.mean())
    pad = 1 << (max(n, 16) * 8 - 1).bit_length()
    spectrum = np.abs(np.fft.rfft(detrended * np.hanning(n), pad))
    freqs = 2 * math.pi * np.fft.rfftfreq(pad, dt)
    spectrum[0] = 0.0
    w0 = float(freqs[int(np.argmax(spectrum))])
    if w0 == 0.0:
        return 0.0, 0.0

    # fit on a unit-scale copy so the result does not depend on the units of y
    y_unit = y / np.max(np.abs(detrended))

    def residual(p):
        return _harmonic_fit(t, y_unit, p[0])[1] - y_unit

    w = float(least_squares(residual, [w0], x_scale=[w0], xtol=1e-14, ftol=1e-14, gtol=1e-14).x[0])
    coef, _ = _harmonic_fit(t, y, w)
    if w < 0:
        w, coef[3] = -w, -coef[3]
    return w, math.atan2(coef[3], coef[2])


def visibility(trace: DetectorTrace, window: tuple[float, float] | None = None) -> VisibilityReport:
    """Extrema-based beat visibility of ``trace`` inside ``window`` (s)."""
    t_all, y_all = np.asarray(trace.times), np.asarray(trace.density)
    if window is None:
        window = (float(t_all[0]), float(t_all[-1]))
    sel = (t_all >= window[0]) & (t_all <= window[1])
    t, y = t_all[sel], y_all[sel]
    if t.size < 8:
        raise TooFewPeriodsError("window holds fewer than 8 samples")
    scale = np.max(np.abs(y_all)) if y_all.size else 0.0
    if scale == 0 or np.ptp(y) <= NOISE_FLOOR * scale:
        return VisibilityReport(trace.detector_x, window, 0.0, 0.0, 0.0)
    omega, phase = _measure_beat(t, y)
    span = t[-1] - t[0]
    if omega == 0 or omega * span / (2 * math.pi) < MIN_PERIODS - 1e-6:
        raise TooFewPeriodsError(
            f"window of {span:.3g} s holds {omega * span / (2 * math.pi):.2f} beat periods (< {MIN_PERIODS:g})"
        )
    period = 2 * math.pi / omega
    dt = span / (t.size - 1)
    distance = max(1, int(0.6 * period / dt))
    quarter = 0.25 * period
    maxima, minima = [], []
    for sign, store in ((1.0, maxima), (-1.0, minima)):
        idx, _ = find_peaks(sign * y, distance=distance)
        for i in idx:
            near = np.abs(t - t[i]) <= quarter
            if t[i] - quarter < t[0] or t[i] + quarter > t[-1]:
                continue
            if near.sum() < 5:
                store.append(y[i])
                continue
            coef, _ = _harmonic_fit(t[near], y[near], omega)
            amp = math.hypot(coef[2], coef[3])
            store.append(coef[0] + sign * amp)
    if not maxima or not minima:
        raise TooFewPeriodsError("no interior extrema found in the window")
    i_max, i_min = float(np.mean(maxima)), max(float(np.mean(minima)), 0.0)
    V = (i_max - i_min) / (i_max + i_min) if i_max + i_min > 0 else 0.0
    return VisibilityReport(
        trace.detector_x,
        (float(window[0]), float(window[1])),
        float(np.clip(V, 0.0, 1.0)),
        omega,
        math.remainder(phase, 2 * math.pi),
        len(maxima),
        len(minima),
    )


def drive_visibility(amplitudes: Sequence[float]) -> float:
    """Best-case contrast of |sum_i A_i e^{i phi_i(t)}|^2 over all relative phases."""
    a = np.abs(np.asarray(amplitudes, dtype=float))
    if a.size == 0 or a.sum() == 0:
        return 0.0
    top = a.sum() ** 2
    bottom = max(0.0, 2 * a.max() - a.sum()) ** 2
    return float((top - bottom) / (top + bottom))


def rf_vs_stream_report(
    fields: Sequence[RfComponent],
    stream: StreamResult,
    x_d: float,
    window: tuple[float, float] | None = None,
    species: AtomSpecies | None = None,
    constants: PhysicalConstants | None = None,
) -> RfStreamReport:
    """Drive intensity |Omega(t)|^2 next to the stream density at ``x_d``."""
    constants = constants or PhysicalConstants()
    species = species or AtomSpecies.rb87(constants)
    trace = detector_trace(stream, x_d)
    rate = RateFunction(
        tuple(RateTerm(effective_coupling(f, species), f.omega_rf, f.coupling_phase, f.envelope) for f in fields),
        0.0,
        constants.hbar,
    )
    drive = drive_intensity(rate, trace.times)
    couplings = [effective_coupling(f, species) for f in fields]
    report = None
    if len({f.omega_rf for f in fields}) > 1:
        report = visibility(trace, window)
    return RfStreamReport(float(x_d), trace.times, drive, trace.density, drive_visibility(couplings), report)


# ---------------------------------------------------------------------------
# file output


def _format(value: float) -> str:
    return repr(float(value))


def profile_csv(profile: DensityProfile, header: str) -> str:
    lines = [f"# {header}", "x_m,density_per_m"]
    lines += [f"{_format(x)},{_format(d)}" for x, d in zip(profile.x, profile.density)]
    return "\n".join(lines) + "\n"


def trace_csv(times, dens, drive, header: str) -> str:
    lines = [f"# {header}", "t_s,density_per_m,drive_intensity"]
    lines += [f"{_format(t)},{_format(d)},{_format(q)}" for t, d, q in zip(times, dens, drive)]
    return "\n".join(lines) + "\n"


def spectrum_csv(energies, amplitudes, h: float, header: str) -> str:
    """Energies as E/h (Hz); amplitudes in Hz^-1/2, i.e. f(E) sqrt(h)."""
    lines = [f"# {header}", "E_over_h_Hz,re_amplitude,im_amplitude"]
    amps = np.asarray(amplitudes) * math.sqrt(h)
    lines += [f"{_format(e / h)},{_format(a.real)},{_format(a.imag)}" for e, a in zip(energies, amps)]
    return "\n".join(lines) + "\n"


def visibility_json(report: VisibilityReport) -> str:
    return json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n"
