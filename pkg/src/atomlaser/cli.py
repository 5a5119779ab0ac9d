"""Command-line front end: configured runs, sweeps and cross-engine comparisons.

A run is described by an INI file.  The physical sections (``[constants]``,
``[species]``, ``[trap]``, ``[rf.N]``) follow :func:`atomlaser.physconfig.parse_setup`;
the orchestration sections are::

    [run]         engine = analytic | numeric | both, interactions = no,
                  transverse_axes = y, z, n_atoms = 1e5
    [grid]        x_min, x_max, n_points       (all three, or none -> automatic)
    [evolution]   dt, t_final, rotating_frame_omega[_over_2pi],
                  absorber_width, absorber_strength, absorber_edges,
                  couple_antitrapped, checkpoint
    [compare]     tolerance = 0.05, rescale = no
    [sweep]       axis = rf.1.omega_rf_over_2pi, values = 907e3, 907.5e3
    [output.N]    kind = profile | trace | visibility | spectrum |
                         overlap-sweep | freefall   (+ kind-specific keys)

Every run directory receives its data files plus ``manifest.json``, which
embeds the complete configuration text so the run can be repeated with
``atomlaser run --config manifest.json``.

Exit status: 0 success, 2 invalid configuration, 3 numerical failure,
4 comparison outside tolerance.
"""
from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import math
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from types import MappingProxyType
from typing import Sequence

import numpy as np

from . import __version__
from .airy import (
    ComplexField,
    GeneralizedEigenstate,
    default_energy_grid,
    gaussian_field,
    overlap_gaussian_approx,
    overlap_numeric,
    spectral_transform,
)
from .analysis import (
    DensityProfile,
    compare_profiles,
    density,
    detector_trace,
    drive_visibility,
    profile_csv,
    spectrum_csv,
    trace_csv,
    visibility,
    visibility_json,
)
from .analytic import (
    FreeFallGaussian,
    RateFunction,
    StreamResult,
    analytic_point_stream,
    analytic_stream,
    drive_intensity,
    free_fall_eval,
    smoothing_time,
    spectral_coefficients,
)
from .errors import AtomLaserError, ConfigError, NumericalError, ToleranceError
from .gpe import (
    Absorber,
    EvolutionParams,
    Grid1D,
    SplitStepSolver,
    ground_state_imaginary_time,
    initial_spinor,
    save_checkpoint,
    setup_g1d,
)
from .physconfig import (
    LINEAR_POLARIZATION,
    Setup,
    _get_float,
    _reject_unknown,
    derive_natural_units,
    effective_coupling,
    make_parser,
    parse_setup,
    predict_resonance,
    thomas_fermi_chemical_potential,
    thomas_fermi_radius,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_TOLERANCE = 4

ENGINES = ("analytic", "numeric", "both")
OUTPUT_KINDS = ("profile", "trace", "visibility", "spectrum", "overlap-sweep", "freefall")
ENGINE_OUTPUTS = ("profile", "trace", "visibility")
MANIFEST_NAME = "manifest.json"

_OUTPUT_KEYS = {
    "profile": {"times"},
    "trace": {"x", "x_offset", "t_start", "t_end", "cadence"},
    "visibility": {"x", "x_offset", "t_start", "t_end", "cadence", "window_start", "window_end"},
    "spectrum": {"time", "n", "span"},
    "overlap-sweep": {"f_min_hz", "f_max_hz", "n"},
    "freefall": {"times"},
}


# ---------------------------------------------------------------------------
# run specification


@dataclass(frozen=True)
class OutputSpec:
    """One requested data product; unused fields stay ``None``."""

    name: str
    kind: str
    times: tuple[float, ...] = ()
    detector_x: float | None = None
    t_start: float | None = None
    t_end: float | None = None
    cadence: float | None = None
    window: tuple[float, float] | None = None
    f_min: float | None = None
    f_max: float | None = None
    n: int | None = None
    span: float | None = None
    time: float | None = None

    @property
    def trace_times(self) -> np.ndarray:
        n = int(round((self.t_end - self.t_start) / self.cadence))
        return self.t_start + self.cadence * np.arange(n + 1)

    def latest_time(self) -> float:
        if self.times:
            return max(self.times)
        if self.t_end is not None:
            return self.t_end
        return self.time or 0.0


@dataclass(frozen=True)
class SweepSpec:
    axis: str
    values: tuple[float, ...]


@dataclass(frozen=True)
class RunSpec:
    """A validated configuration: physics, engines, grids and outputs."""

    setup: Setup
    engine: str
    interactions: bool
    transverse_axes: tuple[str, str]
    grid: Grid1D
    evolution: EvolutionParams
    checkpoint: bool
    outputs: tuple[OutputSpec, ...]
    compare_tolerance: float
    compare_rescale: bool
    sweep: SweepSpec | None
    config_text: str

    def __post_init__(self):
        if not self.outputs:
            raise ConfigError("no [output.N] sections: at least one output is required")
        if self.engine not in ENGINES:
            raise ConfigError(f"[run] engine: must be one of {', '.join(ENGINES)}")

    @property
    def engines(self) -> tuple[str, ...]:
        return ("analytic", "numeric") if self.engine == "both" else (self.engine,)

    @property
    def g1d(self) -> float:
        return setup_g1d(self.setup, self.transverse_axes) if self.interactions else 0.0

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.config_text.encode()).hexdigest()


def _get_bool(section, key: str, default: bool) -> bool:
    try:
        return section.getboolean(key, fallback=default)
    except ValueError:
        raise ConfigError(f"[{section.name}] {key}: not a boolean") from None


def _get_floats(section, key: str) -> tuple[float, ...]:
    raw = section.get(key, "")
    try:
        values = tuple(float(v) for v in raw.replace(";", ",").split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"[{section.name}] {key}: expected a comma-separated list of numbers") from None
    if not values:
        raise ConfigError(f"[{section.name}] {key}: missing required key")
    if not all(math.isfinite(v) for v in values):
        raise ConfigError(f"[{section.name}] {key}: values must be finite")
    return values


def _get_int(section, key: str, default: int | None = None) -> int:
    value = _get_float(section, key, None if default is None else float(default))
    if value != int(value):
        raise ConfigError(f"[{section.name}] {key}: must be an integer")
    return int(value)


def _parse_output(sec, setup: Setup) -> OutputSpec:
    name = sec.name.split(".", 1)[1]
    if not name or any(c in name for c in "/\\ "):
        raise ConfigError(f"[{sec.name}] output names may not contain spaces or slashes")
    kind = sec.get("kind", "").strip()
    if kind not in OUTPUT_KINDS:
        raise ConfigError(f"[{sec.name}] kind: must be one of {', '.join(OUTPUT_KINDS)}")
    _reject_unknown(sec, _OUTPUT_KEYS[kind] | {"kind"})
    spec = {"name": name, "kind": kind}
    if kind in ("profile", "freefall"):
        times = _get_floats(sec, "times")
        if any(t < 0 for t in times):
            raise ConfigError(f"[{sec.name}] times: must be >= 0")
        spec["times"] = tuple(sorted(set(times)))
    elif kind in ("trace", "visibility"):
        if ("x" in sec) == ("x_offset" in sec):
            raise ConfigError(f"[{sec.name}] give exactly one of x or x_offset")
        spec["detector_x"] = _get_float(sec, "x") if "x" in sec else setup.sag + _get_float(sec, "x_offset")
        spec["t_start"] = _get_float(sec, "t_start", 0.0)
        spec["t_end"] = _get_float(sec, "t_end")
        spec["cadence"] = _get_float(sec, "cadence", 1e-5)
        if not (spec["t_start"] >= 0 and spec["t_end"] > spec["t_start"] and spec["cadence"] > 0):
            raise ConfigError(f"[{sec.name}] need 0 <= t_start < t_end and cadence > 0")
        if kind == "visibility":
            spec["window"] = (
                _get_float(sec, "window_start", spec["t_start"]),
                _get_float(sec, "window_end", spec["t_end"]),
            )
            if not spec["t_start"] <= spec["window"][0] < spec["window"][1] <= spec["t_end"]:
                raise ConfigError(f"[{sec.name}] window must lie inside [t_start, t_end]")
    elif kind == "spectrum":
        spec["n"] = _get_int(sec, "n", 4096)
        spec["span"] = _get_float(sec, "span", 8.0)
        if "time" in sec:
            spec["time"] = _get_float(sec, "time")
            if spec["time"] < 0:
                raise ConfigError(f"[{sec.name}] time: must be >= 0")
        if spec["n"] < 16 or not spec["span"] > 0:
            raise ConfigError(f"[{sec.name}] need n >= 16 and span > 0")
    elif kind == "overlap-sweep":
        spec["f_min"] = _get_float(sec, "f_min_hz")
        spec["f_max"] = _get_float(sec, "f_max_hz")
        spec["n"] = _get_int(sec, "n", 401)
        if not (spec["f_max"] > spec["f_min"] and spec["n"] >= 2):
            raise ConfigError(f"[{sec.name}] need f_max_hz > f_min_hz and n >= 2")
    return OutputSpec(**spec)


def _output_sort_key(name: str):
    tail = name.split(".", 1)[1]
    return (0, int(tail), "") if tail.isdigit() else (1, 0, tail)


def parse_run_spec(parser: configparser.ConfigParser) -> RunSpec:
    """Validate a parsed configuration into a :class:`RunSpec`."""
    setup = parse_setup(parser)
    run = parser["run"] if parser.has_section("run") else None
    engine, interactions, axes = "analytic", False, ("y", "z")
    if run is not None:
        _reject_unknown(run, {"engine", "interactions", "transverse_axes", "n_atoms"})
        engine = run.get("engine", engine).strip()
        interactions = _get_bool(run, "interactions", False)
        if "transverse_axes" in run:
            axes = tuple(a.strip() for a in run["transverse_axes"].split(","))
            if len(axes) != 2 or not set(axes) <= {"x", "y", "z"} or axes[0] == axes[1]:
                raise ConfigError("[run] transverse_axes: two distinct axes out of x, y, z")
    if engine not in ENGINES:
        raise ConfigError(f"[run] engine: must be one of {', '.join(ENGINES)}")
    if interactions and engine != "numeric":
        raise ConfigError("[run] interactions: the analytic engine is non-interacting; use engine = numeric")

    outputs = tuple(
        _parse_output(parser[s], setup)
        for s in sorted((s for s in parser.sections() if s.startswith("output.")), key=_output_sort_key)
    )
    if not outputs:
        raise ConfigError("no [output.N] sections: at least one output is required")
    engines = ("analytic", "numeric") if engine == "both" else (engine,)
    t_needed = max([o.latest_time() for o in outputs if o.kind in ENGINE_OUTPUTS] + [0.0])

    ev = parser["evolution"] if parser.has_section("evolution") else None
    ev_keys = {
        "dt", "t_final", "rotating_frame_omega", "rotating_frame_omega_over_2pi", "absorber_width",
        "absorber_strength", "absorber_edges", "couple_antitrapped", "checkpoint",
    }
    kwargs = {}
    checkpoint = False
    if ev is not None:
        _reject_unknown(ev, ev_keys)
        kwargs["dt"] = _get_float(ev, "dt", 1e-7)
        kwargs["t_final"] = _get_float(ev, "t_final", t_needed)
        if "rotating_frame_omega" in ev or "rotating_frame_omega_over_2pi" in ev:
            kwargs["rotating_frame_omega"] = _get_float(ev, "rotating_frame_omega")
        if "absorber_width" in ev or "absorber_strength" in ev:
            try:
                kwargs["absorber"] = Absorber(
                    _get_float(ev, "absorber_width"),
                    _get_float(ev, "absorber_strength"),
                    ev.get("absorber_edges", "lower").strip(),
                )
            except ValueError as exc:
                if isinstance(exc, ConfigError):
                    raise
                raise ConfigError(f"[evolution] {exc}") from None
        kwargs["couple_antitrapped"] = _get_bool(ev, "couple_antitrapped", True)
        checkpoint = _get_bool(ev, "checkpoint", False)
    else:
        kwargs["t_final"] = t_needed
    if "numeric" in engines and kwargs["t_final"] < t_needed:
        raise ConfigError(f"[evolution] t_final: must cover the latest requested output time {t_needed!r}")
    if interactions:
        kwargs["interaction_g1d"] = setup_g1d(setup, axes)
    try:
        evolution = EvolutionParams(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"[evolution] {exc}") from None
    if "numeric" in engines:
        for o in outputs:
            if o.kind in ("trace", "visibility"):
                ratio = o.cadence / evolution.dt
                if abs(ratio - round(ratio)) > 1e-6 * ratio or round(ratio) < 1:
                    raise ConfigError(f"[output.{o.name}] cadence: must be a whole multiple of [evolution] dt")

    t_grid = max([o.latest_time() for o in outputs] + [evolution.t_final if "numeric" in engines else 0.0])
    if parser.has_section("grid"):
        g = parser["grid"]
        _reject_unknown(g, {"x_min", "x_max", "n_points"})
        if set(g) != {"x_min", "x_max", "n_points"}:
            raise ConfigError("[grid] give all of x_min, x_max and n_points, or omit the section")
        try:
            grid = Grid1D(_get_float(g, "x_min"), _get_float(g, "x_max"), _get_int(g, "n_points"))
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"[grid] {exc}") from None
    else:
        grid = Grid1D.for_fall(setup, t_grid)
    for o in outputs:
        if o.detector_x is not None and not grid.x_min < o.detector_x < grid.x_max:
            raise ConfigError(f"[output.{o.name}] detector position lies outside the grid")

    compare_tol, compare_rescale = 0.05, False
    if parser.has_section("compare"):
        c = parser["compare"]
        _reject_unknown(c, {"tolerance", "rescale"})
        compare_tol = _get_float(c, "tolerance", 0.05)
        compare_rescale = _get_bool(c, "rescale", False)
        if not compare_tol > 0:
            raise ConfigError("[compare] tolerance: must be > 0")

    sweep = None
    if parser.has_section("sweep"):
        s = parser["sweep"]
        _reject_unknown(s, {"axis", "values"})
        if "axis" not in s:
            raise ConfigError("[sweep] axis: missing required key")
        sweep = SweepSpec(s["axis"].strip(), _get_floats(s, "values"))

    return RunSpec(
        setup=setup,
        engine=engine,
        interactions=interactions,
        transverse_axes=axes,
        grid=grid,
        evolution=evolution,
        checkpoint=checkpoint,
        outputs=outputs,
        compare_tolerance=compare_tol,
        compare_rescale=compare_rescale,
        sweep=sweep,
        config_text=config_to_text(parser),
    )


# ---------------------------------------------------------------------------
# configuration text


def config_to_text(parser: configparser.ConfigParser) -> str:
    """Canonical INI text of ``parser`` (section and key order preserved)."""
    lines = []
    for name in parser.sections():
        lines.append(f"[{name}]")
        lines += [f"{k} = {v}" for k, v in parser[name].items()]
        lines.append("")
    return "\n".join(lines)


def parse_text(text: str) -> configparser.ConfigParser:
    parser = make_parser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed configuration: {exc}") from None
    return parser


def read_config_text(path) -> str:
    """Config text from an INI file or from a run manifest."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read configuration {path}: {exc.strerror}") from None
    if text.lstrip().startswith("{"):
        try:
            manifest = json.loads(text)
            return manifest["config"]
        except (ValueError, KeyError, TypeError):
            raise ConfigError(f"{path}: not a run manifest (expected a 'config' entry)") from None
    return text


def set_parameter(parser: configparser.ConfigParser, path: str, value: float) -> None:
    """Set ``section.key`` (e.g. ``rf.2.omega_rf_over_2pi``) to ``value``."""
    if "." not in path:
        raise ConfigError(f"sweep axis {path!r}: expected section.key")
    section, key = path.rsplit(".", 1)
    if not parser.has_section(section):
        raise ConfigError(f"sweep axis {path!r}: no section [{section}]")
    if not math.isfinite(value):
        raise ConfigError(f"sweep axis {path!r}: values must be finite")
    parser[section][key] = repr(float(value))


# ---------------------------------------------------------------------------
# engines


@dataclass(frozen=True)
class RunOutcome:
    """Data files (name -> text or bytes) plus bookkeeping for the manifest."""

    files: dict
    summary: dict
    derived: dict
    comparison: dict | None = None


def derived_quantities(spec: RunSpec) -> dict:
    setup = spec.setup
    units = derive_natural_units(setup.species, setup.constants)
    g1d = setup_g1d(setup, spec.transverse_axes)
    out = {
        "sigma0_m": setup.sigma0,
        "sag_x0_m": setup.sag,
        "length_unit_l_m": units.length_l,
        "smoothing_time_s": smoothing_time(setup.sigma0, setup.species, setup.constants),
        "g1d_J_m": g1d,
        "predicted_resonance_hz": predict_resonance(setup.trap, setup.species, setup.constants) / (2 * math.pi),
        "interactions": spec.interactions,
        "grid": {"x_min": spec.grid.x_min, "x_max": spec.grid.x_max, "n_points": spec.grid.n_points},
    }
    if spec.interactions:
        out["thomas_fermi_mu_hz"] = thomas_fermi_chemical_potential(setup.trap, setup.species, g1d) / setup.constants.h
        out["thomas_fermi_radius_m"] = thomas_fermi_radius(setup.trap, setup.species, g1d)
    return out


def _drives(setup: Setup) -> bool:
    return any(effective_coupling(rf, setup.species) != 0 for rf in setup.rf)


def _analytic_streams(spec: RunSpec) -> dict:
    setup = spec.setup
    streams = {}
    for o in spec.outputs:
        if o.kind == "profile":
            x = spec.grid.x
            if _drives(setup):
                streams[o.name] = analytic_stream(setup, o.times, x)
            else:
                zero = np.zeros(x.size, dtype=complex)
                fields = tuple(_field(x, zero, t) for t in o.times)
                streams[o.name] = StreamResult(np.array(o.times), fields, {"rf": setup.rf, "engine": "analytic"})
        elif o.kind in ("trace", "visibility"):
            times = o.trace_times
            if _drives(setup):
                streams[o.name] = analytic_point_stream(setup, o.detector_x, times)
            else:
                xs = np.linspace(o.detector_x - 0.15e-6, o.detector_x + 0.15e-6, 7)
                fields = tuple(_field(xs, np.zeros(7, dtype=complex), t) for t in times)
                streams[o.name] = StreamResult(times, fields, {"rf": setup.rf, "engine": "analytic"})
    return streams


def _field(x, samples, t):
    return ComplexField(float(x[0]), float(x[-1]), samples, float(t))


def _numeric_streams(spec: RunSpec, initial=None) -> tuple[dict, dict]:
    setup = spec.setup
    if initial is None:
        initial = initial_spinor(setup, spec.grid, spec.g1d)
    solver = SplitStepSolver(setup, spec.evolution, initial)
    handles = {}
    dx = spec.grid.dx
    for o in spec.outputs:
        if o.kind == "profile":
            handles[o.name] = solver.record(o.times)
        elif o.kind in ("trace", "visibility"):
            window = (o.detector_x - 4 * dx, o.detector_x + 4 * dx)
            handles[o.name] = solver.record(o.trace_times, window)
    solver.run()
    streams = {name: solver.stream(h) for name, h in handles.items()}
    final = solver.spinor()
    diagnostics = {
        "populations": [float(p) for p in final.populations()],
        "norm_final": float(final.norm2()),
        "steps": int(spec.evolution.n_steps),
        "final_spinor": final,
    }
    return streams, diagnostics


def _profile_summary(profile: DensityProfile) -> dict:
    return {"peak_density_per_m": profile.peak(), "outcoupled_norm": profile.integral()}


def execute(spec: RunSpec) -> RunOutcome:
    """Run every requested engine and render all outputs to text."""
    setup = spec.setup
    header = f"atomlaser {__version__} config-sha256 {spec.config_hash}"
    files: dict[str, str | bytes] = {}
    summary: dict = {"drive_visibility": drive_visibility([effective_coupling(rf, setup.species) for rf in setup.rf])}
    rate = RateFunction.from_setup(setup)
    profiles: dict[str, dict[str, list[DensityProfile]]] = {}

    for engine in spec.engines:
        if engine == "analytic":
            streams = _analytic_streams(spec)
        else:
            streams, diag = _numeric_streams(spec)
            summary["numeric_populations"] = diag["populations"]
            if spec.checkpoint:
                files["final_state.npz"] = diag["final_spinor"]
        tag = f"_{engine}" if spec.engine == "both" else ""
        for o in spec.outputs:
            if o.kind == "profile":
                stream = streams[o.name]
                profs = [density(f) for f in stream.fields]
                profiles.setdefault(o.name, {})[engine] = profs
                for p in profs:
                    files[f"{o.name}{tag}_t{_ms(p.time)}ms.csv"] = profile_csv(p, header)
            elif o.kind in ("trace", "visibility"):
                trace = detector_trace(streams[o.name], o.detector_x)
                drive = drive_intensity(rate, trace.times)
                if o.kind == "trace":
                    files[f"{o.name}{tag}.csv"] = trace_csv(trace.times, trace.density, drive, header)
                    summary.setdefault(f"mean_detector_density_{engine}", float(np.mean(trace.density)))
                else:
                    report = visibility(trace, o.window)
                    files[f"{o.name}{tag}.json"] = visibility_json(report)
                    summary.setdefault(f"visibility_{engine}", report.V)
                    sel = (trace.times >= o.window[0]) & (trace.times <= o.window[1])
                    summary.setdefault(f"mean_detector_density_{engine}", float(np.mean(trace.density[sel])))

    for o in spec.outputs:
        if o.kind == "spectrum":
            files[f"{o.name}.csv"] = _spectrum_output(spec, o, rate, header)
        elif o.kind == "overlap-sweep":
            files[f"{o.name}.csv"] = _overlap_output(spec, o, header)
        elif o.kind == "freefall":
            wp = FreeFallGaussian.from_setup(setup)
            x = spec.grid.x
            for t in o.times:
                p = DensityProfile(x, np.abs(free_fall_eval(wp, x, t)) ** 2, t)
                files[f"{o.name}_t{_ms(t)}ms.csv"] = profile_csv(p, header)

    primary = spec.engines[0]
    if profiles:
        first = next(iter(profiles.values()))[primary]
        summary.update(_profile_summary(first[-1]))
    summary["visibility"] = summary.get(f"visibility_{primary}")

    comparison = None
    if spec.engine == "both" and profiles:
        errors = {}
        for name, by_engine in profiles.items():
            for pa, pn in zip(by_engine["analytic"], by_engine["numeric"]):
                errors[f"{name}@{_ms(pa.time)}ms"] = compare_profiles(pa, pn, spec.compare_rescale)
        worst = max(errors.values())
        comparison = {
            "relative_l2_error": errors,
            "max_error": worst,
            "tolerance": spec.compare_tolerance,
            "rescale": spec.compare_rescale,
            "within_tolerance": bool(worst <= spec.compare_tolerance),
        }
        files["comparison.json"] = json.dumps(comparison, indent=2, sort_keys=True) + "\n"
    return RunOutcome(files, summary, derived_quantities(spec), comparison)


def _ms(t: float) -> str:
    return f"{t * 1e3:g}"


def _source_field(spec: RunSpec):
    setup = spec.setup
    if spec.interactions:
        return ground_state_imaginary_time(setup.trap, setup.species, spec.g1d, spec.grid, setup.constants)
    s = setup.sigma0
    return gaussian_field(setup.sag, s, setup.sag - 12 * s, setup.sag + 12 * s, 4001)


def _spectrum_output(spec: RunSpec, o: OutputSpec, rate: RateFunction, header: str) -> str:
    setup = spec.setup
    units = derive_natural_units(setup.species, setup.constants)
    energies = default_energy_grid(setup.trap, setup.species, setup.constants, o.n, o.span)
    if spec.interactions:
        # widen by the Thomas-Fermi diameter; the sharp edge leaves an algebraic tail
        mg = setup.species.mass * setup.constants.g_earth
        R = thomas_fermi_radius(setup.trap, setup.species, spec.g1d)
        center = 0.5 * (energies[0] + energies[-1])
        half = mg * (2 * R + o.span * setup.sigma0)
        energies = np.linspace(center - half, center + half, o.n)
        spectrum = spectral_transform(_source_field(spec), energies, units, check_truncation=False)
    else:
        spectrum = spectral_transform(_source_field(spec), energies, units)
    amplitudes = spectrum.amplitudes
    if o.time is not None:
        amplitudes = spectral_coefficients(rate, spectrum, o.time)
    return spectrum_csv(spectrum.energies, amplitudes, setup.constants.h, header)


def _overlap_output(spec: RunSpec, o: OutputSpec, header: str) -> str:
    setup = spec.setup
    units = derive_natural_units(setup.species, setup.constants)
    h = setup.constants.h
    phi = _source_field(spec)
    freqs = np.linspace(o.f_min, o.f_max, o.n)
    energies = setup.E0 - h * freqs
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # approximation column is advisory
        approx = overlap_gaussian_approx(setup.sigma0, setup.sag, energies, setup.species, setup.constants)
    lines = [f"# {header}", "rf_frequency_Hz,overlap_re,overlap_im,overlap_abs,gaussian_approx"]
    scale = math.sqrt(h)
    for f, E, a in zip(freqs, energies, approx):
        value = overlap_numeric(phi, GeneralizedEigenstate.at_energy(float(E), units)) * scale
        cells = (f, value.real, value.imag, abs(value), a * scale)
        lines.append(",".join(repr(float(c)) for c in cells))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# file output


def _atomic_write(path: Path, data) -> bytes:
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        payload = data.encode()
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(payload)
        os.replace(tmp, path)
        return payload
    save_checkpoint(path, data)  # a SpinorField: written atomically by the checkpoint writer
    return path.read_bytes()


def write_outcome(out_dir, spec: RunSpec, outcome: RunOutcome) -> Path:
    """Write all data files, then the manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    checksums = {}
    for name in sorted(outcome.files):
        payload = _atomic_write(out_dir / name, outcome.files[name])
        checksums[name] = hashlib.sha256(payload).hexdigest()
    manifest = {
        "tool": "atomlaser",
        "version": __version__,
        "config_sha256": spec.config_hash,
        "config": spec.config_text,
        "engine": spec.engine,
        "derived": outcome.derived,
        "summary": outcome.summary,
        "comparison": outcome.comparison,
        "outputs": checksums,
    }
    path = out_dir / MANIFEST_NAME
    _atomic_write(path, json.dumps(manifest, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return path


def _jsonable(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"cannot serialise {type(value).__name__}")


def run_config_text(text: str, out_dir, strict: bool = False) -> dict:
    """Parse, execute and write one run; returns its summary."""
    with warnings.catch_warnings():
        if strict:
            warnings.simplefilter("error")
        spec = parse_run_spec(parse_text(text))
        if spec.sweep is not None:
            raise ConfigError("[sweep] present: use the sweep entry point")
        outcome = execute(spec)
    write_outcome(out_dir, spec, outcome)
    return {**outcome.summary, "comparison": outcome.comparison}


def _run_job(args) -> dict:
    text, out_dir, strict = args
    return run_config_text(text, out_dir, strict)


def _map_jobs(jobs: int, work: list) -> list:
    if jobs <= 1 or len(work) <= 1:
        return [_run_job(w) for w in work]
    with ProcessPoolExecutor(max_workers=min(jobs, len(work))) as pool:
        return list(pool.map(_run_job, work))


SUMMARY_COLUMNS = ("value", "peak_density_per_m", "outcoupled_norm", "visibility")


def sweep_texts(text: str, axis: str | None = None, values: Sequence[float] | None = None) -> list[tuple[float, str]]:
    """Per-value configuration texts of a sweep (without the [sweep] section)."""
    parser = parse_text(text)
    if axis is None or values is None:
        if not parser.has_section("sweep"):
            raise ConfigError("no sweep axis: give [sweep] axis/values or --axis/--values")
        sec = parser["sweep"]
        axis = axis or sec.get("axis", "").strip()
        values = values if values is not None else _get_floats(sec, "values")
    if not values:
        raise ConfigError("sweep needs at least one value")
    parser.remove_section("sweep")
    out = []
    for v in values:
        p = parse_text(config_to_text(parser))
        set_parameter(p, axis, v)
        out.append((float(v), config_to_text(p)))
    parse_run_spec(parse_text(out[0][1]))  # validate before launching anything
    return out


def run_sweep(text: str, out_dir, axis=None, values=None, jobs: int = 1, strict: bool = False) -> list[dict]:
    """One run per value in ``out_dir/value_NNN`` plus ``summary.csv``."""
    out_dir = Path(out_dir)
    items = sweep_texts(text, axis, values)
    work = [(t, out_dir / f"value_{i:03d}", strict) for i, (_, t) in enumerate(items)]
    results = _map_jobs(jobs, work)
    lines = [",".join(SUMMARY_COLUMNS)]
    for (v, _), r in zip(items, results):
        cells = [v] + [r.get(c) for c in SUMMARY_COLUMNS[1:]]
        lines.append(",".join("" if c is None else repr(float(c)) for c in cells))
    _atomic_write(out_dir / "summary.csv", "\n".join(lines) + "\n")
    for (v, _), r in zip(items, results):
        r["value"] = v
    return results


# ---------------------------------------------------------------------------
# figure presets


def _rf_section(index: int, frequency_hz: float, theta: float = 0.0) -> str:
    return (
        f"[rf.{index}]\n"
        "peak_rabi_over_2pi = 50.0\n"
        f"omega_rf_over_2pi = {frequency_hz!r}\n"
        f"theta = {theta!r}\n"
        f"polarization_factor = {LINEAR_POLARIZATION!r}\n"
        "envelope = box\n"
        "envelope_start = 0.0\n"
        "envelope_duration = 0.005\n"
    )


_TRAP = (
    "[trap]\n"
    "omega_x_over_2pi = 160.0\n"
    "omega_y_over_2pi = 6.7\n"
    "omega_z_over_2pi = 160.0\n"
    "omega_bias_over_2pi = 900000.0\n"
)

_DETECTOR = "x_offset = 2e-05\nt_start = 0.0\nt_end = 0.008\ncadence = 1e-05\n"
_NUMERIC = "[evolution]\ndt = 5e-07\nt_final = 0.008\n"


def _preset(run: str, rf: Sequence[tuple[float, float]], *extra: str) -> str:
    parts = [f"[run]\nn_atoms = 100000.0\n{run}", _TRAP]
    parts += [_rf_section(i, f, th) for i, (f, th) in enumerate(rf, start=1)]
    parts += list(extra)
    return "\n".join(parts)


@dataclass(frozen=True)
class FigurePreset:
    """Read-only bundle of labelled run configurations reproducing one figure."""

    name: str
    description: str
    runs: tuple[tuple[str, str], ...]


_PI = math.pi
_PROFILE_8MS = "[output.profile]\nkind = profile\ntimes = 0.008\n"
_VIS = "[output.visibility]\nkind = visibility\n" + _DETECTOR + "window_start = 0.0028\nwindow_end = 0.0066\n"

PRESETS = MappingProxyType(
    {
        "fig2": FigurePreset(
            "fig2",
            "overlap amplitude of the trapped state with continuum states, 900-920 kHz",
            (("", _preset(
                "engine = analytic\n", (),
                "[output.overlap]\nkind = overlap-sweep\nf_min_hz = 900000.0\nf_max_hz = 920000.0\nn = 401\n",
                "[output.spectrum]\nkind = spectrum\n",
            )),),
        ),
        "fig3": FigurePreset(
            "fig3",
            "free fall of the instantaneous outcoupled wave packet",
            (("", _preset(
                "engine = analytic\n", (),
                "[output.freefall]\nkind = freefall\ntimes = 0.0, 0.002, 0.004, 0.006, 0.008\n",
            )),),
        ),
        "fig4": FigurePreset(
            "fig4",
            "stream from a 5 ms box pulse at 910 kHz, profiles every millisecond",
            (("", _preset(
                "engine = analytic\n", ((910e3, 0.0),),
                "[output.profile]\nkind = profile\ntimes = 0.001, 0.002, 0.003, 0.004, 0.005, 0.006, 0.007, 0.008\n",
            )),),
        ),
        "fig5": FigurePreset(
            "fig5",
            "profiles at 8 ms for 907, 907.5, ..., 910.5 kHz",
            (("", _preset(
                "engine = analytic\n", ((910e3, 0.0),),
                _PROFILE_8MS,
                "[sweep]\naxis = rf.1.omega_rf_over_2pi\n"
                "values = 907000.0, 907500.0, 908000.0, 908500.0, 909000.0, 909500.0, 910000.0, 910500.0\n",
            )),),
        ),
        "fig6": FigurePreset(
            "fig6",
            "pulsed stream from 910 and 911 kHz tones with a relative phase of pi",
            (("", _preset(
                "engine = analytic\n", ((910e3, 0.0), (911e3, _PI)),
                _PROFILE_8MS,
                "[output.trace]\nkind = trace\n" + _DETECTOR,
                _VIS,
            )),),
        ),
        "fig7": FigurePreset(
            "fig7",
            "analytic and numeric profiles at 8 ms for 909 and 908 kHz tones (relative phase pi)",
            (("", _preset(
                "engine = both\n", ((909e3, 0.0), (908e3, _PI)),
                _NUMERIC,
                _PROFILE_8MS,
                "[compare]\ntolerance = 0.05\n",
            )),),
        ),
        "fig8": FigurePreset(
            "fig8",
            "interacting condensate: 903 kHz, 901 kHz, their mean and both tones together",
            tuple(
                (label, _preset(
                    "engine = numeric\ninteractions = yes\ntransverse_axes = y, z\n", rf,
                    _NUMERIC + "absorber_width = 8e-06\nabsorber_strength = 20000.0\nabsorber_edges = both\n",
                    _PROFILE_8MS,
                    "[output.trace]\nkind = trace\n" + _DETECTOR,
                    *((_VIS,) if len(rf) > 1 else ()),
                ))
                for label, rf in (
                    ("903kHz", ((903e3, 0.0),)),
                    ("901kHz", ((901e3, 0.0),)),
                    ("902kHz", ((902e3, 0.0),)),
                    ("903+901kHz", ((903e3, 0.0), (901e3, _PI))),
                )
            ),
        ),
        "fig9": FigurePreset(
            "fig9",
            "drive and stream at the detector for 911 kHz with 906, 908 and 910 kHz",
            (("", _preset(
                "engine = analytic\n", ((911e3, 0.0), (910e3, _PI)),
                _PROFILE_8MS,
                "[output.trace]\nkind = trace\n" + _DETECTOR,
                _VIS,
                "[sweep]\naxis = rf.2.omega_rf_over_2pi\nvalues = 906000.0, 908000.0, 910000.0\n",
            )),),
        ),
    }
)


def _with_engine(text: str, engine: str) -> str:
    parser = parse_text(text)
    if not parser.has_section("run"):
        parser.add_section("run")
    parser["run"]["engine"] = engine
    return config_to_text(parser)


def _is_interacting(text: str) -> bool:
    parser = parse_text(text)
    return parser.has_section("run") and _get_bool(parser["run"], "interactions", False)


def execute_texts(
    runs: Sequence[tuple[str, str]],
    out_dir,
    jobs: int = 1,
    strict: bool = False,
    axis=None,
    values=None,
) -> dict:
    """Run labelled configs (each possibly a sweep); returns label -> summary."""
    out_dir = Path(out_dir)
    results = {}
    plain = []
    for label, text in runs:
        target = out_dir / label if label else out_dir
        if axis is not None or parse_text(text).has_section("sweep"):
            results[label] = run_sweep(text, target, axis, values, jobs, strict)
        else:
            parse_run_spec(parse_text(text))  # validate all runs before starting any
            plain.append((label, (text, target, strict)))
    for (label, _), summary in zip(plain, _map_jobs(jobs, [w for _, w in plain])):
        results[label] = summary
    if len(runs) > 1:
        _write_joint_report(out_dir, runs, results)
    return results


def _write_joint_report(out_dir: Path, runs, results: dict) -> None:
    """Side-by-side traces and summaries of a multi-run preset."""
    report = {label: results[label] for label, _ in runs}
    _atomic_write(out_dir / "report.json", json.dumps(report, indent=2, sort_keys=True, default=_jsonable) + "\n")
    columns = []
    for label, _ in runs:
        path = out_dir / label / "trace.csv"
        if path.exists():
            data = np.loadtxt(path, delimiter=",", comments="#", skiprows=2)
            columns.append((label, data[:, 0], data[:, 1]))
    if len(columns) == len(runs) and all(np.array_equal(c[1], columns[0][1]) for c in columns):
        lines = ["t_s," + ",".join(f"density_per_m[{c[0]}]" for c in columns)]
        for i, t in enumerate(columns[0][1]):
            lines.append(",".join([repr(float(t))] + [repr(float(c[2][i])) for c in columns]))
        _atomic_write(out_dir / "report_traces.csv", "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="atomlaser", description=__doc__.split("\n", 1)[0])
    parser.add_argument("--version", action="version", version=f"atomlaser {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("run", "execute a configuration or figure preset"),
        ("sweep", "run one configuration per value of a parameter"),
        ("compare", "run both engines and check their agreement"),
    ):
        p = sub.add_parser(name, help=help_)
        src = p.add_mutually_exclusive_group(required=True)
        src.add_argument("--config", metavar="PATH", help="INI configuration or a run manifest")
        src.add_argument("--preset", metavar="NAME", choices=sorted(PRESETS), help="figure preset")
        p.add_argument("--out", metavar="DIR", required=True, help="output directory")
        p.add_argument("--engine", choices=ENGINES, help="override [run] engine")
        p.add_argument("--jobs", type=int, default=1, metavar="N", help="concurrent runs (sweeps, presets)")
        p.add_argument("--strict", action="store_true", help="treat warnings as errors")
        if name == "sweep":
            p.add_argument("--axis", metavar="SECTION.KEY", help="parameter path, e.g. rf.1.omega_rf_over_2pi")
            p.add_argument("--values", metavar="V1,V2,...", help="comma-separated values")
    return parser


def _resolve_runs(args) -> list[tuple[str, str]]:
    if args.preset:
        runs = list(PRESETS[args.preset].runs)
    else:
        runs = [("", read_config_text(args.config))]
    if args.command == "compare":
        # interacting runs have no analytic counterpart: numeric only, reported side by side
        runs = [(label, _with_engine(t, "numeric" if _is_interacting(t) else "both")) for label, t in runs]
    elif args.engine:
        runs = [(label, _with_engine(t, args.engine)) for label, t in runs]
    return runs


def _main(args) -> int:
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    runs = _resolve_runs(args)
    axis = values = None
    if args.command == "sweep":
        axis = args.axis
        if args.values is not None:
            try:
                values = [float(v) for v in args.values.split(",") if v.strip()]
            except ValueError:
                raise ConfigError("--values: expected a comma-separated list of numbers") from None
        if (axis is None) != (values is None):
            raise ConfigError("--axis and --values go together")
        if axis is None and not all(parse_text(t).has_section("sweep") for _, t in runs):
            raise ConfigError("sweep needs --axis/--values or a [sweep] section")
    with warnings.catch_warnings():
        if args.strict:
            warnings.simplefilter("error")
        results = execute_texts(runs, args.out, args.jobs, args.strict, axis, values)

    if args.command == "compare":
        summaries = [s for r in results.values() for s in (r if isinstance(r, list) else [r])]
        checks = [s["comparison"] for s in summaries if s.get("comparison")]
        for c in checks:
            print(f"max relative L2 error {c['max_error']:.4g} (tolerance {c['tolerance']:g})")
        failed = [c for c in checks if not c["within_tolerance"]]
        if failed:
            raise ToleranceError(
                f"{len(failed)} comparison(s) exceed tolerance: max error {max(c['max_error'] for c in failed):.4g}"
            )
    print(f"wrote {args.out}")
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _main(args)
    except ConfigError as exc:
        code, kind, message = EXIT_CONFIG, "invalid configuration", str(exc)
    except ToleranceError as exc:
        code, kind, message = EXIT_TOLERANCE, "tolerance failure", str(exc)
    except (NumericalError, AtomLaserError, ArithmeticError, Warning) as exc:
        code, kind, message = EXIT_NUMERICAL, "numerical failure", str(exc)
    except ValueError as exc:
        code, kind, message = EXIT_CONFIG, "invalid configuration", str(exc)
    print(f"atomlaser: {kind}: {message}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
