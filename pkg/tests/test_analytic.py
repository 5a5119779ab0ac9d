import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from atomlaser.airy import EnergySpectrum, default_energy_grid, gaussian_field, spectral_transform
from atomlaser.analytic import (
    WEAK_COUPLING_LIMIT,
    FreeFallGaussian,
    RateFunction,
    RateTerm,
    StreamResult,
    analytic_point_stream,
    analytic_stream,
    check_weak_coupling,
    convolution_nodes,
    drive_intensity,
    free_fall_eval,
    implied_outcoupled_norm,
    outcoupled_at_points,
    outcoupled_convolution,
    outcoupled_spectral,
    rate_function_eval,
    relative_phase,
    resolution_scales,
    smoothing_time,
    spectral_coefficients,
    superpose_streams,
)
from atomlaser.errors import GridMismatchError, GridOverflowError, UnresolvedError
from atomlaser.gpe import Grid1D
from atomlaser.physconfig import BoxEnvelope, RfComponent, Sin2Envelope, reference_rf, reference_setup

TWO_PI = 2 * math.pi
T_PULSE = 1e-3
T_OBS = 2e-3


def rel_l2(a, b):
    return float(np.linalg.norm(a - b) / np.linalg.norm(a))


@pytest.fixture(scope="module")
def short():
    """1 ms pulse at 910 kHz observed at 2 ms: cheap but fully featured."""
    setup = reference_setup((910e3,), duration=T_PULSE)
    grid = Grid1D.for_fall(setup, T_OBS)
    return setup, grid.x


@pytest.fixture(scope="module")
def short_spectrum(short):
    setup, _ = short
    s, x0 = setup.sigma0, setup.sag
    phi = gaussian_field(x0, s, x0 - 12 * s, x0 + 12 * s, 2001)
    energies = default_energy_grid(setup.trap, setup.species, setup.constants, n=2048)
    return spectral_transform(phi, energies, setup.units)


class TestRateFunction:
    def test_single_tone_magnitude(self, setup):
        rate = RateFunction.from_setup(setup)
        t = np.array([-1e-3, 0.0, 2e-3, 4.999e-3, 5e-3])
        expected = (TWO_PI * 50 / math.sqrt(2)) ** 2 * np.array([0, 1, 1, 1, 0])
        np.testing.assert_allclose(drive_intensity(rate, t), expected, rtol=1e-12)

    def test_explicit_form(self, setup):
        rate = RateFunction.from_setup(setup)
        c = rate.components[0]
        t = 1.234e-3
        expected = -1j * c.effective_coupling * np.exp(-1j * ((setup.E0 / setup.constants.hbar - c.omega_rf) * t + c.theta))
        assert rate_function_eval(rate, t) == pytest.approx(expected, rel=1e-12)

    @pytest.mark.parametrize("dtheta", [0.0, math.pi / 2, math.pi])
    def test_two_tone_beat(self, dtheta):
        setup = reference_setup((910e3, 911e3), (0.0, dtheta))
        rate = RateFunction.from_setup(setup)
        t = np.linspace(1e-3, 3e-3, 501)
        w = TWO_PI * 50 / math.sqrt(2)
        expected = 2 * w**2 * (1 + np.cos(TWO_PI * 1e3 * t - dtheta))
        np.testing.assert_allclose(drive_intensity(rate, t), expected, rtol=1e-9, atol=1e-9 * w**2)

    def test_support_breakpoints_detunings(self):
        tones = (
            RfComponent(1.0, 10.0, envelope=BoxEnvelope(1.0, 2.0)),
            RfComponent(1.0, 20.0, envelope=Sin2Envelope(0.5, 1.0)),
        )
        rate = RateFunction(tuple(RateTerm(1.0, r.omega_rf, 0.0, r.envelope) for r in tones), 30.0, 1.0)
        assert rate.support() == (0.5, 3.0)
        assert rate.breakpoints() == [0.5, 1.0, 1.5, 3.0]
        np.testing.assert_allclose(rate.detunings(), [20.0, 10.0])
        assert rate.scaled(3.0).components[1].effective_coupling == 3.0

    def test_empty_rate(self):
        rate = RateFunction((), 0.0, 1.0)
        assert rate.support() == (0.0, 0.0)
        assert rate_function_eval(rate, 1.0) == 0


class TestRelativePhase:
    @pytest.mark.parametrize(
        "a, b, expected",
        [(0.0, math.pi, math.pi), (math.pi, 0.0, math.pi), (0.1, 0.3, -0.2), (3.0, -3.0, 6.0 - TWO_PI)],
    )
    def test_values(self, a, b, expected):
        assert relative_phase(reference_rf(910e3, a), reference_rf(911e3, b)) == pytest.approx(expected)

    @given(st.floats(-20, 20), st.floats(-20, 20))
    def test_range_and_equivalence(self, a, b):
        d = relative_phase(reference_rf(910e3, a), reference_rf(911e3, b))
        assert -math.pi < d <= math.pi
        assert math.cos(d) == pytest.approx(math.cos(a - b), abs=1e-9)
        assert math.sin(d) == pytest.approx(math.sin(a - b), abs=1e-9)


class TestFreeFall:
    def test_smoothing_time(self, setup):
        assert smoothing_time(setup.sigma0, setup.species, setup.constants) == pytest.approx(87.37e-6, rel=1e-3)
        with pytest.raises(ValueError):
            smoothing_time(0.0, setup.species, setup.constants)

    @pytest.mark.parametrize("t", [0.0, 1e-4, 1e-3, 4e-3, 8e-3])
    def test_moments(self, setup, t):
        wp = FreeFallGaussian.from_setup(setup)
        x = Grid1D.for_fall(setup, max(t, 1e-3)).x
        rho = np.abs(free_fall_eval(wp, x, t)) ** 2
        norm = np.trapezoid(rho, x)
        mean = np.trapezoid(x * rho, x) / norm
        var = np.trapezoid((x - mean) ** 2 * rho, x) / norm
        assert norm == pytest.approx(1.0, abs=1e-9)
        assert mean == pytest.approx(setup.sag + 0.5 * 9.81 * t**2, abs=1e-10)
        # density variance of exp(-x^2 / sigma^2) is sigma^2 / 2
        assert math.sqrt(2 * var) == pytest.approx(float(wp.width(t)), rel=1e-6)

    def test_width_law(self, setup):
        wp = FreeFallGaussian.from_setup(setup)
        t = 3e-3
        s0 = setup.sigma0
        hbar_over_m = setup.constants.hbar / setup.species.mass
        assert float(wp.width(t)) == pytest.approx(math.sqrt(s0**2 + (hbar_over_m * t / s0) ** 2))

    def test_initial_state_is_source(self, setup):
        wp = FreeFallGaussian.from_setup(setup)
        x = np.linspace(setup.sag - 5e-6, setup.sag + 5e-6, 101)
        ref = gaussian_field(setup.sag, setup.sigma0, x[0], x[-1], 101).samples
        np.testing.assert_allclose(free_fall_eval(wp, x, 0.0), ref, rtol=1e-12)

    def test_solves_schroedinger_equation(self, setup):
        # natural units: i d/dtau Phi = -Phi'' - xi Phi
        wp = FreeFallGaussian.from_setup(setup)
        u = wp.units
        xi0 = setup.sag / u.length_l
        xi = np.linspace(xi0 - 10, xi0 + 20, 301)
        tau, h, k = 2.0, 1e-3, 1e-4
        dt = (wp._natural(xi, tau + k) - wp._natural(xi, tau - k)) / (2 * k)
        d2 = (wp._natural(xi + h, tau) - 2 * wp._natural(xi, tau) + wp._natural(xi - h, tau)) / h**2
        residual = 1j * dt - (-d2 - xi * wp._natural(xi, tau))
        assert np.max(np.abs(residual)) < 1e-5 * np.max(np.abs(xi * wp._natural(xi, tau)))

    def test_before_release(self, setup):
        wp = FreeFallGaussian.from_setup(setup, t_offset=1e-3)
        with pytest.raises(ValueError):
            free_fall_eval(wp, [0.0, 1e-6], 0.5e-3)

    @given(st.floats(0.0, 8e-3))
    def test_norm_conserved(self, t):
        setup = reference_setup()
        wp = FreeFallGaussian.from_setup(setup)
        x = Grid1D.for_fall(setup, 8e-3).x
        assert np.trapezoid(np.abs(free_fall_eval(wp, x, t)) ** 2, x) == pytest.approx(1.0, abs=1e-9)


class TestQuadrature:
    def test_resolution_scales(self, setup):
        rate = RateFunction.from_setup(setup)
        scales = resolution_scales(rate, FreeFallGaussian.from_setup(setup))
        assert scales["smoothing"] == pytest.approx(87.37e-6, rel=1e-3)
        assert scales["carrier"] == pytest.approx(32e-6, rel=0.05)
        assert "beat" not in scales
        two = reference_setup((910e3, 913e3))
        scales2 = resolution_scales(RateFunction.from_setup(two), FreeFallGaussian.from_setup(two))
        assert scales2["beat"] == pytest.approx(1 / 3e3)

    def test_nodes_cover_active_window(self, setup):
        rate = RateFunction.from_setup(setup)
        wp = FreeFallGaussian.from_setup(setup)
        for t, length in ((2e-3, 2e-3), (8e-3, 5e-3)):
            nodes, weights = convolution_nodes(rate, wp, t)
            assert nodes.min() > 0 and nodes.max() < min(t, 5e-3)
            assert weights.sum() == pytest.approx(length, rel=1e-12)

    def test_exact_for_polynomials(self, setup):
        rate = RateFunction.from_setup(setup)
        nodes, weights = convolution_nodes(rate, FreeFallGaussian.from_setup(setup), 3e-3)
        assert np.sum(weights * nodes**7) == pytest.approx((3e-3) ** 8 / 8, rel=1e-10)

    def test_coarse_step_rejected(self, setup):
        rate = RateFunction.from_setup(setup)
        with pytest.raises(UnresolvedError):
            convolution_nodes(rate, FreeFallGaussian.from_setup(setup), 1e-3, step=5e-6)

    def test_no_field_before_pulse(self, setup):
        rate = RateFunction.from_setup(setup)
        f = outcoupled_convolution(rate, FreeFallGaussian.from_setup(setup), 0.0, np.linspace(0, 1e-4, 64))
        assert not np.any(f.samples)
        with pytest.raises(ValueError):
            outcoupled_convolution(rate, FreeFallGaussian.from_setup(setup), -1.0, np.linspace(0, 1e-4, 64))


class TestConvolutionRoute:
    def test_edge_overflow(self, short):
        setup, x = short
        rate = RateFunction.from_setup(setup)
        tight = np.linspace(setup.sag - 2e-6, setup.sag + 5e-6, 400)
        with pytest.raises(GridOverflowError):
            outcoupled_convolution(rate, FreeFallGaussian.from_setup(setup), T_OBS, tight)

    def test_linear_in_coupling(self, short):
        setup, x = short
        rate = RateFunction.from_setup(setup)
        wp = FreeFallGaussian.from_setup(setup)
        a = outcoupled_convolution(rate, wp, T_OBS, x).samples
        b = outcoupled_convolution(rate.scaled(2.5), wp, T_OBS, x).samples
        np.testing.assert_allclose(b, 2.5 * a, rtol=1e-12, atol=1e-12 * np.abs(a).max())

    def test_superposition_of_tones(self):
        both = reference_setup((910e3, 911e3), (0.0, math.pi), duration=T_PULSE)
        x = Grid1D.for_fall(both, T_OBS).x
        wp = FreeFallGaussian.from_setup(both)
        step = 1e-7
        f = outcoupled_convolution(RateFunction.from_setup(both), wp, T_OBS, x, step).samples
        parts = sum(
            outcoupled_convolution(RateFunction.from_setup(both.with_rf([rf])), wp, T_OBS, x, step).samples
            for rf in both.rf
        )
        assert rel_l2(f, parts) < 1e-12

    def test_point_evaluation_matches_grid(self, short):
        setup, x = short
        rate = RateFunction.from_setup(setup)
        wp = FreeFallGaussian.from_setup(setup)
        times = [0.5e-3, 1.5e-3, T_OBS]
        peak = int(np.argmax(np.abs(outcoupled_convolution(rate, wp, T_OBS, x).samples)))
        idx = [peak - 40, peak, peak + 25]
        pts = outcoupled_at_points(rate, wp, x[idx], times)
        for i, t in enumerate(times):
            full = outcoupled_convolution(rate, wp, t, x, check_edges=False).samples
            np.testing.assert_allclose(pts[i], full[idx], rtol=1e-10, atol=1e-10 * np.abs(full).max())

    def test_step_refinement_converges(self, short):
        setup, x = short
        rate = RateFunction.from_setup(setup)
        wp = FreeFallGaussian.from_setup(setup)
        default = outcoupled_convolution(rate, wp, T_OBS, x).samples
        fine = outcoupled_convolution(rate, wp, T_OBS, x, step=2e-7).samples
        assert rel_l2(fine, default) < 1e-9


class TestSpectralRoute:
    def test_routes_agree_box(self, short, short_spectrum):
        setup, x = short
        rate = RateFunction.from_setup(setup)
        conv = outcoupled_convolution(rate, FreeFallGaussian.from_setup(setup), T_OBS, x).samples
        spec = outcoupled_spectral(rate, short_spectrum, T_OBS, x, setup.units).samples
        assert rel_l2(conv, spec) < 1e-6

    def test_routes_agree_smooth_envelope(self, short, short_spectrum):
        setup, x = short
        rf = RfComponent(TWO_PI * 50, TWO_PI * 910e3, 0.0, 1 / math.sqrt(2), Sin2Envelope(0.0, T_PULSE))
        s2 = setup.with_rf([rf])
        rate = RateFunction.from_setup(s2)
        conv = outcoupled_convolution(rate, FreeFallGaussian.from_setup(s2), T_OBS, x).samples
        spec = outcoupled_spectral(rate, short_spectrum, T_OBS, x, s2.units).samples
        assert rel_l2(conv, spec) < 1e-6

    def test_implied_norm_matches_field_norm(self, short, short_spectrum):
        setup, x = short
        rate = RateFunction.from_setup(setup)
        field = outcoupled_convolution(rate, FreeFallGaussian.from_setup(setup), T_OBS, x)
        assert implied_outcoupled_norm(rate, short_spectrum, T_OBS) == pytest.approx(field.norm2(), rel=1e-6)

    def test_norm_quadratic_in_coupling(self, short, short_spectrum):
        setup, _ = short
        rate = RateFunction.from_setup(setup)
        n1 = implied_outcoupled_norm(rate, short_spectrum, T_OBS)
        n3 = implied_outcoupled_norm(rate.scaled(3.0), short_spectrum, T_OBS)
        assert n3 == pytest.approx(9 * n1, rel=1e-12)

    def test_unresolved_energy_grid(self, setup, short_spectrum):
        rate = RateFunction.from_setup(setup)  # 5 ms pulse needs dE < h / 50 ms
        coarse = EnergySpectrum(short_spectrum.energies[::16], short_spectrum.amplitudes[::16])
        assert coarse.grid_spacing > setup.constants.h / 50e-3
        with pytest.raises(UnresolvedError):
            spectral_coefficients(rate, coarse, 6e-3)

    def test_counter_rotating_is_negligible(self, short, short_spectrum):
        setup, _ = short
        rate = RateFunction.from_setup(setup)
        co = spectral_coefficients(rate, short_spectrum, T_OBS)
        full = spectral_coefficients(rate, short_spectrum, T_OBS, counter_rotating=True)
        diff = rel_l2(co, full)
        assert 0 < diff < 1e-3

    def test_weak_coupling_flag(self):
        assert check_weak_coupling(0.5 * WEAK_COUPLING_LIMIT)
        with pytest.warns(RuntimeWarning, match="undepleted"):
            assert not check_weak_coupling(2 * WEAK_COUPLING_LIMIT)


class TestStreams:
    def test_stream_validation(self, short):
        setup, x = short
        s = analytic_stream(setup, [1e-3, T_OBS], x)
        assert s.samples().shape == (2, x.size)
        assert s.at(1e-3).timestamp == 1e-3
        with pytest.raises(KeyError):
            s.at(1.5e-3)
        with pytest.raises(ValueError):
            StreamResult(np.array([2.0, 1.0]), s.fields)
        other = s.fields[0].with_samples(np.zeros(x.size))
        shifted = type(other)(other.x_min + 1e-9, other.x_max, other.samples)
        with pytest.raises(GridMismatchError):
            StreamResult(np.array([1.0, 2.0]), (s.fields[0], shifted))

    def test_superpose_matches_joint_drive(self):
        both = reference_setup((910e3, 911e3), (0.0, math.pi), duration=T_PULSE)
        x = Grid1D.for_fall(both, T_OBS).x
        times = [1.2e-3, T_OBS]
        joint = analytic_stream(both, times, x)
        parts = superpose_streams([analytic_stream(both.with_rf([rf]), times, x) for rf in both.rf])
        for a, b in zip(joint.fields, parts.fields):
            assert rel_l2(a.samples, b.samples) < 1e-10
        assert len(parts.metadata["rf"]) == 2

    def test_superpose_rejects_mismatch(self, short):
        setup, x = short
        a = analytic_stream(setup, [1e-3], x)
        b = analytic_stream(setup, [T_OBS], x)
        with pytest.raises(GridMismatchError):
            superpose_streams([a, b])
        with pytest.raises(ValueError):
            superpose_streams([])

    def test_point_stream_window(self, short):
        setup, _ = short
        x_d = setup.sag + 5e-6
        s = analytic_point_stream(setup, x_d, np.linspace(0.5e-3, T_OBS, 4))
        assert s.fields[0].n == 7
        assert s.x[3] == pytest.approx(x_d)
        assert s.metadata["engine"] == "analytic"
