import math
import warnings

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from atomlaser.airy import (
    AIRY_CROSSOVER,
    AIRY_MIN_ARGUMENT,
    ComplexField,
    EnergySpectrum,
    GeneralizedEigenstate,
    airy_ai,
    check_spectrum_truncation,
    default_energy_grid,
    eigenstate_eval,
    energy_grid,
    gaussian_field,
    inverse_transform,
    overlap_gaussian_approx,
    overlap_numeric,
    spectral_transform,
)
from atomlaser.errors import AiryRangeError, TruncatedSpectrumError, UnconvergedQuadratureError

mpmath.mp.dps = 30


def mp_ai(z):
    return float(mpmath.airyai(z))


def envelope(z):
    """Natural magnitude scale of Ai: 1 near 0, |z|^-1/4 on the oscillatory side."""
    z = np.asarray(z, dtype=float)
    return np.where(z < -1, np.maximum(np.abs(z), 1.0) ** -0.25 / math.sqrt(math.pi), 1.0)


def exact_gaussian_overlap(E, sigma, x0, units):
    """<psi_E|phi0> for a normalised Gaussian, closed form of the Gaussian-smoothed Airy function.

    int Ai(y) exp(-(y - a)^2 / 2 s^2) dy = sqrt(2 pi) s exp(a s^2/2 + s^6/12) Ai(a + s^4/4)
    """
    s = sigma / units.length_l
    a = -(x0 / units.length_l + E / units.energy_unit)
    value = (
        (math.pi * s**2) ** -0.25
        * math.sqrt(2 * math.pi)
        * s
        * mpmath.exp(a * s**2 / 2 + s**6 / 12)
        * mpmath.airyai(a + s**4 / 4)
    )
    return float(value) / math.sqrt(units.energy_unit)


class TestAiryValues:
    # frozen from a 30-digit mpmath evaluation
    @pytest.mark.parametrize(
        "z, expected",
        [
            (0.0, 0.3550280538878172),
            (1.0, 0.13529241631288141),
            (-5.0, 0.35076100902411433),
            (-2.338107410459767, 0.0),
            (5.0, 1.0834442813607441e-4),
        ],
    )
    def test_frozen(self, z, expected):
        assert airy_ai(z) == pytest.approx(expected, rel=1e-12, abs=1e-14)

    @pytest.mark.parametrize(
        "lo, hi, tol",
        [(-60.0, -10.0, 1e-11), (-10.0, 10.0, 1e-13), (10.0, 40.0, 1e-12), (-1000.0, -100.0, 1e-10)],
    )
    def test_against_mpmath(self, lo, hi, tol):
        z = np.linspace(lo, hi, 157)
        ref = np.array([mp_ai(v) for v in z])
        ours = airy_ai(z)
        if lo >= 10:
            np.testing.assert_allclose(ours, ref, rtol=tol)
        else:
            assert np.max(np.abs(ours - ref) / envelope(z)) < tol

    def test_scalar_and_array(self):
        assert isinstance(airy_ai(0.5), float)
        out = airy_ai([[0.0, 1.0], [2.0, 3.0]])
        assert out.shape == (2, 2)

    def test_large_positive_underflows(self):
        assert airy_ai(200.0) == pytest.approx(mp_ai(200.0), rel=1e-10)
        assert airy_ai(1e4) == 0.0

    @pytest.mark.parametrize("bad", [math.nan, math.inf, -math.inf, 2 * AIRY_MIN_ARGUMENT])
    def test_range_errors(self, bad):
        with pytest.raises(AiryRangeError):
            airy_ai(bad)

    def test_range_error_is_value_error(self):
        with pytest.raises(ValueError):
            airy_ai([0.0, math.nan])


class TestAiryProperties:
    def test_ode_residual(self):
        # Ai'' = z Ai via an 8th-order central difference
        h = 0.02
        c = np.array([-1 / 560, 8 / 315, -1 / 5, 8 / 5, -205 / 72, 8 / 5, -1 / 5, 8 / 315, -1 / 560])
        z = np.linspace(-30, 8, 1901)
        stencil = z[:, None] + h * np.arange(-4, 5)[None, :]
        second = airy_ai(stencil) @ c / h**2
        residual = np.abs(second - z * airy_ai(z)) / (envelope(z) * np.maximum(1.0, np.abs(z)))
        assert residual.max() < 1e-8

    @given(st.floats(min_value=-9.75, max_value=9.75).map(lambda v: round(v * 4) / 4))
    def test_continuous_across_taylor_anchors(self, anchor):
        eps = 1e-9
        left, right = airy_ai(anchor - eps), airy_ai(anchor + eps)
        assert abs(left - right) < 1e-8 * envelope(anchor) + 1e-15

    @pytest.mark.parametrize("z0", [-AIRY_CROSSOVER, AIRY_CROSSOVER])
    def test_continuous_at_crossover(self, z0):
        for z in (z0 - 1e-12, z0 + 1e-12):
            assert abs(airy_ai(z) - mp_ai(z)) < 1e-12 * envelope(z0) + 1e-16

    @given(st.floats(min_value=-50, max_value=15, allow_nan=False))
    def test_matches_mpmath_anywhere(self, z):
        assert abs(airy_ai(z) - mp_ai(z)) < 1e-10 * float(envelope(z))

    def test_integral_matches_antiderivative(self):
        z = np.linspace(-400, 12, 400001)
        val = np.trapezoid(airy_ai(z), z)
        exact = float(mpmath.airyai(12, derivative=-1) - mpmath.airyai(-400, derivative=-1))
        assert val == pytest.approx(exact, abs=1e-6)


class TestEigenstates:
    def test_normalisation_constant(self, units):
        s = GeneralizedEigenstate.at_energy(1e-30, units)
        assert s.normalization_N == pytest.approx(1 / (units.length_l * math.sqrt(units.slope_mg)))
        with pytest.raises(ValueError):
            GeneralizedEigenstate(0.0, 1.0, units.length_l, units.slope_mg)

    def test_turning_point_and_decay_direction(self, units):
        E = -3 * units.energy_unit
        s = GeneralizedEigenstate.at_energy(E, units)
        xt = s.turning_point()
        assert xt == pytest.approx(3 * units.length_l)
        # classically forbidden above (smaller x), oscillating below (larger x)
        assert abs(eigenstate_eval(s, xt - 10 * units.length_l)) < 1e-6 * abs(s.normalization_N)
        below = eigenstate_eval(s, xt + units.length_l * np.linspace(0, 10, 201))
        assert np.max(np.abs(below)) > 0.3 * s.normalization_N
        assert np.any(np.diff(np.sign(below)) != 0)

    def test_eval_is_scaled_airy(self, units):
        s = GeneralizedEigenstate.at_energy(2 * units.energy_unit, units)
        x = units.length_l * np.array([-5.0, 0.0, 7.0])
        np.testing.assert_allclose(eigenstate_eval(s, x), s.normalization_N * airy_ai(-(x / units.length_l + 2)))

    def test_energy_shift_is_translation(self, units):
        a = GeneralizedEigenstate.at_energy(0.0, units)
        b = GeneralizedEigenstate.at_energy(units.slope_mg * 1e-6, units)
        x = np.linspace(0, 5e-6, 11)
        np.testing.assert_allclose(eigenstate_eval(b, x), eigenstate_eval(a, x + 1e-6), rtol=1e-12, atol=1e-20)


@pytest.fixture(scope="module")
def source(setup):
    s, x0 = setup.sigma0, setup.sag
    return gaussian_field(x0, s, x0 - 12 * s, x0 + 12 * s, 2001)


class TestOverlap:
    @pytest.mark.parametrize("offset", [-4.0, -1.5, 0.0, 0.7, 2.0, 5.0])
    def test_numeric_matches_exact_oracle(self, setup, units, source, offset):
        mg = units.slope_mg
        E = -mg * setup.sag + offset * mg * setup.sigma0
        numeric = overlap_numeric(source, GeneralizedEigenstate.at_energy(E, units))
        exact = exact_gaussian_overlap(E, setup.sigma0, setup.sag, units)
        assert numeric.real == pytest.approx(exact, rel=1e-8)
        assert abs(numeric.imag) < 1e-12 * abs(exact)

    def test_peak_offset_from_classical_energy(self, setup, units):
        mg = units.slope_mg
        E = -mg * setup.sag + np.linspace(-1, 1, 2001) * mg * setup.sigma0
        vals = [exact_gaussian_overlap(e, setup.sigma0, setup.sag, units) for e in E]
        peak = E[int(np.argmax(vals))]
        # the peak sits about 82 Hz above -m g x0
        assert (peak + mg * setup.sag) / setup.constants.h == pytest.approx(82, abs=5)

    def _approx_error(self, setup, units, offset):
        mg = units.slope_mg
        E = -mg * setup.sag + offset * mg * setup.sigma0
        exact = exact_gaussian_overlap(E, setup.sigma0, setup.sag, units)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)  # sigma0 is only 2.8 l
            approx = float(overlap_gaussian_approx(setup.sigma0, setup.sag, E, setup.species, setup.constants))
        return approx / exact - 1

    def test_gaussian_approximation_at_peak(self, setup, units):
        assert abs(self._approx_error(setup, units, 0.0)) < 0.01

    @pytest.mark.parametrize("offset", np.linspace(-2, 2, 9))
    def test_gaussian_approximation_within_two_widths(self, setup, units, offset):
        assert abs(self._approx_error(setup, units, offset)) < 0.05

    @pytest.mark.xfail(
        strict=True,
        reason="the Gaussian form is 25-27% off the exact overlap at 3 widths (sigma/l = 2.8)",
    )
    @pytest.mark.parametrize("offset", [-3.0, 3.0])
    def test_gaussian_approximation_within_three_widths(self, setup, units, offset):
        assert abs(self._approx_error(setup, units, offset)) < 0.05

    def test_small_width_warns(self, setup, units):
        with pytest.warns(RuntimeWarning, match="sigma >> l"):
            overlap_gaussian_approx(units.length_l, 0.0, 0.0, setup.species, setup.constants)

    def test_undecayed_field_rejected(self, units):
        phi = gaussian_field(0.0, 1e-6, -1e-6, 1e-6, 201)
        with pytest.raises(UnconvergedQuadratureError, match="decay"):
            overlap_numeric(phi, GeneralizedEigenstate.at_energy(0.0, units))

    def test_unresolved_oscillation_rejected(self, setup, units):
        phi = gaussian_field(setup.sag, setup.sigma0, setup.sag - 12 * setup.sigma0, setup.sag + 12 * setup.sigma0, 2001)
        E = 5000 * units.energy_unit  # wavelength far below the grid spacing
        with pytest.raises(UnconvergedQuadratureError, match="samples per period"):
            overlap_numeric(phi, GeneralizedEigenstate.at_energy(E, units))


@pytest.fixture(scope="module")
def round_trip(setup, units, source):
    energies = default_energy_grid(setup.trap, setup.species, setup.constants)
    spectrum = spectral_transform(source, energies, units)
    back = inverse_transform(spectrum, source.x, units)
    return spectrum, back


class TestSpectralTransform:
    def test_round_trip(self, source, round_trip):
        _, back = round_trip
        err = np.linalg.norm(back.samples - source.samples) / np.linalg.norm(source.samples)
        assert err < 1e-6

    def test_parseval(self, source, round_trip):
        spectrum, _ = round_trip
        assert abs(spectrum.norm2() - source.norm2()) < 1e-6

    def test_gaussian_spectrum_is_real(self, round_trip):
        spectrum, _ = round_trip
        assert np.max(np.abs(spectrum.amplitudes.imag)) < 1e-12 * np.max(np.abs(spectrum.amplitudes))

    def test_truncation_detected(self, setup, units, source):
        narrow = energy_grid(-units.slope_mg * setup.sag, units.slope_mg * setup.sigma0, 256)
        with pytest.raises(TruncatedSpectrumError):
            spectral_transform(source, narrow, units)
        spectrum = spectral_transform(source, narrow, units, check_truncation=False)
        with pytest.raises(TruncatedSpectrumError):
            check_spectrum_truncation(spectrum)

    def test_linear(self, setup, units, source):
        energies = default_energy_grid(setup.trap, setup.species, setup.constants, n=512)
        a = spectral_transform(source, energies, units)
        shifted = source.with_samples((2 - 1j) * source.samples)
        b = spectral_transform(shifted, energies, units)
        np.testing.assert_allclose(b.amplitudes, (2 - 1j) * a.amplitudes, rtol=1e-12, atol=1e-30)


class TestDataTypes:
    def test_field_requires_samples(self):
        with pytest.raises(ValueError):
            ComplexField(0.0, 1.0, np.array([1.0]))
        with pytest.raises(ValueError):
            ComplexField(1.0, 0.0, np.ones(4))

    def test_field_norm(self):
        f = gaussian_field(0.0, 1e-6, -2e-5, 2e-5, 4001)
        assert f.norm2() == pytest.approx(1.0, rel=1e-10)

    @pytest.mark.parametrize(
        "energies",
        [np.array([0.0, 1.0, 3.0]), np.array([1.0, 0.0]), np.array([0.0])],
    )
    def test_spectrum_grid_validation(self, energies):
        with pytest.raises(ValueError):
            EnergySpectrum(energies, np.zeros(energies.size))

    @given(st.floats(min_value=1e-33, max_value=1e-29), st.integers(min_value=2, max_value=50))
    def test_spectrum_spacing(self, width, n):
        grid = energy_grid(0.0, width, n)
        spec = EnergySpectrum(grid, np.ones(n))
        assert spec.grid_spacing == pytest.approx(2 * width / (n - 1))
