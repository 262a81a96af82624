import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad
from scipy.special import gamma

from oracles import sinc_taylor, sphere_mean_fine
from wave3d.errors import ParameterError
from wave3d.green import (
    fit_power_law,
    green_fourier,
    green_hnorm_sq,
    green_hnorm_sq_integral,
    power_law_window,
    radial_green_hnorm_sq,
    sphere_convolve,
    sphere_quadrature,
)
from wave3d.noise import NoiseModel, TorusGrid


@pytest.fixture(scope="module")
def rule():
    return sphere_quadrature(16, 32)


# Fourier symbol ------------------------------------------------------------------------


@pytest.mark.parametrize("t, xi, expected", [(1.0, 0.5, 0.0), (0.7, 0.0, 0.7)])
def test_green_fourier_examples(t, xi, expected):
    assert green_fourier(t, xi) == pytest.approx(expected, abs=1e-16)


def test_green_fourier_matches_taylor_series():
    value = float(green_fourier(0.3, 1.2))
    assert value == pytest.approx(math.sin(0.72 * math.pi) / (2.4 * math.pi), rel=1e-14)
    assert abs(value - sinc_taylor(0.3, 1.2)) < 1e-12


def test_green_fourier_rejects_negative_time():
    with pytest.raises(ParameterError):
        green_fourier(-0.1, 1.0)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 5), st.floats(0, 100))
def test_multiplier_bound(t, xi):
    assert abs(float(green_fourier(t, xi))) <= t * (1 + 1e-14)


def test_multiplier_bound_on_grid_modes():
    g = TorusGrid(3.0, 16, 1.0, 1 / 64)
    vals = green_fourier(g.times()[:, None], g.xi_abs.ravel())
    assert np.all(np.abs(vals) <= g.times()[:, None] + 1e-15)


# sphere quadrature -----------------------------------------------------------------------


def test_quadrature_weights(rule):
    assert np.all(rule.weights > 0)
    assert abs(rule.weights.sum() - 4 * math.pi) < 1e-12
    assert np.allclose(np.linalg.norm(rule.directions, axis=1), 1.0)
    assert rule.size == 16 * 32 and rule.degree == 31


def _monomial_integral(a, b, c):
    if a % 2 or b % 2 or c % 2:
        return 0.0
    return 2 * gamma((a + 1) / 2) * gamma((b + 1) / 2) * gamma((c + 1) / 2) / gamma((a + b + c + 3) / 2)


@pytest.mark.parametrize("n_polar, n_azimuth", [(4, 8), (6, 12), (16, 32)])
def test_quadrature_exact_up_to_degree(n_polar, n_azimuth):
    q = sphere_quadrature(n_polar, n_azimuth)
    x, y, z = q.directions.T
    for deg in range(q.degree + 1):
        for a in range(deg + 1):
            for b in range(deg + 1 - a):
                c = deg - a - b
                got = float(np.dot(q.weights, x**a * y**b * z**c))
                assert got == pytest.approx(_monomial_integral(a, b, c), abs=1e-12)


def test_quadrature_sizes_validated():
    with pytest.raises(ParameterError):
        sphere_quadrature(0, 4)


# sphere convolution --------------------------------------------------------------------


@pytest.mark.parametrize("t", [0.01, 0.25, 0.5, 1.0, 3.0])
def test_mass_identity(rule, t):
    assert abs(sphere_convolve(t, [0.3, -1.0, 2.0], lambda p: np.ones(len(p)), rule) - t) < 1e-10


def test_odd_integrand_vanishes(rule):
    x = np.array([0.2, 0.5, -0.4])
    assert abs(sphere_convolve(0.8, x, lambda p: p[:, 0] - x[0], rule)) < 1e-14


def test_gaussian_matches_refined_rule(rule):
    gauss = lambda p: np.exp(-np.sum(p**2, axis=-1))
    x = np.array([0.1, -0.2, 0.3])
    got = sphere_convolve(0.5, x, gauss, rule)
    assert got == pytest.approx(sphere_mean_fine(0.5, x, gauss), rel=1e-8)


@settings(max_examples=30, deadline=None)
@given(
    st.floats(0.05, 2.0),
    st.lists(st.floats(-2, 2), min_size=3, max_size=3),
    st.lists(st.floats(-2, 2), min_size=3, max_size=3),
)
def test_translation_equivariance(t, x, z):
    rule = sphere_quadrature(16, 32)
    x, z = np.array(x), np.array(z)
    psi = lambda p: np.cos(p[:, 0]) * np.exp(-0.3 * np.sum(p**2, axis=-1)) + p[:, 1]
    shifted = lambda p: psi(p - z)
    assert abs(sphere_convolve(t, x + z, shifted, rule) - sphere_convolve(t, x, psi, rule)) <= 1e-12


@pytest.mark.parametrize("t", [0.0, -1.0])
def test_sphere_convolve_needs_positive_time(rule, t):
    with pytest.raises(ParameterError):
        sphere_convolve(t, [0, 0, 0], lambda p: np.ones(len(p)), rule)


# H norm of the kernel ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def fine_model():
    return NoiseModel(1.0, TorusGrid(4.0, 64, 1.0, 1.0))


def test_green_hnorm_zero_at_zero(fine_model):
    assert green_hnorm_sq(0.0, fine_model) == 0.0


def test_green_hnorm_matches_radial_quadrature(fine_model):
    # continuum band with the same volume as the lattice cells it replaces
    c = (3 / (4 * math.pi)) ** (1 / 3)
    L, N = 4.0, 64
    radial = radial_green_hnorm_sq(0.2, 1.0, c / L, c * N / L)
    assert float(green_hnorm_sq(0.2, fine_model)) == pytest.approx(radial, rel=0.05)


def test_radial_integral_against_scipy_reference():
    f = lambda r: math.sin(2 * math.pi * 0.2 * r) ** 2 / (4 * math.pi**2 * r**2) * r**-2 * 4 * math.pi * r**2
    ref, _ = quad(f, 0.1, 10.0, limit=500)
    assert radial_green_hnorm_sq(0.2, 1.0, 0.1, 10.0) == pytest.approx(ref, rel=1e-9)


@pytest.mark.parametrize("beta", [0.5, 1.0, 1.5])
def test_integral_closed_form_matches_quadrature(beta):
    model = NoiseModel(beta, TorusGrid(3.0, 16, 1.0, 1 / 64))
    for t in (0.25, 0.5, 1.0):
        ref, _ = quad(lambda s: float(green_hnorm_sq(s, model)), 0, t, limit=400)
        assert float(green_hnorm_sq_integral(t, model)) == pytest.approx(ref, rel=1e-8)


def test_green_hnorm_vectorised(fine_model):
    ts = np.array([0.1, 0.2, 0.3])
    assert np.allclose(green_hnorm_sq(ts, fine_model), [float(green_hnorm_sq(t, fine_model)) for t in ts])


def test_power_law_continuum_oracle():
    # deep inside a wide band the continuum integral follows t^(2 - beta) closely
    for beta in (0.5, 1.0, 1.5):
        ts = np.geomspace(0.05, 0.5, 8)
        vals = [radial_green_hnorm_sq(t, beta, 1e-3, 2e3) for t in ts]
        slope, _ = fit_power_law(ts, vals)
        assert slope == pytest.approx(2 - beta, abs=0.02)


def test_power_law_window_is_one_decade(fine_model):
    ts = power_law_window(fine_model)
    assert ts[-1] / ts[0] == pytest.approx(10.0)
    assert ts[0] >= fine_model.grid.h / 4 - 1e-12


def test_power_law_at_beta_one(fine_model):
    ts = power_law_window(fine_model)
    slope, _ = fit_power_law(ts, green_hnorm_sq(ts, fine_model))
    assert slope == pytest.approx(1.0, abs=0.05)


@pytest.mark.xfail(
    strict=True,
    reason="on the N=64, L=4 lattice the doubling ratio drops from 0.95 to 0.65 of 2^(2-beta) "
    "across t in [0.1, 0.4]; the band edge at 1/L cuts the power law",
)
def test_doubling_ratio_across_quoted_range(fine_model):
    for t in (0.1, 0.2, 0.3, 0.4):
        ratio = green_hnorm_sq(2 * t, fine_model) / green_hnorm_sq(t, fine_model)
        assert ratio == pytest.approx(2.0, rel=0.05)


def test_doubling_ratio_inside_band(fine_model):
    for t in (0.04, 0.05, 0.08):
        ratio = green_hnorm_sq(2 * t, fine_model) / green_hnorm_sq(t, fine_model)
        assert ratio == pytest.approx(2.0, rel=0.05)
