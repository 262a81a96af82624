"""Fundamental solution of the 3D wave equation.

In physical space G(t, dx) is the uniform surface measure on the sphere of
radius t divided by 4 pi t, so its total mass is t. Its Fourier symbol is
sin(2 pi t |xi|) / (2 pi |xi|).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad

from .errors import ParameterError
from .noise import NoiseModel


def green_fourier(t, xi_abs):
    """Fourier symbol of G(t) at |xi| = xi_abs, equal to t at xi = 0."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ParameterError("time must be nonnegative")
    # t * sinc(2 t xi) = sin(2 pi t xi) / (2 pi xi) with the right limit at 0
    return t * np.sinc(2.0 * t * np.asarray(xi_abs, dtype=float))


@dataclass(frozen=True)
class SphereQuadrature:
    """Gauss-Legendre in cos(polar angle) times a uniform azimuthal rule."""

    directions: np.ndarray
    weights: np.ndarray
    degree: int

    @property
    def size(self) -> int:
        return len(self.weights)


def sphere_quadrature(n_polar=16, n_azimuth=32) -> SphereQuadrature:
    """Product rule with positive weights summing to 4 pi.

    It integrates spherical polynomials exactly up to degree
    min(2 n_polar - 1, n_azimuth - 1).
    """
    if n_polar < 1 or n_azimuth < 1:
        raise ParameterError("quadrature sizes must be positive")
    z, wz = np.polynomial.legendre.leggauss(n_polar)
    phi = 2.0 * np.pi * (np.arange(n_azimuth) + 0.5) / n_azimuth
    Z, P = np.meshgrid(z, phi, indexing="ij")
    s = np.sqrt(1.0 - Z**2)
    dirs = np.stack([s * np.cos(P), s * np.sin(P), Z], axis=-1).reshape(-1, 3)
    w = np.repeat(wz, n_azimuth) * (2.0 * np.pi / n_azimuth)
    return SphereQuadrature(dirs, w, min(2 * n_polar - 1, n_azimuth - 1))


def sphere_convolve(t, x, psi, quad_rule: SphereQuadrature):
    """Approximate (G(t) * psi)(x) = t / (4 pi) * mean of psi on the sphere.

    ``psi`` maps an (M, 3) array of points to M values.
    """
    if not t > 0:
        raise ParameterError("sphere convolution needs t > 0")
    pts = np.asarray(x, dtype=float) + t * quad_rule.directions
    vals = np.asarray(psi(pts), dtype=float)
    return float(t * t * np.dot(quad_rule.weights, vals) / (4.0 * math.pi * t))


def _shells(model: NoiseModel):
    """Distinct nonzero |xi| on the grid with the summed weights mu of each shell."""
    g = model.grid
    xi = g.xi_abs.ravel()
    mu = model.mu.ravel()
    nz = mu > 0
    k2 = np.rint((xi[nz] * g.L) ** 2).astype(np.int64)
    keys, inv = np.unique(k2, return_inverse=True)
    return np.sqrt(keys) / g.L, np.bincount(inv, weights=mu[nz])


def green_hnorm_sq(t, model: NoiseModel):
    """sum_k mu_k FG(t)(xi_k)^2, vectorised over ``t``."""
    t = np.asarray(t, dtype=float)
    xi, mu = _shells(model)
    g = green_fourier(t[..., None], xi)
    return np.sum(g**2 * mu, axis=-1)


def green_hnorm_sq_integral(t, model: NoiseModel):
    """Closed form of int_0^t green_hnorm_sq(s) ds."""
    t = np.asarray(t, dtype=float)
    xi = model.grid.xi_abs.ravel()
    mu = model.mu.ravel()
    nz = mu > 0
    w = 2.0 * np.pi * xi[nz]
    tt = t[..., None]
    per_mode = (tt / 2.0 - np.sin(2.0 * w * tt) / (4.0 * w)) / w**2
    return np.sum(per_mode * mu[nz], axis=-1)


def radial_green_hnorm_sq(t, beta, xi_min, xi_max):
    """Continuum version of green_hnorm_sq over the band [xi_min, xi_max].

    Evaluates int sin^2(2 pi t r) / (2 pi r)^2 r^(beta-3) 4 pi r^2 dr.
    """
    def f(r):
        return (math.sin(2 * math.pi * t * r) / (2 * math.pi * r)) ** 2 * r ** (beta - 1) * 4 * math.pi

    # split at the half periods of sin^2 so each piece is smooth and short
    period = 1.0 / (2.0 * t) if t > 0 else xi_max - xi_min
    edges = np.append(np.arange(xi_min, xi_max, period), xi_max)
    return float(sum(quad(f, a, b, limit=200, epsabs=0, epsrel=1e-12)[0] for a, b in zip(edges, edges[1:])))


def fit_power_law(t, values):
    """Least-squares slope and intercept of log(values) against log(t)."""
    slope, icpt = np.polyfit(np.log(t), np.log(values), 1)
    return float(slope), float(icpt)


def power_law_window(model: NoiseModel, decades=1.0, points=16, scan=200):
    """Pick the one-decade window where log green_hnorm_sq is closest to linear.

    The scan runs over [h/4, L]. The window is chosen by minimum residual of
    a straight-line fit and does not use beta.
    """
    g = model.grid
    ts = np.geomspace(g.h / 4.0, g.L, scan)
    lt = np.log(ts)
    ly = np.log(green_hnorm_sq(ts, model))
    width = int(round(decades * math.log(10.0) / (lt[1] - lt[0])))
    best = None
    for i in range(len(ts) - width):
        sl = slice(i, i + width + 1)
        coef = np.polyfit(lt[sl], ly[sl], 1)
        res = float(np.sqrt(np.mean((np.polyval(coef, lt[sl]) - ly[sl]) ** 2)))
        if best is None or res < best[0]:
            best = (res, ts[i])
    lo = best[1]
    return np.geomspace(lo, lo * 10.0**decades, points)
