"""Riesz-correlated Gaussian noise on a periodic cube.

The noise is white in time and has spatial covariance |x|^-beta. On the
torus of side L it is represented through Fourier modes xi_k = k / L with
per-mode spectral mass mu_k = |xi_k|^(beta-3) / L^3 and mu_0 = 0.

Conventions used throughout the package:

* Spectral coefficients of a field phi are samples of its continuous Fourier
  transform, ``dV * fftn(phi)``, so that ``sum_k mu_k |phi_k|^2`` is a Riemann
  sum for the weighted integral defining the H norm.
* Noise and control fields are synthesised in Fourier-series form: a field
  is ``sum_k c_k exp(2 pi i xi_k . x)`` and ``irfftn(c, norm="forward")``
  evaluates it on the grid.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.special import gamma

from .errors import DomainError, ParameterError, ValidationError

ALPHA_MIN = math.sqrt(2.0 * math.log(2.0))
TABLEAU_MAGIC = b"W3DTAB01"


@dataclass(frozen=True)
class TorusGrid:
    """Periodic cube [0, L)^3 with N points per axis and a uniform time grid."""

    L: float
    N: int
    T: float = 1.0
    dt: float = 1.0 / 128

    def __post_init__(self):
        if not (self.L > 0 and math.isfinite(self.L)):
            raise ParameterError(f"side length must be positive, got {self.L}")
        if int(self.N) != self.N or self.N < 4 or self.N % 2:
            raise ParameterError(f"N must be an even integer >= 4, got {self.N}")
        if self.N & (self.N - 1):
            raise ParameterError(f"N must be a power of two, got {self.N}")
        if not (self.T > 0 and self.dt > 0):
            raise ParameterError("T and dt must be positive")
        steps = self.T / self.dt
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise ParameterError(f"T/dt = {steps} is not an integer")
        object.__setattr__(self, "N", int(self.N))

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    @property
    def h(self) -> float:
        return self.L / self.N

    @property
    def cell_volume(self) -> float:
        return self.h**3

    @property
    def rshape(self):
        return (self.N, self.N, self.N // 2 + 1)

    @property
    def shape(self):
        return (self.N, self.N, self.N)

    @cached_property
    def k1d(self) -> np.ndarray:
        """Integer wavenumbers in FFT order, covering -N/2 .. N/2-1."""
        return np.fft.fftfreq(self.N, 1.0 / self.N).astype(np.int64)

    @cached_property
    def kvec(self) -> np.ndarray:
        """Integer mode vectors on the full grid, shape (N, N, N, 3)."""
        k = self.k1d
        return np.stack(np.meshgrid(k, k, k, indexing="ij"), axis=-1)

    @cached_property
    def xi_abs(self) -> np.ndarray:
        """|xi_k| on the full grid."""
        return np.sqrt(np.sum(self.kvec.astype(float) ** 2, axis=-1)) / self.L

    @cached_property
    def xi_abs_r(self) -> np.ndarray:
        """|xi_k| on the half-spectrum layout used by rfftn."""
        return self.xi_abs[:, :, : self.N // 2 + 1]

    def coordinates(self) -> np.ndarray:
        """Grid coordinates along one axis."""
        return np.arange(self.N) * self.h

    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt


def _check_beta(beta):
    if not (0.0 < beta < 2.0):
        raise ParameterError(f"beta must lie in (0, 2), got {beta}")


def riesz_covariance(x, beta):
    """Riesz kernel |x|^-beta for a single 3-vector ``x``."""
    _check_beta(beta)
    r = float(np.linalg.norm(np.asarray(x, dtype=float)))
    if r == 0.0:
        raise DomainError("the Riesz kernel is singular at the origin")
    return r ** (-beta)


def riesz_constant(beta):
    """Constant gamma with F[|x|^-beta](xi) = gamma |xi|^(beta-3)."""
    _check_beta(beta)
    return math.pi ** (beta - 1.5) * gamma((3.0 - beta) / 2.0) / gamma(beta / 2.0)


def _weights(xi_abs, beta, L):
    mu = np.zeros_like(xi_abs, dtype=float)
    nz = xi_abs > 0
    mu[nz] = xi_abs[nz] ** (beta - 3.0) / L**3
    return mu


def spectral_weight(k, grid: TorusGrid, beta):
    """Spectral mass mu_k of the integer mode ``k``; zero for k = 0."""
    _check_beta(beta)
    k = np.asarray(k, dtype=np.int64)
    lo, hi = -grid.N // 2, grid.N // 2 - 1
    if k.shape != (3,) or np.any(k < lo) or np.any(k > hi):
        raise ParameterError(f"mode {k.tolist()} outside range [{lo}, {hi}]^3")
    xi = math.sqrt(float(np.sum(k**2))) / grid.L
    return float(_weights(np.array(xi), beta, grid.L))


@dataclass(frozen=True)
class NoiseModel:
    """Riesz noise of exponent ``beta`` discretised on ``grid``."""

    beta: float
    grid: TorusGrid
    zero_mode_weight: float = field(default=0.0, init=False)

    def __post_init__(self):
        _check_beta(self.beta)

    @cached_property
    def mu(self) -> np.ndarray:
        """Mode weights on the full grid."""
        return _weights(self.grid.xi_abs, self.beta, self.grid.L)

    @cached_property
    def mu_r(self) -> np.ndarray:
        return self.mu[:, :, : self.grid.N // 2 + 1]

    def kernel(self, lags) -> np.ndarray:
        """Discretised covariance sum_k mu_k cos(2 pi xi_k . r) at integer lags."""
        lags = np.atleast_2d(np.asarray(lags, dtype=float))
        phase = 2.0 * np.pi * np.tensordot(lags, self.grid.kvec, axes=([1], [3])) / self.grid.N
        return np.sum(self.mu * np.cos(phase), axis=(1, 2, 3))


def field_coefficients(phi, grid: TorusGrid) -> np.ndarray:
    """Continuous Fourier transform samples of a real grid field."""
    return grid.cell_volume * np.fft.fftn(np.asarray(phi, dtype=float), axes=(-3, -2, -1))


def _mirror(coeffs):
    """Array whose entry at k holds the entry of ``coeffs`` at -k."""
    out = np.flip(coeffs, axis=(-3, -2, -1))
    return np.roll(out, 1, axis=(-3, -2, -1))


def hnorm_sq(spectral_coeffs, model: NoiseModel, rtol=1e-8):
    """Squared H norm sum_k mu_k |phi_k|^2 of Hermitian spectral data."""
    c = np.asarray(spectral_coeffs)
    if c.shape[-3:] != model.grid.shape:
        raise ValidationError(f"expected trailing shape {model.grid.shape}, got {c.shape}")
    scale = float(np.max(np.abs(c))) if c.size else 0.0
    if scale > 0 and np.max(np.abs(_mirror(c) - np.conj(c))) > rtol * scale:
        raise ValidationError("coefficients are not Hermitian symmetric")
    return np.sum(model.mu * np.abs(c) ** 2, axis=(-3, -2, -1))


def hinner(phi_coeffs, psi_coeffs, model: NoiseModel):
    """H inner product of two real fields given by their spectral coefficients."""
    return np.real(np.sum(model.mu * phi_coeffs * np.conj(psi_coeffs), axis=(-3, -2, -1)))


@dataclass(frozen=True)
class BasisIndex:
    """Ordered H-orthonormal basis built from Fourier cos/sin pairs.

    Direction j (0-based in arrays, 1-based in the public accessors) is the
    cosine or sine of a representative mode k. A mode and its negative share
    one pair; modes equal to their own negative on the grid carry a cosine
    direction only. The zero mode is excluded.
    """

    model: NoiseModel
    modes: np.ndarray      # (J, 3) integer representative modes
    parts: np.ndarray      # (J,) 0 for cosine, 1 for sine
    selfconj: np.ndarray   # (J,) True for self-conjugate modes
    mu: np.ndarray         # (J,) spectral weight of each direction

    @property
    def size(self) -> int:
        return len(self.parts)

    @property
    def normalization(self) -> np.ndarray:
        """mu_k^-1/2 factors of each direction."""
        return 1.0 / np.sqrt(self.mu)

    def label(self, j):
        """(mode, 're' or 'im') of the 1-based direction j."""
        self._check(j)
        return tuple(int(v) for v in self.modes[j - 1]), ("re", "im")[self.parts[j - 1]]

    def _check(self, j):
        if not (1 <= j <= self.size):
            raise IndexError(f"basis index {j} outside 1..{self.size}")

    def _phase(self, j):
        g = self.model.grid
        x = g.coordinates()
        X = np.stack(np.meshgrid(x, x, x, indexing="ij"), axis=-1)
        return 2.0 * np.pi * (X @ self.modes[j - 1].astype(float)) / g.L

    def element(self, j) -> np.ndarray:
        """Grid values of the basis element e_j."""
        self._check(j)
        ph = self._phase(j)
        trig = np.cos(ph) if self.parts[j - 1] == 0 else np.sin(ph)
        amp = (1.0 if self.selfconj[j - 1] else math.sqrt(2.0)) / math.sqrt(self.mu[j - 1])
        return amp * trig / self.model.grid.L**3

    def noise_field(self, j) -> np.ndarray:
        """Grid values of the covariance image of e_j (the field driven by W_j)."""
        self._check(j)
        ph = self._phase(j)
        trig = np.cos(ph) if self.parts[j - 1] == 0 else np.sin(ph)
        amp = math.sqrt(self.mu[j - 1]) * (1.0 if self.selfconj[j - 1] else math.sqrt(2.0))
        return amp * trig

    @cached_property
    def synthesis(self) -> sp.csr_matrix:
        """Sparse map from direction amplitudes to half-spectrum series coefficients."""
        g = self.model.grid
        N, nz = g.N, g.N // 2 + 1
        rows, cols, vals = [], [], []

        def put(k, value, j):
            k = np.mod(k, N)
            rows.append((k[0] * N + k[1]) * nz + k[2])
            cols.append(j)
            vals.append(value)

        for j in range(self.size):
            k = self.modes[j]
            m = self.mu[j]
            if self.selfconj[j]:
                put(k, math.sqrt(m), j)
                continue
            c = math.sqrt(m / 2.0) * (1.0 if self.parts[j] == 0 else -1j)
            kz, mkz = k[2] % N, (-k[2]) % N
            if 0 < kz < N // 2:
                put(k, c, j)
            elif 0 < mkz < N // 2:
                put(-k, np.conj(c), j)
            else:
                put(k, c, j)
                put(-k, np.conj(c), j)
        return sp.csr_matrix(
            (np.asarray(vals, dtype=complex), (rows, cols)), shape=(N * N * nz, self.size)
        )

    def synthesize(self, amplitudes) -> np.ndarray:
        """Half-spectrum coefficients of sum_j a_j f_j.

        ``amplitudes`` has shape (J', ...) with J' <= J; trailing axes are
        batch axes and move to the front of the result.
        """
        a = np.asarray(amplitudes, dtype=float)
        J = a.shape[0]
        batch = a.shape[1:]
        flat = self.synthesis[:, :J] @ a.reshape(J, -1)
        g = self.model.grid
        out = np.asarray(flat).T.reshape(batch + g.rshape)
        return out

    def project(self, phi) -> np.ndarray:
        """Coordinates <phi, e_j>_H of a real grid field on all directions."""
        g = self.model.grid
        c = field_coefficients(phi, g)
        k = np.mod(self.modes, g.N)
        ck = c[..., k[:, 0], k[:, 1], k[:, 2]]
        # <phi, e_j>_H = mu_k * sum over +-k of c * conj(F e_j)
        scale = np.where(self.selfconj, np.sqrt(self.mu), np.sqrt(2.0 * self.mu))
        return np.where(self.parts == 0, ck.real, -ck.imag) * scale


def build_basis(model: NoiseModel, J=None) -> BasisIndex:
    """Basis directions ordered by |k|, then lexicographically, cosine first."""
    g = model.grid
    N = g.N
    k = g.kvec.reshape(-1, 3)
    neg = np.mod(-k + N // 2, N) - N // 2
    reps = []
    for a, b in zip(map(tuple, k), map(tuple, neg)):
        if a == (0, 0, 0) or a < b:
            continue
        reps.append(a)
    reps = np.array(reps, dtype=np.int64)
    norm2 = np.sum(reps**2, axis=1)
    order = np.lexsort((reps[:, 2], reps[:, 1], reps[:, 0], norm2))
    reps = reps[order]
    selfc = np.all(np.isin(reps, (0, -N // 2)), axis=1)
    modes, parts, sc = [], [], []
    for r, s in zip(reps, selfc):
        modes.append(r)
        parts.append(0)
        sc.append(s)
        if not s:
            modes.append(r)
            parts.append(1)
            sc.append(False)
    modes = np.array(modes)
    parts = np.array(parts)
    sc = np.array(sc)
    if J is not None:
        if not (1 <= J <= len(parts)):
            raise ParameterError(f"J must lie in 1..{len(parts)}")
        modes, parts, sc = modes[:J], parts[:J], sc[:J]
    xi = np.sqrt(np.sum(modes.astype(float) ** 2, axis=1)) / g.L
    mu = xi ** (model.beta - 3.0) / g.L**3
    return BasisIndex(model, modes, parts, sc, mu)


# Brownian tableaux -----------------------------------------------------------


@dataclass(frozen=True)
class BrownianTableau:
    """Dyadic Brownian increments W_j(Delta_i), j < J, i < 2^n, on [0, T]."""

    n: int
    J: int
    T: float
    W: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        if self.W.shape != (self.J, 2**self.n):
            raise ValidationError(f"increment array has shape {self.W.shape}")
        if not np.all(np.isfinite(self.W)):
            raise ValidationError("tableau contains non-finite increments")
        self.W.setflags(write=False)

    @property
    def cell(self) -> float:
        return self.T / 2**self.n

    def coarsen(self, n) -> "BrownianTableau":
        """Tableau of level n <= self.n obtained by summing cells in blocks."""
        if not (0 <= n <= self.n):
            raise ParameterError(f"cannot coarsen level {self.n} to {n}")
        W = self.W.reshape(self.J, 2**n, 2 ** (self.n - n)).sum(axis=2)
        return BrownianTableau(n, self.J, self.T, W, self.seed)

    def truncate(self, J) -> "BrownianTableau":
        return BrownianTableau(self.n, J, self.T, self.W[:J].copy(), self.seed)


def _level_rng(seed, level):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(level,))))


def sample_brownian_tableau(n, J, T, seed) -> BrownianTableau:
    """Sample increments at level n by Brownian-bridge refinement.

    Level 0 holds W_j(T); each refinement splits a cell increment X into a
    left half X/2 + sqrt(cell/4) Z and a right half X - left. One generator is
    used per level, so the result is a pure function of (seed, n, J, T) and
    tableaux of different J agree on their common rows.
    """
    if n < 0 or J < 1:
        raise ParameterError("need n >= 0 and J >= 1")
    seed = int(seed)
    X = math.sqrt(T) * _level_rng(seed, 0).standard_normal((J, 1))
    for level in range(1, n + 1):
        Z = _level_rng(seed, level).standard_normal((J, 2 ** (level - 1)))
        var = T * 2.0 ** (-level)
        left = 0.5 * X + math.sqrt(var / 2.0) * Z
        right = X - left
        X = np.stack([left, right], axis=-1).reshape(J, 2**level)
    return BrownianTableau(n, J, T, X, seed)


def dump_tableau(tableau: BrownianTableau, path):
    """Write a tableau as magic, n, J, T (little-endian) and row-major float64 payload."""
    with open(Path(path), "wb") as fh:
        fh.write(TABLEAU_MAGIC)
        fh.write(struct.pack("<qqd", tableau.n, tableau.J, tableau.T))
        fh.write(np.ascontiguousarray(tableau.W, dtype="<f8").tobytes())


def load_tableau(path) -> BrownianTableau:
    data = Path(path).read_bytes()
    if data[:8] != TABLEAU_MAGIC:
        raise ValidationError("not a tableau file")
    n, J, T = struct.unpack("<qqd", data[8:32])
    W = np.frombuffer(data[32:], dtype="<f8")
    if W.size != J * 2**n:
        raise ValidationError("tableau payload has the wrong length")
    return BrownianTableau(n, J, T, W.reshape(J, 2**n).astype(float))


# Regularised driver and localisation -----------------------------------------


@dataclass(frozen=True)
class LocalizationParams:
    alpha: float = 1.5

    def __post_init__(self):
        if not self.alpha > ALPHA_MIN:
            raise ParameterError(f"alpha must exceed sqrt(2 ln 2) = {ALPHA_MIN:.4f}")


def _cell_of(tableau, t):
    if not (0.0 <= t <= tableau.T * (1 + 1e-12)):
        raise ParameterError(f"time {t} outside [0, {tableau.T}]")
    c = int(math.floor(t * 2**tableau.n / tableau.T + 1e-9))
    return min(c, 2**tableau.n - 1)


def regularized_rates(tableau: BrownianTableau, cell, J_n=None) -> np.ndarray:
    """Vector of derivatives of w^n on dyadic cell ``cell`` for all directions.

    Directions beyond ``J_n`` (default: the level n) vanish, and so does
    every direction on the first cell.
    """
    J_n = tableau.n if J_n is None else J_n
    out = np.zeros(tableau.J)
    if cell >= 1:
        m = min(J_n, tableau.J)
        out[:m] = tableau.W[:m, cell - 1] * (2**tableau.n / tableau.T)
    return out


def regularized_derivative(tableau: BrownianTableau, j, t, J_n=None) -> float:
    """Derivative of the j-th (1-based) component of w^n at time t."""
    if not (1 <= j <= tableau.J):
        raise IndexError(f"direction {j} outside 1..{tableau.J}")
    return float(regularized_rates(tableau, _cell_of(tableau, t), J_n)[j - 1])


def wn_hnorm(tableau: BrownianTableau, t, J_n=None) -> float:
    """H norm of w^n'(t), the root sum of squares of its components."""
    r = regularized_rates(tableau, _cell_of(tableau, t), J_n)
    return float(np.sqrt(np.sum(r**2)))


def localization_threshold(n, alpha) -> float:
    return alpha * math.sqrt(n) * 2.0 ** (-n / 2.0)


def localization_indicator(tableau: BrownianTableau, t, params: LocalizationParams) -> bool:
    """Whether every examined increment stays below alpha n^1/2 2^-n/2.

    The examined set is j <= n and cells i <= [2^n t / T - 1]^+.
    """
    if not (0.0 <= t <= tableau.T * (1 + 1e-12)):
        raise ParameterError(f"time {t} outside [0, {tableau.T}]")
    n = tableau.n
    last = int(math.floor(max(2**n * t / tableau.T - 1.0, 0.0) + 1e-9))
    last = min(last, 2**n - 1)
    block = tableau.W[: min(n, tableau.J), : last + 1]
    return bool(np.max(np.abs(block), initial=0.0) <= localization_threshold(n, params.alpha))


def localization_fraction(n, T, alpha, count, seed, J=None):
    """Fraction of ``count`` tableaux on which L_n(T) holds.

    Only the first n directions enter the event, so tableaux are sampled
    with that truncation. Seeds come from consecutive indices of ``seed``.
    """
    from .config import seed_stream

    params = LocalizationParams(alpha)
    J = n if J is None else J
    hits = 0
    for i in range(count):
        tab = sample_brownian_tableau(n, J, T, seed_stream(seed, i))
        hits += localization_indicator(tab, T, params)
    return hits / count
