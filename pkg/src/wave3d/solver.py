"""Spectral time stepping of the stochastic wave equation on the torus.

Each Fourier mode evolves exactly under the free wave flow with
omega = 2 pi |xi|. Sources are frozen at the left endpoint of each step:

* noise terms enter as impulses, filtered by sin(omega dt)/omega for the
  displacement and cos(omega dt) for the velocity;
* rate terms (w^n, control, drift) are held constant over the step and
  integrated exactly, which contributes (1 - cos(omega dt))/omega^2 to the
  displacement and sin(omega dt)/omega to the velocity.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
import scipy.fft as sfft

from .coefficients import Coefficients, Nonlinearity
from .errors import ConfigurationError, ContractionError, NumericalBlowupError, ParameterError
from .noise import (
    BasisIndex,
    BrownianTableau,
    NoiseModel,
    TorusGrid,
    build_basis,
    sample_brownian_tableau,
)

AXES = (-3, -2, -1)


def _sin_over(w, t):
    """sin(w t) / w with value t at w = 0."""
    return t * np.sinc(w * t / np.pi)


@dataclass(frozen=True)
class SpectralSystem:
    """Grid, noise model and basis shared by every solve on one discretisation."""

    model: NoiseModel
    basis: BasisIndex
    dealias: bool = False

    @classmethod
    def build(cls, L, N, T, dt, beta, dealias=False, J=None):
        model = NoiseModel(beta, TorusGrid(L, N, T, dt))
        return cls(model, build_basis(model, J), dealias)

    @property
    def grid(self) -> TorusGrid:
        return self.model.grid

    @property
    def beta(self) -> float:
        return self.model.beta

    @property
    def n_fine(self) -> int:
        """Dyadic level of the step grid, T / dt = 2^n_fine."""
        m = self.grid.n_steps
        if m & (m - 1):
            raise ConfigurationError(f"number of steps {m} is not a power of two")
        return m.bit_length() - 1

    @cached_property
    def omega(self) -> np.ndarray:
        return 2.0 * np.pi * self.grid.xi_abs_r

    @cached_property
    def propagator(self):
        """cos, sin/omega, omega sin and (1 - cos)/omega^2 for one step."""
        w, dt = self.omega, self.grid.dt
        c = np.cos(w * dt)
        s = _sin_over(w, dt)
        ws = w * np.sin(w * dt)
        half = _sin_over(w, dt / 2.0)
        q = 2.0 * half**2
        return c, s, ws, q

    @cached_property
    def dealias_mask(self) -> np.ndarray:
        k = self.grid.kvec[:, :, : self.grid.N // 2 + 1]
        return np.all(np.abs(k) <= self.grid.N // 3, axis=-1)

    def to_physical(self, coeffs):
        return sfft.irfftn(coeffs, s=self.grid.shape, axes=AXES, norm="forward")

    def to_spectral(self, values):
        return sfft.rfftn(values, axes=AXES, norm="forward")


@dataclass(frozen=True)
class FieldState:
    """Displacement and velocity at time t as half-spectrum series coefficients.

    Arrays carry a leading replica axis.
    """

    t: float
    u_hat: np.ndarray
    v_hat: np.ndarray
    grid: TorusGrid

    @classmethod
    def zero(cls, grid: TorusGrid, replicas=1):
        shape = (replicas,) + grid.rshape
        return cls(0.0, np.zeros(shape, complex), np.zeros(shape, complex), grid)

    @classmethod
    def from_fields(cls, t, u, v, grid: TorusGrid):
        u = np.asarray(u, float)
        v = np.asarray(v, float)
        if u.ndim == 3:
            u, v = u[None], v[None]
        f = lambda a: sfft.rfftn(a, axes=AXES, norm="forward")
        return cls(float(t), f(u), f(v), grid)

    @property
    def u(self) -> np.ndarray:
        return sfft.irfftn(self.u_hat, s=self.grid.shape, axes=AXES, norm="forward")

    @property
    def v(self) -> np.ndarray:
        return sfft.irfftn(self.v_hat, s=self.grid.shape, axes=AXES, norm="forward")


@dataclass(frozen=True)
class Control:
    """Deterministic control h in H_T, piecewise constant on the step grid.

    ``values[m, j]`` is the coordinate h_j on step m along basis direction
    j + 1.
    """

    values: np.ndarray
    dt: float

    def __post_init__(self):
        v = np.asarray(self.values, float)
        if v.ndim != 2 or not np.all(np.isfinite(v)):
            raise ConfigurationError("control values must be a finite (steps, J) array")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, grid: TorusGrid, direction=1, amplitude=1.0):
        """Constant-in-time control along one basis direction (1-based)."""
        vals = np.zeros((grid.n_steps, direction))
        vals[:, direction - 1] = amplitude
        return cls(vals, grid.dt)

    @classmethod
    def from_function(cls, grid: TorusGrid, fn, J):
        """Sample a map t -> R^J at step midpoints."""
        mids = (np.arange(grid.n_steps) + 0.5) * grid.dt
        return cls(np.array([np.asarray(fn(t), float).reshape(J) for t in mids]), grid.dt)

    @classmethod
    def zero(cls, grid: TorusGrid, J=1):
        return cls(np.zeros((grid.n_steps, J)), grid.dt)

    @property
    def J(self) -> int:
        return self.values.shape[1]

    def norm_sq(self) -> float:
        """Squared H_T norm sum_j int h_j^2 dt."""
        return float(np.sum(self.values**2) * self.dt)

    def __add__(self, other: "Control") -> "Control":
        J = max(self.J, other.J)
        a = np.zeros((self.values.shape[0], J))
        a[:, : self.J] += self.values
        a[:, : other.J] += other.values
        return Control(a, self.dt)

    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.values).tobytes()).hexdigest()[:16]


@dataclass(frozen=True)
class DriveSpec:
    """Which forcing terms enter a run.

    ``wz_truncation`` selects which directions of w^n are kept: "literal"
    keeps j <= n, "full" keeps every direction of the tableau.
    """

    stochastic_on: bool = True
    wz_level: int | None = None
    control: Control | None = None
    girsanov: tuple | None = None
    wz_truncation: str = "full"

    def __post_init__(self):
        if self.wz_truncation not in ("literal", "full"):
            raise ConfigurationError(f"unknown truncation {self.wz_truncation!r}")
        if self.girsanov is not None:
            h, n = self.girsanov
            if n is None or int(n) < 0:
                raise ConfigurationError("girsanov shift needs a level n >= 0")

    @property
    def needs_tableau(self) -> bool:
        return self.stochastic_on or self.wz_level is not None or self.girsanov is not None

    def describe(self) -> dict:
        gh = None
        if self.girsanov is not None:
            h, n = self.girsanov
            gh = {"level": int(n), "control": None if h is None else h.digest()}
        return {
            "stochastic": self.stochastic_on,
            "wz_level": self.wz_level,
            "wz_truncation": self.wz_truncation,
            "control": None if self.control is None else self.control.digest(),
            "girsanov": gh,
        }


def girsanov_shift(drive: DriveSpec, h: Control | None, n: int) -> DriveSpec:
    """Drive realising the path map W -> W + int h - w^n on top of ``drive``."""
    return replace(drive, girsanov=(h, int(n)))


def dyadic_lag(t, n, T):
    """Lag point t_n: two dyadic cells of level n behind t, floored at 0."""
    if not (0.0 <= t <= T * (1 + 1e-12)):
        raise ParameterError(f"time {t} outside [0, {T}]")
    cell = T / 2**n
    k = min(int(math.floor(t / cell + 1e-9)), 2**n - 1)
    if k < 1:
        return 0.0
    return max(k * cell - cell, 0.0)


@dataclass(frozen=True)
class Trajectory:
    """Saved frames of a (possibly batched) solve.

    ``u`` and ``v`` have shape (S, R, N, N, N); ``v`` may be omitted.
    """

    grid: TorusGrid
    beta: float
    times: np.ndarray
    u: np.ndarray
    v: np.ndarray | None = None
    drive: dict = field(default_factory=dict)
    fingerprint: str = ""

    def __post_init__(self):
        t = np.asarray(self.times, float)
        if t.ndim != 1 or t[0] != 0.0 or np.any(np.diff(t) <= 0):
            raise ConfigurationError("save times must start at 0 and increase strictly")
        for a in (t, self.u, self.v):
            if a is not None:
                a.setflags(write=False)
        object.__setattr__(self, "times", t)

    @property
    def replicas(self) -> int:
        return self.u.shape[1]

    def index_of(self, t):
        idx = np.flatnonzero(np.isclose(self.times, t, rtol=0, atol=1e-9 * self.grid.T))
        if idx.size == 0:
            raise ConfigurationError(f"time {t} is not on the save grid")
        return int(idx[0])

    def at(self, t) -> np.ndarray:
        return self.u[self.index_of(t)]


# per-step forcing -------------------------------------------------------------


@dataclass
class _DriveData:
    """Per-step synthesised forcing fields for a batch of replicas."""

    system: SpectralSystem
    drive: DriveSpec
    W_fine: np.ndarray | None       # (R, J, steps)
    W_wz: np.ndarray | None         # (R, J, 2^n) for w^n
    W_shift: np.ndarray | None      # (R, J, 2^n) for the girsanov w^n
    replicas: int

    def _rates(self, W, n, m, J_n):
        g = self.system.grid
        cell = (m * 2**n) // g.n_steps
        out = np.zeros(W.shape[:2])
        if cell >= 1:
            k = W.shape[1] if J_n is None else min(J_n, W.shape[1])
            out[:, :k] = W[:, :k, cell - 1] * (2**n / g.T)
        return out

    def _jn(self, n):
        return n if self.drive.wz_truncation == "literal" else None

    def noise_hat(self, m):
        if self.W_fine is None:
            return None
        return self.system.basis.synthesize(self.W_fine[:, :, m].T)

    def wz_hat(self, m):
        if self.W_wz is None:
            return None
        n = self.drive.wz_level
        return self.system.basis.synthesize(self._rates(self.W_wz, n, m, self._jn(n)).T)

    def control_hat(self, m, h: Control | None):
        if h is None:
            return None
        vals = np.broadcast_to(h.values[m][:, None], (h.J, self.replicas))
        return self.system.basis.synthesize(vals)

    def shift_hat(self, m):
        """Synthesised h - w^n of the girsanov shift, or None."""
        if self.drive.girsanov is None:
            return None
        h, n = self.drive.girsanov
        rate = -self._rates(self.W_shift, n, m, self._jn(n))
        if h is not None:
            rate[:, : h.J] += h.values[m][None, :]
        return self.system.basis.synthesize(rate.T)


def _stack_tableaux(system, drive, tableaux):
    g = system.grid
    if not drive.needs_tableau:
        return None, None, None
    if not tableaux:
        raise ConfigurationError("this drive needs a Brownian tableau")
    nf = system.n_fine
    for tab in tableaux:
        if abs(tab.T - g.T) > 1e-12 * g.T:
            raise ConfigurationError("tableau horizon differs from the grid horizon")
        if tab.J > system.basis.size:
            raise ConfigurationError("tableau has more directions than the basis")
    W_fine = W_wz = W_shift = None
    if drive.stochastic_on:
        if any(t.n < nf for t in tableaux):
            raise ConfigurationError(f"stochastic forcing needs tableau level >= {nf}")
        W_fine = np.stack([t.coarsen(nf).W for t in tableaux])
    for which in ("wz", "shift"):
        n = drive.wz_level if which == "wz" else (drive.girsanov[1] if drive.girsanov else None)
        if n is None:
            continue
        if n > nf:
            raise ConfigurationError(f"level {n} is finer than the step grid level {nf}")
        if any(t.n < n for t in tableaux):
            raise ConfigurationError(f"w^n of level {n} needs a tableau of at least that level")
        W = np.stack([t.coarsen(n).W for t in tableaux])
        if which == "wz":
            W_wz = W
        else:
            W_shift = W
    return W_fine, W_wz, W_shift


def _check_control(system, h):
    if h is not None:
        if h.J > system.basis.size:
            raise ConfigurationError("control uses directions outside the basis truncation")
        if h.values.shape[0] != system.grid.n_steps:
            raise ConfigurationError("control length differs from the number of steps")


def _sources(system: SpectralSystem, coeffs: Coefficients, data: _DriveData, u_hat, m):
    """Impulse and rate forcing (spectral) at the left endpoint of step m."""
    spec_imp = 0.0
    spec_rate = 0.0
    phys_imp = None
    phys_rate = None
    u = None

    def need_u():
        nonlocal u
        if u is None:
            u = system.to_physical(u_hat)
        return u

    def add(nl: Nonlinearity, make, kind):
        nonlocal spec_imp, spec_rate, phys_imp, phys_rate
        if nl.is_zero:
            return
        fhat = make()
        if fhat is None:
            return
        c = nl.constant_value
        if c is not None:
            if kind == "imp":
                spec_imp = spec_imp + c * fhat
            else:
                spec_rate = spec_rate + c * fhat
            return
        term = nl(need_u()) * system.to_physical(fhat)
        if kind == "imp":
            phys_imp = term if phys_imp is None else phys_imp + term
        else:
            phys_rate = term if phys_rate is None else phys_rate + term

    add(coeffs.A, lambda: data.noise_hat(m), "imp")
    add(coeffs.B, lambda: data.wz_hat(m), "rate")
    add(coeffs.D, lambda: data.control_hat(m, data.drive.control), "rate")
    add(coeffs.A, lambda: data.shift_hat(m), "rate")
    if not coeffs.b.is_zero:
        c = coeffs.b.constant_value
        if c is not None:
            one = np.zeros_like(u_hat)
            one[..., 0, 0, 0] = c
            spec_rate = spec_rate + one
        else:
            term = coeffs.b(need_u())
            phys_rate = term if phys_rate is None else phys_rate + term

    def finish(spectral, phys):
        out = spectral
        if phys is not None:
            ph = system.to_spectral(phys)
            if system.dealias:
                ph = ph * system.dealias_mask
            out = out + ph
        return out

    return finish(spec_imp, phys_imp), finish(spec_rate, phys_rate)


def _advance(system, u_hat, v_hat, imp, rate):
    c, s, ws, q = system.propagator
    u_new = c * u_hat + s * v_hat
    v_new = c * v_hat - ws * u_hat
    if not np.isscalar(imp):
        u_new = u_new + s * imp
        v_new = v_new + c * imp
    if not np.isscalar(rate):
        u_new = u_new + q * rate
        v_new = v_new + s * rate
    return u_new, v_new


def _prepare(system, coeffs, drive, noise):
    tableaux = _resolve_noise(system, drive, noise)
    _check_control(system, drive.control)
    if drive.girsanov is not None:
        _check_control(system, drive.girsanov[0])
    W_fine, W_wz, W_shift = _stack_tableaux(system, drive, tableaux)
    R = len(tableaux) if tableaux else 1
    return tableaux, _DriveData(system, drive, W_fine, W_wz, W_shift, R)


def step(state: FieldState, coeffs: Coefficients, drive: DriveSpec, tableau, dt, system: SpectralSystem):
    """Advance ``state`` by one step of size dt (which must equal the grid step)."""
    g = system.grid
    if abs(dt - g.dt) > 1e-12 * g.dt:
        raise ParameterError("dt must equal the grid time step")
    m = int(round(state.t / g.dt))
    if m >= g.n_steps:
        raise ParameterError("state is already at the final time")
    tabs = None if tableau is None else ([tableau] if isinstance(tableau, BrownianTableau) else list(tableau))
    _, data = _prepare(system, coeffs, drive, tabs)
    imp, rate = _sources(system, coeffs, data, state.u_hat, m)
    u_hat, v_hat = _advance(system, state.u_hat, state.v_hat, imp, rate)
    if not (np.all(np.isfinite(u_hat)) and np.all(np.isfinite(v_hat))):
        raise NumericalBlowupError(m)
    return FieldState((m + 1) * g.dt, u_hat, v_hat, g)


def _resolve_noise(system, drive, noise):
    if noise is None:
        return None
    if isinstance(noise, BrownianTableau):
        return [noise]
    if isinstance(noise, (int, np.integer)):
        noise = [noise]
    out = []
    for item in noise:
        if isinstance(item, BrownianTableau):
            out.append(item)
        else:
            out.append(
                sample_brownian_tableau(system.n_fine, system.basis.size, system.grid.T, int(item))
            )
    return out


def _noise_ids(tableaux):
    if not tableaux:
        return []
    ids = []
    for t in tableaux:
        if t.seed is not None:
            ids.append(f"seed:{t.seed}")
        else:
            ids.append("sha:" + hashlib.sha256(t.W.tobytes()).hexdigest()[:16])
    return ids


def solve(
    system: SpectralSystem,
    coeffs: Coefficients,
    drive: DriveSpec,
    noise=None,
    save_steps=None,
    store_velocity=True,
    fingerprint="",
) -> Trajectory:
    """Solve from null initial data over [0, T].

    ``noise`` is a tableau, a seed, or a list of either (one per replica).
    Seeds are expanded into tableaux at the step level with every basis
    direction. ``save_steps`` defaults to every step.
    """
    g = system.grid
    tableaux, data = _prepare(system, coeffs, drive, noise)
    R = data.replicas
    steps = g.n_steps
    save = np.arange(steps + 1) if save_steps is None else np.unique(np.asarray(save_steps, int))
    if save[0] != 0 or save[-1] > steps:
        raise ConfigurationError("save steps must start at 0 and stay within the grid")
    U = np.empty((len(save), R) + g.shape)
    V = np.empty_like(U) if store_velocity else None
    state = FieldState.zero(g, R)
    u_hat, v_hat = state.u_hat, state.v_hat
    U[0] = 0.0
    if V is not None:
        V[0] = 0.0
    pos = {int(s): i for i, s in enumerate(save)}
    quiet = coeffs.is_zero
    for m in range(save[-1]):
        if not quiet:
            imp, rate = _sources(system, coeffs, data, u_hat, m)
            u_hat, v_hat = _advance(system, u_hat, v_hat, imp, rate)
            if not (np.all(np.isfinite(u_hat)) and np.all(np.isfinite(v_hat))):
                raise NumericalBlowupError(m)
        i = pos.get(m + 1)
        if i is not None:
            U[i] = system.to_physical(u_hat)
            if V is not None:
                V[i] = system.to_physical(v_hat)
    desc = drive.describe()
    desc["noise"] = _noise_ids(tableaux)
    desc["coefficients"] = coeffs.to_dict()
    return Trajectory(g, system.beta, save * g.dt, U, V, desc, fingerprint)


def free_propagate(system: SpectralSystem, u, v, tau):
    """Displacement after free wave flow for time tau from fields (u, v)."""
    w = system.omega
    uh, vh = system.to_spectral(u), system.to_spectral(v)
    return system.to_physical(np.cos(w * tau) * uh + _sin_over(w, tau) * vh)


def lagged_snapshot(traj: Trajectory, t, n, system: SpectralSystem | None = None):
    """Field at t obtained by freely propagating the stored state at t_n.

    This drops every source on [t_n, t], which is the truncation of all
    time integrals at the dyadic lag point.
    """
    tn = dyadic_lag(t, n, traj.grid.T)
    if traj.v is None:
        raise ConfigurationError("lagged snapshots need stored velocities")
    i = traj.index_of(tn)
    if system is None:
        system = SpectralSystem(NoiseModel(traj.beta, traj.grid), None)
    return free_propagate(system, traj.u[i], traj.v[i], t - tn)


def effective_increments(drive: DriveSpec, tableau: BrownianTableau, system: SpectralSystem):
    """Per-step direction increments dW + h dt - w^n dt seen by a shifted drive."""
    g = system.grid
    nf = system.n_fine
    dW = tableau.coarsen(nf).W.copy()
    if drive.girsanov is None:
        return dW
    h, n = drive.girsanov
    _check_control(system, h)
    data = _DriveData(system, drive, None, None, tableau.coarsen(n).W[None], 1)
    for m in range(g.n_steps):
        rate = -data._rates(data.W_shift, n, m, data._jn(n))[0]
        if h is not None:
            rate[: h.J] += h.values[m]
        dW[:, m] += rate * g.dt
    return dW


@dataclass(frozen=True)
class PicardResult:
    trajectory: Trajectory
    distances: list
    iterations: int


def picard_reference(
    system: SpectralSystem,
    coeffs: Coefficients,
    drive: DriveSpec,
    tableau,
    iterations=50,
    tol=0.0,
) -> PicardResult:
    """Fixed-point iteration on the full mild form.

    Each iterate rebuilds u(t_m) as a sum over all earlier steps of the
    Green-filtered forcing evaluated on the previous iterate, with the
    same left-endpoint quadratures and noise as ``solve``. Iteration stops
    once the sup distance between iterates is at most ``tol`` times the sup
    of the iterate.
    """
    if iterations < 1:
        raise ParameterError("need at least one iteration")
    g = system.grid
    tabs, data = _prepare(system, coeffs, drive, tableau)
    M = g.n_steps
    R = data.replicas
    w = system.omega
    dt = g.dt
    taus = np.arange(1, M + 1) * dt
    k_imp = np.stack([_sin_over(w, tau) for tau in taus])
    k_imp_v = np.stack([np.cos(w * tau) for tau in taus])
    # exact integral over one step of sin(omega (t - s)) / omega and its derivative
    half = _sin_over(w, dt / 2.0)
    k_rate = np.stack([2.0 * half * np.sin(w * (tau - dt / 2.0)) / np.where(w > 0, w, 1.0) for tau in taus])
    k_rate[:, w == 0] = (taus - dt / 2.0)[:, None] * dt
    k_rate_v = np.stack([2.0 * half * np.cos(w * (tau - dt / 2.0)) for tau in taus])

    Z = np.zeros((M + 1, R) + g.rshape, complex)
    Zv = np.zeros_like(Z)
    distances = []
    it = 0
    for it in range(1, iterations + 1):
        srcs = [_sources(system, coeffs, data, Z[l], l) for l in range(M)]
        new = np.zeros_like(Z)
        newv = np.zeros_like(Z)
        for m in range(1, M + 1):
            for l in range(m):
                imp, rate = srcs[l]
                j = m - l - 1
                if not np.isscalar(imp):
                    new[m] += k_imp[j] * imp
                    newv[m] += k_imp_v[j] * imp
                if not np.isscalar(rate):
                    new[m] += k_rate[j] * rate
                    newv[m] += k_rate_v[j] * rate
        if not np.all(np.isfinite(new)):
            raise NumericalBlowupError(M, "non-finite Picard iterate")
        diff = float(np.max(np.abs(system.to_physical(new - Z))))
        scale = float(np.max(np.abs(system.to_physical(new))))
        distances.append(diff)
        Z, Zv = new, newv
        if len(distances) >= 4 and all(
            distances[-i] > distances[-i - 1] for i in (1, 2, 3)
        ):
            raise ContractionError(f"Picard distances grew three times in a row: {distances[-4:]}")
        if diff <= tol * scale:
            break
    U = np.stack([system.to_physical(z) for z in Z])
    V = np.stack([system.to_physical(z) for z in Zv])
    desc = drive.describe()
    desc["noise"] = _noise_ids(tabs)
    desc["coefficients"] = coeffs.to_dict()
    traj = Trajectory(g, system.beta, np.arange(M + 1) * dt, U, V, desc)
    return PicardResult(traj, distances, it)
