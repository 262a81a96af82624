"""Estimators for Hoelder norms, moments, increment scaling and convergence."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import ConfigurationError, InsufficientDataError, ParameterError
from .coefficients import (
    ZERO,
    Coefficients,
    Nonlinearity,
    limit_coefficients,
    skeleton_coefficients,
    stochastic_coefficients,
    wong_zakai_preset,
)
from .noise import LocalizationParams, TorusGrid, localization_indicator, sample_brownian_tableau
from .solver import (
    Control,
    DriveSpec,
    SpectralSystem,
    Trajectory,
    dyadic_lag,
    free_propagate,
    girsanov_shift,
    solve,
)


@dataclass(frozen=True)
class HolderWindow:
    """Restriction data (rho, t0, K) of the Hoelder norm.

    K is the axis-aligned box [lower, lower + side]^3. ``policy`` selects the
    pair set: "dyadic" uses offsets in {0, +-1, +-2, +-4, ...} grid units on
    each axis and in time, "all" uses every pair.
    """

    rho: float
    t0: float
    lower: tuple
    side: float
    policy: str = "dyadic"
    max_pairs: int = 1_000_000

    def __post_init__(self):
        if not (0.0 < self.rho < 1.0):
            raise ParameterError("rho must lie in (0, 1)")
        if not self.t0 > 0:
            raise ParameterError("t0 must be positive")
        if self.side < 0:
            raise ParameterError("window side must be nonnegative")
        if self.policy not in ("dyadic", "all"):
            raise ParameterError(f"unknown pair policy {self.policy!r}")
        object.__setattr__(self, "lower", tuple(float(v) for v in np.broadcast_to(self.lower, 3)))

    def check(self, grid: TorusGrid):
        if not self.t0 < grid.T:
            raise ConfigurationError("t0 must be smaller than T")
        margin = grid.T - self.t0
        tol = 1e-9 * grid.L
        if min(self.lower) - margin < -tol or max(self.lower) + self.side + margin > grid.L + tol:
            raise ConfigurationError("K expanded by T - t0 is not inside the torus")

    def point_indices(self, grid: TorusGrid):
        """Grid indices inside K along each axis."""
        x = grid.coordinates()
        tol = 1e-9 * grid.h
        out = []
        for lo in self.lower:
            idx = np.flatnonzero((x >= lo - tol) & (x <= lo + self.side + tol))
            if idx.size == 0:
                raise ConfigurationError("window K contains no grid points")
            out.append(idx)
        return out

    def time_indices(self, times):
        idx = np.flatnonzero(np.asarray(times) >= self.t0 - 1e-9)
        if idx.size == 0:
            raise ConfigurationError("no saved times inside [t0, T]")
        return idx


def window_samples(traj: Trajectory, window: HolderWindow, fields=None):
    """Restrict frames to [t0, T] x K; returns (values (R, S, nx, ny, nz), dt, h)."""
    window.check(traj.grid)
    it = window.time_indices(traj.times)
    ix, iy, iz = window.point_indices(traj.grid)
    u = traj.u if fields is None else fields
    sub = u[it][:, :, ix][:, :, :, iy][:, :, :, :, iz]
    times = traj.times[it]
    steps = np.diff(times)
    if steps.size and not np.allclose(steps, steps[0], rtol=1e-9, atol=0):
        raise ConfigurationError("window times must be uniformly spaced")
    dt = float(steps[0]) if steps.size else 0.0
    return np.moveaxis(sub, 1, 0), dt, traj.grid.h


def _axis_offsets(n, policy):
    if policy == "all":
        return list(range(-(n - 1), n))
    vals = [0]
    s = 1
    while s < n:
        vals += [s, -s]
        s *= 2
    return sorted(vals)


def pair_offsets(shape, policy):
    """Offsets (dt, dx, dy, dz) in grid units, one per unordered pair class."""
    axes = [_axis_offsets(n, policy) for n in shape]
    out = []
    for o in itertools.product(*axes):
        if o > (0, 0, 0, 0):
            out.append(o)
    return out


def holder_norm_values(g, dt, h, rho, policy="dyadic", max_pairs=1_000_000):
    """Hoelder norm of samples g[..., S, nx, ny, nz] on a uniform space-time grid.

    Returns sup |g| + sup |g(a) - g(b)| / (|t_a - t_b| + |x_a - x_b|)^rho over
    the policy's pair set, one value per leading index.
    """
    g = np.asarray(g, dtype=float)
    shape = g.shape[-4:]
    lead = g.shape[:-4]
    offs = pair_offsets(shape, policy)
    if not offs:
        raise ConfigurationError("empty pair set")
    counts = [int(np.prod([n - abs(o) for n, o in zip(shape, off)])) for off in offs]
    total = sum(counts)
    stride = max(1, math.ceil(total / max_pairs))
    flat = g.reshape(lead + (-1,))
    sup = np.max(np.abs(flat), axis=-1) if flat.shape[-1] else np.zeros(lead)
    best = np.zeros(lead)
    for off in offs:
        a_sl, b_sl = [], []
        for o, n in zip(off, shape):
            if o >= 0:
                a_sl.append(slice(o, n))
                b_sl.append(slice(0, n - o))
            else:
                a_sl.append(slice(0, n + o))
                b_sl.append(slice(-o, n))
        d = g[(...,) + tuple(a_sl)] - g[(...,) + tuple(b_sl)]
        d = d.reshape(lead + (-1,))
        if stride > 1:
            d = d[..., ::stride]
        if d.shape[-1] == 0:
            continue
        dist = abs(off[0]) * dt + h * math.sqrt(off[1] ** 2 + off[2] ** 2 + off[3] ** 2)
        if dist <= 0:
            continue
        best = np.maximum(best, np.max(np.abs(d), axis=-1) / dist**rho)
    return sup + best


def holder_norm(traj: Trajectory, window: HolderWindow, replica=None):
    """Hoelder norm of a trajectory restricted to [t0, T] x K.

    Returns one value per replica, or a float when ``replica`` is given.
    """
    g, dt, h = window_samples(traj, window)
    vals = holder_norm_values(g, dt, h, window.rho, window.policy, window.max_pairs)
    return float(vals[replica]) if replica is not None else vals


@dataclass(frozen=True)
class MomentReport:
    p: float
    descriptor: str
    estimate: float
    stderr: float
    replicas: int


def lp_moment(samples, p, descriptor="", min_replicas=30) -> MomentReport:
    """Sample mean of |X|^p with a jackknife standard error."""
    x = np.abs(np.asarray(samples, dtype=float).ravel()) ** p
    n = x.size
    if n < min_replicas:
        raise InsufficientDataError(f"need at least {min_replicas} replicas, got {n}")
    est = float(np.mean(x))
    loo = (np.sum(x) - x) / (n - 1)
    se = float(np.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2)))
    return MomentReport(float(p), descriptor, est, se, n)


@dataclass(frozen=True)
class ScalingFit:
    exponent: float
    slope: float
    separations: np.ndarray
    moments: np.ndarray


def increment_moments(fields, p, mode, separations, weights=None):
    """E[|X(a) - X(b)|^p 1] at each separation (grid units), pooled over positions.

    ``fields`` has shape (R, N, N, N) for space increments (all three axes,
    no wraparound) or (R, S, ...) for time increments along axis 1.
    """
    f = np.asarray(fields, dtype=float)
    seps = np.asarray(separations, dtype=int)
    if seps.size == 0 or np.any(seps <= 0):
        raise ConfigurationError("separations must be positive")
    w = np.ones(f.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    out = []
    for s in seps:
        if mode == "space":
            parts = []
            for ax in (-3, -2, -1):
                n = f.shape[ax]
                if s >= n:
                    raise ConfigurationError(f"separation {s} exceeds the grid")
                a = np.take(f, np.arange(s, n), axis=ax)
                b = np.take(f, np.arange(0, n - s), axis=ax)
                parts.append(np.mean(np.abs(a - b) ** p, axis=(-3, -2, -1)))
            per = np.mean(parts, axis=0)
            per = per.reshape(f.shape[0], -1).mean(axis=1)
        elif mode == "time":
            n = f.shape[1]
            if s >= n:
                raise ConfigurationError(f"separation {s} exceeds the time grid")
            d = np.abs(f[:, s:] - f[:, : n - s]) ** p
            per = d.reshape(f.shape[0], -1).mean(axis=1)
        else:
            raise ConfigurationError(f"unknown mode {mode!r}")
        out.append(float(np.mean(per * w)))
    return np.array(out)


def fit_scaling(moments, separations, spacing, p) -> ScalingFit:
    seps = np.asarray(separations, dtype=float)
    slope = float(np.polyfit(np.log(seps * spacing), np.log(moments), 1)[0])
    return ScalingFit(slope / p, slope, seps, np.asarray(moments))


def increment_scaling(fields, p, mode, spacing, separations=(1, 2, 4), weights=None) -> ScalingFit:
    """Empirical Hoelder exponent: log-log slope of increment moments divided by p."""
    m = increment_moments(fields, p, mode, separations, weights)
    return fit_scaling(m, separations, spacing, p)


# translation invariance ---------------------------------------------------------


def ks_critical_value(n, m, level=0.01):
    """Asymptotic two-sample Kolmogorov-Smirnov critical value."""
    return math.sqrt(-math.log(level / 2.0) / 2.0) * math.sqrt((n + m) / (n * m))


@dataclass(frozen=True)
class KSRow:
    shift: tuple
    statistic: float
    critical: float
    pvalue: float
    passed: bool


def ks_compare(a, b, level=0.01, shift=()) -> KSRow:
    a = np.asarray(a, float).ravel()
    b = np.asarray(b, float).ravel()
    res = stats.ks_2samp(a, b)
    crit = ks_critical_value(a.size, b.size, level)
    return KSRow(tuple(shift), float(res.statistic), crit, float(res.pvalue), bool(res.statistic < crit))


def translation_invariance_test(ensemble, t, x, shifts, level=0.01, min_replicas=1000, window=None):
    """KS comparison of X(t, x) with X(t, x + z) across replicas for each shift z.

    ``ensemble`` is a Trajectory or an array (R, N, N, N) of fields at time t.
    Points are grid indices; shifted points must stay inside the grid, or
    inside ``window``'s box when one is given.
    """
    if isinstance(ensemble, Trajectory):
        grid = ensemble.grid
        fields = ensemble.at(t)
    else:
        fields = np.asarray(ensemble)
        grid = None
    R = fields.shape[0]
    if R < min_replicas:
        raise InsufficientDataError(f"need at least {min_replicas} replicas, got {R}")
    N = fields.shape[-1]
    if window is not None and grid is not None:
        allowed = window.point_indices(grid)
    else:
        allowed = [np.arange(n) for n in fields.shape[-3:]]
    x = tuple(int(v) for v in x)
    base = fields[(slice(None),) + x]
    rows = []
    for z in shifts:
        y = tuple(int(a) + int(b) for a, b in zip(x, z))
        if any(v not in allowed[i] for i, v in enumerate(y)):
            raise ConfigurationError(f"shift {tuple(z)} leaves the admissible region")
        rows.append(ks_compare(base, fields[(slice(None),) + y], level, tuple(int(v) for v in z)))
    del N
    return rows


# coupled convergence ---------------------------------------------------------------


@dataclass(frozen=True)
class ConvergenceReport:
    levels: list
    moments: list
    moments_stderr: list
    moments_unlocalized: list
    probabilities: list
    localization: list
    lam: float
    p: float
    slope: float | None
    prob_slope: float | None
    medians: list = field(default_factory=list)

    def rows(self):
        for i, n in enumerate(self.levels):
            yield {
                "level": n,
                "moment_localized": self.moments[i],
                "moment_stderr": self.moments_stderr[i],
                "moment_unlocalized": self.moments_unlocalized[i],
                "prob_exceed": self.probabilities[i],
                "median": self.medians[i],
                "p_localization": self.localization[i],
            }


def _log2_slope(levels, values):
    v = np.asarray(values, float)
    if np.any(v <= 0):
        return None
    return float(np.polyfit(np.asarray(levels, float), np.log2(v), 1)[0])


def coupled_distances(x: Trajectory, xn: Trajectory, window: HolderWindow):
    """Per-replica Hoelder norm of X_n - X; both must share their noise."""
    if x.drive.get("noise") != xn.drive.get("noise"):
        raise ConfigurationError("X_n and X are not driven by the same tableaux")
    if x.u.shape != xn.u.shape or not np.array_equal(x.times, xn.times):
        raise ConfigurationError("X_n and X live on different grids")
    g, dt, h = window_samples(x, window, x.u - xn.u)
    return holder_norm_values(g, dt, h, window.rho, window.policy, window.max_pairs)


def wz_convergence(distances, flags=None, lam=None, p=2.0) -> ConvergenceReport:
    """Localised moments and exceedance probabilities of coupled distances.

    ``distances`` maps each level n to per-replica norms of X_n - X and
    ``flags`` to the per-replica indicator of L_n(T). When ``lam`` is None
    it is the median distance at the first level.
    """
    levels = sorted(distances)
    if any(b <= a for a, b in zip(levels, levels[1:])):
        raise ConfigurationError("levels must be strictly increasing")
    d = {n: np.asarray(distances[n], float) for n in levels}
    f = {n: (np.ones_like(d[n]) if flags is None else np.asarray(flags[n], float)) for n in levels}
    if lam is None:
        lam = float(np.median(d[levels[0]]))
    mom, se, unloc, prob, loc, med = [], [], [], [], [], []
    for n in levels:
        x = d[n] ** p * f[n]
        mom.append(float(np.mean(x)))
        se.append(float(np.std(x, ddof=1) / math.sqrt(x.size)) if x.size > 1 else 0.0)
        unloc.append(float(np.mean(d[n] ** p)))
        prob.append(float(np.mean(d[n] > lam)))
        loc.append(float(np.mean(f[n])))
        med.append(float(np.median(d[n])))
    return ConvergenceReport(
        levels, mom, se, unloc, prob, loc, float(lam), float(p),
        _log2_slope(levels, mom), _log2_slope(levels, prob), med,
    )


# lag discrepancy --------------------------------------------------------------------


@dataclass
class LagAccumulator:
    """Running sums of |X(t,x) - X(t, t_n, x)|^p over replica batches."""

    levels: list
    p: float
    sums: dict = field(default_factory=dict)
    count: int = 0

    def add(self, traj: Trajectory, window: HolderWindow, system: SpectralSystem):
        if traj.v is None:
            raise ConfigurationError("lag discrepancy needs stored velocities")
        it = window.time_indices(traj.times)
        ix, iy, iz = window.point_indices(traj.grid)
        T = traj.grid.T
        for n in self.levels:
            acc = self.sums.setdefault(n, np.zeros((len(it), len(ix), len(iy), len(iz))))
            for a, i in enumerate(it):
                t = traj.times[i]
                tn = dyadic_lag(t, n, T)
                j = traj.index_of(tn)
                lag = free_propagate(system, traj.u[j], traj.v[j], t - tn)
                d = traj.u[i] - lag
                d = d[:, ix][:, :, iy][:, :, :, iz]
                acc[a] += np.sum(np.abs(d) ** self.p, axis=0)
        self.count += traj.replicas

    def sup_norms(self):
        return [float(np.max(self.sums[n] / self.count) ** (1.0 / self.p)) for n in self.levels]


@dataclass(frozen=True)
class LagReport:
    levels: list
    sup_norms: list
    slope: float
    target: float


def lag_discrepancy_check(ensemble, levels, p, window: HolderWindow, system: SpectralSystem) -> LagReport:
    """Log2 slope in n of sup over (t, x) of ||X(t,x) - X(t, t_n, x)||_p.

    ``ensemble`` is a Trajectory, an iterable of replica batches, or a
    filled LagAccumulator.
    """
    if isinstance(ensemble, LagAccumulator):
        acc = ensemble
    else:
        acc = LagAccumulator(list(levels), p)
        batches = [ensemble] if isinstance(ensemble, Trajectory) else ensemble
        for traj in batches:
            acc.add(traj, window, system)
    sups = acc.sup_norms()
    slope = _log2_slope(acc.levels, sups)
    return LagReport(list(acc.levels), sups, slope, -(3.0 - system.beta) / 2.0)


# coupled studies --------------------------------------------------------------------


@dataclass(frozen=True)
class CoupledTask:
    """Everything a worker needs to run one batch of coupled replicas.

    X solves the limit equation (noise through A + B) and X_n the equation
    with B driven by w^n; both share each replica's tableau. With
    ``shift_sigma`` set, the batch also measures the shifted solution
    u o T_n^h against the skeleton Phi^h.
    """

    system: SpectralSystem
    coeffs: Coefficients
    control: Control
    levels: tuple
    window: HolderWindow
    alpha: float = 1.5
    p: float = 2.0
    truncation: str = "full"
    with_lag: bool = False
    shift_sigma: Nonlinearity | None = None


@dataclass
class CoupledStudy:
    levels: list
    wz: dict
    girsanov: dict
    flags: dict
    lag: LagAccumulator | None
    seeds: list


def coupled_batch(task: CoupledTask, seeds):
    """Per-replica distances, localisation flags and lag sums for one batch."""
    system, window = task.system, task.window
    g = system.grid
    params = LocalizationParams(task.alpha)
    first = window.time_indices(g.times())[0]
    save = np.arange(g.n_steps + 1) if task.with_lag else np.r_[0, np.arange(first, g.n_steps + 1)]
    tabs = [sample_brownian_tableau(system.n_fine, system.basis.size, g.T, s) for s in seeds]
    h = task.control
    x = solve(system, limit_coefficients(task.coeffs), DriveSpec(control=h), tabs,
              save_steps=save, store_velocity=task.with_lag)
    out = {"wz": {}, "girsanov": {}, "flags": {}, "lag": None, "count": len(seeds)}
    if task.with_lag:
        acc = LagAccumulator(list(task.levels), task.p)
        acc.add(x, window, system)
        out["lag"] = acc.sums
    phi_h = None
    if task.shift_sigma is not None:
        phi_h = solve(system, skeleton_coefficients(task.shift_sigma, task.coeffs.b),
                      DriveSpec(stochastic_on=False, control=h), save_steps=save, store_velocity=False)
    for n in task.levels:
        out["flags"][n] = [bool(localization_indicator(t.coarsen(n), g.T, params)) for t in tabs]
        drive = DriveSpec(stochastic_on=not task.coeffs.A.is_zero, wz_level=n, control=h,
                          wz_truncation=task.truncation)
        xn = solve(system, task.coeffs, drive, tabs, save_steps=save, store_velocity=False)
        out["wz"][n] = coupled_distances(x, xn, window).tolist()
        if phi_h is not None:
            drv = girsanov_shift(DriveSpec(wz_truncation=task.truncation), h, n)
            ut = solve(system, stochastic_coefficients(task.shift_sigma, task.coeffs.b), drv, tabs,
                       save_steps=save, store_velocity=False)
            gv, dt, hh = window_samples(ut, window, ut.u - phi_h.u)
            out["girsanov"][n] = holder_norm_values(gv, dt, hh, window.rho, window.policy,
                                                    window.max_pairs).tolist()
    return out


def _coupled_entry(args):
    return coupled_batch(*args)


def run_coupled(task: CoupledTask, seeds, batch=16, mapper=map) -> CoupledStudy:
    """Run ``coupled_batch`` over replica batches and reduce in replica order.

    ``mapper`` must preserve order (builtin map or Executor.map).
    """
    seeds = list(seeds)
    chunks = [seeds[i : i + batch] for i in range(0, len(seeds), batch)]
    parts = list(mapper(_coupled_entry, [(task, c) for c in chunks]))
    levels = list(task.levels)

    def cat(key, dtype=float):
        return {n: np.concatenate([np.asarray(p[key][n], dtype) for p in parts]) for n in levels}

    lag = None
    if task.with_lag:
        lag = LagAccumulator(levels, task.p)
        for p in parts:
            for n in levels:
                lag.sums[n] = lag.sums[n] + p["lag"][n] if n in lag.sums else p["lag"][n].copy()
            lag.count += p["count"]
    gir = cat("girsanov") if task.shift_sigma is not None else {}
    return CoupledStudy(levels, cat("wz"), gir, cat("flags", bool), lag, seeds)


@dataclass(frozen=True)
class SupportReport:
    levels: list
    wz_medians: list
    girsanov_medians: list
    wz_quartiles: list
    girsanov_quartiles: list

    def rows(self):
        for i, n in enumerate(self.levels):
            yield {
                "level": n,
                "median_u_minus_phi_wn": self.wz_medians[i],
                "q25_u_minus_phi_wn": self.wz_quartiles[i][0],
                "q75_u_minus_phi_wn": self.wz_quartiles[i][1],
                "median_shifted_minus_phi_h": self.girsanov_medians[i],
                "q25_shifted_minus_phi_h": self.girsanov_quartiles[i][0],
                "q75_shifted_minus_phi_h": self.girsanov_quartiles[i][1],
            }


def support_report(study: CoupledStudy) -> SupportReport:
    if not study.girsanov:
        raise ConfigurationError("study was run without the shifted solution")
    med = lambda d: [float(np.median(d[n])) for n in study.levels]
    qs = lambda d: [tuple(float(v) for v in np.quantile(d[n], [0.25, 0.75])) for n in study.levels]
    return SupportReport(list(study.levels), med(study.wz), med(study.girsanov), qs(study.wz), qs(study.girsanov))


def support_diagnostics(seeds, h: Control, levels, system: SpectralSystem, sigma: Nonlinearity,
                        window: HolderWindow, drift: Nonlinearity = ZERO, truncation="full",
                        batch=16, mapper=map) -> SupportReport:
    """Distances ||u - Phi^{w^n}|| and ||u o T_n^h - Phi^h|| per level over replicas."""
    task = CoupledTask(system, wong_zakai_preset(sigma, drift), h, tuple(levels), window,
                       truncation=truncation, shift_sigma=sigma)
    return support_report(run_coupled(task, seeds, batch, mapper))
