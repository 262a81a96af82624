import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from wave3d import analysis as an
from wave3d.coefficients import ZERO, Coefficients, constant, stochastic_coefficients, tanh
from wave3d.errors import ConfigurationError, InsufficientDataError, ParameterError
from wave3d.solver import Control, DriveSpec, SpectralSystem, solve

SIGMA = tanh(1.0, 1.0)


@pytest.fixture(scope="module")
def system():
    return SpectralSystem.build(3.0, 16, 1.0, 1 / 32, 1.0)


@pytest.fixture(scope="module")
def window():
    return an.HolderWindow(0.25, 0.5, (1.3125,) * 3, 0.5625)


def brute_force_holder(g, dt, h, rho):
    """sup |g| + max over all distinct pairs, written as a plain double loop."""
    S, nx, ny, nz = g.shape
    pts = list(itertools.product(range(S), range(nx), range(ny), range(nz)))
    best = 0.0
    for a, b in itertools.combinations(pts, 2):
        d = abs(a[0] - b[0]) * dt + h * math.dist(a[1:], b[1:])
        best = max(best, abs(g[a] - g[b]) / d**rho)
    return float(np.max(np.abs(g))) + best


# window -----------------------------------------------------------------------------------


@pytest.mark.parametrize(
    "kwargs", [dict(rho=0.0), dict(rho=1.0), dict(t0=0.0), dict(side=-1.0), dict(policy="random")]
)
def test_window_validation(kwargs):
    base = dict(rho=0.5, t0=0.5, lower=(1.0,) * 3, side=0.5)
    base.update(kwargs)
    with pytest.raises(ParameterError):
        an.HolderWindow(**base)


def test_window_must_be_wraparound_safe(system):
    with pytest.raises(ConfigurationError):
        an.HolderWindow(0.5, 0.5, (0.2,) * 3, 0.5).check(system.grid)
    with pytest.raises(ConfigurationError):
        an.HolderWindow(0.5, 1.0, (1.0,) * 3, 0.5).check(system.grid)
    an.HolderWindow(0.5, 0.5, (0.5,) * 3, 1.5).check(system.grid)


def test_window_points(system, window):
    ix, iy, iz = window.point_indices(system.grid)
    assert ix.tolist() == [7, 8, 9, 10]


# Hoelder norm ------------------------------------------------------------------------------


@pytest.mark.parametrize("policy", ["dyadic", "all"])
@pytest.mark.parametrize("c", [0.0, 2.5, -1.75])
def test_constant_field_norm(policy, c):
    g = np.full((5, 3, 3, 3), c)
    assert an.holder_norm_values(g, 0.1, 0.2, 0.4, policy) == pytest.approx(abs(c))


def test_linear_in_time_norm():
    S = 9
    t = np.linspace(1.0, 2.0, S)
    g = np.broadcast_to(t[:, None, None, None], (S, 2, 2, 2)).copy()
    assert an.holder_norm_values(g, 1.0 / (S - 1), 0.1, 0.5, "all") == pytest.approx(3.0, rel=1e-12)


def test_all_policy_matches_brute_force():
    g = np.random.default_rng(0).standard_normal((3, 3, 2, 3))
    got = an.holder_norm_values(g, 0.07, 0.11, 0.35, "all")
    assert got == pytest.approx(brute_force_holder(g, 0.07, 0.11, 0.35), rel=1e-12)


def test_dyadic_policy_close_to_all_pairs_on_trajectory(system):
    traj = solve(system, stochastic_coefficients(SIGMA), DriveSpec(), [1, 2, 3], save_steps=range(33))
    g = np.moveaxis(traj.u[-6:, :, 5:11, 5:11, 5:11], 1, 0)
    dy = an.holder_norm_values(g, system.grid.dt, system.grid.h, 0.25, "dyadic")
    full = an.holder_norm_values(g, system.grid.dt, system.grid.h, 0.25, "all")
    assert np.all(dy <= full + 1e-12)
    assert np.all(dy >= 0.9 * full)


def test_pair_set_growth_is_monotone():
    g = np.random.default_rng(1).standard_normal((6, 5, 5, 5))
    dy = an.holder_norm_values(g, 0.1, 0.1, 0.3, "dyadic")
    full = an.holder_norm_values(g, 0.1, 0.1, 0.3, "all")
    capped = an.holder_norm_values(g, 0.1, 0.1, 0.3, "all", max_pairs=5000)
    assert capped <= full + 1e-12 and dy <= full + 1e-12


def test_empty_pair_set_rejected():
    with pytest.raises(ConfigurationError):
        an.holder_norm_values(np.ones((1, 1, 1, 1)), 0.1, 0.1, 0.5)


fields = arrays(np.float64, (3, 3, 2, 2), elements=st.floats(-10, 10))


@settings(max_examples=60, deadline=None)
@given(fields, fields, st.floats(-5, 5), st.sampled_from(["dyadic", "all"]))
def test_holder_norm_is_a_norm(f, g, a, policy):
    n = lambda x: float(an.holder_norm_values(x, 0.1, 0.2, 0.4, policy))
    assert n(a * f) == pytest.approx(abs(a) * n(f), rel=1e-12, abs=1e-12)
    assert n(f + g) <= n(f) + n(g) + 1e-9


@settings(max_examples=60, deadline=None)
@given(fields, st.floats(0.05, 0.5), st.floats(0.5, 0.95))
def test_monotone_in_rho_for_short_separations(f, r1, r2):
    # time step and spacing small enough that every pair distance is at most 1
    v1 = an.holder_norm_values(f, 0.1, 0.1, r1, "all")
    v2 = an.holder_norm_values(f, 0.1, 0.1, r2, "all")
    assert v1 <= v2 + 1e-12


def test_estimators_are_pure(system, window):
    traj = solve(system, stochastic_coefficients(SIGMA), DriveSpec(), [4, 5])
    a = an.holder_norm(traj, window)
    b = an.holder_norm(traj, window)
    assert np.array_equal(a, b)
    assert an.holder_norm(traj, window, replica=1) == a[1]


# moments -----------------------------------------------------------------------------------


def test_lp_moment_of_zeros():
    r = an.lp_moment(np.zeros(50), 2)
    assert (r.estimate, r.stderr, r.replicas) == (0.0, 0.0, 50)


@pytest.mark.parametrize("p, expected", [(2, 1.0), (4, 3.0)])
def test_lp_moment_of_normal(p, expected):
    x = np.random.default_rng(p).standard_normal(10000)
    r = an.lp_moment(x, p)
    assert abs(r.estimate - expected) <= 3 * r.stderr


def test_lp_moment_jackknife_equals_classical_for_mean():
    x = np.random.default_rng(3).standard_normal(200)
    r = an.lp_moment(x, 1)
    assert r.stderr == pytest.approx(np.std(np.abs(x), ddof=1) / math.sqrt(200), rel=1e-10)


def test_lp_moment_needs_replicas():
    with pytest.raises(InsufficientDataError):
        an.lp_moment(np.ones(29), 2)


# increment scaling ---------------------------------------------------------------------------


def test_linear_field_has_exponent_one():
    x = np.arange(16, dtype=float) * 0.2
    f = np.broadcast_to(x[:, None, None], (16, 16, 16))[None].repeat(3, axis=0)
    fit = an.increment_scaling(f, 2.0, "space", 0.2, (1, 2, 4))
    assert fit.exponent == pytest.approx(1.0, abs=0.02)
    tf = np.broadcast_to(np.arange(10.0)[None, :, None], (4, 10, 3))
    assert an.increment_scaling(tf, 3.0, "time", 0.1, (1, 2, 4)).exponent == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("seps", [(0, 1), (-1, 2), ()])
def test_nonpositive_separations_rejected(seps):
    with pytest.raises(ConfigurationError):
        an.increment_moments(np.zeros((2, 8, 8, 8)), 2, "space", seps)


def test_brownian_path_exponent_half():
    rng = np.random.default_rng(5)
    paths = np.cumsum(rng.standard_normal((400, 512)), axis=1) * math.sqrt(1 / 512)
    fit = an.increment_scaling(paths, 2.0, "time", 1 / 512, (1, 2, 4, 8))
    assert fit.exponent == pytest.approx(0.5, abs=0.02)


def test_weights_localise_moments():
    f = np.random.default_rng(0).standard_normal((4, 8, 8, 8))
    w = np.array([1, 0, 1, 0])
    full = an.increment_moments(f[[0, 2]], 2, "space", (1,))
    part = an.increment_moments(f, 2, "space", (1,), w)
    assert part[0] == pytest.approx(full[0] / 2)


# translation invariance -------------------------------------------------------------------------


def test_ks_identical_samples():
    x = np.random.default_rng(0).standard_normal(1000)
    assert an.ks_compare(x, x).statistic == 0.0


def test_ks_calibration():
    rng = np.random.default_rng(11)
    passes = sum(an.ks_compare(rng.standard_normal(1000), rng.standard_normal(1000)).passed for _ in range(100))
    assert passes >= 95


def test_ks_detects_shifted_mean():
    rng = np.random.default_rng(2)
    assert not an.ks_compare(rng.standard_normal(1000), 0.3 + rng.standard_normal(1000)).passed


def test_ks_critical_value_formula():
    assert an.ks_critical_value(1000, 1000) == pytest.approx(1.6276 * math.sqrt(2 / 1000), rel=1e-4)


def test_translation_invariance_checks():
    rng = np.random.default_rng(4)
    fields = rng.standard_normal((1000, 8, 8, 8))
    rows = an.translation_invariance_test(fields, 1.0, (2, 2, 2), [(0, 0, 0), (1, 0, 0), (2, 3, 1)])
    assert rows[0].statistic == 0.0 and all(r.passed for r in rows)
    with pytest.raises(ConfigurationError):
        an.translation_invariance_test(fields, 1.0, (2, 2, 2), [(6, 0, 0)])
    with pytest.raises(InsufficientDataError):
        an.translation_invariance_test(fields[:999], 1.0, (2, 2, 2), [(1, 0, 0)])


# convergence reports --------------------------------------------------------------------------


def test_wz_convergence_identical_inputs(system, window):
    x = solve(system, stochastic_coefficients(SIGMA), DriveSpec(), [1, 2], save_steps=range(33))
    d = an.coupled_distances(x, x, window)
    assert not np.any(d)
    rep = an.wz_convergence({3: d, 4: d}, None, lam=0.1)
    assert rep.moments == [0.0, 0.0] and rep.probabilities == [0.0, 0.0]


def test_wz_convergence_report_fields():
    d = {3: np.array([4.0, 2.0, 6.0]), 4: np.array([1.0, 1.0, 3.0]), 5: np.array([0.5, 0.25, 1.0])}
    flags = {3: [1, 1, 0], 4: [1, 1, 1], 5: [1, 0, 1]}
    rep = an.wz_convergence(d, flags, p=2.0)
    assert rep.lam == 4.0
    assert rep.moments[0] == pytest.approx((16 + 4) / 3)
    assert rep.moments_unlocalized[0] == pytest.approx((16 + 4 + 36) / 3)
    assert rep.probabilities == [pytest.approx(1 / 3), 0.0, 0.0]
    assert rep.localization[2] == pytest.approx(2 / 3)
    assert rep.slope < 0 and rep.prob_slope is None
    rows = list(rep.rows())
    assert rows[1]["median"] == 1.0 and len(rows) == 3


def test_uncoupled_inputs_rejected(system, window):
    a = solve(system, stochastic_coefficients(SIGMA), DriveSpec(), [1], save_steps=range(33))
    b = solve(system, stochastic_coefficients(SIGMA), DriveSpec(), [2], save_steps=range(33))
    with pytest.raises(ConfigurationError):
        an.coupled_distances(a, b, window)


def test_b_zero_gives_zero_distances(system, window):
    task = an.CoupledTask(
        system, Coefficients(A=SIGMA, b=constant(0.1)), Control.zero(system.grid), (3, 4), window
    )
    study = an.run_coupled(task, [7, 8, 9], batch=2)
    assert all(not np.any(study.wz[n]) for n in (3, 4))
    assert study.seeds == [7, 8, 9] and study.flags[3].dtype == bool


def test_support_vanishes_without_noise_or_control(system, window):
    rep = an.support_diagnostics([1, 2], Control.zero(system.grid), (3, 4), system, ZERO, window)
    assert rep.wz_medians == [0.0, 0.0] and rep.girsanov_medians == [0.0, 0.0]


def test_support_decreases_for_constant_sigma(system, window):
    rep = an.support_diagnostics(range(8), Control.zero(system.grid), (3, 4, 5), system, constant(1.0), window)
    m = rep.girsanov_medians
    assert m[0] > m[1] > m[2]
    assert len(list(rep.rows())) == 3


def test_run_coupled_is_order_independent_of_batching(system, window):
    task = an.CoupledTask(system, Coefficients(B=SIGMA), Control.zero(system.grid), (3, 4), window, with_lag=True)
    a = an.run_coupled(task, [1, 2, 3], batch=1)
    b = an.run_coupled(task, [1, 2, 3], batch=3)
    for n in (3, 4):
        assert np.array_equal(a.wz[n], b.wz[n])
        assert np.allclose(a.lag.sums[n], b.lag.sums[n], rtol=1e-14, atol=0)
    assert a.lag.count == 3


# lag discrepancy ----------------------------------------------------------------------------------


def test_source_free_lag_is_zero(system, window):
    traj = solve(system, Coefficients(), DriveSpec(stochastic_on=False))
    rep = an.lag_discrepancy_check(traj, [2, 3], 2.0, window, system)
    assert rep.sup_norms == [0.0, 0.0] and rep.slope is None
    assert rep.target == -1.0


def test_lag_slope_ordering_across_beta(window):
    slopes = {}
    for beta in (0.5, 1.5):
        s = SpectralSystem.build(3.0, 16, 1.0, 1 / 128, beta)
        acc = an.LagAccumulator([3, 4, 5, 6, 7], 2.0)
        for chunk in ([0, 1, 2, 3, 4, 5, 6, 7], [8, 9, 10, 11, 12, 13, 14, 15]):
            acc.add(solve(s, stochastic_coefficients(SIGMA), DriveSpec(), chunk), window, s)
        slopes[beta] = an.lag_discrepancy_check(acc, acc.levels, 2.0, window, s).slope
    assert slopes[0.5] < slopes[1.5]
