import math

import numpy as np
import pytest
from scipy.integrate import quad, solve_ivp

from agebranch import (
    AgeMeasure,
    BranchingModel,
    GroupSizeLaw,
    ImmigrationMechanism,
    OffspringLaw,
    OffspringPmf,
    ScalarField,
    SolverGrid,
    ergodicity_check,
    exponential_tail_identity,
    immigration_exponent_integral,
    mean_with_immigration,
    solve_exponent,
    solve_exponent_renewal_boundary,
    solve_mean,
    stationary_laplace,
    survival_lower_bound,
)

ONE = ScalarField.constant(1.0)
CRITICAL = BranchingModel(ONE, OffspringLaw.table({0: 0.5, 2: 0.5}))
PURE_DEATH = BranchingModel(ONE, OffspringLaw.table({0: 1.0}))
SUBCRITICAL = BranchingModel(ONE, OffspringLaw.table({0: 0.6, 2: 0.4}))
AGE_VARYING = BranchingModel(
    ScalarField.step([1.5], [2.0, 0.5]),
    OffspringLaw((OffspringPmf.table({0: 0.3, 2: 0.7}), OffspringPmf.table({0: 0.8, 2: 0.2})), (1.5,)),
)


def critical_exponent_closed_form(theta: float, t: float) -> float:
    # constant data reduce the renewal equation to w' = (1 - w)^2 / 2
    a = 1.0 - math.exp(-theta)
    return -math.log(1.0 - a / (1.0 + t * a / 2.0))


def pure_death_exponent_closed_form(theta: float, t: float) -> float:
    # w' = 1 - w from the same reduction with g == 1
    return -math.log(1.0 - (1.0 - math.exp(-theta)) * math.exp(-t))


def test_closed_form_rederived_by_high_accuracy_integration():
    w0 = math.exp(-1.0)
    ode = solve_ivp(
        lambda s, w: 0.5 * (1.0 - w[0]) ** 2, (0.0, 1.0), [w0], rtol=1e-12, atol=1e-14
    )
    assert math.exp(-critical_exponent_closed_form(1.0, 1.0)) == pytest.approx(
        float(ode.y[0, -1]), abs=1e-10
    )
    ode2 = solve_ivp(lambda s, w: 1.0 - w[0], (0.0, 2.0), [w0], rtol=1e-12, atol=1e-14)
    assert math.exp(-pure_death_exponent_closed_form(1.0, 2.0)) == pytest.approx(
        float(ode2.y[0, -1]), abs=1e-10
    )


def test_grid_validation():
    with pytest.raises(ValueError):
        SolverGrid(0.3, 1.0)  # horizon not an integral number of steps
    with pytest.raises(ValueError):
        SolverGrid(1e-3, 1.0, "simpson")
    grid = SolverGrid(0.25, 1.0)
    assert grid.n_steps == 4
    assert list(grid.times()) == [0.0, 0.25, 0.5, 0.75, 1.0]


def test_contraction_precondition():
    fast = BranchingModel(ScalarField.constant(30.0), OffspringLaw.table({0: 1.0}))
    with pytest.raises(ValueError, match="smaller dt"):
        solve_exponent(fast, ONE, SolverGrid(0.05, 1.0))


def test_exponent_zero_field_is_fixed_point():
    sol = solve_exponent(CRITICAL, ScalarField.constant(0.0), SolverGrid(1e-2, 1.0))
    assert np.all(sol.boundary == 0.0)
    assert sol.at(0.7, 1.3) == 0.0


def test_exponent_initial_condition_exact():
    f = ScalarField.exp_decay(1.0, 0.7, 0.2)
    sol = solve_exponent(AGE_VARYING, f, SolverGrid(1e-2, 1.0))
    assert sol.boundary[0] == pytest.approx(float(f(0.0)), abs=1e-14)
    assert sol.at(0.0, 2.3) == float(f(2.3))


def test_exponent_critical_binary_closed_form():
    sol = solve_exponent(CRITICAL, ONE, SolverGrid(1e-3, 1.0))
    exact = critical_exponent_closed_form(1.0, 1.0)
    assert exact == pytest.approx(0.6545281299218776, abs=1e-12)  # frozen
    assert sol.boundary_at(1.0) == pytest.approx(exact, abs=2e-8)
    # constant data make the exponent age-independent
    assert sol.at(1.0, 2.5) == pytest.approx(exact, abs=2e-8)
    mid = critical_exponent_closed_form(1.0, 0.5)
    assert sol.boundary_at(0.5) == pytest.approx(mid, abs=2e-8)


def test_exponent_pure_death_closed_form():
    theta = 0.8
    f = ScalarField.constant(theta)
    sol = solve_exponent(PURE_DEATH, f, SolverGrid(1e-3, 2.0))
    for t in (0.5, 1.0, 2.0):
        assert sol.boundary_at(t) == pytest.approx(
            pure_death_exponent_closed_form(theta, t), abs=1e-7
        )


def test_convergence_orders_exponent():
    from agebranch import observed_orders

    exact = critical_exponent_closed_form(1.0, 1.0)
    trap = observed_orders(CRITICAL, ONE, 1.0, exact, [4e-3, 2e-3, 1e-3], "trapezoid")
    rect = observed_orders(CRITICAL, ONE, 1.0, exact, [4e-3, 2e-3, 1e-3], "rectangle")
    assert all(abs(o - 2.0) <= 0.3 for o in trap)
    assert all(abs(o - 1.0) <= 0.3 for o in rect)


def test_convergence_orders_mean():
    from agebranch import observed_orders

    exact = math.exp(-0.2)
    trap = observed_orders(SUBCRITICAL, ONE, 1.0, exact, [4e-3, 2e-3, 1e-3], "trapezoid", "mean")
    rect = observed_orders(SUBCRITICAL, ONE, 1.0, exact, [4e-3, 2e-3, 1e-3], "rectangle", "mean")
    assert all(abs(o - 2.0) <= 0.3 for o in trap)
    assert all(abs(o - 1.0) <= 0.3 for o in rect)


def test_mean_pure_death_is_pure_discount():
    sol = solve_mean(PURE_DEATH, ONE, SolverGrid(1e-3, 1.0))
    assert sol.boundary_at(1.0) == pytest.approx(math.exp(-1.0), abs=1e-12)
    assert sol.at(1.0, 4.0) == pytest.approx(math.exp(-1.0), abs=1e-12)


def test_mean_zero_field():
    sol = solve_mean(SUBCRITICAL, ScalarField.constant(0.0), SolverGrid(1e-2, 1.0))
    assert np.all(sol.boundary == 0.0)


def test_mean_subcritical_closed_form():
    sol = solve_mean(SUBCRITICAL, ONE, SolverGrid(1e-3, 2.0))
    for t in (0.5, 1.0, 2.0):
        assert sol.boundary_at(t) == pytest.approx(math.exp(-0.2 * t), abs=1e-7)
    assert sol.at(2.0, 1.0) == pytest.approx(math.exp(-0.4), abs=1e-7)
    assert math.exp(-0.4) == pytest.approx(0.6703200460356393, abs=1e-12)  # frozen


def test_mean_forms_agree():
    smooth = BranchingModel(ScalarField.exp_decay(1.0, 0.8, 0.4), OffspringLaw.geometric(0.35))
    for model in (SUBCRITICAL, AGE_VARYING, smooth):
        grid = SolverGrid(1e-3, 1.0)
        a = solve_mean(model, ONE, grid, form="discounted")
        b = solve_mean(model, ONE, grid, form="direct")
        assert np.max(np.abs(a.boundary - b.boundary)) < 5e-6


def test_mean_pure_death_varying_hazard_closed_form():
    # the kernel must reduce to the pure survival discount along the exact ray
    alpha = ScalarField.exp_decay(1.0, 0.8, 0.4)
    model = BranchingModel(alpha, OffspringLaw.table({0: 1.0}))
    hazard, _ = quad(lambda s: float(alpha(s)), 0.0, 1.0, epsabs=1e-13)
    for form in ("discounted", "direct"):
        sol = solve_mean(model, ONE, SolverGrid(1e-3, 1.0), form=form)
        assert sol.boundary_at(1.0) == pytest.approx(math.exp(-hazard), abs=1e-6)


def test_exponent_forms_agree():
    # characteristic fan vs the survival-discounted renewal discretization
    for model in (CRITICAL, AGE_VARYING):
        grid = SolverGrid(2e-3, 1.0)
        fan = solve_exponent(model, ONE, grid).boundary
        ren = solve_exponent_renewal_boundary(model, ONE, grid)
        assert np.max(np.abs(fan - ren)) < 5e-6


def test_exponent_semigroup_property():
    # u_{t+s} f == u_t (u_s f) within scheme tolerance, via a table field
    s_, t_ = 0.5, 0.75
    grid = SolverGrid(2.5e-3, 1.5)
    sol = solve_exponent(AGE_VARYING, ONE, grid)
    xs = np.linspace(0.0, 4.0, 801)
    inner = ScalarField.pwlinear(xs, [sol.at(s_, x) for x in xs])
    outer = solve_exponent(AGE_VARYING, inner, grid)
    for x in (0.0, 0.4, 1.1, 2.0):
        assert outer.at(t_, x) == pytest.approx(sol.at(t_ + s_, x), abs=2e-3)


def test_exponent_monotone_in_field():
    f1 = ScalarField.constant(0.5)
    f2 = ScalarField.constant(1.0)
    grid = SolverGrid(2e-3, 1.0)
    u1 = solve_exponent(AGE_VARYING, f1, grid, keep_lattice=True)
    u2 = solve_exponent(AGE_VARYING, f2, grid, keep_lattice=True)
    assert np.all(u1.boundary <= u2.boundary + 1e-10)
    l1, l2 = u1.lattice_exponents(), u2.lattice_exponents()
    mask = ~np.isnan(l1)
    assert np.all(l1[mask] <= l2[mask] + 1e-10)


def test_exponent_bounds_on_lattice():
    # single-particle survival lower bound and domination by the mean kernel
    grid = SolverGrid(2e-3, 1.0)
    c0, c1, _ = AGE_VARYING.constants()
    usol = solve_exponent(AGE_VARYING, ONE, grid, keep_lattice=True)
    msol = solve_mean(AGE_VARYING, ONE, grid, keep_lattice=True)
    u = usol.lattice_exponents()
    p = msol.lattice_values()
    times = grid.times()
    fv = np.asarray(ONE(times))
    for i in range(grid.n_steps + 1):
        urow, prow = u[i, i:], p[i, i:]
        lower = -np.expm1(-fv[i:]) * math.exp(-c1 * times[i])
        assert np.all(urow >= lower - 1e-6)
        assert np.all(urow <= prow + 1e-5)
        assert np.all(np.exp(-urow) <= 1.0 + 1e-12)
        assert np.all(np.exp(-urow) > 0.0)


def test_survival_lower_bound_values():
    assert survival_lower_bound(CRITICAL, ScalarField.constant(0.0), 1.0, 0.0) == 0.0
    assert survival_lower_bound(CRITICAL, ONE, 1.0, 3.0) == pytest.approx(
        0.23254415793482963, abs=1e-12
    )
    # large theta approaches the pure survival discount exp(-t)
    big = survival_lower_bound(CRITICAL, ScalarField.constant(40.0), 1.0, 0.0)
    assert big == pytest.approx(math.exp(-1.0), abs=1e-9)


def test_survival_lower_bound_nonconstant_alpha_quadrature():
    alpha = ScalarField.exp_decay(1.0, 1.0, 0.5)
    model = BranchingModel(alpha, OffspringLaw.table({0: 1.0}))
    x, t = 0.7, 1.3
    hazard, _ = quad(lambda s: float(alpha(x + s)), 0.0, t, epsabs=1e-13)
    expected = (1 - math.exp(-1.0)) * math.exp(-hazard)
    assert survival_lower_bound(model, ONE, t, x, dt=1e-4) == pytest.approx(expected, abs=1e-7)


def test_immigration_exponent_integral_trivial_cases():
    grid = SolverGrid(1e-2, 1.0)
    none = ImmigrationMechanism.none()
    val, psis = immigration_exponent_integral(PURE_DEATH, none, ONE, grid)
    assert val == 0.0 and np.all(psis == 0.0)
    singles = ImmigrationMechanism.single_arrivals(2.0)
    val0, _ = immigration_exponent_integral(PURE_DEATH, singles, ScalarField.constant(0.0), grid)
    assert val0 == pytest.approx(0.0, abs=1e-14)


def test_immigration_exponent_integral_closed_form():
    # pure death singles: psi(u_s f) = rate (1 - e^-theta) e^-s
    theta, T, rate = 1.0, 2.0, 1.0
    imm = ImmigrationMechanism.single_arrivals(rate)
    grid = SolverGrid(1e-3, T)
    val, psis = immigration_exponent_integral(PURE_DEATH, imm, ScalarField.constant(theta), grid)
    exact = rate * (1 - math.exp(-theta)) * (1 - math.exp(-T))
    assert val == pytest.approx(exact, abs=1e-6)
    oracle, _ = quad(
        lambda s: rate * (1 - math.exp(-pure_death_exponent_closed_form(theta, s))), 0, T,
        epsabs=1e-12,
    )
    assert val == pytest.approx(oracle, abs=1e-6)


def test_immigration_integral_with_aged_atoms():
    # groups arriving at age 2: the exponent is evaluated along the age-2 ray
    imm = ImmigrationMechanism.finite_support([(1.5, AgeMeasure.point(2.0))])
    grid = SolverGrid(1e-3, 1.0)
    val, _ = immigration_exponent_integral(PURE_DEATH, imm, ONE, grid)
    oracle, _ = quad(
        lambda s: 1.5 * (1 - math.exp(-pure_death_exponent_closed_form(1.0, s))), 0.0, 1.0,
        epsabs=1e-12,
    )
    # constant-alpha pure death exponent is age-independent
    assert val == pytest.approx(oracle, abs=1e-6)


def test_mean_with_immigration_queue_formula():
    # infinite-server queue: E mass at T = rate * (1 - e^-T)
    imm = ImmigrationMechanism.single_arrivals(3.0)
    grid = SolverGrid(1e-3, 2.0)
    val = mean_with_immigration(PURE_DEATH, imm, ONE, AgeMeasure.empty(), grid)
    assert val == pytest.approx(3.0 * (1 - math.exp(-2.0)), abs=1e-6)
    # with initial particles the branching part adds m0 e^-T
    val2 = mean_with_immigration(PURE_DEATH, imm, ONE, AgeMeasure.point(0.0, 4), grid)
    assert val2 == pytest.approx(3.0 * (1 - math.exp(-2.0)) + 4 * math.exp(-2.0), abs=1e-6)


def test_mean_with_immigration_subcritical_long_run():
    imm = ImmigrationMechanism.single_arrivals(1.0)
    grid = SolverGrid(5e-3, 50.0)
    val = mean_with_immigration(SUBCRITICAL, imm, ONE, AgeMeasure.empty(), grid)
    assert val == pytest.approx((1.0 - math.exp(-0.2 * 50.0)) / 0.2, abs=1e-4)


def test_ergodicity_check_trichotomy():
    singles = ImmigrationMechanism.single_arrivals(3.0)
    assert ergodicity_check(SUBCRITICAL, singles).status == "ergodic"
    assert ergodicity_check(PURE_DEATH, singles).status == "ergodic"
    heavy = ImmigrationMechanism.parametric(1.0, GroupSizeLaw.log_squared_tail())
    assert ergodicity_check(SUBCRITICAL, heavy).status == "not_ergodic"
    assert ergodicity_check(CRITICAL, singles).status == "unknown"
    declared = ImmigrationMechanism.parametric(
        1.0, GroupSizeLaw.declared({1: 0.9}, undeclared_tail=0.1)
    )
    assert ergodicity_check(SUBCRITICAL, declared).status == "unknown"
    super_ = BranchingModel(ONE, OffspringLaw.table({0: 0.3, 2: 0.7}))
    assert ergodicity_check(super_, singles).status == "unknown"


def test_stationary_laplace_queue_value():
    imm = ImmigrationMechanism.single_arrivals(3.0)
    rep = stationary_laplace(PURE_DEATH, imm, ONE, 1e-6)
    exact = math.exp(-3.0 * (1.0 - math.exp(-1.0)))
    assert exact == pytest.approx(0.15011378939830683, abs=1e-15)  # frozen
    assert abs(rep.value - exact) <= 1e-6
    assert rep.tail_bound + rep.quadrature_error <= 1e-6


def test_stationary_laplace_monotone_to_one():
    imm = ImmigrationMechanism.single_arrivals(2.0)
    thetas = [2.0, 1.0, 0.5, 0.25, 0.05]
    vals = [stationary_laplace(PURE_DEATH, imm, ScalarField.constant(t), 1e-6).value for t in thetas]
    assert all(v1 < v2 for v1, v2 in zip(vals, vals[1:]))
    assert vals[-1] < 1.0
    assert stationary_laplace(PURE_DEATH, imm, ScalarField.constant(0.0), 1e-6).value == 1.0


def test_stationary_laplace_refusals():
    singles = ImmigrationMechanism.single_arrivals(1.0)
    with pytest.raises(ValueError, match="not certified"):
        stationary_laplace(CRITICAL, singles, ONE)
    heavy = ImmigrationMechanism.parametric(1.0, GroupSizeLaw.log_squared_tail())
    with pytest.raises(ValueError, match="not certified"):
        stationary_laplace(SUBCRITICAL, heavy, ONE)
    # ergodic but infinite mean group size: the tail bound is vacuous
    zeta_heavy = ImmigrationMechanism.parametric(1.0, GroupSizeLaw.zeta_tail(1.8))
    assert ergodicity_check(SUBCRITICAL, zeta_heavy).status == "ergodic"
    with pytest.raises(ValueError, match="infinite mean"):
        stationary_laplace(SUBCRITICAL, zeta_heavy, ONE)


def test_stationary_laplace_zero_rate_is_one():
    rep = stationary_laplace(SUBCRITICAL, ImmigrationMechanism.none(), ONE)
    assert rep.value == 1.0


def test_stationary_laplace_group_mechanism_closed_form():
    # pure-death pairs at age 0: psi(u_s) = rate (1 - w(s)^2) with
    # w(s) = 1 - (1 - e^-theta) e^-s, so the full integral is 2b - b^2/2
    imm = ImmigrationMechanism.finite_support([(1.0, AgeMeasure.point(0.0, 2))])
    rep = stationary_laplace(PURE_DEATH, imm, ONE, 1e-6)
    b = 1.0 - math.exp(-1.0)
    exact = 2.0 * b - b * b / 2.0
    assert rep.exponent_integral == pytest.approx(exact, abs=1e-6)
    assert rep.value == pytest.approx(math.exp(-exact), abs=1e-6)


def test_exponential_tail_identity_series_value():
    lhs, rhs = exponential_tail_identity(1.0, 1.0, 1)
    series = 0.7965995992970534  # sum of (-1)^(k+1) / (k k!)
    assert lhs == pytest.approx(series, abs=1e-8)
    assert rhs == pytest.approx(series, abs=1e-9)


def test_exponential_tail_identity_properties():
    lhs1, _ = exponential_tail_identity(1.0, 1.0, 1)
    lhs2, _ = exponential_tail_identity(1.0, 2.0, 1)
    assert lhs2 == pytest.approx(lhs1 / 2.0, abs=2e-9)  # c scales the integral
    small, _ = exponential_tail_identity(1e-8, 1.0, 1)
    assert small < 1e-6  # vanishes with a
    with pytest.raises(ValueError):
        exponential_tail_identity(-1.0, 1.0, 1)


def test_exponential_tail_identity_grid():
    worst = 0.0
    for a in (0.5, 1.0, 2.0):
        for c in (0.5, 1.0, 2.0):
            for n in (1, 2, 5):
                lhs, rhs = exponential_tail_identity(a, c, n)
                worst = max(worst, abs(lhs - rhs))
    assert worst <= 1e-8


def test_evaluator_consistency_along_rays():
    # smooth data: the single-ray evaluator and the vectorized fan follow the
    # same arithmetic, so they agree to rounding
    smooth = BranchingModel(ScalarField.exp_decay(1.0, 0.8, 0.4), OffspringLaw.geometric(0.35))
    grid = SolverGrid(2e-3, 1.0)
    sol = solve_exponent(smooth, ONE, grid)
    ray = sol.along_ray(0.8)
    times = grid.times()
    for j in (100, 250, 500):
        assert sol.at(times[j], 0.8) == pytest.approx(ray[j], abs=1e-12)
    msol = solve_mean(smooth, ONE, grid)
    mray = msol.along_ray(0.8)
    for j in (100, 250, 500):
        assert msol.at(times[j], 0.8) == pytest.approx(mray[j], abs=1e-12)


def test_evaluator_consistency_discontinuous_rates():
    # a step rate makes nodes near the threshold representation-sensitive
    # (fan ages a + k dt vs ray ages (a + t) - r differ by one ulp), which can
    # flip a single node across the jump: agreement is one-node-error loose
    grid = SolverGrid(2e-3, 1.0)
    sol = solve_exponent(AGE_VARYING, ONE, grid)
    ray = sol.along_ray(0.8)
    times = grid.times()
    for j in (100, 250, 500):
        assert sol.at(times[j], 0.8) == pytest.approx(ray[j], abs=5 * grid.dt)


def test_lattice_guard():
    with pytest.raises(ValueError, match="lattice"):
        solve_exponent(CRITICAL, ONE, SolverGrid(1e-4, 1.0), keep_lattice=True)
