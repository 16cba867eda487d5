"""Deterministic solvers for the population's Laplace and moment functionals.

Both governing equations couple values only along characteristics (rays where
age minus time is constant) plus the boundary trace at age zero, so the
numerics march a triangular *fan* of one-dimensional Volterra problems,
vectorized across characteristics, closing the boundary value at each step.

Laplace exponent (``exponent``): writing ``w_y(r) = exp(-u_r f(y - r))`` on
the ray through label ``y``, with boundary trace ``b(r) = u_r f(0)``,

    w_y(t) = exp(-f(y)) + integral_0^t alpha(y-r) [g(y-r, exp(-b(r))) - w_y(r)] dr

is marched forward in ``r``; at the diagonal ``y = t`` the new boundary value
appears implicitly and is resolved by a damped fixed point (the quadrature
endpoint's contraction needs ``dt * sup alpha < 1``, enforced up front).

First-moment kernel (``mean``): writing ``phi_y(t)`` for the kernel applied to
f along the ray through label ``y``, with boundary trace ``m_b(r)``, the
characteristic form is ``d phi/dt = alpha(y-t) [mean(y-t) m_b(t) - phi(t)]``:
offspring are born at age zero, so the reproduction term feeds on the
boundary trace while the compensation carries the ray value (this is the
field-derivative of the exponent equation, and the pure-death closed form
``f(y) exp(-cumulative hazard)`` solves it exactly).  The default integration
uses the survival-discounted renewal shape

    phi_y(t) = exp(-A_y(t)) [ f(y) + integral_0^t exp(A_y(r)) alpha m  m_b(r) dr ]

with ``A_y(t)`` the cumulative hazard along the ray.  This form is exact for
models whose mean offspring number vanishes (the integral term is zero), which
a plain quadrature of the bare characteristic ODE cannot achieve at the same
step size; the bare form remains available as ``form="direct"`` and the two
are cross-checked in the test suite.

Quadrature is rectangle (left endpoint, first order) or trapezoid (second
order, implicit endpoints solved exactly or by fixed point).  Interpolation of
boundary traces between nodes is linear throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
import numpy as np
from scipy.integrate import quad as _quad

from .measures import AgeMeasure, ScalarField
from .models import BranchingModel, ImmigrationMechanism

__all__ = [
    "SolverGrid",
    "ExponentSolution",
    "MeanSolution",
    "solve_exponent",
    "solve_exponent_renewal_boundary",
    "solve_mean",
    "survival_lower_bound",
    "immigration_exponent_integral",
    "mean_with_immigration",
    "StationaryReport",
    "stationary_laplace",
    "ErgodicityReport",
    "ergodicity_check",
    "exponential_tail_identity",
]

_FIXED_POINT_TOL = 1e-12
_FIXED_POINT_MAX_ITER = 200
_LATTICE_MAX_STEPS = 4096


@dataclass(frozen=True)
class SolverGrid:
    """Uniform time grid with a quadrature rule for the marching schemes."""

    dt: float
    horizon: float
    quadrature: str = "trapezoid"

    def __post_init__(self) -> None:
        if self.dt <= 0 or self.horizon <= 0:
            raise ValueError("dt and horizon must be > 0")
        if self.quadrature not in ("rectangle", "trapezoid"):
            raise ValueError("quadrature must be 'rectangle' or 'trapezoid'")
        n = round(self.horizon / self.dt)
        if n < 1 or abs(n * self.dt - self.horizon) > 1e-9 * max(1.0, self.horizon):
            raise ValueError("horizon must be an integral number of steps")

    @property
    def n_steps(self) -> int:
        return round(self.horizon / self.dt)

    @property
    def order(self) -> int:
        return 2 if self.quadrature == "trapezoid" else 1

    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    def refined(self) -> "SolverGrid":
        return SolverGrid(self.dt / 2.0, self.horizon, self.quadrature)

    def with_horizon(self, horizon: float) -> "SolverGrid":
        n = max(1, math.ceil(horizon / self.dt - 1e-12))
        return SolverGrid(self.dt, n * self.dt, self.quadrature)

    def to_dict(self) -> dict:
        return {"dt": self.dt, "horizon": self.horizon, "quadrature": self.quadrature}

    @classmethod
    def from_dict(cls, d: dict) -> "SolverGrid":
        return cls(d["dt"], d["horizon"], d.get("quadrature", "trapezoid"))


def _check_contraction(model: BranchingModel, grid: SolverGrid) -> None:
    _, c1, _ = model.constants()
    if grid.dt * c1 >= 1.0:
        raise ValueError(
            f"dt * sup(alpha) = {grid.dt * c1:.3g} >= 1: the implicit endpoint "
            "iteration is not a contraction; use a smaller dt"
        )


def _clip_unit(w: float) -> float:
    # w = exp(-exponent) must stay in (0, 1]; tolerate only rounding spill.
    if w > 1.0 + 1e-9:
        raise RuntimeError(f"exponent marching left the unit interval (w={w!r})")
    return min(max(w, 1e-300), 1.0)


def _march_exponent_fan(
    model: BranchingModel,
    f: ScalarField,
    grid: SolverGrid,
    offset: float = 0.0,
    boundary_w: np.ndarray | None = None,
    keep_lattice: bool = False,
) -> tuple[np.ndarray, np.ndarray | None]:
    """March the exponent fan with ray labels ``offset + t_j``.

    Returns the diagonal values ``w[j] = exp(-u_{t_j} f(offset))`` and, when
    requested, the full triangular lattice ``L[i, j] = exp(-u_{r_i} f(offset +
    (j - i) dt))`` for ``j >= i``.  When ``boundary_w`` is None this *is* the
    boundary fan (offset must be 0) and the diagonal doubles as the boundary.
    """
    is_boundary = boundary_w is None
    if is_boundary and offset != 0.0:
        raise ValueError("the boundary fan must have offset 0")
    _check_contraction(model, grid)
    n = grid.n_steps
    dt = grid.dt
    trapezoid = grid.quadrature == "trapezoid"
    alpha, offspring = model.alpha, model.offspring

    ages = offset + dt * np.arange(n + 1)
    alpha_g = np.asarray(alpha(ages), dtype=np.float64)
    ridx = offspring.regime_indices(ages)
    W = np.exp(-np.asarray(f(ages), dtype=np.float64))
    diag = np.empty(n + 1)
    diag[0] = W[0]
    lattice = None
    if keep_lattice:
        if n > _LATTICE_MAX_STEPS:
            raise ValueError(f"lattice storage capped at {_LATTICE_MAX_STEPS} steps")
        lattice = np.full((n + 1, n + 1), np.nan)
        lattice[0] = W

    # boundary trace as w-values: the fan reads exp(-b(r_i)) at every step
    if is_boundary:
        zb_arr = np.empty(n + 1)
        zb_arr[0] = _clip_unit(W[0])
    else:
        zb_arr = np.exp(-np.asarray(boundary_w, dtype=np.float64))
        if len(zb_arr) != n + 1:
            raise ValueError("boundary trace length does not match the grid")
    g_at = offspring.g_by_regime(float(zb_arr[0]))[ridx]

    for i in range(n):
        m = n - i
        w_slice = W[i + 1 :]
        F_left = alpha_g[1 : m + 1] * (g_at[1 : m + 1] - w_slice)
        if not trapezoid:
            W[i + 1 :] = w_slice + dt * F_left
            if is_boundary:
                zb_arr[i + 1] = _clip_unit(float(W[i + 1]))
            g_at = offspring.g_by_regime(float(zb_arr[i + 1]))[ridx]
        else:
            if is_boundary:
                # diagonal: the new boundary value appears inside its own
                # endpoint term g(0, w+) and as the unknown itself
                c_known = float(w_slice[0] + (dt / 2.0) * F_left[0])
                a0 = float(alpha_g[0])
                denom = 1.0 + (dt / 2.0) * a0
                regime0 = offspring.regimes[int(ridx[0])]
                w_plus = min(max(c_known / denom, 0.0), 1.0)
                for _ in range(_FIXED_POINT_MAX_ITER):
                    w_next = (c_known + (dt / 2.0) * a0 * regime0.g(min(max(w_plus, 0.0), 1.0))) / denom
                    if abs(w_next - w_plus) <= _FIXED_POINT_TOL:
                        w_plus = w_next
                        break
                    w_plus = w_next
                else:
                    raise RuntimeError(
                        "boundary fixed point did not converge; use a smaller dt"
                    )
                zb_arr[i + 1] = _clip_unit(w_plus)
            g_at = offspring.g_by_regime(float(zb_arr[i + 1]))[ridx]
            W[i + 1 :] = (
                w_slice + (dt / 2.0) * (F_left + alpha_g[0:m] * g_at[0:m])
            ) / (1.0 + (dt / 2.0) * alpha_g[0:m])
            if is_boundary:
                W[i + 1] = zb_arr[i + 1]
        diag[i + 1] = W[i + 1]
        if lattice is not None:
            lattice[i + 1, i + 1 :] = W[i + 1 :]
    return diag, lattice


@dataclass(frozen=True)
class ExponentSolution:
    """The exponent of the population Laplace functional on a grid.

    ``boundary[j]`` is the exponent at age 0 and time ``j * dt``; arbitrary
    points are reached by integrating along the ray through them, reading the
    boundary trace (linearly interpolated between nodes).
    """

    model: BranchingModel
    f: ScalarField
    grid: SolverGrid
    boundary: np.ndarray
    lattice_w: np.ndarray | None = None

    @property
    def order(self) -> int:
        return self.grid.order

    def boundary_at(self, t: float) -> float:
        if t < -1e-12 or t > self.grid.horizon * (1 + 1e-12):
            raise ValueError(f"time {t} outside the solved horizon {self.grid.horizon}")
        return float(np.interp(t, self.grid.times(), self.boundary))

    def along_ray(self, offset: float) -> np.ndarray:
        """Exponent at a fixed age ``offset`` for every grid time."""
        if offset == 0.0:
            return self.boundary.copy()
        diag, _ = _march_exponent_fan(
            self.model, self.f, self.grid, offset=offset, boundary_w=self.boundary
        )
        return -np.log(np.maximum(diag, 1e-300))

    def at(self, t: float, x: float) -> float:
        """Exponent value at time t and age x; deterministic ray integration."""
        if t < 0 or x < 0:
            raise ValueError("t and x must be >= 0")
        if t == 0.0:
            return float(self.f(x))
        if t > self.grid.horizon * (1 + 1e-12):
            raise ValueError(f"time {t} outside the solved horizon {self.grid.horizon}")
        if x == 0.0:
            return self.boundary_at(t)
        dt = self.grid.dt
        trapezoid = self.grid.quadrature == "trapezoid"
        alpha, offspring = self.model.alpha, self.model.offspring
        y = x + t
        w = math.exp(-float(self.f(y)))
        r = 0.0
        while r < t - 1e-15:
            h = min(dt, t - r)
            age_l = y - r
            zb_l = math.exp(-self.boundary_at(r))
            F_l = float(alpha(age_l)) * (offspring.g(age_l, zb_l) - w)
            if not trapezoid:
                w = w + h * F_l
            else:
                age_r = y - (r + h)
                a_r = float(alpha(age_r))
                zb_r = math.exp(-self.boundary_at(r + h))
                g_r = offspring.g(age_r, min(max(zb_r, 0.0), 1.0))
                w = (w + (h / 2.0) * (F_l + a_r * g_r)) / (1.0 + (h / 2.0) * a_r)
            r += h
        return -math.log(_clip_unit(w))

    def lattice_exponents(self) -> np.ndarray:
        """Exponent values on the triangular (time, age) lattice, NaN outside."""
        if self.lattice_w is None:
            raise ValueError("solution was built without keep_lattice=True")
        return -np.log(np.maximum(self.lattice_w, 1e-300))


def solve_exponent(
    model: BranchingModel, f: ScalarField, grid: SolverGrid, keep_lattice: bool = False
) -> ExponentSolution:
    """Solve the nonlinear renewal equation for the Laplace exponent.

    The returned evaluator is deterministic; the exponent is nonnegative with
    ``u_0 f = f`` exactly by construction.
    """
    diag, lattice = _march_exponent_fan(model, f, grid, keep_lattice=keep_lattice)
    boundary = -np.log(np.maximum(diag, 1e-300))
    return ExponentSolution(model, f, grid, boundary, lattice)


def solve_exponent_renewal_boundary(
    model: BranchingModel, f: ScalarField, grid: SolverGrid
) -> np.ndarray:
    """Boundary trace via the survival-discounted renewal form (cross-check).

    Marches ``exp(-b(t)) = exp(-f(t) - A(t)) + integral_0^t exp(-A(s)) alpha(s)
    g(s, exp(-b(t-s))) ds`` directly; an independent discretization of the same
    exponent used to validate the characteristic fan.
    """
    _check_contraction(model, grid)
    n, dt = grid.n_steps, grid.dt
    trapezoid = grid.quadrature == "trapezoid"
    alpha, offspring = model.alpha, model.offspring
    s = dt * np.arange(n + 1)
    alpha_g = np.asarray(alpha(s), dtype=np.float64)
    ridx = offspring.regime_indices(s)
    n_reg = len(offspring.regimes)
    # cumulative hazard from age 0 (trapezoid for order 2, left rule otherwise)
    A = np.zeros(n + 1)
    if trapezoid:
        A[1:] = np.cumsum((dt / 2.0) * (alpha_g[:-1] + alpha_g[1:]))
    else:
        A[1:] = np.cumsum(dt * alpha_g[:-1])
    decay = np.exp(-A)
    fvals = np.asarray(f(s), dtype=np.float64)

    Z = np.empty(n + 1)  # exp(-b(t_j))
    Z[0] = _clip_unit(math.exp(-fvals[0]))
    G = np.empty((n_reg, n + 1))  # g by regime at each known Z
    G[:, 0] = offspring.g_by_regime(float(Z[0]))
    kernel = decay * alpha_g
    for j in range(1, n + 1):
        idx = np.arange(j + 1)
        conv = kernel[idx] * G[ridx[idx], j - idx]  # entry j uses the unknown Z[j]
        base = math.exp(-fvals[j]) * decay[j]
        if not trapezoid:
            # left rectangle over s excludes s = t, includes the implicit s = 0 term
            known = base + dt * float(np.sum(conv[:j])) - dt * conv[0]
            w0 = dt * kernel[0]
        else:
            known = base + (dt / 2.0) * conv[j] + dt * float(np.sum(conv[1:j]))
            w0 = (dt / 2.0) * kernel[0]
        regime0 = offspring.regimes[int(ridx[0])]
        z = min(max(known + w0 * G[ridx[0], j - 1], 0.0), 1.0)  # predictor
        for _ in range(_FIXED_POINT_MAX_ITER):
            z_next = known + w0 * regime0.g(min(max(z, 0.0), 1.0))
            if abs(z_next - z) <= _FIXED_POINT_TOL:
                z = z_next
                break
            z = z_next
        else:
            raise RuntimeError("renewal fixed point did not converge; use a smaller dt")
        Z[j] = _clip_unit(z)
        G[:, j] = offspring.g_by_regime(float(Z[j]))
    return -np.log(Z)


def _march_mean_fan(
    model: BranchingModel,
    f: ScalarField,
    grid: SolverGrid,
    offset: float = 0.0,
    boundary_m: np.ndarray | None = None,
    keep_lattice: bool = False,
    form: str = "discounted",
) -> tuple[np.ndarray, np.ndarray | None]:
    """March the first-moment fan; see module docstring for the two forms."""
    if form not in ("discounted", "direct"):
        raise ValueError("form must be 'discounted' or 'direct'")
    is_boundary = boundary_m is None
    if is_boundary and offset != 0.0:
        raise ValueError("the boundary fan must have offset 0")
    _check_contraction(model, grid)
    n, dt = grid.n_steps, grid.dt
    trapezoid = grid.quadrature == "trapezoid"
    alpha, offspring = model.alpha, model.offspring

    ages = offset + dt * np.arange(n + 1)
    alpha_g = np.asarray(alpha(ages), dtype=np.float64)
    mean_g = offspring.mean_by_regime()[offspring.regime_indices(ages)]
    am = alpha_g * mean_g
    fvals = np.asarray(f(ages), dtype=np.float64)
    if is_boundary:
        mb = np.empty(n + 1)
        mb[0] = fvals[0]
    else:
        mb = np.asarray(boundary_m, dtype=np.float64)
        if len(mb) != n + 1:
            raise ValueError("boundary trace length does not match the grid")
    diag = np.empty(n + 1)
    diag[0] = fvals[0]
    lattice = None
    if keep_lattice:
        if n > _LATTICE_MAX_STEPS:
            raise ValueError(f"lattice storage capped at {_LATTICE_MAX_STEPS} steps")
        lattice = np.full((n + 1, n + 1), np.nan)
        lattice[0] = fvals

    if am.max() * dt / 2.0 >= 0.95:
        raise ValueError("dt too large for the implicit moment endpoint; use a smaller dt")

    if form == "discounted":
        if alpha_g.max() * grid.horizon * max(1.0, mean_g.max()) > 600.0:
            raise ValueError(
                "cumulative hazard exceeds the floating-point range of the "
                "discounted form; reduce the horizon or split the solve"
            )
        A = np.zeros(n + 1)  # cumulative hazard along each ray
        J = np.zeros(n + 1)  # discount-weighted source integral along each ray
        for i in range(n):
            m = n - i
            k_l = slice(1, m + 1)  # age indices at the left endpoint, rays i+1..n
            k_r = slice(0, m)  # age indices at the right endpoint
            h_left = np.exp(A[i + 1 :]) * am[k_l] * mb[i]
            if trapezoid:
                A_new = A[i + 1 :] + (dt / 2.0) * (alpha_g[k_l] + alpha_g[k_r])
                if is_boundary:
                    # diagonal: exp(-A_new) * exp(A_new) = 1 on the endpoint term
                    known = math.exp(-A_new[0]) * (
                        fvals[i + 1] + J[i + 1] + (dt / 2.0) * h_left[0]
                    )
                    mb[i + 1] = known / (1.0 - (dt / 2.0) * am[0])
                h_right = np.exp(A_new) * am[k_r] * mb[i + 1]
                J[i + 1 :] += (dt / 2.0) * (h_left + h_right)
            else:
                A_new = A[i + 1 :] + dt * alpha_g[k_l]
                J[i + 1 :] += dt * h_left
                if is_boundary:
                    mb[i + 1] = math.exp(-A_new[0]) * (fvals[i + 1] + J[i + 1])
            A[i + 1 :] = A_new
            diag[i + 1] = (
                mb[i + 1] if is_boundary else math.exp(-A[i + 1]) * (fvals[i + 1] + J[i + 1])
            )
            if lattice is not None:
                lattice[i + 1, i + 1 :] = np.exp(-A[i + 1 :]) * (fvals[i + 1 :] + J[i + 1 :])
        return (mb if is_boundary else diag, lattice)

    # direct form: plain quadrature of d(phi)/dt = alpha (mean m_b(t) - phi);
    # the offspring term feeds on the boundary trace (children start at age 0)
    # and the compensation carries the ray value
    phi = fvals.copy()
    for i in range(n):
        m = n - i
        k_l = slice(1, m + 1)
        k_r = slice(0, m)
        F_left = alpha_g[k_l] * (mean_g[k_l] * mb[i] - phi[i + 1 :])
        if trapezoid:
            if is_boundary:
                numer = phi[i + 1] + (dt / 2.0) * F_left[0]
                denom = 1.0 + (dt / 2.0) * alpha_g[0] * (1.0 - mean_g[0])
                mb[i + 1] = numer / denom
            phi[i + 1 :] = (
                phi[i + 1 :]
                + (dt / 2.0) * (F_left + alpha_g[k_r] * mean_g[k_r] * mb[i + 1])
            ) / (1.0 + (dt / 2.0) * alpha_g[k_r])
            if is_boundary:
                phi[i + 1] = mb[i + 1]
        else:
            phi[i + 1 :] = phi[i + 1 :] + dt * F_left
            if is_boundary:
                mb[i + 1] = phi[i + 1]
        diag[i + 1] = phi[i + 1]
        if lattice is not None:
            lattice[i + 1, i + 1 :] = phi[i + 1 :]
    return (mb if is_boundary else diag, lattice)


@dataclass(frozen=True)
class MeanSolution:
    """The first-moment kernel applied to f, on the same characteristic grid."""

    model: BranchingModel
    f: ScalarField
    grid: SolverGrid
    boundary: np.ndarray
    form: str = "discounted"
    lattice: np.ndarray | None = None

    @property
    def order(self) -> int:
        return self.grid.order

    def boundary_at(self, t: float) -> float:
        if t < -1e-12 or t > self.grid.horizon * (1 + 1e-12):
            raise ValueError(f"time {t} outside the solved horizon {self.grid.horizon}")
        return float(np.interp(t, self.grid.times(), self.boundary))

    def along_ray(self, offset: float) -> np.ndarray:
        if offset == 0.0:
            return self.boundary.copy()
        diag, _ = _march_mean_fan(
            self.model, self.f, self.grid, offset=offset, boundary_m=self.boundary, form=self.form
        )
        return diag

    def at(self, t: float, x: float) -> float:
        if t < 0 or x < 0:
            raise ValueError("t and x must be >= 0")
        if t == 0.0:
            return float(self.f(x))
        if t > self.grid.horizon * (1 + 1e-12):
            raise ValueError(f"time {t} outside the solved horizon {self.grid.horizon}")
        if x == 0.0:
            return self.boundary_at(t)
        dt = self.grid.dt
        trapezoid = self.grid.quadrature == "trapezoid"
        alpha, offspring = self.model.alpha, self.model.offspring
        y = x + t
        phi = float(self.f(y))
        A = 0.0
        J = 0.0
        r = 0.0
        while r < t - 1e-15:
            h = min(dt, t - r)
            age_l, age_r = y - r, y - (r + h)
            a_l, a_r = float(alpha(age_l)), float(alpha(age_r))
            am_l = a_l * offspring.mean(age_l)
            am_r = a_r * offspring.mean(age_r)
            h_left = math.exp(A) * am_l * self.boundary_at(r)
            if trapezoid:
                A_new = A + (h / 2.0) * (a_l + a_r)
                h_right = math.exp(A_new) * am_r * self.boundary_at(r + h)
                J += (h / 2.0) * (h_left + h_right)
            else:
                A_new = A + h * a_l
                J += h * h_left
            A = A_new
            r += h
        return math.exp(-A) * (float(self.f(y)) + J)

    def lattice_values(self) -> np.ndarray:
        if self.lattice is None:
            raise ValueError("solution was built without keep_lattice=True")
        return self.lattice


def solve_mean(
    model: BranchingModel,
    f: ScalarField,
    grid: SolverGrid,
    keep_lattice: bool = False,
    form: str = "discounted",
) -> MeanSolution:
    """Solve the linear renewal equation for the first-moment kernel."""
    boundary, lattice = _march_mean_fan(model, f, grid, keep_lattice=keep_lattice, form=form)
    return MeanSolution(model, f, grid, boundary, form, lattice)


def survival_lower_bound(
    model: BranchingModel, f: ScalarField, t: float, x: float, dt: float = 1e-3
) -> float:
    """Closed-form lower bound on the Laplace exponent.

    ``(1 - exp(-f(x+t))) * exp(-integral_0^t alpha(x+s) ds)``: the exponent of
    the event that the initial particle is still alive with no branch yet.
    The hazard integral is exact for constant alpha and composite-trapezoid at
    the given dt otherwise.
    """
    if t < 0 or x < 0:
        raise ValueError("t and x must be >= 0")
    alpha = model.alpha
    if t == 0.0:
        hazard = 0.0
    elif alpha.is_constant:
        hazard = float(alpha(x)) * t
    else:
        n = max(1, math.ceil(t / dt))
        s = np.linspace(0.0, t, n + 1)
        vals = np.asarray(alpha(x + s), dtype=np.float64)
        hazard = float((t / n) * (vals[0] / 2.0 + vals[1:-1].sum() + vals[-1] / 2.0))
    return -math.expm1(-float(f(x + t))) * math.exp(-hazard)


def _quadrature_weights(n: int, dt: float, rule: str) -> np.ndarray:
    w = np.full(n + 1, dt)
    if rule == "trapezoid":
        w[0] = w[-1] = dt / 2.0
    else:
        w[-1] = 0.0  # left rectangle
    return w


def immigration_exponent_integral(
    model: BranchingModel,
    imm: ImmigrationMechanism,
    f: ScalarField,
    grid: SolverGrid,
    exponent_solution: ExponentSolution | None = None,
) -> tuple[float, np.ndarray]:
    """Integral over [0, horizon] of the arrival compensation of the exponent.

    Evaluates the exponent at each group atom age along characteristic fans,
    applies the mechanism's analytic functional per grid node, and integrates
    with the grid's quadrature.  Returns (integral, per-node values).
    """
    n = grid.n_steps
    if imm.total_rate == 0.0:
        return 0.0, np.zeros(n + 1)
    sol = exponent_solution
    if sol is None:
        sol = solve_exponent(model, f, grid)
    if abs(sol.grid.horizon - grid.horizon) > 1e-12 or sol.grid.dt != grid.dt:
        raise ValueError("exponent solution grid does not match the requested grid")
    rays = {a: sol.along_ray(a) for a in imm.atom_ages()}
    psi_vals = np.empty(n + 1)
    for j in range(n + 1):
        psi_vals[j] = imm.psi_from_exponents({a: float(r[j]) for a, r in rays.items()})
    w = _quadrature_weights(n, grid.dt, grid.quadrature)
    return float(np.dot(w, psi_vals)), psi_vals


def mean_with_immigration(
    model: BranchingModel,
    imm: ImmigrationMechanism | None,
    f: ScalarField,
    initial: AgeMeasure,
    grid: SolverGrid,
    mean_solution: MeanSolution | None = None,
) -> float:
    """Expected integral of f against the population at the grid horizon.

    Initial particles contribute through the moment kernel; each arrival
    cohort contributes the kernel applied over its residual time, integrated
    against the arrival intensity.
    """
    sol = mean_solution
    if sol is None:
        sol = solve_mean(model, f, grid)
    total = sum(sol.at(grid.horizon, a) for a in initial.ages)
    if imm is None or imm.total_rate == 0.0:
        return total
    ages = imm.atom_ages()
    rays = {a: sol.along_ray(a) for a in ages}
    n = grid.n_steps
    contrib = np.zeros(n + 1)
    if imm.kind == "finite":
        for wgt, g in imm.groups:
            for a in g.ages:
                contrib += wgt * rays[a]
    else:
        mean_size = imm.size_law.mean_size  # type: ignore[union-attr]
        if math.isinf(mean_size):
            raise ValueError("mean group size is infinite; the first moment diverges")
        for a, p in imm.age_atoms:
            contrib += imm.total_rate * mean_size * p * rays[a]
    w = _quadrature_weights(n, grid.dt, grid.quadrature)
    return total + float(np.dot(w, contrib))


@dataclass(frozen=True)
class ErgodicityReport:
    """Outcome of the convergence-to-equilibrium test for immigration models."""

    status: str  # "ergodic" | "not_ergodic" | "unknown"
    c0: float
    criterion_status: str
    criterion_value: float | None
    detail: str


def ergodicity_check(model: BranchingModel, imm: ImmigrationMechanism) -> ErgodicityReport:
    """Decide convergence of the immigration model to a stationary law.

    Ergodic iff the mean growth exponent is negative and the group-size log
    moment is finite; the criterion is necessary and sufficient under the
    negative-exponent hypothesis, and outside that hypothesis the answer is
    "unknown" (the theory is silent there), never a guess.
    """
    c0, _, _ = model.constants()
    crit_status, crit_value = imm.log_moment_criterion()
    if c0 >= 0.0:
        return ErgodicityReport(
            "unknown",
            c0,
            crit_status,
            crit_value,
            f"mean growth exponent c0={c0:.6g} is not negative; no convergence certificate",
        )
    if crit_status == "finite":
        return ErgodicityReport(
            "ergodic", c0, crit_status, crit_value, "c0 < 0 and group log-moment finite"
        )
    if crit_status == "infinite":
        return ErgodicityReport(
            "not_ergodic", c0, crit_status, crit_value, "group log-moment diverges"
        )
    return ErgodicityReport(
        "unknown", c0, crit_status, crit_value, "group log-moment not certified"
    )


@dataclass(frozen=True)
class StationaryReport:
    """Certified stationary Laplace value with its error budget."""

    value: float
    exponent_integral: float
    horizon: float
    dt: float
    tail_bound: float
    quadrature_error: float

    @property
    def total_error_bound(self) -> float:
        # |exp(-I1) - exp(-I2)| <= |I1 - I2| for nonnegative exponents
        return self.tail_bound + self.quadrature_error


def stationary_laplace(
    model: BranchingModel,
    imm: ImmigrationMechanism,
    f: ScalarField,
    tolerance: float = 1e-6,
) -> StationaryReport:
    """Stationary Laplace functional of the immigration model, certified.

    Computes ``exp(-integral_0^inf psi(u_s f) ds)``.  The truncation horizon T
    is chosen so that the analytic tail bound (exponent dominated by the norm
    bound of the moment kernel times the mechanism's first moment) is below
    tolerance/2; the quadrature error is certified below tolerance/2 by step
    halving.  Refuses models that are not certified ergodic, and mechanisms
    with infinite mean group size (the prescribed tail bound is vacuous there).
    """
    report = ergodicity_check(model, imm)
    if report.status != "ergodic":
        raise ValueError(f"stationary law not certified: {report.status} ({report.detail})")
    if tolerance <= 0:
        raise ValueError("tolerance must be > 0")
    if imm.total_rate == 0.0 or f.sup == 0.0:
        return StationaryReport(1.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    c0, c1, _ = model.constants()
    m1 = imm.first_moment_of(ScalarField.constant(1.0))
    if math.isinf(m1):
        raise ValueError(
            "mechanism has infinite mean group size: the moment-kernel tail "
            "bound cannot certify the truncation"
        )
    rate = -c0
    tail_target = tolerance / 2.0
    T = math.log(max(m1 * f.sup / (rate * tail_target), 2.0)) / rate
    dt = min(0.2 / c1, T / 64.0)
    n = math.ceil(T / dt)
    T = n * dt
    tail_bound = m1 * f.sup * math.exp(c0 * T) / rate

    prev: float | None = None
    for _ in range(16):
        grid = SolverGrid(dt, T, "trapezoid")
        integral, _ = immigration_exponent_integral(model, imm, f, grid)
        if prev is not None:
            quad_err = abs(integral - prev) / 3.0
            if quad_err <= tolerance / 2.0:
                return StationaryReport(
                    math.exp(-integral), integral, T, dt, tail_bound, quad_err
                )
        prev = integral
        dt /= 2.0
    raise RuntimeError(
        f"stationary quadrature did not certify tolerance {tolerance} after refinement"
    )


def exponential_tail_identity(
    a: float, c: float, group_mass: int, tol: float = 1e-9
) -> tuple[float, float]:
    """Two quadrature forms of the exponential-decay tail integral.

    Left: ``integral_0^inf (1 - exp(-a n exp(-c s))) ds`` by this package's
    trapezoid stack (truncated with a certified exponential tail bound and
    step-halving).  Right: the substitution ``z = a n exp(-c s)`` giving
    ``c^-1 integral_0^{a n} (1 - exp(-z)) / z dz`` via adaptive quadrature.
    Used as a self-test of the quadrature machinery; the two must agree.
    """
    if a <= 0 or c <= 0 or group_mass < 1:
        raise ValueError("need a > 0, c > 0, group_mass >= 1")
    an = a * group_mass
    # truncate where the integrand's tail integral a n exp(-c S) / c < tol/4
    S = math.log(max(4.0 * an / (c * tol), 2.0)) / c

    def integrand(s: np.ndarray) -> np.ndarray:
        return -np.expm1(-an * np.exp(-c * s))

    n = 2048
    prev = None
    lhs = math.nan
    for _ in range(16):
        s = np.linspace(0.0, S, n + 1)
        vals = integrand(s)
        h = S / n
        lhs = float(h * (vals[0] / 2.0 + vals[1:-1].sum() + vals[-1] / 2.0))
        if prev is not None and abs(lhs - prev) / 3.0 < tol / 4.0:
            break
        prev = lhs
        n *= 2
    else:
        raise RuntimeError("tail identity quadrature did not converge")

    rhs_integrand = lambda z: (-math.expm1(-z) / z) if z > 0 else 1.0
    rhs, _ = _quad(rhs_integrand, 0.0, an, epsabs=tol / 10.0, epsrel=1e-12, limit=200)
    return lhs, rhs / c
