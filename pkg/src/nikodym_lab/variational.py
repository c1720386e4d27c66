"""Variations of the geodesic flow, the reduced normal-block system, and shooting inversion."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    ChartDomainError,
    DivergenceError,
    IllConditionedError,
    SingularityError,
    UsageError,
)
from .geodesic_flow import (
    DEFAULT_STEP,
    Trajectory,
    check_trajectory_model,
    initial_data,
    shoot_to,
    theta_slots,
    uniform_steps,
)
from .metric import CometricModel, Perturbed, check_in_chart

FD_STEP = 1e-6


# --------------------------------------------------------------------------
# linearised flow
# --------------------------------------------------------------------------


def field_jacobian(model: CometricModel, x: np.ndarray, p: np.ndarray,
                   fd_step: float = FD_STEP):
    """Field value and its Jacobian with respect to ``z = (x, p)`` at one point.

    Central differences along every coordinate of phase space at steps
    ``h`` and ``h/2``, combined by one Richardson pass.  Returns
    ``(F, J)`` with ``F`` of shape ``(2D,)`` and ``J`` of shape ``(2D, 2D)``.
    """
    D = x.size
    z = np.concatenate([x, p])
    n = 2 * D
    offsets = np.zeros((1 + 4 * n, n))
    for i in range(n):
        for r, h in enumerate((fd_step, -fd_step, fd_step / 2, -fd_step / 2)):
            offsets[1 + 4 * i + r, i] = h
    zs = z + offsets
    dx, dp = model.field(zs[:, :D], zs[:, D:])
    F = np.concatenate([dx, dp], axis=1)
    Fp = F[1:].reshape(n, 4, n)
    coarse = (Fp[:, 0] - Fp[:, 1]) / (2 * fd_step)
    fine = (Fp[:, 2] - Fp[:, 3]) / fd_step
    J = ((4.0 * fine - coarse) / 3.0).T
    return F[0], J


def _augmented_rk4(model, z, W, h, fd_step):
    D = z.size // 2

    def rhs(zz, WW):
        F, J = field_jacobian(model, zz[:D], zz[D:], fd_step)
        return F, J @ WW

    k1, l1 = rhs(z, W)
    k2, l2 = rhs(z + 0.5 * h * k1, W + 0.5 * h * l1)
    k3, l3 = rhs(z + 0.5 * h * k2, W + 0.5 * h * l2)
    k4, l4 = rhs(z + h * k3, W + h * l3)
    return (z + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4),
            W + h / 6.0 * (l1 + 2 * l2 + 2 * l3 + l4))


@dataclass(frozen=True)
class VariationalState:
    """Transported variations ``X = dx/dv`` and ``P = dp/dv`` at every sample."""

    s: np.ndarray
    X: np.ndarray
    P: np.ndarray
    trajectory: Trajectory
    directions: str

    def normal_block(self, model: CometricModel):
        """``xi = (dx_normal/dv ; dp_normal/dv)`` stacked as ``(N, 2m, k)``."""
        n = model.n_sub
        return np.concatenate([self.X[:, n:, :], self.P[:, n:, :]], axis=1)


def initial_variation(model: CometricModel, p0: np.ndarray, directions: str = "theta"):
    """Initial ``(X0, P0)`` for theta-, a- or both kinds of directions.

    theta-directions perturb the launch covector ``(sqrt(1-|theta|^2), theta, 0)``;
    a-directions move the launch point along the tangential coordinates.
    """
    D, n = model.dim, model.n_sub
    slots = theta_slots(model)
    cols_x, cols_p = [], []
    if directions in ("theta", "both"):
        c = p0[0]
        if not c > 0:
            raise UsageError("launch covector must have positive first component")
        theta = p0[slots]
        for j, slot in enumerate(slots):
            dp = np.zeros(D)
            dp[slot] = 1.0
            dp[0] = -theta[j] / c
            cols_x.append(np.zeros(D))
            cols_p.append(dp)
    if directions in ("a", "both"):
        for j in range(1, n):
            dx = np.zeros(D)
            dx[j] = 1.0
            cols_x.append(dx)
            cols_p.append(np.zeros(D))
    if not cols_x:
        raise ValueError(f"unknown direction set {directions!r}")
    return np.stack(cols_x, axis=1), np.stack(cols_p, axis=1)


def variational_transport(model: CometricModel, trajectory: Trajectory, directions="theta",
                          fd_step: float = FD_STEP) -> VariationalState:
    """Integrate the linearised Hamiltonian system along ``trajectory``.

    ``directions`` is ``"theta"``, ``"a"``, ``"both"`` or an explicit pair
    ``(X0, P0)`` of ``(D, k)`` arrays.  The base geodesic is re-integrated
    alongside the variations with the trajectory's own steps and must
    reproduce its samples.
    """
    check_trajectory_model(model, trajectory)
    D = model.dim
    if isinstance(directions, str):
        X0, P0 = initial_variation(model, trajectory.p[0], directions)
        label = directions
    else:
        X0, P0 = (np.asarray(a, dtype=float) for a in directions)
        label = "custom"
    W = np.concatenate([X0, P0], axis=0)
    z = np.concatenate([trajectory.x[0], trajectory.p[0]])
    Ws = [W.copy()]
    for k in range(1, len(trajectory)):
        h = trajectory.s[k] - trajectory.s[k - 1]
        z, W = _augmented_rk4(model, z, W, h, fd_step)
        ref = np.concatenate([trajectory.x[k], trajectory.p[k]])
        if np.max(np.abs(z - ref)) > 1e-9 * (1 + np.max(np.abs(ref))):
            raise UsageError("trajectory does not match a geodesic of this model")
        z = ref.copy()
        Ws.append(W.copy())
    Ws = np.array(Ws)
    return VariationalState(trajectory.s.copy(), Ws[:, :D, :], Ws[:, D:, :], trajectory, label)


# --------------------------------------------------------------------------
# reduced normal-block system and fundamental matrix
# --------------------------------------------------------------------------


def reduced_matrix(model: CometricModel, s) -> np.ndarray:
    """``A(s) = [[h^{1kl}, I], [-2 f^{11kl}, -(h^{1lk})]]`` along ``(s, 0, 0)``."""
    h1, f11 = model.axis_coefficients(s)
    m = h1.shape[-1]
    A = np.zeros((h1.shape[0], 2 * m, 2 * m))
    A[:, :m, :m] = h1
    A[:, :m, m:] = np.eye(m)
    A[:, m:, :m] = -2.0 * f11
    A[:, m:, m:] = -h1.transpose(0, 2, 1)
    return A


@dataclass(frozen=True)
class ReducedSolution:
    s: np.ndarray
    xi: np.ndarray  # (N, 2m, m)

    @property
    def xi11(self):
        m = self.xi.shape[-1]
        return self.xi[:, :m, :]

    @property
    def xi21(self):
        m = self.xi.shape[-1]
        return self.xi[:, m:, :]


def _reduced_rhs(model, s, xi, m):
    A = reduced_matrix(model, s)[0]
    forcing = np.zeros((2 * m, m))
    forcing[:m] = float(model.perturbation_alpha(np.array([s]))[0]) * np.eye(m)
    return A @ xi + forcing


def _reduced_grid_solve(model, grid):
    m = model.n_normal
    xi = np.zeros((2 * m, m))
    out = [xi.copy()]
    for s0, s1 in zip(grid[:-1], grid[1:]):
        h = s1 - s0
        k1 = _reduced_rhs(model, s0, xi, m)
        k2 = _reduced_rhs(model, s0 + h / 2, xi + h / 2 * k1, m)
        k3 = _reduced_rhs(model, s0 + h / 2, xi + h / 2 * k2, m)
        k4 = _reduced_rhs(model, s1, xi + h * k3, m)
        xi = xi + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        out.append(xi.copy())
    return np.array(out)


def reduced_system_transport(model: CometricModel, s_max: float,
                             step: float = DEFAULT_STEP) -> ReducedSolution:
    """Solve ``xi' = A(s) xi + alpha(s) (I; 0)``, ``xi(0) = 0`` by RK4."""
    model.axis_coefficients(0.0)  # raises UnsupportedModelError early
    n, h = uniform_steps(s_max, step)
    grid = np.arange(n + 1) * h
    return ReducedSolution(grid, _reduced_grid_solve(model, grid))


@dataclass(frozen=True)
class FundamentalMatrix:
    s: np.ndarray
    Z: np.ndarray
    Zinv: np.ndarray

    def w(self):
        """Upper-left ``m x m`` block of ``Z^{-1}`` on the grid."""
        m = self.Z.shape[-1] // 2
        return self.Zinv[:, :m, :m]


def fundamental_matrix(A, s_max: float, step: float = DEFAULT_STEP,
                       max_condition: float = 1e12) -> FundamentalMatrix:
    """Integrate ``Z' = A(s) Z``, ``Z(0) = I``; ``Z^{-1}`` by linear solves.

    ``A`` is a callable ``s -> (k, k)`` array.
    """
    n, h = uniform_steps(s_max, step)
    grid = np.arange(n + 1) * h
    k = np.asarray(A(0.0)).shape[0]
    Z = np.eye(k)
    Zs = [Z.copy()]
    for s0 in grid[:-1]:
        k1 = A(s0) @ Z
        k2 = A(s0 + h / 2) @ (Z + h / 2 * k1)
        k3 = A(s0 + h / 2) @ (Z + h / 2 * k2)
        k4 = A(s0 + h) @ (Z + h * k3)
        Z = Z + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        Zs.append(Z.copy())
    Zs = np.array(Zs)
    cond = np.linalg.cond(Zs)
    bad = np.flatnonzero(~(cond <= max_condition))
    if bad.size:
        s_bad = float(grid[bad[0]])
        raise SingularityError(f"fundamental matrix is near-singular at s={s_bad:.6g}", s=s_bad)
    Zinv = np.linalg.solve(Zs, np.broadcast_to(np.eye(k), Zs.shape))
    return FundamentalMatrix(grid, Zs, Zinv)


def duhamel_solution(model: CometricModel, s_max: float, step: float = DEFAULT_STEP):
    """``xi(s) = Z(s) int_0^s alpha(t) Z^{-1}(t) (I; 0) dt`` with the trapezoid rule."""
    fm = fundamental_matrix(lambda s: reduced_matrix(model, s)[0], s_max, step)
    m = model.n_normal
    alpha = model.perturbation_alpha(fm.s)
    integrand = alpha[:, None, None] * fm.Zinv[:, :, :m]
    h = np.diff(fm.s)
    cum = np.concatenate([
        np.zeros((1, 2 * m, m)),
        np.cumsum(0.5 * h[:, None, None] * (integrand[1:] + integrand[:-1]), axis=0),
    ])
    return fm.s, fm.Z @ cum


@dataclass(frozen=True)
class LemmaReport:
    s: np.ndarray
    det_xi11: np.ndarray
    bound: np.ndarray
    margin: np.ndarray
    verdict: bool
    s_cap: float
    degenerate: bool

    def rows(self):
        for s, d, b, mg in zip(self.s, self.det_xi11, self.bound, self.margin):
            yield float(s), float(d), float(b), float(mg), bool(mg > 0)


def lemma_margin(model: CometricModel, s_grid=None, s_max: float = 0.05,
                 step: float = DEFAULT_STEP) -> LemmaReport:
    """Compare ``det xi_11(s)`` with ``(1/2 int_0^s alpha)^m`` on a grid.

    ``s_cap`` is the largest grid point up to which the margin stays
    positive from the start (the empirical epsilon_0); the verdict is true
    when that covers the whole grid.
    """
    if s_grid is None:
        n, h = uniform_steps(s_max, step)
        s_grid = np.arange(1, n + 1) * h
    s_grid = np.sort(np.asarray(s_grid, dtype=float))
    if s_grid.size == 0 or s_grid[0] <= 0:
        raise ValueError("s_grid must contain positive values")
    grid = [0.0]
    keep = []
    for s in s_grid:
        n, h = uniform_steps(s - grid[-1], step)
        grid.extend(grid[-1] + h * np.arange(1, n + 1))
        grid[-1] = float(s)
        keep.append(len(grid) - 1)
    xi = _reduced_grid_solve(model, np.array(grid))[keep]
    m = model.n_normal
    det = np.linalg.det(xi[:, :m, :])
    prim = _antiderivative(model, s_grid)
    bound = (0.5 * prim) ** m
    margin = det - bound
    degenerate = bool(np.all(model.perturbation_alpha(s_grid) == 0))
    pos = margin > 0
    run = len(pos) if pos.all() else int(np.argmin(pos))
    s_cap = float(s_grid[run - 1]) if run else 0.0
    verdict = bool(pos.all()) and not degenerate
    return LemmaReport(s_grid, det, bound, margin, verdict, s_cap, degenerate)


def _antiderivative(model, s):
    if isinstance(model, Perturbed):
        return model.profile.alpha_antiderivative(s)
    return np.zeros_like(s)


# --------------------------------------------------------------------------
# Jacobian of the shooting map and its inversion
# --------------------------------------------------------------------------


def _shoot_with_variations(model, a, theta, s, step, fd_step=FD_STEP):
    x0, p0 = initial_data(model, a, theta)
    X0, P0 = initial_variation(model, p0, "both")
    W = np.concatenate([X0, P0], axis=0)
    z = np.concatenate([x0, p0])
    D = model.dim
    if s != 0:
        n, h = uniform_steps(s, step)
        for _ in range(n):
            z, W = _augmented_rk4(model, z, W, h, fd_step)
            if not model.in_chart(z[None, :D])[0]:
                raise ChartDomainError(f"geodesic leaves the chart before s={s}")
    return z[:D], z[D:], W[:D]


def _assemble_jacobian(model, x, p, X):
    m = model.n_normal
    v = model.field(x[None, :], p[None, :])[0][0]
    return np.column_stack([X[:, :m], v, X[:, m:]])


def jacobian_matrix(model: CometricModel, a, theta, s: float,
                    step: float = DEFAULT_STEP) -> np.ndarray:
    """Dense ``dx / d(theta, s, a)`` with columns ordered theta, s, a."""
    x, p, X = _shoot_with_variations(model, a, theta, s, step)
    return _assemble_jacobian(model, x, p, X)


def jacobian_det(model: CometricModel, a, theta, s: float, step: float = DEFAULT_STEP) -> float:
    return float(np.linalg.det(jacobian_matrix(model, a, theta, s, step)))


def block_reduced_det(model: CometricModel, J: np.ndarray) -> float:
    """Determinant via the block-triangular form valid at theta = a = 0.

    Reordering the columns to ``(s, a, theta)`` makes the matrix upper
    block-triangular with unit diagonal blocks except the normal theta block.
    """
    m, n = model.n_normal, model.n_sub
    sign = -1.0 if (m * n) % 2 else 1.0
    return sign * float(np.linalg.det(J[n:, :m]))


@dataclass(frozen=True)
class InversionResult:
    a: np.ndarray
    theta: np.ndarray
    s: float
    residual: float
    iterations: int
    momentum: np.ndarray  # covector at the target point

    def launch(self, model):
        return initial_data(model, self.a, self.theta)

    def record(self) -> dict:
        return {"a": self.a.tolist(), "theta": self.theta.tolist(), "s": self.s,
                "residual": self.residual, "iterations": self.iterations}


def _split(model, u):
    m = model.n_normal
    return u[m + 1:], u[:m], float(u[m])


def invert_shooting(model: CometricModel, x_target, initial_guess=None, tol: float = 1e-8,
                    max_iter: int = 50, step: float = DEFAULT_STEP,
                    max_condition: float = 1e10, max_halvings: int = 8) -> InversionResult:
    """Find ``(a, theta, s)`` with ``x(a, theta; s) = x_target`` by damped Newton.

    ``initial_guess`` is ``(a, theta, s)``; the default is
    ``(0, 0, x_target[0])``.  Iteration stops once the residual is below
    ``tol`` and the last Newton correction is negligible.
    """
    target = np.asarray(x_target, dtype=float)
    check_in_chart(model, target[None, :])
    m, n = model.n_normal, model.n_sub
    if initial_guess is None:
        u = np.zeros(m + n)
        u[m] = target[0]
    else:
        a0, t0, s0 = initial_guess
        u = np.concatenate([np.atleast_1d(t0), [s0], np.atleast_1d(a0)]).astype(float)

    def evaluate(uu):
        a, theta, s = _split(model, uu)
        if not float(theta @ theta) < 1:
            return None
        try:
            x, p, X = _shoot_with_variations(model, a, theta, s, step)
        except (ChartDomainError, ValueError):
            return None
        return x - target, p, x, X

    state = evaluate(u)
    if state is None:
        raise DivergenceError("initial guess does not produce an in-chart geodesic")
    res, p, x, X = state
    rnorm = float(np.linalg.norm(res))
    last_step = np.inf
    it = 0
    while not (rnorm <= tol and (last_step <= 1e-10 or rnorm <= 1e-13)):
        if it >= max_iter:
            raise DivergenceError(
                f"Newton did not converge in {max_iter} iterations (residual {rnorm:.3e})",
                residual=rnorm,
            )
        J = _assemble_jacobian(model, x, p, X)
        cond = np.linalg.cond(J)
        if not cond <= max_condition:
            raise IllConditionedError(f"shooting Jacobian condition number {cond:.3e}")
        delta = -np.linalg.solve(J, res)
        lam = 1.0
        for _ in range(max_halvings + 1):
            trial = evaluate(u + lam * delta)
            if trial is not None and np.linalg.norm(trial[0]) < rnorm:
                break
            lam *= 0.5
        it += 1
        if trial is None or np.linalg.norm(trial[0]) >= rnorm:
            if rnorm <= tol:
                break  # already converged; correction cannot improve further
            if trial is None:
                raise DivergenceError("damped Newton step left the admissible region",
                                      residual=rnorm)
        u = u + lam * delta
        last_step = float(np.linalg.norm(lam * delta))
        res, p, x, X = trial
        rnorm = float(np.linalg.norm(res))
    a, theta, s = _split(model, u)
    return InversionResult(a.copy(), theta.copy(), s, rnorm, it, p.copy())
