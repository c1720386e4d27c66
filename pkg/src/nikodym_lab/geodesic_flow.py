"""Hamiltonian geodesic flow on the cotangent bundle, fixed-step RK4."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    ChartDomainError,
    EmptyTrajectoryError,
    IntegratorInstabilityError,
    UsageError,
)
from .metric import CometricModel, check_in_chart, coupling_pairs

DEFAULT_STEP = 1e-3
DEFAULT_ENERGY_TOL = 1e-6


@dataclass(frozen=True)
class CotangentState:
    x: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        x = np.array(self.x, dtype=float)
        p = np.array(self.p, dtype=float)
        if x.shape != p.shape or x.ndim != 1:
            raise ValueError("x and p must be 1-D arrays of equal length")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(p))):
            raise ValueError("cotangent state has non-finite entries")
        x.flags.writeable = False
        p.flags.writeable = False
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "p", p)

    @classmethod
    def unit_energy(cls, model: CometricModel, x, p, tol: float = 1e-12) -> "CotangentState":
        state = cls(x, p)
        h = hamiltonian(model, state)
        if abs(2 * h - 1) > tol:
            raise ValueError(f"2H = {2 * h!r} is not unit energy")
        return state


@dataclass(frozen=True)
class Trajectory:
    """Samples ``(s, x(s), p(s), H(s))`` of one geodesic."""

    s: np.ndarray
    x: np.ndarray
    p: np.ndarray
    H: np.ndarray
    step: float
    model_id: str
    terminal: str
    energy_drift: float
    energy_tolerance: float

    def __len__(self):
        return len(self.s)

    @property
    def relative_energy_drift(self) -> float:
        return self.energy_drift / max(abs(self.H[0]), np.finfo(float).tiny)

    def state(self, i: int) -> CotangentState:
        return CotangentState(self.x[i], self.p[i])


def hamiltonian(model: CometricModel, state: CotangentState) -> float:
    x = state.x[None, :]
    check_in_chart(model, x)
    return float(model.hamiltonian(x, state.p[None, :])[0])


def hamiltonian_vector_field(model: CometricModel, state: CotangentState):
    """``(dx/ds, dp/ds) = (g p, -1/2 p.dg.p)`` at one state."""
    x = state.x[None, :]
    check_in_chart(model, x)
    dx, dp = model.field(x, state.p[None, :])
    return dx[0], dp[0]


def rk4_step(model: CometricModel, x: np.ndarray, p: np.ndarray, h):
    """One classical RK4 step for a batch; ``h`` may be a scalar or ``(B,)``."""
    h = np.asarray(h, dtype=float)
    hc = h[:, None] if h.ndim else h
    k1x, k1p = model.field(x, p)
    k2x, k2p = model.field(x + 0.5 * hc * k1x, p + 0.5 * hc * k1p)
    k3x, k3p = model.field(x + 0.5 * hc * k2x, p + 0.5 * hc * k2p)
    k4x, k4p = model.field(x + hc * k3x, p + hc * k3p)
    x_new = x + hc / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
    p_new = p + hc / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p)
    return x_new, p_new


def _step_schedule(s_max: float, step: float) -> list[float]:
    n_full = int(math.floor(s_max / step + 1e-9))
    steps = [step] * n_full
    rest = s_max - n_full * step
    if rest > 1e-12 * step:
        steps.append(rest)
    return steps


def geodesic_shoot(model: CometricModel, x0, p0, s_max: float, step: float = DEFAULT_STEP,
                   energy_tolerance: float = DEFAULT_ENERGY_TOL) -> Trajectory:
    """Integrate the geodesic with initial covector ``p0`` at ``x0`` up to ``s_max``.

    Stops at the last in-chart sample if the chart boundary is reached
    first (``terminal == "boundary"``).
    """
    if not step > 0:
        raise ValueError("step must be positive")
    if not s_max > 0:
        raise ValueError("s_max must be positive")
    x = np.array(x0, dtype=float)[None, :]
    p = np.array(p0, dtype=float)[None, :]
    check_in_chart(model, x)

    ss, xs, ps = [0.0], [x[0].copy()], [p[0].copy()]
    terminal = "s_max"
    s = 0.0
    for k, h in enumerate(_step_schedule(s_max, step)):
        x_new, p_new = rk4_step(model, x, p, h)
        if not model.in_chart(x_new)[0]:
            terminal = "boundary"
            break
        x, p = x_new, p_new
        s = (k + 1) * step if h == step else s_max
        ss.append(s)
        xs.append(x[0].copy())
        ps.append(p[0].copy())
    if len(ss) == 1:
        raise EmptyTrajectoryError("geodesic leaves the chart within the first step")

    X = np.array(xs)
    P = np.array(ps)
    H = model.hamiltonian(X, P)
    drift = float(np.max(np.abs(H - H[0])))
    rel = drift / max(abs(H[0]), np.finfo(float).tiny)
    if rel > energy_tolerance:
        raise IntegratorInstabilityError(
            f"relative energy drift {rel:.3e} exceeds {energy_tolerance:.1e}; use a smaller step"
        )
    return Trajectory(np.array(ss), X, P, H, step, model.model_id, terminal, drift,
                      energy_tolerance)


def theta_slots(model: CometricModel) -> list[int]:
    """Momentum slots tilted by the shooting parameter theta (the coupled ones)."""
    return [i for i, _ in coupling_pairs(model.dim)]


def initial_data(model: CometricModel, a, theta):
    """``x0 = (0, a, 0)`` and ``p0 = (sqrt(1 - |theta|^2), theta, 0)``."""
    n, D = model.n_sub, model.dim
    a = np.atleast_1d(np.asarray(a, dtype=float))
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if a.size != n - 1:
        raise ValueError(f"a must have {n - 1} components")
    if theta.size != D - n:
        raise ValueError(f"theta must have {D - n} components")
    t2 = float(theta @ theta)
    if not t2 < 1:
        raise ValueError("|theta| must be < 1")
    x0 = np.zeros(D)
    x0[1:n] = a
    p0 = np.zeros(D)
    p0[0] = math.sqrt(1.0 - t2)
    p0[theta_slots(model)] = theta
    return x0, p0


def uniform_steps(s: float, step: float) -> tuple[int, float]:
    """Number and size of equal steps covering ``[0, s]`` with size ``<= step``."""
    n = max(1, int(math.ceil(abs(s) / step - 1e-9)))
    return n, s / n


def shoot_to(model: CometricModel, x0, p0, s: float, step: float = DEFAULT_STEP):
    """End state ``(x(s), p(s))`` with equal steps; raises if the chart is left."""
    x = np.array(x0, dtype=float)[None, :]
    p = np.array(p0, dtype=float)[None, :]
    check_in_chart(model, x)
    if s == 0:
        return x[0], p[0]
    n, h = uniform_steps(s, step)
    for _ in range(n):
        x, p = rk4_step(model, x, p, h)
        if not model.in_chart(x)[0]:
            raise ChartDomainError(f"geodesic leaves the chart before s={s}")
    return x[0], p[0]


def shooting_map(model: CometricModel, a, theta, s: float, step: float = DEFAULT_STEP) -> np.ndarray:
    """Position ``x(a, theta; s)`` of the geodesic launched from the submanifold."""
    x0, p0 = initial_data(model, a, theta)
    return shoot_to(model, x0, p0, s, step)[0]


def integrate_batch(model: CometricModel, x: np.ndarray, p: np.ndarray, h: float,
                    n_steps: int, substeps: int = 1):
    """Integrate many geodesics; returns positions/momenta at each step and alive mask.

    A geodesic is frozen once it leaves the chart; samples after that are
    marked dead.  Output shapes ``(n_steps + 1, B, D)`` and ``(n_steps + 1, B)``.
    """
    B, D = x.shape
    xs = np.empty((n_steps + 1, B, D))
    ps = np.empty((n_steps + 1, B, D))
    alive = np.empty((n_steps + 1, B), dtype=bool)
    xs[0], ps[0] = x, p
    alive[0] = model.in_chart(x)
    cur_x, cur_p = x.copy(), p.copy()
    ok = alive[0].copy()
    hs = h / substeps
    for k in range(1, n_steps + 1):
        idx = np.flatnonzero(ok)
        if idx.size:
            nx, np_ = cur_x[idx], cur_p[idx]
            for _ in range(substeps):
                nx, np_ = rk4_step(model, nx, np_, hs)
            inside = model.in_chart(nx)
            cur_x[idx[inside]] = nx[inside]
            cur_p[idx[inside]] = np_[inside]
            ok[idx[~inside]] = False
        xs[k], ps[k] = cur_x, cur_p
        alive[k] = ok
    return xs, ps, alive


def check_trajectory_model(model: CometricModel, trajectory: Trajectory) -> None:
    if trajectory.model_id != model.model_id:
        raise UsageError("trajectory was produced by a different model")


__all__ = [
    "CotangentState", "Trajectory", "hamiltonian", "hamiltonian_vector_field",
    "geodesic_shoot", "shooting_map", "initial_data", "rk4_step", "integrate_batch",
    "shoot_to", "theta_slots", "uniform_steps",
]
