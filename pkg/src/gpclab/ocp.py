"""Finite-horizon tracking/collision cost and its box-constrained minimizer.

The objective for a torque sequence u_0..u_{N-1} is

    J(u) = sum_{k=1..N} (x_k - xr_k)^T Qx (x_k - xr_k)
                        + sum_j Qc / (1 + exp(k (d_jk - r_th,j)))
                        + r_u |u_{k-1}|^2

with x_{k} = RK4(x_{k-1}, u_{k-1}, dt) and obstacle positions extrapolated
at constant velocity.  The small effort weight r_u keeps the problem well
conditioned; without it the optimal torques ring between steps.  It is not
part of the stage cost.

``solve_ocp`` minimizes J with a quasi-Newton SQP: each iteration solves a
box-constrained quadratic model for the step and backtracks along it until
the Armijo condition holds.
"""
from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .dynamics import GeneralizedState, RobotParams, _rk4_inplace
from .errors import NonFiniteCost, NotConverged
from .trajectories import ObstacleState, ReferenceWindow, predict_obstacle

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class CostWeights:
    q_x: tuple = (10.0, 10.0, 0.5, 0.0, 0.0)
    q_c: float = 50.0
    k: float = 20.0
    horizon: int = 15
    dt: float = 0.05
    delta: float = 0.02
    r_u: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "q_x", tuple(float(v) for v in self.q_x))
        if len(self.q_x) != 5 or min(self.q_x) < 0:
            raise ValueError("q_x must be 5 non-negative diagonal entries")
        if self.q_c < 0 or not self.k > 0 or self.r_u < 0:
            raise ValueError("need q_c >= 0, k > 0 and r_u >= 0")
        if self.horizon < 1 or not self.dt > 0:
            raise ValueError("need horizon >= 1 and dt > 0")


@dataclass(frozen=True)
class SolverOptions:
    gtol: float = 1e-6
    xtol: float = 1e-9
    max_iter: int = 100
    u_min: float = -5.0
    u_max: float = 5.0
    fd_step: float = 1e-6

    @property
    def bounds(self):
        return self.u_min, self.u_max


@dataclass(frozen=True)
class ControlSequence:
    values: np.ndarray  # (N, 2): columns are right, left torque
    u_min: float = -5.0
    u_max: float = 5.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).reshape(-1, 2)
        if np.any(v < self.u_min) or np.any(v > self.u_max):
            raise ValueError("control sequence violates its bounds")
        object.__setattr__(self, "values", v)

    def __len__(self):
        return len(self.values)


@dataclass
class SolveReport:
    cost: float
    iterations: int
    converged: bool
    wall_time: float
    grad_norm: float
    evaluations: int = 0
    reason: str = ""
    initial_cost: float = float("nan")
    # CPU time of the calling thread; unlike wall time it excludes preemption
    cpu_time: float = 0.0


# --------------------------------------------------------------------------
# stage costs

@njit(cache=True)
def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    r = (a + math.pi) % TWO_PI - math.pi
    if r == -math.pi:
        r = math.pi
    return r


def tracking_cost(x, xr, q_x) -> float:
    """(x - xr)^T Qx (x - xr); the heading difference is wrapped."""
    d = np.asarray(x, float) - np.asarray(xr, float)
    if d.shape[0] > 2:
        d[2] = wrap_angle(d[2])
    q = np.asarray(q_x, float)
    if q.ndim == 2:
        return float(d @ q @ d)
    return float(np.sum(q * d * d))


def collision_cost(position, obstacle_positions, q_c, k, r_th) -> float:
    """Sum of sigmoid penalties Qc / (1 + exp(k (d - r_th))) over obstacles."""
    obs = np.asarray(obstacle_positions, float).reshape(-1, 2)
    if obs.shape[0] == 0:
        return 0.0
    d = np.hypot(obs[:, 0] - position[0], obs[:, 1] - position[1])
    q_c, k, r_th = (np.broadcast_to(np.asarray(v, float), d.shape) for v in (q_c, k, r_th))
    with np.errstate(over="ignore"):
        return float(np.sum(q_c / (1.0 + np.exp(k * (d - r_th)))))


def stage_cost(q, xr, obstacles, weights: CostWeights) -> float:
    """Instantaneous J_x + J_c for coordinates ``q`` against reference ``xr``.

    ``obstacles`` holds the obstacle states at the same instant.  This is the
    single code path for the MPC stage cost and the GPC running cost.
    """
    xr5 = np.zeros(5)
    xr = np.asarray(xr, float)
    xr5[: xr.shape[0]] = xr
    jx = tracking_cost(q, xr5, weights.q_x)
    if not obstacles:
        return jx
    pos = [o.position for o in obstacles]
    rth = [o.r_th for o in obstacles]
    return jx + collision_cost(q[:2], pos, weights.q_c, weights.k, rth)


# --------------------------------------------------------------------------
# rollout kernels

@njit(cache=True)
def _rollout(s0, u, ref, qx, r_u, obs_xy, obs_qc, obs_k, obs_rth, dt, pa, work, resid):
    """Cost of the flat torque vector ``u`` (2N); fills ``resid`` (7N)."""
    n = ref.shape[0]
    m = obs_qc.shape[0]
    s = work[6]
    for i in range(10):
        s[i] = s0[i]
    total = 0.0
    for k in range(n):
        _rk4_inplace(s, u[2 * k], u[2 * k + 1], dt, pa, work)
        for i in range(5):
            d = s[i] - ref[k, i]
            if i == 2:
                d = wrap_angle(d)
            total += qx[i] * d * d
            resid[7 * k + i] = math.sqrt(qx[i]) * d
        for i in range(2):
            uk = u[2 * k + i]
            total += r_u * uk * uk
            resid[7 * k + 5 + i] = math.sqrt(r_u) * uk
        for j in range(m):
            dx = s[0] - obs_xy[k, j, 0]
            dy = s[1] - obs_xy[k, j, 1]
            dist = math.sqrt(dx * dx + dy * dy)
            total += obs_qc[j] / (1.0 + math.exp(min(obs_k[j] * (dist - obs_rth[j]), 700.0)))
    return total


@njit(cache=True)
def _cost_only(s0, u, ref, qx, r_u, obs_xy, obs_qc, obs_k, obs_rth, dt, pa):
    work = np.empty((7, 10))
    resid = np.empty(7 * ref.shape[0])
    return _rollout(s0, u, ref, qx, r_u, obs_xy, obs_qc, obs_k, obs_rth, dt, pa, work, resid)


@njit(cache=True)
def _cost_grad_jac(s0, u, ref, qx, r_u, obs_xy, obs_qc, obs_k, obs_rth, dt, pa, rel_step):
    """Cost, central-difference gradient and residual Jacobian at ``u``."""
    nu = u.shape[0]
    nr = 7 * ref.shape[0]
    work = np.empty((7, 10))
    r0 = np.empty(nr)
    rp = np.empty(nr)
    rm = np.empty(nr)
    grad = np.empty(nu)
    jac = np.empty((nr, nu))
    f0 = _rollout(s0, u, ref, qx, r_u, obs_xy, obs_qc, obs_k, obs_rth, dt, pa, work, r0)
    up = u.copy()
    for i in range(nu):
        h = rel_step * (1.0 + abs(u[i]))
        up[i] = u[i] + h
        fp = _rollout(s0, up, ref, qx, r_u, obs_xy, obs_qc, obs_k, obs_rth, dt, pa, work, rp)
        up[i] = u[i] - h
        fm = _rollout(s0, up, ref, qx, r_u, obs_xy, obs_qc, obs_k, obs_rth, dt, pa, work, rm)
        up[i] = u[i]
        grad[i] = (fp - fm) / (2.0 * h)
        for r in range(nr):
            jac[r, i] = (rp[r] - rm[r]) / (2.0 * h)
    return f0, grad, jac


class RolloutProblem:
    """Packed, numba-ready form of one finite-horizon problem."""

    def __init__(self, x0: GeneralizedState, refs: ReferenceWindow, obstacles,
                 weights: CostWeights, params: RobotParams, t0: float = 0.0,
                 fd_step: float = 1e-6):
        n = len(refs)
        self.n = n
        self.s0 = x0.vector() if isinstance(x0, GeneralizedState) else np.asarray(x0, float)
        self.ref = np.ascontiguousarray(refs.states, dtype=float)
        self.qx = np.asarray(weights.q_x, dtype=float)
        self.r_u = float(weights.r_u)
        obstacles = list(obstacles or [])
        m = len(obstacles)
        self.obs_xy = np.zeros((n, m, 2))
        for j, o in enumerate(obstacles):
            for k in range(n):
                self.obs_xy[k, j] = predict_obstacle(o, t0, t0 + (k + 1) * weights.dt, weights.delta)
        self.obs_qc = np.full(m, float(weights.q_c))
        self.obs_k = np.full(m, float(weights.k))
        self.obs_rth = np.array([o.r_th for o in obstacles], dtype=float)
        self.dt = float(weights.dt)
        self.pa = params.packed()
        self.fd_step = fd_step
        self.evaluations = 0

    def _args(self):
        return (self.ref, self.qx, self.r_u, self.obs_xy, self.obs_qc, self.obs_k, self.obs_rth, self.dt, self.pa)

    def cost(self, u) -> float:
        self.evaluations += 1
        u = np.ascontiguousarray(u, dtype=float).reshape(-1)
        return _cost_only(self.s0, u, *self._args())

    def cost_grad_jac(self, u):
        self.evaluations += 1 + 2 * u.size
        u = np.ascontiguousarray(u, dtype=float).reshape(-1)
        return _cost_grad_jac(self.s0, u, *self._args(), self.fd_step)

    def gradient(self, u) -> np.ndarray:
        return self.cost_grad_jac(u)[1]


def rollout_cost(x0, u, refs: ReferenceWindow, obstacles, weights: CostWeights,
                 params: RobotParams, t0: float = 0.0) -> float:
    """Predicted cost of applying the (N, 2) torque sequence ``u`` from ``x0``."""
    u = np.asarray(u, float).reshape(-1, 2)
    if len(u) != len(refs):
        raise ValueError("control sequence and reference window lengths differ")
    if len(refs) != weights.horizon:
        weights = dataclasses.replace(weights, horizon=len(refs))
    return RolloutProblem(x0, refs, obstacles, weights, params, t0).cost(u)


# --------------------------------------------------------------------------
# quadratic subproblem

def solve_box_qp(H, g, lo, hi, max_iter: int = 500) -> np.ndarray:
    """Minimize 0.5 p^T H p + g^T p subject to lo <= p <= hi.

    Primal active-set method for positive definite H; requires lo <= 0 <= hi
    so that p = 0 is a feasible start.
    """
    n = g.shape[0]
    p = np.zeros(n)
    state = np.zeros(n, dtype=int)  # -1 at lower bound, +1 at upper bound
    state[(lo >= 0) & (g > 0)] = -1
    state[(hi <= 0) & (g < 0)] = 1
    p[state == -1] = lo[state == -1]
    p[state == 1] = hi[state == 1]
    for _ in range(max_iter):
        free = state == 0
        target = p.copy()
        if np.any(free):
            fixed = ~free
            rhs = -g[free]
            if np.any(fixed):
                rhs = rhs - H[np.ix_(free, fixed)] @ p[fixed]
            target[free] = np.linalg.solve(H[np.ix_(free, free)], rhs)
        d = target - p
        alpha, block, side = 1.0, -1, 0
        for i in np.flatnonzero(free):
            if d[i] < 0 and p[i] + d[i] < lo[i]:
                a = (lo[i] - p[i]) / d[i]
                if a < alpha:
                    alpha, block, side = a, i, -1
            elif d[i] > 0 and p[i] + d[i] > hi[i]:
                a = (hi[i] - p[i]) / d[i]
                if a < alpha:
                    alpha, block, side = a, i, 1
        p = p + alpha * d
        if block >= 0:
            state[block] = side
            p[block] = lo[block] if side < 0 else hi[block]
            continue
        grad = H @ p + g
        viol = np.where(state == -1, -grad, 0.0) + np.where(state == 1, grad, 0.0)
        i = int(np.argmax(viol))
        if viol[i] <= 1e-14 * (1.0 + np.abs(grad).max()):
            return p
        state[i] = 0
    return p


def projected_gradient(u, g, lo, hi) -> np.ndarray:
    return u - np.clip(u - g, lo, hi)


def _bfgs_update(H, s, y):
    Hs = H @ s
    sHs = float(s @ Hs)
    sy = float(s @ y)
    if sHs <= 0:
        return H
    # Powell damping keeps the update positive definite
    if sy < 0.2 * sHs:
        th = 0.8 * sHs / (sHs - sy)
        y = th * y + (1.0 - th) * Hs
        sy = float(s @ y)
    return H + np.outer(y, y) / sy - np.outer(Hs, Hs) / sHs


def solve_ocp(x0, refs: ReferenceWindow, obstacles, weights: CostWeights, u_init,
              params: RobotParams, options: SolverOptions = SolverOptions(),
              t0: float = 0.0, strict: bool = False):
    """Minimize the rollout cost over an (N, 2) torque sequence within bounds.

    Returns ``(u, report)``.  With ``strict=True`` a run that exhausts
    ``max_iter`` raises ``NotConverged`` carrying the best iterate; otherwise
    the caller inspects ``report.converged``.
    """
    start = time.perf_counter()
    cpu_start = time.thread_time()
    n = len(refs)
    if len(refs) != weights.horizon:
        weights = dataclasses.replace(weights, horizon=n)
    u = np.array(u_init.values if isinstance(u_init, ControlSequence) else u_init, dtype=float)
    u = u.reshape(-1)
    if u.size != 2 * n:
        raise ValueError("initial control sequence does not match the horizon")
    lo = np.full(u.size, float(options.u_min))
    hi = np.full(u.size, float(options.u_max))
    if np.any(u < lo - 1e-12) or np.any(u > hi + 1e-12):
        raise ValueError("initial control sequence violates the bounds")
    u = np.clip(u, lo, hi)

    prob = RolloutProblem(x0, refs, obstacles, weights, params, t0, options.fd_step)
    f, g, J = prob.cost_grad_jac(u)
    if not math.isfinite(f):
        raise NonFiniteCost(f"objective is {f} at the initial sequence")
    f_init = f
    H = 2.0 * (J.T @ J)
    H[np.diag_indices_from(H)] += 1e-6 * max(1.0, float(np.trace(H)) / u.size)

    converged, reason, it = False, "max_iter", 0
    while True:
        pg = projected_gradient(u, g, lo, hi)
        gnorm = float(np.max(np.abs(pg)))
        if gnorm < options.gtol:
            converged, reason = True, "gtol"
            break
        if it >= options.max_iter:
            break
        p = solve_box_qp(H, g, lo - u, hi - u)
        pmax = float(np.max(np.abs(p)))
        if pmax < options.xtol:
            converged, reason = True, "xtol"
            break
        slope = float(g @ p)
        if slope >= 0:
            # quadratic model lost descent; restart curvature from the diagonal
            H = np.diag(np.maximum(np.diag(H), 1e-8))
            p = solve_box_qp(H, g, lo - u, hi - u)
            slope = float(g @ p)
            pmax = float(np.max(np.abs(p)))
        alpha, accepted = 1.0, False
        while alpha * pmax >= options.xtol:
            trial = np.clip(u + alpha * p, lo, hi)
            ft = prob.cost(trial)
            if math.isfinite(ft) and ft <= f + 1e-4 * alpha * slope:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            converged, reason = True, "xtol"
            break
        it += 1
        f_new, g_new, _ = prob.cost_grad_jac(trial)
        H = _bfgs_update(H, trial - u, g_new - g)
        u, f, g = trial, f_new, g_new

    report = SolveReport(
        cost=float(f), iterations=it, converged=converged,
        wall_time=time.perf_counter() - start, grad_norm=gnorm,
        evaluations=prob.evaluations, reason=reason, initial_cost=float(f_init),
        cpu_time=time.thread_time() - cpu_start)
    u_out = u.reshape(n, 2)
    if strict and not converged:
        raise NotConverged(f"no convergence after {it} iterations", u_out, report)
    return u_out, report
