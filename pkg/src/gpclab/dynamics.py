"""Differential-drive robot plant in manipulator form.

    M(q) q'' + B(q, q') - C(q)^T lam = T

with generalized coordinates q = (x, y, theta, phi1, phi2), phi1 the right
wheel and phi2 the left wheel.  The rolling constraints C(q) q' = 0 are
enforced through the constraint forces lam.

The per-stage work is done by numba kernels operating on a packed parameter
vector so that the MPC can roll the model out thousands of times per solve.
The matrix-form helpers (``mass_matrix``, ``constraint_matrix`` ...) are
plain numpy and serve as the readable reference the kernels are tested
against.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import SingularConstraintSystem

RCOND_MIN = 1e-12

# layout of the packed parameter vector used by the kernels
_MT, _MBD, _IT, _IW, _RHO, _W = range(6)


@dataclass(frozen=True)
class RobotParams:
    chassis_mass: float = 10.0
    wheel_mass: float = 1.0
    chassis_offset: float = 0.1
    wheel_radius: float = 0.05
    half_track: float = 0.2
    chassis_yaw_inertia: float = 0.4
    total_yaw_inertia: float = 0.5
    wheel_spin_inertia: float = 0.005
    total_mass: float | None = None

    def __post_init__(self):
        mt = self.chassis_mass + 2.0 * self.wheel_mass
        if self.total_mass is None:
            object.__setattr__(self, "total_mass", mt)
        elif abs(self.total_mass - mt) > 1e-12:
            raise ValueError(
                f"total_mass {self.total_mass} != chassis_mass + 2*wheel_mass = {mt}")
        for name in ("chassis_mass", "wheel_mass", "wheel_radius", "half_track",
                     "chassis_yaw_inertia", "total_yaw_inertia", "wheel_spin_inertia"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")
        if self.chassis_offset < 0:
            raise ValueError("chassis_offset must be non-negative")

    def packed(self) -> np.ndarray:
        return np.array([
            self.total_mass,
            self.chassis_mass * self.chassis_offset,
            self.total_yaw_inertia,
            self.wheel_spin_inertia,
            self.wheel_radius,
            self.half_track,
        ])


@dataclass(frozen=True)
class GeneralizedState:
    """Coordinates ``q`` and velocities ``qdot`` (both length 5)."""

    q: np.ndarray = field(default_factory=lambda: np.zeros(5))
    qdot: np.ndarray = field(default_factory=lambda: np.zeros(5))

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).reshape(5)
        qd = np.asarray(self.qdot, dtype=float).reshape(5)
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(qd))):
            raise ValueError("state entries must be finite")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "qdot", qd)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.q, self.qdot])

    @classmethod
    def from_vector(cls, s) -> "GeneralizedState":
        s = np.asarray(s, dtype=float)
        return cls(s[:5].copy(), s[5:].copy())


@dataclass(frozen=True)
class WheelTorques:
    right: float = 0.0
    left: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.right) and math.isfinite(self.left)):
            raise ValueError("torques must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.right, self.left])


def embed_torques(tau_right: float, tau_left: float) -> np.ndarray:
    """Right-hand side T of the manipulator equation for given wheel torques.

    phi1 is measured opposite to the forward roll of the right wheel (see the
    sign of the rho/2 entries in the first row of C), so a torque that drives
    the right wheel forward enters with a minus sign.
    """
    return np.array([0.0, 0.0, 0.0, -tau_right, tau_left])


# --------------------------------------------------------------------------
# matrix-form reference implementation

def mass_matrix(q, params: RobotParams) -> np.ndarray:
    th = q[2]
    mt = params.total_mass
    a = params.chassis_mass * params.chassis_offset
    iw = params.wheel_spin_inertia
    s, c = math.sin(th), math.cos(th)
    return np.array([
        [mt, 0.0, -a * s, 0.0, 0.0],
        [0.0, mt, a * c, 0.0, 0.0],
        [-a * s, a * c, params.total_yaw_inertia, 0.0, 0.0],
        [0.0, 0.0, 0.0, iw, 0.0],
        [0.0, 0.0, 0.0, 0.0, iw],
    ])


def coriolis_vector(q, qdot, params: RobotParams) -> np.ndarray:
    th, thd = q[2], qdot[2]
    a = params.chassis_mass * params.chassis_offset
    return -a * thd * thd * np.array([math.cos(th), math.sin(th), 0.0, 0.0, 0.0])


def constraint_matrix(q, params: RobotParams) -> np.ndarray:
    th = q[2]
    s, c = math.sin(th), math.cos(th)
    h = params.wheel_radius / 2.0
    g = params.wheel_radius / (2.0 * params.half_track)
    return np.array([
        [c, s, 0.0, h, -h],
        [-s, c, 0.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, g, g],
    ])


def constraint_matrix_dot(q, qdot, params: RobotParams) -> np.ndarray:
    th, thd = q[2], qdot[2]
    s, c = math.sin(th), math.cos(th)
    out = np.zeros((3, 5))
    out[0, 0], out[0, 1] = -s * thd, c * thd
    out[1, 0], out[1, 1] = -c * thd, -s * thd
    return out


def _check_rcond(S):
    inv = np.linalg.inv(S)
    rcond = 1.0 / (np.linalg.norm(S, 1) * np.linalg.norm(inv, 1))
    if not rcond >= RCOND_MIN:
        raise SingularConstraintSystem(f"C M^-1 C^T reciprocal condition {rcond:.3e}")
    return inv


def constraint_forces(q, qdot, torques5, params: RobotParams) -> np.ndarray:
    """lam = -[C M^-1 C^T]^-1 [C M^-1 (T - B) + Cdot qdot]."""
    M = mass_matrix(q, params)
    C = constraint_matrix(q, params)
    Cd = constraint_matrix_dot(q, qdot, params)
    B = coriolis_vector(q, qdot, params)
    Minv = np.linalg.inv(M)
    S_inv = _check_rcond(C @ Minv @ C.T)
    rhs = C @ Minv @ (np.asarray(torques5, float) - B) + Cd @ np.asarray(qdot, float)
    return -S_inv @ rhs


def acceleration(q, qdot, torques, params: RobotParams) -> np.ndarray:
    """q'' = M^-1 (T + C^T lam - B) for a ``WheelTorques`` or (right, left) pair."""
    if isinstance(torques, WheelTorques):
        tr, tl = torques.right, torques.left
    else:
        tr, tl = torques
    T = embed_torques(tr, tl)
    lam = constraint_forces(q, qdot, T, params)
    C = constraint_matrix(q, params)
    B = coriolis_vector(q, qdot, params)
    return np.linalg.solve(mass_matrix(q, params), T + C.T @ lam - B)


def kinetic_energy(q, qdot, params: RobotParams) -> float:
    qdot = np.asarray(qdot, float)
    return 0.5 * float(qdot @ mass_matrix(q, params) @ qdot)


def velocity_from_wheels(q, right_rate: float, left_rate: float, params: RobotParams) -> np.ndarray:
    """qdot consistent with the constraints for given forward wheel roll rates.

    ``right_rate``/``left_rate`` are the rates at which each wheel rolls the
    robot forward (rad/s); returns the full 5-vector of coordinate rates.
    """
    rho, w = params.wheel_radius, params.half_track
    th = q[2]
    v = 0.5 * rho * (right_rate + left_rate)
    om = 0.5 * rho * (right_rate - left_rate) / w
    return np.array([v * math.cos(th), v * math.sin(th), om, -right_rate, left_rate])


# --------------------------------------------------------------------------
# numba kernels

@njit(cache=True)
def _sym3_inv(a00, a01, a02, a11, a12, a22):
    c00 = a11 * a22 - a12 * a12
    c01 = a02 * a12 - a01 * a22
    c02 = a01 * a12 - a02 * a11
    c11 = a00 * a22 - a02 * a02
    c12 = a01 * a02 - a00 * a12
    c22 = a00 * a11 - a01 * a01
    det = a00 * c00 + a01 * c01 + a02 * c02
    return c00 / det, c01 / det, c02 / det, c11 / det, c12 / det, c22 / det


@njit(cache=True)
def _accel_kernel(s, tau_r, tau_l, pa, out):
    """Write q'' for the packed state s = (q, qdot) into ``out``."""
    mt = pa[0]
    a = pa[1]
    it = pa[2]
    iw = pa[3]
    h = 0.5 * pa[4]
    g = pa[4] / (2.0 * pa[5])
    th = s[2]
    xd = s[5]
    yd = s[6]
    thd = s[7]
    sn = math.sin(th)
    cs = math.cos(th)

    # inverse of the planar block of M; wheel block is iw * I
    m00, m01, m02, m11, m12, m22 = _sym3_inv(mt, 0.0, -a * sn, mt, a * cs, it)
    iiw = 1.0 / iw

    # f = T - B
    f0 = a * thd * thd * cs
    f1 = a * thd * thd * sn
    f3 = -tau_r
    f4 = tau_l
    # z = M^-1 f
    z0 = m00 * f0 + m01 * f1
    z1 = m01 * f0 + m11 * f1
    z2 = m02 * f0 + m12 * f1
    z3 = f3 * iiw
    z4 = f4 * iiw

    # Y = M^-1 C^T, columns for the three constraint rows
    # row1 = (cs, sn, 0, h, -h); row2 = (-sn, cs, 0, 0, 0); row3 = (0, 0, 1, g, g)
    y10 = m00 * cs + m01 * sn
    y11 = m01 * cs + m11 * sn
    y12 = m02 * cs + m12 * sn
    y13 = h * iiw
    y14 = -h * iiw
    y20 = -m00 * sn + m01 * cs
    y21 = -m01 * sn + m11 * cs
    y22 = -m02 * sn + m12 * cs
    y30 = m02
    y31 = m12
    y32 = m22
    y33 = g * iiw
    y34 = g * iiw

    # S = C M^-1 C^T
    s11 = cs * y10 + sn * y11 + h * y13 - h * y14
    s12 = cs * y20 + sn * y21
    s13 = cs * y30 + sn * y31 + h * y33 - h * y34
    s22 = -sn * y20 + cs * y21
    s23 = -sn * y30 + cs * y31
    s33 = y32 + g * y33 + g * y34

    i11, i12, i13, i22, i23, i33 = _sym3_inv(s11, s12, s13, s22, s23, s33)
    n_s = max(abs(s11) + abs(s12) + abs(s13),
              abs(s12) + abs(s22) + abs(s23),
              abs(s13) + abs(s23) + abs(s33))
    n_i = max(abs(i11) + abs(i12) + abs(i13),
              abs(i12) + abs(i22) + abs(i23),
              abs(i13) + abs(i23) + abs(i33))
    rcond = 1.0 / (n_s * n_i)
    if not rcond >= 1e-12:
        raise SingularConstraintSystem("C M^-1 C^T is numerically singular")

    # rhs = C z + Cdot qdot
    r1 = cs * z0 + sn * z1 + h * z3 - h * z4 + (-sn * thd * xd + cs * thd * yd)
    r2 = -sn * z0 + cs * z1 + (-cs * thd * xd - sn * thd * yd)
    r3 = z2 + g * z3 + g * z4
    l1 = -(i11 * r1 + i12 * r2 + i13 * r3)
    l2 = -(i12 * r1 + i22 * r2 + i23 * r3)
    l3 = -(i13 * r1 + i23 * r2 + i33 * r3)

    out[0] = z0 + y10 * l1 + y20 * l2 + y30 * l3
    out[1] = z1 + y11 * l1 + y21 * l2 + y31 * l3
    out[2] = z2 + y12 * l1 + y22 * l2 + y32 * l3
    out[3] = z3 + y13 * l1 + y33 * l3
    out[4] = z4 + y14 * l1 + y34 * l3


@njit(cache=True)
def _project_velocity(s, pa):
    """Remove the component of qdot that violates C(q) qdot = 0.

    The rows of C are mutually orthogonal, so C C^T is diagonal and the
    projection splits into three independent row updates.
    """
    h = 0.5 * pa[4]
    g = pa[4] / (2.0 * pa[5])
    sn = math.sin(s[2])
    cs = math.cos(s[2])
    r1 = cs * s[5] + sn * s[6] + h * s[8] - h * s[9]
    r2 = -sn * s[5] + cs * s[6]
    r3 = s[7] + g * s[8] + g * s[9]
    k1 = r1 / (1.0 + 2.0 * h * h)
    k3 = r3 / (1.0 + 2.0 * g * g)
    s[5] -= cs * k1 - sn * r2
    s[6] -= sn * k1 + cs * r2
    s[7] -= k3
    s[8] -= h * k1 + g * k3
    s[9] -= -h * k1 + g * k3


@njit(cache=True)
def _rk4_inplace(s, tau_r, tau_l, dt, pa, work):
    """One classical RK4 step on s = (q, qdot), followed by velocity projection.

    ``work`` is scratch space of shape (6, 10).
    """
    k1 = work[0]
    k2 = work[1]
    k3 = work[2]
    k4 = work[3]
    tmp = work[4]
    acc = work[5]
    for i in range(5):
        k1[i] = s[5 + i]
    _accel_kernel(s, tau_r, tau_l, pa, acc)
    for i in range(5):
        k1[5 + i] = acc[i]
    for i in range(10):
        tmp[i] = s[i] + 0.5 * dt * k1[i]
    for i in range(5):
        k2[i] = tmp[5 + i]
    _accel_kernel(tmp, tau_r, tau_l, pa, acc)
    for i in range(5):
        k2[5 + i] = acc[i]
    for i in range(10):
        tmp[i] = s[i] + 0.5 * dt * k2[i]
    for i in range(5):
        k3[i] = tmp[5 + i]
    _accel_kernel(tmp, tau_r, tau_l, pa, acc)
    for i in range(5):
        k3[5 + i] = acc[i]
    for i in range(10):
        tmp[i] = s[i] + dt * k3[i]
    for i in range(5):
        k4[i] = tmp[5 + i]
    _accel_kernel(tmp, tau_r, tau_l, pa, acc)
    for i in range(5):
        k4[5 + i] = acc[i]
    for i in range(10):
        s[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
    _project_velocity(s, pa)


@njit(cache=True)
def _step_vec(s, tau_r, tau_l, dt, pa):
    out = s.copy()
    _rk4_inplace(out, tau_r, tau_l, dt, pa, np.empty((6, 10)))
    return out


@njit(cache=True)
def _accel_vec(s, tau_r, tau_l, pa):
    out = np.empty(5)
    _accel_kernel(s, tau_r, tau_l, pa, out)
    return out


@njit(cache=True)
def _simulate(s0, u, dt, pa):
    """Roll out a (K, 2) torque sequence; returns the (K + 1, 10) trajectory."""
    n = u.shape[0]
    traj = np.empty((n + 1, 10))
    s = s0.copy()
    work = np.empty((6, 10))
    traj[0] = s
    for k in range(n):
        _rk4_inplace(s, u[k, 0], u[k, 1], dt, pa, work)
        traj[k + 1] = s
    return traj


# --------------------------------------------------------------------------
# public fast-path API

def fast_acceleration(q, qdot, torques, params: RobotParams) -> np.ndarray:
    tr, tl = (torques.right, torques.left) if isinstance(torques, WheelTorques) else torques
    s = np.concatenate([np.asarray(q, float), np.asarray(qdot, float)])
    return _accel_vec(s, float(tr), float(tl), params.packed())


def step_rk4(state: GeneralizedState, torques, dt: float, params: RobotParams) -> GeneralizedState:
    """Advance the plant by ``dt`` with the torques held constant."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    tr, tl = (torques.right, torques.left) if isinstance(torques, WheelTorques) else torques
    out = _step_vec(state.vector(), float(tr), float(tl), float(dt), params.packed())
    return GeneralizedState.from_vector(out)


def simulate(state: GeneralizedState, torque_sequence, dt: float, params: RobotParams) -> np.ndarray:
    u = np.ascontiguousarray(torque_sequence, dtype=float).reshape(-1, 2)
    return _simulate(state.vector(), u, float(dt), params.packed())
