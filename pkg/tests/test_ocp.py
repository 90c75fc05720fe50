import itertools
import math

import numpy as np
import pytest
from scipy.optimize import minimize

from gpclab.dynamics import GeneralizedState, RobotParams, simulate, velocity_from_wheels
from gpclab.errors import NonFiniteCost, NotConverged
from gpclab.ocp import (ControlSequence, CostWeights, RolloutProblem, SolverOptions,
                        collision_cost, projected_gradient, rollout_cost, solve_box_qp,
                        solve_ocp, stage_cost, tracking_cost, wrap_angle)
from gpclab.trajectories import ObstacleState, ReferenceWindow

P = RobotParams()


def moving_state(rng):
    q = np.array([*rng.uniform(-1, 1, 2), rng.uniform(-math.pi, math.pi), 0.0, 0.0])
    return GeneralizedState(q, velocity_from_wheels(q, *rng.uniform(2, 10, 2), P))


def window_from(states, dt=0.05):
    ref = np.zeros((len(states), 5))
    ref[:, :3] = states[:, :3]
    return ReferenceWindow(dt * np.arange(1, len(states) + 1), ref)


def random_instance(rng, n, with_obstacle):
    s0 = moving_state(rng)
    u_ref = rng.uniform(-1, 1, (n, 2))
    traj = simulate(s0, np.repeat(u_ref, 5, axis=0), 0.01, P)
    refs = window_from(traj[5::5] + np.r_[rng.normal(0, 0.05, 3), np.zeros(7)])
    obstacles = []
    if with_obstacle:
        mid = traj[len(traj) // 2, :2]
        obstacles = [ObstacleState(mid + rng.normal(0, 0.2, 2), rng.normal(0, 0.3, 2), 0.3)]
    return s0, refs, obstacles


# costs --------------------------------------------------------------------

def test_tracking_cost_examples():
    assert tracking_cost(np.ones(5), np.ones(5), np.ones(5)) == 0.0
    assert tracking_cost(np.eye(5)[0], np.zeros(5), np.eye(5)) == 1.0
    assert tracking_cost([1, 2, 0, 0, 0], np.zeros(5), [2, 3, 0, 0, 0]) == 14.0


def test_tracking_cost_wraps_heading():
    a = tracking_cost([0, 0, 3 * math.pi / 2, 0, 0], np.zeros(5), [0, 0, 1, 0, 0])
    assert a == pytest.approx((math.pi / 2) ** 2)


def test_wrap_angle():
    assert wrap_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2)
    assert wrap_angle(-math.pi) == pytest.approx(math.pi)
    assert wrap_angle(math.pi) == pytest.approx(math.pi)


def test_collision_cost_examples():
    assert collision_cost([0, 0], [[1e6, 0]], 1.0, 1.0, 0.3) == pytest.approx(0.0, abs=1e-300)
    assert collision_cost([0, 0], [[0.3, 0]], 2.0, 5.0, 0.3) == pytest.approx(1.0)
    assert collision_cost([0, 0], [[0.3 + math.log(3), 0]], 1.0, 1.0, 0.3) == pytest.approx(0.25)
    assert collision_cost([0, 0], np.zeros((0, 2)), 1.0, 1.0, 0.3) == 0.0
    two = collision_cost([0, 0], [[0.3, 0], [0, 0.3]], 1.0, 1.0, 0.3)
    assert two == pytest.approx(1.0)


def test_stage_cost_is_tracking_plus_collision():
    w = CostWeights(q_x=(1, 1, 0, 0, 0), q_c=2.0)
    obs = [ObstacleState([0.3, 0.0], r_th=0.3)]
    assert stage_cost(np.zeros(5), [1.0, 0.0, 0.0], obs, w) == pytest.approx(2.0)
    assert stage_cost(np.zeros(5), [1.0, 0.0, 0.0], [], w) == pytest.approx(1.0)


def test_weights_validation():
    with pytest.raises(ValueError):
        CostWeights(q_x=(1, 1, -1, 0, 0))
    with pytest.raises(ValueError):
        CostWeights(k=0.0)
    with pytest.raises(ValueError):
        CostWeights(horizon=0)
    with pytest.raises(ValueError):
        ControlSequence(np.full((3, 2), 6.0))


# rollout ------------------------------------------------------------------

def test_rollout_zero_on_reachable_reference():
    rng = np.random.default_rng(0)
    s0 = moving_state(rng)
    u = rng.uniform(-1, 1, (4, 2))
    # the rollout takes one RK4 step of the MPC dt per stage
    traj = simulate(s0, u, 0.05, P)
    refs = window_from(traj[1:])
    w = CostWeights(horizon=4, r_u=0.0)
    assert rollout_cost(s0, u, refs, [], w, P) == pytest.approx(0.0, abs=1e-18)


def test_rollout_single_step_is_stage_cost_of_propagated_state():
    rng = np.random.default_rng(1)
    s0 = moving_state(rng)
    u = np.array([[0.3, -0.2]])
    refs = window_from(np.array([[0.1, 0.2, 0.3] + [0.0] * 7]))
    obs = ObstacleState([0.2, 0.1], [0.5, -0.5], 0.3)
    w = CostWeights(horizon=1, r_u=0.0, q_x=(3, 2, 1, 0, 0))
    x1 = simulate(s0, u, 0.05, P)[-1]
    o1 = ObstacleState(obs.position + obs.velocity * (0.05 + w.delta), r_th=0.3)
    expect = stage_cost(x1[:5], refs.states[0], [o1], w)
    assert rollout_cost(s0, u, refs, [obs], w, P) == pytest.approx(expect, rel=1e-12)
    w_u = CostWeights(horizon=1, r_u=0.5, q_x=(3, 2, 1, 0, 0))
    extra = rollout_cost(s0, u, refs, [obs], w_u, P) - expect
    assert extra == pytest.approx(0.5 * float(np.sum(u ** 2)), rel=1e-9)


def test_rollout_rejects_length_mismatch():
    refs = window_from(np.zeros((3, 10)))
    with pytest.raises(ValueError):
        rollout_cost(GeneralizedState(), np.zeros((2, 2)), refs, [], CostWeights(), P)


def test_solver_gradient_matches_central_differences():
    rng = np.random.default_rng(2)
    for _ in range(10):
        s0, refs, obstacles = random_instance(rng, 6, True)
        w = CostWeights(horizon=6)
        prob = RolloutProblem(s0, refs, obstacles, w, P)
        u = rng.uniform(-2, 2, 12)
        g = prob.gradient(u)
        fd = np.empty(12)
        for i in range(12):
            e = np.zeros(12)
            e[i] = 1e-5
            fd[i] = (rollout_cost(s0, u + e, refs, obstacles, w, P)
                     - rollout_cost(s0, u - e, refs, obstacles, w, P)) / 2e-5
        assert np.linalg.norm(g - fd) <= 1e-4 * np.linalg.norm(fd)


# quadratic subproblem -----------------------------------------------------

def test_box_qp_matches_reference_optimizer():
    rng = np.random.default_rng(3)
    for _ in range(30):
        n = 8
        A = rng.normal(size=(n, n))
        H = A @ A.T + 0.1 * np.eye(n)
        g = rng.normal(0, 3, n)
        lo, hi = -rng.uniform(0, 1, n), rng.uniform(0, 1, n)
        p = solve_box_qp(H, g, lo, hi)
        assert np.all(p >= lo) and np.all(p <= hi)
        # KKT: projected gradient vanishes at the box-constrained minimizer
        assert np.max(np.abs(projected_gradient(p, H @ p + g, lo, hi))) <= 1e-9
        ref = minimize(lambda x: 0.5 * x @ H @ x + g @ x, np.zeros(n), jac=lambda x: H @ x + g,
                       bounds=list(zip(lo, hi)), method="L-BFGS-B",
                       options={"ftol": 1e-15, "gtol": 1e-12})
        assert 0.5 * p @ H @ p + g @ p <= ref.fun + 1e-9


# solver -------------------------------------------------------------------

def test_brute_force_grid_never_beats_solver():
    rng = np.random.default_rng(4)
    grid = list(itertools.product([-1.0, 0.0, 1.0], repeat=6))
    opts = SolverOptions(u_min=-1.0, u_max=1.0)
    w = CostWeights(horizon=3)
    for i in range(20):
        s0, refs, obstacles = random_instance(rng, 3, i % 2 == 0)
        prob = RolloutProblem(s0, refs, obstacles, w, P)
        brute = min(prob.cost(np.array(u)) for u in grid)
        _, report = solve_ocp(s0, refs, obstacles, w, np.zeros((3, 2)), P, opts)
        assert report.cost <= 1.01 * brute + 1e-9


def test_single_step_matches_grid_refinement_oracle():
    rng = np.random.default_rng(5)
    s0 = moving_state(rng)
    refs = window_from(np.array([[*s0.q[:2] + [0.03, -0.02], s0.q[2] + 0.05] + [0.0] * 7]))
    w = CostWeights(horizon=1)
    prob = RolloutProblem(s0, refs, [], w, P)
    axis = np.linspace(-5, 5, 200)
    best = min(((prob.cost(np.array([a, b])), a, b) for a in axis for b in axis))
    ref = minimize(prob.cost, np.array(best[1:]), method="Nelder-Mead",
                   options={"xatol": 1e-8, "fatol": 1e-14, "maxiter": 5000})
    u, report = solve_ocp(s0, refs, [], w, np.zeros((1, 2)), P)
    assert np.max(np.abs(u.reshape(-1) - ref.x)) <= 1e-2
    assert report.converged


def test_stationary_start_converges_immediately():
    rng = np.random.default_rng(6)
    s0, refs, _ = random_instance(rng, 5, False)
    w = CostWeights(horizon=5)
    u1, _ = solve_ocp(s0, refs, [], w, np.zeros((5, 2)), P)
    u2, report = solve_ocp(s0, refs, [], w, u1, P)
    assert report.iterations <= 2
    assert np.max(np.abs(u2 - u1)) <= 1e-4


def test_active_bound_satisfies_projected_gradient_condition():
    s0 = GeneralizedState()
    far = np.zeros((5, 10))
    far[:, 0] = np.linspace(1.0, 5.0, 5)
    refs = window_from(far)
    opts = SolverOptions(u_min=-0.2, u_max=0.2)
    w = CostWeights(horizon=5)
    u, report = solve_ocp(s0, refs, [], w, np.zeros((5, 2)), P, opts)
    # driving forward needs a negative right-wheel torque in phi1's sign convention
    assert np.any(np.isclose(np.abs(u), 0.2))
    prob = RolloutProblem(s0, refs, [], w, P)
    pg = projected_gradient(u.reshape(-1), prob.gradient(u.reshape(-1)), -0.2, 0.2)
    assert np.max(np.abs(pg)) <= opts.gtol or report.reason == "xtol"
    assert np.max(np.abs(pg)) <= 1e-4


def test_solver_contract():
    rng = np.random.default_rng(7)
    s0, refs, obstacles = random_instance(rng, 8, True)
    w = CostWeights(horizon=8)
    u0 = rng.uniform(-1, 1, (8, 2))
    u, report = solve_ocp(s0, refs, obstacles, w, u0, P)
    assert np.all(np.abs(u) <= 5.0)
    assert report.cost <= rollout_cost(s0, u0, refs, obstacles, w, P)
    assert report.cost == pytest.approx(rollout_cost(s0, u, refs, obstacles, w, P))
    assert report.wall_time >= 0 and report.cpu_time >= 0
    _, again = solve_ocp(s0, refs, obstacles, w, u0, P)
    assert again.iterations == report.iterations and again.cost == report.cost


def test_solver_errors():
    rng = np.random.default_rng(8)
    s0, refs, obstacles = random_instance(rng, 4, True)
    w = CostWeights(horizon=4)
    with pytest.raises(ValueError):
        solve_ocp(s0, refs, obstacles, w, np.full((4, 2), 9.0), P)
    with pytest.raises(ValueError):
        solve_ocp(s0, refs, obstacles, w, np.zeros((3, 2)), P)
    with pytest.raises(NotConverged) as info:
        solve_ocp(s0, refs, obstacles, w, np.full((4, 2), 1.0), P,
                  SolverOptions(max_iter=1, gtol=1e-14), strict=True)
    assert info.value.args
    bad = ObstacleState([0.0, 0.0], r_th=0.3)
    with pytest.raises(NonFiniteCost):
        solve_ocp(s0, refs, [bad], CostWeights(horizon=4, q_c=math.inf), np.zeros((4, 2)), P)
