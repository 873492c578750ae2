import numpy as np
import pytest

from kgservo.geometry import ErrorVector
from kgservo.servo import (
    FeatureLost,
    JacobianEstimate,
    NumericalFailure,
    ServoConfig,
    ServoStatus,
    SingularBootstrapWarning,
    bootstrap_jacobian,
    broyden_update,
    compute_step,
    servo_loop,
    write_trajectory_csv,
)


class LinearPlant:
    """e(q) = A (q - q*), driven by relative moves."""

    def __init__(self, A, q_star, q0):
        self.A = np.asarray(A, dtype=float)
        self.q_star = np.asarray(q_star, dtype=float)
        self.q = np.asarray(q0, dtype=float).copy()
        self.calls = 0

    def __call__(self, dq):
        self.calls += 1
        self.q = self.q + np.asarray(dq, dtype=float)
        return ErrorVector(self.A @ (self.q - self.q_star))


def linear_measure(A, q_star=None):
    A = np.asarray(A, dtype=float)
    q_star = np.zeros(A.shape[1]) if q_star is None else np.asarray(q_star)
    return lambda q: ErrorVector(A @ (np.asarray(q, dtype=float) - q_star))


def test_bootstrap_exact_on_linear_plant():
    rng = np.random.default_rng(10)
    A = rng.normal(size=(3, 4))
    J = bootstrap_jacobian(linear_measure(A), np.zeros(4), ServoConfig())
    assert np.allclose(J.matrix, A, atol=1e-9)
    assert J.error_dim == 3 and J.n_joints == 4
    assert not J.warnings


def test_bootstrap_constant_plant_flags_singular():
    measure = lambda q: ErrorVector(np.array([2.0, 5.0]))
    with pytest.warns(SingularBootstrapWarning):
        J = bootstrap_jacobian(measure, np.zeros(3), ServoConfig())
    assert np.allclose(J.matrix, 0.0)
    assert len(J.warnings) == 3


def test_bootstrap_measure_failure_propagates():
    cfg = ServoConfig()
    delta = cfg.explore_angle

    def measure(q):
        if np.isclose(q[1], delta):  # q0 + delta*u_2 in 1-based joint terms
            raise FeatureLost("blob left the frame")
        return ErrorVector(np.asarray(q, dtype=float)[:2])

    with pytest.raises(FeatureLost):
        bootstrap_jacobian(measure, np.zeros(3), cfg)


def test_bootstrap_returns_robot_home():
    A = np.eye(2)
    seen = []

    def measure(q):
        seen.append(np.asarray(q, dtype=float).copy())
        return ErrorVector(A @ q)

    bootstrap_jacobian(measure, np.array([0.3, -0.2]), ServoConfig())
    assert np.allclose(seen[-1], [0.3, -0.2])


def broyden_oracle(J, de, dq, lam, eps):
    dq = np.asarray(dq, dtype=float)
    return J + lam * np.outer(de - J @ dq, dq) / (dq @ dq + eps)


def test_broyden_zero_residual_keeps_jacobian():
    J = JacobianEstimate(np.array([[1.0, 2.0], [3.0, 4.0]]))
    dq = np.array([0.2, -0.1])
    de = J.matrix @ dq
    out = broyden_update(J, de, dq, ServoConfig(broyden_lambda=1.0))
    assert np.allclose(out.matrix, J.matrix, atol=1e-12)
    assert out.update_count == 1


def test_broyden_scalar_case():
    J = JacobianEstimate(np.array([[1.0]]))
    cfg = ServoConfig(broyden_lambda=1.0, epsilon=1e-12)
    out = broyden_update(J, np.array([2.0]), np.array([1.0]), cfg)
    assert abs(out.matrix[0, 0] - 2.0) < 1e-9


def test_broyden_zero_step_is_guarded():
    J = JacobianEstimate(np.array([[1.0, 2.0], [3.0, 4.0]]))
    out = broyden_update(J, np.array([1.0, 1.0]), np.zeros(2), ServoConfig())
    assert np.allclose(out.matrix, J.matrix)


def test_broyden_literal_formula_rank_and_secant():
    rng = np.random.default_rng(11)
    for lam in (0.05, 1.0):
        cfg = ServoConfig(broyden_lambda=lam, epsilon=1e-12)
        for _ in range(50):
            m, n = rng.integers(1, 5, size=2)
            J = JacobianEstimate(rng.normal(size=(m, n)))
            dq = rng.normal(size=n)
            de = rng.normal(size=m)
            out = broyden_update(J, de, dq, cfg)
            assert np.allclose(
                out.matrix, broyden_oracle(J.matrix, de, dq, lam, cfg.epsilon),
                atol=1e-12,
            )
            sv = np.linalg.svd(out.matrix - J.matrix, compute_uv=False)
            assert np.sum(sv > 1e-9) <= 1
            if lam == 1.0:
                assert np.linalg.norm(out.matrix @ dq - de) < 1e-6


def test_compute_step_examples():
    J = JacobianEstimate(np.eye(2))
    cfg = ServoConfig(gain=0.1, damping=1e-9)
    assert np.allclose(compute_step(J, np.zeros(2), cfg), 0.0)

    cfg0 = ServoConfig(gain=0.1, damping=0.0, max_step=1.0)
    step = compute_step(J, np.array([1.0, 0.0]), cfg0)
    assert np.allclose(step, [-0.1, 0.0], atol=1e-12)

    big = compute_step(J, np.array([500.0, -900.0]), ServoConfig())
    assert np.all(np.abs(big) <= ServoConfig().max_step + 1e-15)


def test_compute_step_is_descent_direction():
    # interior regime: the clamp is a separate contract checked above
    rng = np.random.default_rng(12)
    cfg = ServoConfig(max_step=1e6)
    for _ in range(100):
        J = JacobianEstimate(rng.normal(size=(3, 4)))
        e = rng.normal(size=3)
        if np.linalg.norm(J.matrix.T @ e) < 1e-9:
            continue
        dq = compute_step(J, e, cfg)
        assert float(e @ (J.matrix @ dq)) < 0.0


def test_servo_loop_converges_on_linear_plant():
    rng = np.random.default_rng(13)
    A = rng.normal(size=(4, 4)) + 4.0 * np.eye(4)
    q_star = rng.normal(size=4) * 0.1
    plant = LinearPlant(A, q_star, np.zeros(4))
    cfg = ServoConfig(converge_eps=1e-3, max_iters=100, max_step=1.0, damping=1e-6)
    state, log = servo_loop(plant, np.zeros(4), cfg)
    assert state.status is ServoStatus.CONVERGED
    assert state.iteration < 100
    assert np.max(np.abs(state.e)) < 1e-3


def test_servo_loop_converged_at_iteration_zero():
    plant = LinearPlant(np.eye(2), np.zeros(2), np.zeros(2))
    state, log = servo_loop(plant, np.zeros(2), ServoConfig())
    assert state.status is ServoStatus.CONVERGED
    assert state.iteration == 0
    assert len(log) == 1


def test_servo_loop_feature_lost_keeps_partial_log():
    cfg = ServoConfig(converge_eps=1e-6, max_iters=50)
    bootstrap_calls = 2 * 2 + 2  # measure at q0, 2 per joint, return home

    class FailingPlant(LinearPlant):
        def __call__(self, dq):
            if self.calls + 1 == bootstrap_calls + 4:  # the move of iteration 3
                raise FeatureLost("gone")
            return super().__call__(dq)

    plant = FailingPlant(np.eye(2), np.array([5.0, 5.0]), np.zeros(2))
    state, log = servo_loop(plant, np.zeros(2), cfg)
    assert state.status is ServoStatus.FEATURE_LOST
    assert len(log) == 3


def test_servo_loop_diverged_at_max_iters():
    plant = LinearPlant(np.eye(2), np.array([100.0, 0.0]), np.zeros(2))
    cfg = ServoConfig(max_iters=5, gain=0.01, converge_eps=0.1, max_step=1e-3)
    state, log = servo_loop(plant, np.zeros(2), cfg)
    assert state.status is ServoStatus.DIVERGED
    assert state.iteration == 5


def test_servo_loop_norm_non_increasing_windows():
    rng = np.random.default_rng(14)
    for trial in range(5):
        n = int(rng.integers(2, 5))
        A = rng.normal(size=(n, n)) + 3.0 * np.eye(n)
        plant = LinearPlant(A, rng.normal(size=n) * 0.2, np.zeros(n))
        cfg = ServoConfig(gain=0.5, converge_eps=1e-6, max_iters=80, max_step=1.0)
        _state, log = servo_loop(plant, np.zeros(n), cfg)
        norms = [p.norm for p in log]
        for k in range(len(norms) - 10):
            assert norms[k + 10] <= norms[k] + 1e-9


def test_servo_loop_literal_numerator_mode_still_converges():
    rng = np.random.default_rng(15)
    A = rng.normal(size=(3, 3)) + 3.0 * np.eye(3)
    plant = LinearPlant(A, rng.normal(size=3) * 0.1, np.zeros(3))
    cfg = ServoConfig(
        broyden_numerator="e", converge_eps=1e-3, max_iters=150, max_step=1.0
    )
    state, _log = servo_loop(plant, np.zeros(3), cfg)
    assert state.status is ServoStatus.CONVERGED


def test_trajectory_csv_format(tmp_path):
    plant = LinearPlant(np.eye(2), np.array([0.5, 0.0]), np.zeros(2))
    cfg = ServoConfig(converge_eps=1e-2, max_iters=60, max_step=1.0)
    _state, log = servo_loop(plant, np.zeros(2), cfg)
    path = tmp_path / "traj.csv"
    write_trajectory_csv(path, log)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "iteration,q_1,q_2,e_1,e_2,norm"
    assert len(lines) == len(log) + 1


def test_config_validation():
    with pytest.raises(ValueError):
        ServoConfig(gain=0.0)
    with pytest.raises(ValueError):
        ServoConfig(gain=1.5)
    with pytest.raises(ValueError):
        ServoConfig(damping=-1.0)
    with pytest.raises(ValueError):
        ServoConfig(broyden_numerator="both")


def test_status_transitions_monotone():
    plant = LinearPlant(np.eye(2), np.array([3.0, 1.0]), np.zeros(2))
    seen = []

    def watch(point):
        seen.append(point.iteration)

    cfg = ServoConfig(converge_eps=1e-2, max_iters=100, max_step=1.0)
    state, _ = servo_loop(plant, np.zeros(2), cfg, on_step=watch)
    assert state.status is ServoStatus.CONVERGED
    assert seen == sorted(seen)
