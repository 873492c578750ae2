"""Uncalibrated visual servoing.

The visuo-motor Jacobian is bootstrapped with orthogonal exploratory
motions (central differences), refined online with rank-one Broyden
updates, and inverted through damped least squares to produce clamped
joint steps.  No camera calibration or analytic robot Jacobian is used
anywhere.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .geometry import ErrorVector


class ServoError(Exception):
    pass


class FeatureLost(ServoError):
    """A measurement failed: features left the frame or masks collapsed."""


class NumericalFailure(ServoError):
    pass


class SingularBootstrapWarning(UserWarning):
    """An exploratory motion produced no measurable image change."""


def _values(e) -> np.ndarray:
    if isinstance(e, ErrorVector):
        return np.asarray(e.values, dtype=float)
    return np.asarray(e, dtype=float).reshape(-1)


@dataclass(frozen=True)
class ServoConfig:
    broyden_lambda: float = 0.05
    epsilon: float = 1e-6
    explore_angle: float = math.radians(8.0)
    gain: float = 0.1
    damping: float = 1e-3
    max_step: float = 0.05
    converge_eps: float = 2.0
    max_iters: int = 300
    rate_hz: float = 1.0
    #: which vector feeds the Broyden numerator: the residual step "delta_e"
    #: (secant-consistent) or the literal current error "e".
    broyden_numerator: str = "delta_e"

    def __post_init__(self):
        positive = {
            "broyden_lambda": self.broyden_lambda,
            "epsilon": self.epsilon,
            "explore_angle": self.explore_angle,
            "gain": self.gain,
            "max_step": self.max_step,
            "converge_eps": self.converge_eps,
            "max_iters": self.max_iters,
            "rate_hz": self.rate_hz,
        }
        for name, value in positive.items():
            if not value > 0:
                raise ValueError(f"{name} must be positive, got {value}")
        if self.damping < 0:
            raise ValueError("damping must be >= 0")
        if self.gain > 1:
            raise ValueError("gain must be <= 1")
        if self.broyden_numerator not in ("delta_e", "e"):
            raise ValueError("broyden_numerator must be 'delta_e' or 'e'")


@dataclass
class JacobianEstimate:
    """The current visuo-motor Jacobian with its update history."""

    matrix: np.ndarray
    update_count: int = 0
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=float)
        if self.matrix.ndim != 2:
            raise ValueError("Jacobian must be a matrix")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("Jacobian has non-finite entries")

    @property
    def error_dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_joints(self) -> int:
        return self.matrix.shape[1]


class ServoStatus(Enum):
    BOOTSTRAPPING = "Bootstrapping"
    RUNNING = "Running"
    CONVERGED = "Converged"
    DIVERGED = "Diverged"
    FEATURE_LOST = "FeatureLost"


@dataclass
class ServoState:
    q: np.ndarray
    e: np.ndarray | None
    jacobian: JacobianEstimate | None
    iteration: int
    status: ServoStatus


@dataclass(frozen=True)
class TrajectoryPoint:
    iteration: int
    q: np.ndarray
    e: np.ndarray
    norm: float


def bootstrap_jacobian(
    measure: Callable[[np.ndarray], ErrorVector],
    q0: Sequence[float],
    cfg: ServoConfig,
) -> JacobianEstimate:
    """Estimate the Jacobian by symmetric exploratory motions per joint.

    Column i is the central difference of the error over a +/- explore_angle
    move of joint i; central differences are exact on linear plants.  The
    robot is driven back to q0 before returning.  Columns with no image
    sensitivity are kept but flagged with SingularBootstrapWarning.
    """
    q0 = np.asarray(q0, dtype=float)
    e0 = _values(measure(q0))
    n = q0.size
    delta = cfg.explore_angle
    columns = []
    flagged = []
    for i in range(n):
        step = np.zeros(n)
        step[i] = delta
        e_plus = _values(measure(q0 + step))
        e_minus = _values(measure(q0 - step))
        if e_plus.size != e0.size or e_minus.size != e0.size:
            raise FeatureLost(f"error dimension changed while exploring joint {i}")
        columns.append((e_plus - e_minus) / (2.0 * delta))
        if np.linalg.norm(columns[-1]) < 1e-12:
            flagged.append(f"joint {i}: no image sensitivity")
    measure(q0)  # return to the start configuration
    for message in flagged:
        warnings.warn(message, SingularBootstrapWarning, stacklevel=2)
    return JacobianEstimate(np.column_stack(columns), warnings=tuple(flagged))


def broyden_update(
    J: JacobianEstimate,
    delta_e,
    delta_q: Sequence[float],
    cfg: ServoConfig,
) -> JacobianEstimate:
    """Rank-one Broyden update of the Jacobian estimate.

    J+ = J + lambda * (de - J dq) dq^T / (dq^T dq + eps).  With lambda = 1
    and eps -> 0 the secant condition J+ dq = de holds.  The epsilon guard
    keeps a zero step from dividing by zero (the update vanishes instead).
    """
    de = _values(delta_e)
    dq = np.asarray(delta_q, dtype=float).reshape(-1)
    if dq.size != J.n_joints:
        raise ValueError(f"delta_q has {dq.size} entries, expected {J.n_joints}")
    if de.size != J.error_dim:
        raise ValueError(f"delta_e has {de.size} entries, expected {J.error_dim}")
    residual = de - J.matrix @ dq
    denom = float(dq @ dq) + cfg.epsilon
    updated = J.matrix + cfg.broyden_lambda * np.outer(residual, dq) / denom
    return JacobianEstimate(
        updated, update_count=J.update_count + 1, warnings=J.warnings
    )


def compute_step(J: JacobianEstimate, e, cfg: ServoConfig) -> np.ndarray:
    """Damped least-squares joint step toward e = 0, clamped per component."""
    ev = _values(e)
    if ev.size != J.error_dim:
        raise ValueError(f"error has {ev.size} entries, expected {J.error_dim}")
    A = J.matrix.T @ J.matrix + cfg.damping * np.eye(J.n_joints)
    b = J.matrix.T @ ev
    try:
        dq = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"normal-equations solve failed: {exc}") from exc
    if not np.all(np.isfinite(dq)):
        raise NumericalFailure("normal-equations solve produced non-finite step")
    return np.clip(-cfg.gain * dq, -cfg.max_step, cfg.max_step)


def servo_loop(
    plant: Callable[[np.ndarray], ErrorVector],
    q0: Sequence[float],
    cfg: ServoConfig | None = None,
    on_step: Callable[[TrajectoryPoint], None] | None = None,
) -> tuple[ServoState, list[TrajectoryPoint]]:
    """Closed-loop servo: bootstrap, then measure / step / move / update.

    ``plant`` applies a relative joint move and returns the error measured
    after it.  Runs until the max-norm of the error drops under
    converge_eps (Converged), the iteration budget is exhausted (Diverged)
    or a measurement fails (FeatureLost); failures surface in the returned
    status, never as exceptions.
    """
    cfg = cfg or ServoConfig()
    q0 = np.asarray(q0, dtype=float)
    q = q0.copy()
    log: list[TrajectoryPoint] = []
    state = ServoState(
        q=q0.copy(), e=None, jacobian=None, iteration=0, status=ServoStatus.BOOTSTRAPPING
    )

    current = q0.copy()

    def measure_at(q_target: np.ndarray) -> ErrorVector:
        nonlocal current
        e = plant(np.asarray(q_target, dtype=float) - current)
        current = np.asarray(q_target, dtype=float).copy()
        return e

    try:
        J = bootstrap_jacobian(measure_at, q0, cfg)
        state.jacobian = J
        e = _values(plant(np.zeros_like(q0)))
        state.status = ServoStatus.RUNNING
        iteration = 0
        while True:
            point = TrajectoryPoint(
                iteration=iteration,
                q=q.copy(),
                e=e.copy(),
                norm=float(np.linalg.norm(e)),
            )
            log.append(point)
            if on_step is not None:
                on_step(point)
            state.q, state.e, state.iteration = q.copy(), e.copy(), iteration
            if np.max(np.abs(e)) < cfg.converge_eps:
                state.status = ServoStatus.CONVERGED
                break
            if iteration >= cfg.max_iters:
                state.status = ServoStatus.DIVERGED
                break
            dq = compute_step(J, e, cfg)
            e_new = _values(plant(dq))
            current = current + dq
            numerator = e_new - e if cfg.broyden_numerator == "delta_e" else e_new
            J = broyden_update(J, numerator, dq, cfg)
            state.jacobian = J
            q = q + dq
            e = e_new
            iteration += 1
    except FeatureLost:
        state.status = ServoStatus.FEATURE_LOST
    return state, log


def write_trajectory_csv(path, log: Sequence[TrajectoryPoint]) -> None:
    """CSV trajectory export: iteration,q_1..q_n,e_1..e_m,norm."""
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if log:
            n, m = log[0].q.size, log[0].e.size
            writer.writerow(
                ["iteration"]
                + [f"q_{i + 1}" for i in range(n)]
                + [f"e_{i + 1}" for i in range(m)]
                + ["norm"]
            )
        for p in log:
            writer.writerow(
                [p.iteration]
                + [repr(float(v)) for v in p.q]
                + [repr(float(v)) for v in p.e]
                + [repr(p.norm)]
            )
