"""Two-level torque control.

The high level solves an equality-constrained weighted least-squares problem
over [nu_dot, joint torques, configured contact wrenches]: task residuals are
quadratic costs and the joint rows of the rigid-body dynamics are the equality
constraint, with the base acceleration pinned to its known value (the base is
bolted down, so its reaction wrench is not a decision variable and the base
rows are dropped). The low level turns desired torques into a current command
with PI feedback on the estimated torque plus friction compensation.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .dynamics import (Kinematics, RobotState, _as_structure, bias_forces,
                       frame_jacobian, frame_velocity, jdot_nu, mass_matrix,
                       rotation_log)
from .friction import friction_torque


class ControlError(Exception):
    pass


def _gain_vec(value, n, name):
    arr = np.broadcast_to(np.asarray(value, dtype=float), (n,)).copy()
    if np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise ControlError(f"{name} must be non-negative and finite")
    return arr


@dataclass
class CartesianTask:
    frame: str
    target_position: np.ndarray
    target_rotation: np.ndarray
    target_velocity: np.ndarray = field(default_factory=lambda: np.zeros(6))
    target_acceleration: np.ndarray = field(default_factory=lambda: np.zeros(6))
    kp_linear: float = 0.0
    kd_linear: float = 0.0
    kp_angular: float = 0.0
    kd_angular: float = 0.0
    weight: float = 1.0

    def __post_init__(self):
        self.target_position = np.asarray(self.target_position, dtype=float).reshape(3)
        self.target_rotation = np.asarray(self.target_rotation, dtype=float).reshape(3, 3)
        self.target_velocity = np.asarray(self.target_velocity, dtype=float).reshape(6)
        self.target_acceleration = np.asarray(self.target_acceleration,
                                              dtype=float).reshape(6)
        R = self.target_rotation
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-8 or np.linalg.det(R) < 0:
            raise ControlError("target rotation is not orthonormal")
        for g in (self.kp_linear, self.kd_linear, self.kp_angular,
                  self.kd_angular, self.weight):
            if g < 0 or not np.isfinite(g):
                raise ControlError("task gains and weight must be non-negative")


@dataclass
class JointRegularizationTask:
    s_des: np.ndarray
    s_dot_des: np.ndarray
    s_ddot_des: np.ndarray
    kp: np.ndarray = 0.0
    kd: np.ndarray = 0.0
    weight: float = 1.0

    def __post_init__(self):
        self.s_des = np.asarray(self.s_des, dtype=float).reshape(-1)
        n = self.s_des.size
        self.s_dot_des = np.asarray(self.s_dot_des, dtype=float).reshape(n)
        self.s_ddot_des = np.asarray(self.s_ddot_des, dtype=float).reshape(n)
        self.kp = _gain_vec(self.kp, n, "kp")
        self.kd = _gain_vec(self.kd, n, "kd")
        if self.weight < 0:
            raise ControlError("task weight must be non-negative")


@dataclass
class HlcOptions:
    contact_frames: tuple = ()
    reg_tau: float = 1e-8
    reg_force: float = 1e-6
    reg_nu_dot: float = 0.0


@dataclass
class HlcSolution:
    tau: np.ndarray
    nu_dot: np.ndarray
    contact_wrenches: dict


def cartesian_residual(model, state: RobotState, task: CartesianTask) -> np.ndarray:
    """Constant term of the cartesian task residual: [v_dot*; w_dot*] - Jdot*nu.

    The full residual is this vector minus J(q) times the decision nu_dot;
    the PD targets use world-aligned position error and the rotation
    logarithm of R_des @ R^T.
    """
    st = _as_structure(model)
    kin = Kinematics(st, state.base_pose, state.s)
    pose = kin.frame_pose(task.frame)
    vel = frame_velocity(st, state, task.frame)

    e_p = task.target_position - pose.translation
    e_R = rotation_log(task.target_rotation @ pose.rotation.T)
    v_star = (task.target_acceleration[:3]
              + task.kd_linear * (task.target_velocity[:3] - vel.linear)
              + task.kp_linear * e_p)
    w_star = (task.target_acceleration[3:]
              + task.kd_angular * (task.target_velocity[3:] - vel.angular)
              + task.kp_angular * e_R)
    return np.concatenate((v_star, w_star)) - jdot_nu(st, state, task.frame)


def joint_regularization_residual(state: RobotState,
                                  task: JointRegularizationTask) -> np.ndarray:
    """Desired joint acceleration s_ddot* (constant term of the residual)."""
    if task.s_des.size != state.s.size:
        raise ControlError(
            f"task has {task.s_des.size} joints, state has {state.s.size}")
    return (task.s_ddot_des
            + task.kd * (task.s_dot_des - state.s_dot)
            + task.kp * (task.s_des - state.s))


def solve_hlc(model, state: RobotState, tasks, options: HlcOptions = None) -> HlcSolution:
    """Desired joint torques from the task set subject to the joint-row dynamics."""
    if not tasks:
        raise ControlError("solve_hlc needs at least one task")
    options = options or HlcOptions()
    st = _as_structure(model)
    n = st.n
    nv = 6 + n
    c = len(options.contact_frames)
    dim = nv + n + 6 * c
    tau_off = nv

    M = mass_matrix(st, state)
    h = bias_forces(st, state)
    jacs = [frame_jacobian(st, state, name) for name in options.contact_frames]

    # equality rows: base acceleration pinned, then joint rows of the dynamics
    A = np.zeros((6 + n, dim))
    b_eq = np.zeros(6 + n)
    A[:6, :6] = np.eye(6)
    b_eq[:6] = state.base_acceleration
    A[6:, :nv] = M[6:, :]
    A[6:, tau_off:tau_off + n] = -np.eye(n)
    for k, J in enumerate(jacs):
        A[6:, nv + n + 6 * k:nv + n + 6 * k + 6] = -J.T[6:, :]
    b_eq[6:] = -h[6:]

    G = np.zeros((dim, dim))
    d = np.zeros(dim)
    G[np.arange(nv), np.arange(nv)] += options.reg_nu_dot
    G[np.arange(tau_off, tau_off + n),
      np.arange(tau_off, tau_off + n)] += options.reg_tau
    G[np.arange(nv + n, dim), np.arange(nv + n, dim)] += options.reg_force

    for task in tasks:
        if isinstance(task, CartesianTask):
            C = np.zeros((6, dim))
            C[:, :nv] = frame_jacobian(st, state, task.frame)
            b = cartesian_residual(st, state, task)
        elif isinstance(task, JointRegularizationTask):
            C = np.zeros((n, dim))
            C[:, 6:nv] = np.eye(n)
            b = joint_regularization_residual(state, task)
        else:
            raise ControlError(f"unknown task type {type(task).__name__}")
        G += task.weight * (C.T @ C)
        d += task.weight * (C.T @ b)

    K = np.zeros((dim + 6 + n, dim + 6 + n))
    K[:dim, :dim] = G
    K[:dim, dim:] = A.T
    K[dim:, :dim] = A
    rhs = np.concatenate((d, b_eq))
    try:
        sol = scipy.linalg.solve(K, rhs, assume_a="sym")
    except (scipy.linalg.LinAlgError, ValueError):
        raise ControlError(
            "high-level problem is singular: tasks leave a free direction or "
            f"constraints conflict (condition estimate {np.linalg.cond(K):.3e})")
    if not np.all(np.isfinite(sol)):
        raise ControlError(
            "high-level problem is singular: tasks leave a free direction or "
            f"constraints conflict (condition estimate {np.linalg.cond(K):.3e})")
    z = sol[:dim]
    wrenches = {name: z[nv + n + 6 * k:nv + n + 6 * k + 6]
                for k, name in enumerate(options.contact_frames)}
    return HlcSolution(tau=z[tau_off:tau_off + n], nu_dot=z[:nv],
                       contact_wrenches=wrenches)


# ---------------------------------------------------------------------------
# low level


@dataclass
class LowLevelGains:
    k_p: np.ndarray = 0.0
    k_i: np.ndarray = 0.0
    integral_limit: float = 50.0   # Nm*s
    current_limit: float = 40.0    # A
    # Fraction of the friction model fed forward. Full compensation removes
    # all damping, and because the feedforward acts on a sampled velocity it
    # pumps energy into any lightly loaded joint; keep < 1 when no tracking
    # task provides damping of its own (zero-torque mode).
    friction_scale: float = 1.0

    def __post_init__(self):
        if self.integral_limit <= 0 or self.current_limit <= 0:
            raise ControlError("integral and current limits must be positive")
        if not 0.0 <= self.friction_scale <= 1.0:
            raise ControlError("friction_scale must lie in [0, 1]")


@dataclass
class LowLevelResult:
    i_ref: np.ndarray
    integrator: np.ndarray
    clamped: np.ndarray


def low_level_step(tau_des, tau_hat, s_dot, model, friction, gains: LowLevelGains,
                   dt: float, integrator=None) -> LowLevelResult:
    """One PI feedback-feedforward step producing the current command.

    i_ref = (tau_des + k_p e + k_i int(e) + friction compensation) / (r k_tau)
    with conditional integration: joints whose output is clamped keep their
    previous integral so the windup cannot grow while saturated.
    """
    if dt <= 0:
        raise ControlError("dt must be positive")
    st = _as_structure(model)
    n = st.n
    tau_des = np.asarray(tau_des, dtype=float).reshape(n)
    tau_hat = np.asarray(tau_hat, dtype=float).reshape(n)
    s_dot = np.asarray(s_dot, dtype=float).reshape(n)
    k_p = _gain_vec(gains.k_p, n, "k_p")
    k_i = _gain_vec(gains.k_i, n, "k_i")
    integrator = (np.zeros(n) if integrator is None
                  else np.asarray(integrator, dtype=float).reshape(n).copy())

    comp = np.zeros(n)
    friction = friction or {}
    for i, name in enumerate(st.joint_names):
        if name in friction:
            comp[i] = gains.friction_scale * friction_torque(friction[name],
                                                             s_dot[i])

    err = tau_des - tau_hat
    candidate = np.clip(integrator + err * dt,
                        -gains.integral_limit, gains.integral_limit)
    u = tau_des + k_p * err + k_i * candidate + comp
    i_raw = u / (st.gear_ratio * st.torque_constant)
    clamped = np.abs(i_raw) > gains.current_limit
    i_ref = np.clip(i_raw, -gains.current_limit, gains.current_limit)
    new_integrator = np.where(clamped, integrator, candidate)
    return LowLevelResult(i_ref=i_ref, integrator=new_integrator, clamped=clamped)
