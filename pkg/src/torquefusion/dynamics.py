"""Rigid-body dynamics over a model tree.

Conventions used throughout the package:

* 6-vectors are ordered [linear; angular] and expressed in the local (body)
  frame of whatever they describe.
* A link's twist is the velocity of its frame origin relative to the world,
  expressed in the link frame. Body-frame spatial acceleration equals the
  componentwise time derivative of the body-frame twist (the motion cross
  product of a twist with itself vanishes), which is what the recursions
  propagate.
* Wrenches are [force; torque] about the frame origin, expressed in the frame.
* Generalized coordinates are nu = [base twist (6); joint rates (n)]; the base
  rows stay present even when the base is clamped, so mass matrices and
  Jacobians are always (6+n)-sized.

Gravity enters inverse dynamics through the standard fictitious base
acceleration offset, so the generalized forces of a static chain are exactly
the gravity-holding forces.

The recursion kernels accept an arbitrary leading batch dimension on the
velocity-level arguments while sharing one kinematic configuration. Joint
positions enter the estimator as inputs rather than states, so whole sigma
point sets ride through these kernels in single numpy calls.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .model import KinematicModel, RigidTransform, SubModel


class DynamicsError(Exception):
    """Dynamics evaluation failure (unknown frame, singular mass matrix...)."""


# ---------------------------------------------------------------------------
# small geometry helpers


def skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def rotation_about(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation about a unit axis."""
    k = skew(np.asarray(axis, dtype=float))
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def rotation_log(rot: np.ndarray) -> np.ndarray:
    """Angle-axis vector of a rotation matrix, robust near 0 and pi."""
    cos = np.clip((np.trace(rot) - 1.0) * 0.5, -1.0, 1.0)
    angle = np.arccos(cos)
    vee = 0.5 * np.array([rot[2, 1] - rot[1, 2],
                          rot[0, 2] - rot[2, 0],
                          rot[1, 0] - rot[0, 1]])
    if angle < 1e-8:
        return vee  # first-order accurate, exact at identity
    if np.pi - angle < 1e-6:
        # the antisymmetric part degenerates near pi; the symmetric part is
        # close to axis outer-product there
        B = 0.5 * (rot + np.eye(3))
        i = int(np.argmax(np.diag(B)))
        axis = B[:, i] / np.sqrt(B[i, i])
        axis = axis / np.linalg.norm(axis)
        if np.dot(axis, vee) < 0.0:
            axis = -axis
        return angle * axis
    return vee * (angle / np.sin(angle))


# ---------------------------------------------------------------------------
# spatial algebra kernels (batched over arbitrary leading dims)


def _xm_twist(R: np.ndarray, p: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Re-express a parent-frame twist in a child frame posed (R, p) in parent."""
    v, w = V[..., :3], V[..., 3:]
    return np.concatenate(((v + np.cross(w, p)) @ R, w @ R), axis=-1)


def _xf_to_parent(R: np.ndarray, p: np.ndarray, F: np.ndarray) -> np.ndarray:
    """Re-express a child-frame wrench in the parent frame (child posed (R, p))."""
    f = F[..., :3] @ R.T
    return np.concatenate((f, F[..., 3:] @ R.T + np.cross(p, f)), axis=-1)


def _cross_motion(V: np.ndarray, M: np.ndarray) -> np.ndarray:
    v, w = V[..., :3], V[..., 3:]
    mv, mw = M[..., :3], M[..., 3:]
    return np.concatenate((np.cross(w, mv) + np.cross(v, mw), np.cross(w, mw)), axis=-1)


def _cross_force(V: np.ndarray, F: np.ndarray) -> np.ndarray:
    v, w = V[..., :3], V[..., 3:]
    f, mu = F[..., :3], F[..., 3:]
    return np.concatenate((np.cross(w, f), np.cross(w, mu) + np.cross(v, f)), axis=-1)


def _xm_matrix(R: np.ndarray, p: np.ndarray) -> np.ndarray:
    """6x6 twist map parent -> child for a child posed (R, p) in the parent."""
    X = np.zeros((6, 6))
    X[:3, :3] = R.T
    X[:3, 3:] = -R.T @ skew(p)
    X[3:, 3:] = R.T
    return X


def _spatial_inertia(mass: float, mc: np.ndarray, Io: np.ndarray) -> np.ndarray:
    I = np.zeros((6, 6))
    I[:3, :3] = mass * np.eye(3)
    I[:3, 3:] = -skew(mc)
    I[3:, :3] = skew(mc)
    I[3:, 3:] = Io
    return I


# ---------------------------------------------------------------------------
# public data types


@dataclass(eq=False)
class SpatialVelocity:
    frame: str
    linear: np.ndarray
    angular: np.ndarray

    def stacked(self) -> np.ndarray:
        return np.concatenate((self.linear, self.angular))


@dataclass(eq=False)
class Wrench:
    frame: str
    force: np.ndarray
    torque: np.ndarray

    def stacked(self) -> np.ndarray:
        return np.concatenate((np.asarray(self.force, dtype=float),
                               np.asarray(self.torque, dtype=float)))


@dataclass(eq=False)
class RobotState:
    """Configuration and velocity of a (sub)model.

    base_acceleration is the known acceleration of the base/anchor frame; it
    participates in forward dynamics as an input, never as an unknown.
    """

    base_pose: RigidTransform
    s: np.ndarray
    s_dot: np.ndarray
    base_velocity: np.ndarray = field(default_factory=lambda: np.zeros(6))
    base_acceleration: np.ndarray = field(default_factory=lambda: np.zeros(6))

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=float)
        self.s_dot = np.asarray(self.s_dot, dtype=float)
        self.base_velocity = np.asarray(self.base_velocity, dtype=float).reshape(6)
        self.base_acceleration = np.asarray(self.base_acceleration, dtype=float).reshape(6)


@dataclass(eq=False)
class GeneralizedForces:
    base: np.ndarray
    joint: np.ndarray

    def stacked(self) -> np.ndarray:
        return np.concatenate((self.base, self.joint))


# ---------------------------------------------------------------------------
# compiled structure


class Structure:
    """Flat arrays for one connected subtree, in a caller-chosen joint order.

    For submodels hanging below a cut, the root is the anchor link of the
    neighbouring submodel; its inertia belongs to the other side, so the
    anchor is compiled massless and the base-row output of the inverse
    dynamics is exactly the wrench transmitted through the cut.
    """

    def __init__(self, model: KinematicModel, root: str | None = None,
                 joints: list | None = None, massless_root: bool = False):
        self.model = model
        self.gravity = np.asarray(model.gravity, dtype=float)
        self.root = root if root is not None else model.root_link
        if joints is None:
            joints = [j.name for j in model.joints]
        self.joint_names = list(joints)
        self.n = len(self.joint_names)

        jmap = {j.name: j for j in model.joints}
        lmap = {l.name: l for l in model.links}
        children = {}
        for name in self.joint_names:
            j = jmap[name]
            children.setdefault(j.parent, []).append(j)

        # breadth-first topological ordering of links, root at position 0
        self.link_names = [self.root]
        order = []
        stack = [self.root]
        while stack:
            link = stack.pop(0)
            for j in children.get(link, []):
                order.append(j)
                self.link_names.append(j.child)
                stack.append(j.child)
        if len(order) != self.n:
            raise DynamicsError(
                f"joints {sorted(set(self.joint_names) - {j.name for j in order})} "
                f"are not reachable from root '{self.root}'")

        pos_of = {name: p for p, name in enumerate(self.link_names)}
        n = self.n
        self.parent_pos = np.zeros(n + 1, dtype=int)
        self.qidx = np.zeros(n + 1, dtype=int)
        self.prismatic = np.zeros(n + 1, dtype=bool)
        self.axis = np.zeros((n + 1, 3))
        self.S = np.zeros((n + 1, 6))
        self.oR = np.zeros((n + 1, 3, 3))
        self.op = np.zeros((n + 1, 3))
        self.mass = np.zeros(n + 1)
        self.mc = np.zeros((n + 1, 3))
        self.Io = np.zeros((n + 1, 3, 3))
        self.motor_inertia = np.zeros(n)
        self.gear_ratio = np.ones(n)
        self.torque_constant = np.ones(n)

        def fill_inertial(p, link):
            c = link.com
            self.mass[p] = link.mass
            self.mc[p] = link.mass * c
            cs = skew(c)
            self.Io[p] = link.inertia - link.mass * (cs @ cs)

        if not massless_root:
            fill_inertial(0, lmap[self.root])

        for k, j in enumerate(order, start=1):
            p = pos_of[j.child]
            assert p == k, "breadth-first order keeps link and joint indices aligned"
            qi = self.joint_names.index(j.name)
            self.parent_pos[k] = pos_of[j.parent]
            self.qidx[k] = qi
            self.prismatic[k] = j.joint_type == "prismatic"
            self.axis[k] = j.axis
            self.S[k, :3] = j.axis if self.prismatic[k] else 0.0
            self.S[k, 3:] = 0.0 if self.prismatic[k] else j.axis
            self.oR[k] = j.origin.rotation
            self.op[k] = j.origin.translation
            self.motor_inertia[qi] = j.motor_inertia
            self.gear_ratio[qi] = j.gear_ratio
            self.torque_constant[qi] = j.motor_torque_constant
            fill_inertial(k, lmap[j.child])

        # frame registry: links at identity, sensors/contacts at their mounts
        self.frames = {name: (pos_of[name], np.eye(3), np.zeros(3))
                       for name in self.link_names}
        for s in model.sensors:
            if s.link in pos_of:
                self.frames[s.name] = (pos_of[s.link], s.transform.rotation,
                                       s.transform.translation)
        for c in model.contact_frames:
            if c.link in pos_of:
                self.frames[c.name] = (pos_of[c.link], c.transform.rotation,
                                       c.transform.translation)

    def frame(self, name: str):
        try:
            return self.frames[name]
        except KeyError:
            raise DynamicsError(f"unknown frame '{name}'") from None


def compile_structure(model: KinematicModel) -> Structure:
    return Structure(model)


def compile_submodel(model: KinematicModel, sub: SubModel) -> Structure:
    """Structure for one submodel; non-root submodels get a massless anchor root."""
    if sub.anchor_link is None:
        return Structure(model, root=model.root_link, joints=sub.joints)
    return Structure(model, root=sub.anchor_link, joints=sub.joints,
                     massless_root=True)


def _as_structure(model) -> Structure:
    if isinstance(model, Structure):
        return model
    if isinstance(model, KinematicModel):
        cached = getattr(model, "_structure_cache", None)
        if cached is None:
            cached = Structure(model)
            model._structure_cache = cached
        return cached
    raise TypeError(f"expected KinematicModel or Structure, got {type(model)!r}")


# ---------------------------------------------------------------------------
# per-configuration kinematics


class Kinematics:
    """Joint transforms and world poses for one configuration of a Structure."""

    def __init__(self, st: Structure, base_pose: RigidTransform, s: np.ndarray):
        self.st = st
        s = np.asarray(s, dtype=float)
        n = st.n
        self.R_rel = np.zeros((n + 1, 3, 3))
        self.p_rel = np.zeros((n + 1, 3))
        self.Rw = np.zeros((n + 1, 3, 3))
        self.pw = np.zeros((n + 1, 3))
        self.Rw[0] = base_pose.rotation
        self.pw[0] = base_pose.translation
        for k in range(1, n + 1):
            q = s[st.qidx[k]]
            if st.prismatic[k]:
                self.R_rel[k] = st.oR[k]
                self.p_rel[k] = st.op[k] + st.oR[k] @ (st.axis[k] * q)
            else:
                self.R_rel[k] = st.oR[k] @ rotation_about(st.axis[k], q)
                self.p_rel[k] = st.op[k]
            par = st.parent_pos[k]
            self.Rw[k] = self.Rw[par] @ self.R_rel[k]
            self.pw[k] = self.pw[par] + self.Rw[par] @ self.p_rel[k]

    def frame_pose(self, name: str) -> RigidTransform:
        pos, R_off, p_off = self.st.frame(name)
        return RigidTransform(self.Rw[pos] @ R_off,
                              self.pw[pos] + self.Rw[pos] @ p_off)


# ---------------------------------------------------------------------------
# recursion kernels


def _twists(kin: Kinematics, V0: np.ndarray, sdot: np.ndarray) -> list:
    st = kin.st
    V = [None] * (st.n + 1)
    V[0] = V0
    for k in range(1, st.n + 1):
        Vk = _xm_twist(kin.R_rel[k], kin.p_rel[k], V[st.parent_pos[k]])
        V[k] = Vk + st.S[k] * sdot[..., st.qidx[k], None]
    return V


def _rnea_core(kin: Kinematics, V0, A0, sdot, sddot, fext_by_pos):
    """Inverse dynamics sweep. Returns (joint generalized forces, base wrench,
    twists, accelerations). A0 must already carry any gravity offset."""
    st = kin.st
    n = st.n
    batch = np.broadcast_shapes(np.shape(sdot)[:-1] if n else (),
                                np.shape(V0)[:-1])
    V = [None] * (n + 1)
    A = [None] * (n + 1)
    V[0] = V0
    A[0] = A0
    for k in range(1, n + 1):
        par = st.parent_pos[k]
        qi = st.qidx[k]
        Sqd = st.S[k] * sdot[..., qi, None]
        Vk = _xm_twist(kin.R_rel[k], kin.p_rel[k], V[par]) + Sqd
        Ak = _xm_twist(kin.R_rel[k], kin.p_rel[k], A[par]) + _cross_motion(Vk, Sqd)
        if sddot is not None:
            Ak = Ak + st.S[k] * sddot[..., qi, None]
        V[k] = Vk
        A[k] = Ak

    F = [None] * (n + 1)
    for k in range(n + 1):
        IV = _apply_inertia(st.mass[k], st.mc[k], st.Io[k], V[k])
        Fk = _apply_inertia(st.mass[k], st.mc[k], st.Io[k], A[k]) \
            + _cross_force(V[k], IV)
        if fext_by_pos and k in fext_by_pos:
            Fk = Fk - fext_by_pos[k]
        F[k] = Fk

    tau = np.zeros(batch + (n,))
    for k in range(n, 0, -1):
        tau[..., st.qidx[k]] = np.einsum("...i,i->...", F[k], st.S[k])
        par = st.parent_pos[k]
        F[par] = F[par] + _xf_to_parent(kin.R_rel[k], kin.p_rel[k], F[k])
    return tau, F[0], V, A


def _apply_inertia(mass, mc, Io, V):
    v, w = V[..., :3], V[..., 3:]
    lin = mass * v - np.cross(mc, w)
    ang = np.cross(mc, v) + w @ Io.T
    return np.concatenate((lin, ang), axis=-1)


def _gravity_offset(kin: Kinematics, base_acceleration: np.ndarray) -> np.ndarray:
    g_base = kin.Rw[0].T @ kin.st.gravity
    off = np.zeros(base_acceleration.shape[:-1] + (6,))
    off = off + base_acceleration
    off[..., :3] -= g_base
    return off


def _transport_external(st: Structure, wrenches) -> dict:
    """Map {frame name: Wrench | 6-array} onto link positions in link frames."""
    out = {}
    if not wrenches:
        return out
    for name, w in wrenches.items():
        pos, R_off, p_off = st.frame(name)
        vec = w.stacked() if isinstance(w, Wrench) else np.asarray(w, dtype=float)
        if isinstance(w, Wrench) and w.frame and w.frame != name:
            raise DynamicsError(
                f"wrench tagged '{w.frame}' supplied under frame '{name}'")
        lw = _xf_to_parent(R_off, p_off, vec)
        out[pos] = out.get(pos, 0.0) + lw
    return out


# ---------------------------------------------------------------------------
# public operations


def rnea(model, state: RobotState, desired_acceleration,
         external_wrenches=None) -> GeneralizedForces:
    """Inverse dynamics: generalized forces balancing the requested motion.

    desired_acceleration stacks [base acceleration (6); joint accelerations
    (n)]. External wrenches are {frame name: Wrench}, expressed in their own
    frames, and act on the system (they reduce the required actuation).
    """
    st = _as_structure(model)
    kin = Kinematics(st, state.base_pose, state.s)
    nu_dot = np.asarray(desired_acceleration, dtype=float).reshape(6 + st.n)
    A0 = _gravity_offset(kin, nu_dot[:6])
    fext = _transport_external(st, external_wrenches)
    tau, base, _, _ = _rnea_core(kin, state.base_velocity, A0,
                                 state.s_dot, nu_dot[6:], fext)
    tau = tau + st.motor_inertia * nu_dot[6:]
    return GeneralizedForces(base=base, joint=tau)


def bias_forces(model, state: RobotState) -> np.ndarray:
    """h(q, nu): gravity, Coriolis and centrifugal generalized forces (6+n,)."""
    st = _as_structure(model)
    gf = rnea(st, state, np.zeros(6 + st.n))
    return gf.stacked()


def mass_matrix(model, state: RobotState) -> np.ndarray:
    """Composite-rigid-body mass matrix over [base; joints], (6+n, 6+n)."""
    st = _as_structure(model)
    kin = Kinematics(st, state.base_pose, state.s)
    return _mass_matrix_kin(st, kin)


def _mass_matrix_kin(st: Structure, kin: Kinematics) -> np.ndarray:
    n = st.n
    Ic = [_spatial_inertia(st.mass[p], st.mc[p], st.Io[p]) for p in range(n + 1)]
    Xm = [None] * (n + 1)
    for k in range(1, n + 1):
        Xm[k] = _xm_matrix(kin.R_rel[k], kin.p_rel[k])
    for k in range(n, 0, -1):
        Ic[st.parent_pos[k]] += Xm[k].T @ Ic[k] @ Xm[k]

    M = np.zeros((6 + n, 6 + n))
    M[:6, :6] = Ic[0]
    for k in range(1, n + 1):
        col = 6 + st.qidx[k]
        F = Ic[k] @ st.S[k]
        M[col, col] = st.S[k] @ F + st.motor_inertia[st.qidx[k]]
        j = k
        while True:
            F = Xm[j].T @ F
            j = st.parent_pos[j]
            if j == 0:
                M[:6, col] = F
                M[col, :6] = F
                break
            row = 6 + st.qidx[j]
            val = st.S[j] @ F
            M[row, col] = val
            M[col, row] = val
    return M


def frame_jacobian(model, state: RobotState, frame: str) -> np.ndarray:
    """J mapping nu to the frame's world-aligned twist, (6, 6+n).

    World-aligned (mixed) convention: rows are the linear velocity of the
    frame origin and the frame's angular velocity, both in world axes. The
    same convention holds for frame_velocity and jdot_nu, so the usual
    acceleration decomposition a = J nu_dot + jdot_nu holds componentwise.
    """
    st = _as_structure(model)
    kin = Kinematics(st, state.base_pose, state.s)
    return _frame_jacobian(st, kin, frame)


def _frame_jacobian(st: Structure, kin: Kinematics, frame: str) -> np.ndarray:
    pos, R_off, p_off = st.frame(frame)
    J = np.zeros((6, 6 + st.n))
    X = _xm_matrix(R_off, p_off)
    j = pos
    while j != 0:
        J[:, 6 + st.qidx[j]] = X @ st.S[j]
        X = X @ _xm_matrix(kin.R_rel[j], kin.p_rel[j])
        j = st.parent_pos[j]
    J[:, :6] = X
    Rwf = kin.Rw[pos] @ R_off
    J[:3] = Rwf @ J[:3]
    J[3:] = Rwf @ J[3:]
    return J


def frame_velocity(model, state: RobotState, frame: str) -> SpatialVelocity:
    """World-aligned twist of a frame (see frame_jacobian)."""
    st = _as_structure(model)
    kin = Kinematics(st, state.base_pose, state.s)
    V = _twists(kin, state.base_velocity, state.s_dot)
    pos, R_off, p_off = st.frame(frame)
    Vf = _xm_twist(R_off, p_off, V[pos])
    Rwf = kin.Rw[pos] @ R_off
    return SpatialVelocity(frame, Rwf @ Vf[:3], Rwf @ Vf[3:])


def jdot_nu(model, state: RobotState, frame: str) -> np.ndarray:
    """Velocity-product part of the frame's world-aligned acceleration.

    Body-frame twist derivatives are computed first; mapping them to the
    world-aligned convention adds the frame's own rotation rate coupling on
    the linear rows.
    """
    st = _as_structure(model)
    kin = Kinematics(st, state.base_pose, state.s)
    V = _twists(kin, state.base_velocity, state.s_dot)
    _, _, _, A = _rnea_core(kin, state.base_velocity, np.zeros(6),
                            state.s_dot, None, None)
    pos, R_off, p_off = st.frame(frame)
    Vf = _xm_twist(R_off, p_off, V[pos])
    Af = _xm_twist(R_off, p_off, A[pos])
    Rwf = kin.Rw[pos] @ R_off
    lin = Rwf @ (Af[:3] + np.cross(Vf[3:], Vf[:3]))
    ang = Rwf @ Af[3:]
    return np.concatenate((lin, ang))


def forward_dynamics(model, state: RobotState, generalized_force,
                     external_wrenches=None) -> np.ndarray:
    """Unconstrained (floating) forward dynamics: nu_dot from applied forces."""
    st = _as_structure(model)
    M = mass_matrix(st, state)
    b = rnea(st, state, np.zeros(6 + st.n), external_wrenches).stacked()
    rhs = np.asarray(generalized_force, dtype=float).reshape(6 + st.n) - b
    try:
        c = scipy.linalg.cho_factor(M)
        return scipy.linalg.cho_solve(c, rhs)
    except scipy.linalg.LinAlgError:
        raise DynamicsError(
            f"singular mass matrix (condition estimate {np.linalg.cond(M):.3e})")


def submodel_forward_dynamics(model, state: RobotState, joint_torques,
                              external_wrenches=None) -> np.ndarray:
    """Forward dynamics with the anchor acceleration pinned to its input value.

    Returns nu_dot = [state.base_acceleration; joint accelerations]. Boundary
    wrenches of a cut and estimated contacts both enter through
    external_wrenches, matching how the estimator treats measured cuts as
    contacts.
    """
    st = _as_structure(model)
    kin = Kinematics(st, state.base_pose, state.s)
    fext = _transport_external(st, external_wrenches)
    A0 = _gravity_offset(kin, state.base_acceleration)
    bias, _, _, _ = _rnea_core(kin, state.base_velocity, A0,
                               state.s_dot, None, fext)
    tau = np.asarray(joint_torques, dtype=float)
    M = mass_matrix(st, state)
    Mss = M[6:, 6:]
    try:
        c = scipy.linalg.cho_factor(Mss)
        sddot = scipy.linalg.cho_solve(c, tau - bias)
    except scipy.linalg.LinAlgError:
        raise DynamicsError(
            f"singular mass matrix (condition estimate {np.linalg.cond(Mss):.3e})")
    return np.concatenate((state.base_acceleration, sddot))


def sensor_proper_acceleration(model, state: RobotState, nu_dot,
                               frame: str) -> np.ndarray:
    """What an ideal accelerometer at `frame` reads, (3,) in the sensor frame.

    Linear part of the frame's twist derivative, plus the angular-linear
    velocity coupling, minus gravity rotated into the sensor frame.
    """
    st = _as_structure(model)
    kin = Kinematics(st, state.base_pose, state.s)
    nu_dot = np.asarray(nu_dot, dtype=float).reshape(6 + st.n)
    _, _, V, A = _rnea_core(kin, state.base_velocity, nu_dot[:6],
                            state.s_dot, nu_dot[6:], None)
    pos, R_off, p_off = st.frame(frame)
    Vf = _xm_twist(R_off, p_off, V[pos])
    Af = _xm_twist(R_off, p_off, A[pos])
    Rwf = kin.Rw[pos] @ R_off
    return Af[:3] + np.cross(Vf[3:], Vf[:3]) - Rwf.T @ st.gravity


def reexpress_wrench(kin: Kinematics, from_frame: str, to_frame: str,
                     wrench) -> np.ndarray:
    """Re-express a wrench (same physical load) in another registered frame.

    The boundary wrench of a cut lives in the sensor frame, which is rigid to
    the child side; the parent-side submodel applies it re-expressed in its
    own anchor-side link frame, so only full-model kinematics (inputs) are
    needed, never child-side states.
    """
    pa = kin.frame_pose(to_frame)
    pb = kin.frame_pose(from_frame)
    rel = pa.inverse().compose(pb)
    return _xf_to_parent(rel.rotation, rel.translation,
                         np.asarray(wrench, dtype=float))


def cut_transmitted_wrenches(model, submodels, state: RobotState, nu_dot,
                             external_wrenches=None) -> dict:
    """True wrench across every cut FT sensor, expressed in the sensor frame.

    Computed by inverse dynamics of each child submodel given the full-model
    motion: the base-row wrench of the massless-anchored subtree is exactly
    what the parent side transmits to the child side. Contacts acting on the
    child subtree are honoured, so the returned wrench carries their
    transmitted effect the way a real sensor would.
    """
    st = _as_structure(model)
    kin = Kinematics(st, state.base_pose, state.s)
    nu_dot = np.asarray(nu_dot, dtype=float).reshape(6 + st.n)
    V = _twists(kin, state.base_velocity, state.s_dot)
    _, _, _, A = _rnea_core(kin, state.base_velocity, nu_dot[:6],
                            state.s_dot, nu_dot[6:], None)
    qmap = {name: i for i, name in enumerate(st.joint_names)}
    pos_of = {name: p for p, name in enumerate(st.link_names)}

    out = {}
    for sub in submodels:
        if sub.anchor_link is None:
            continue
        sensor = next(s for s, sign in sub.boundary_ft if sign > 0)
        sub_st = compile_submodel(model, sub)
        anchor = pos_of[sub.anchor_link]
        sub_idx = [qmap[j] for j in sub.joints]
        sub_state = RobotState(
            base_pose=RigidTransform(kin.Rw[anchor], kin.pw[anchor]),
            s=state.s[sub_idx], s_dot=state.s_dot[sub_idx],
            base_velocity=V[anchor], base_acceleration=A[anchor])
        sub_ext = {}
        if external_wrenches:
            for name, w in external_wrenches.items():
                # frames on the anchor link belong to the neighbouring submodel
                if name in sub_st.frames and sub_st.frames[name][0] != 0:
                    sub_ext[name] = w
        gf = rnea(sub_st, sub_state,
                  np.concatenate((A[anchor], nu_dot[6:][sub_idx])), sub_ext)
        # transport the anchor-frame support wrench into the sensor frame
        sub_kin = Kinematics(sub_st, sub_state.base_pose, sub_state.s)
        sensor_pose = sub_kin.frame_pose(sensor)
        rel = sub_state.base_pose.inverse().compose(sensor_pose)
        R, p = rel.rotation, rel.translation
        f = R.T @ gf.base[:3]
        mu = R.T @ (gf.base[3:] - np.cross(p, gf.base[:3]))
        out[sensor] = np.concatenate((f, mu))
    return out
