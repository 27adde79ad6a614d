"""Joint-torque estimation by fusing encoders, motor currents, FT sensors
and IMUs through an unscented Kalman filter over the robot dynamics.

The model is split at every cut-declared FT sensor and one independent filter
runs per submodel. Each filter's state stacks, in order: joint velocities,
motor torques (motor side), friction torques, the wrenches of the cut FT
sensors whose parent side this submodel owns, and one 6-vector per candidate
contact frame. The emitted joint torque is always
gear_ratio * tau_m_hat - tau_F_hat.

Anchor motion of a submodel hanging below a cut is reconstructed from the
inputs plus the current joint-velocity estimates, with upstream joint
accelerations treated as zero (velocity products kept); the root submodel
receives the exact base acceleration input.
"""

import itertools
import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import ukf
from .dynamics import (Kinematics, RobotState, _as_structure, _gravity_offset,
                       _rnea_core, _xf_to_parent, _xm_twist, compile_submodel,
                       mass_matrix, rnea)
from .friction import FrictionParams, _sech2
from .model import KinematicModel, RigidTransform, split_at_ft_sensors

STATE_BLOCKS = ("s_dot", "tau_m", "tau_F", "f_FT", "f_ext")
MEASUREMENT_BLOCKS = ("s_dot", "i_m", "f_FT", "alpha_acc", "omega_gyro")


class EstimatorError(Exception):
    pass


def state_layout(n: int, m: int, l: int) -> dict:
    """Block name -> slice over the flat state vector [ṡ, τ_m, τ_F, f_FT, f_ext]."""
    sizes = {"s_dot": n, "tau_m": n, "tau_F": n, "f_FT": 6 * m, "f_ext": 6 * l}
    layout = {}
    start = 0
    for name in STATE_BLOCKS:
        layout[name] = slice(start, start + sizes[name])
        start += sizes[name]
    assert start == 3 * n + 6 * m + 6 * l
    return layout


@dataclass
class EstimatorState:
    vector: np.ndarray
    layout: dict

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=float).reshape(-1)
        total = sum(sl.stop - sl.start for sl in self.layout.values())
        if total != self.vector.size:
            raise EstimatorError(
                f"state vector has {self.vector.size} entries, layout covers {total}")

    def block(self, name: str) -> np.ndarray:
        return self.vector[self.layout[name]]


@dataclass
class InputVector:
    base_pose: RigidTransform
    base_velocity: np.ndarray
    base_acceleration: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        self.base_velocity = np.asarray(self.base_velocity, dtype=float).reshape(6)
        self.base_acceleration = np.asarray(self.base_acceleration, dtype=float).reshape(6)
        self.s = np.asarray(self.s, dtype=float).reshape(-1)
        if not self.base_pose.is_valid():
            raise EstimatorError("base_pose rotation is not orthonormal")


@dataclass
class MeasurementVector:
    """Sensor readings for one tick; None marks an unavailable block.

    s_dot and i_m are indexed by model joint order, f_FT by cut sensor order,
    alpha_acc / omega_gyro by accelerometer / gyroscope declaration order.
    """

    s_dot: np.ndarray = None
    i_m: np.ndarray = None
    f_FT: np.ndarray = None
    alpha_acc: np.ndarray = None
    omega_gyro: np.ndarray = None
    mask: dict = None

    def __post_init__(self):
        explicit = dict(self.mask) if self.mask else {}
        self.mask = {}
        for name in MEASUREMENT_BLOCKS:
            arr = getattr(self, name)
            if arr is not None:
                setattr(self, name, np.asarray(arr, dtype=float).reshape(-1))
            self.mask[name] = arr is not None and explicit.get(name, True)


@dataclass
class EstimatorOutput:
    tau_j_hat: np.ndarray
    state: EstimatorState
    innovation_norms: dict
    covariance_diagonal: np.ndarray

    def __post_init__(self):
        r = self._gear
        expected = r * self.state.block("tau_m") - self.state.block("tau_F")
        assert np.array_equal(self.tau_j_hat, expected), \
            "output torque must equal gear_ratio * tau_m_hat - tau_F_hat"

    _gear: np.ndarray = None


@dataclass
class NoiseConfig:
    """Diagonal process intensities (per second) and measurement variances.

    Process entries are continuous-time intensities: the per-step variance is
    the value times the filter step. Initial variances seed the belief.
    """

    q_s_dot: float = 1e-2
    q_tau_m: float = 4e2
    q_tau_F: float = 4e1
    q_f_FT: float = 4e3
    q_f_ext: float = 4e4
    r_s_dot: float = 1e-6
    r_i_m: float = 4e-3
    r_f_FT: float = 2.5e-1
    r_alpha_acc: float = 2.5e-3
    r_omega_gyro: float = 1e-6
    p0_s_dot: float = 1e-4
    p0_tau_m: float = 1.0
    p0_tau_F: float = 1.0
    p0_f_FT: float = 1.0
    p0_f_ext: float = 1.0

    def replace(self, **overrides) -> "NoiseConfig":
        cfg = dict(self.__dict__)
        for key, val in overrides.items():
            if key not in cfg:
                raise EstimatorError(f"unknown noise parameter '{key}'")
            cfg[key] = float(val)
        return NoiseConfig(**cfg)


def _diag_for_layout(layout, values_by_block):
    total = max(sl.stop for sl in layout.values())
    out = np.zeros(total)
    for name, sl in layout.items():
        out[sl] = values_by_block[name]
    return out


class _SubTick:
    """Per-tick cached quantities shared by every sigma point of one submodel."""
    __slots__ = ("kin", "V0", "A0", "A0g", "mass_factor", "ft_rel", "imu")


class _SubEstimator:
    """UKF over one submodel; the facade supplies anchor motion each tick."""

    def __init__(self, model, sub, friction, contact_names, noise, config):
        self.sub = sub
        self.st = compile_submodel(model, sub)
        self.joint_idx = np.array([model.joint_index(j) for j in self.st.joint_names],
                                  dtype=int)
        self.n = self.st.n
        self.gear = self.st.gear_ratio
        self.ktau = self.st.torque_constant

        params = [friction.get(j, FrictionParams(0.0, 0.0, 0.0))
                  for j in self.st.joint_names]
        self.k0 = np.array([p.k0 for p in params])
        self.k1 = np.array([p.k1 for p in params])
        self.k2 = np.array([p.k2 for p in params])

        # cut sensors whose parent side we own: their wrench is a state here,
        # applied to our dynamics as a reaction on the cut joint's parent link
        self.ft_names = [name for name, sign in sub.boundary_ft if sign < 0]
        self.ft_apply_link = []
        for name in self.ft_names:
            cut_joint = model.parent_joint(model.sensor(name).link)
            self.ft_apply_link.append(cut_joint.parent)
        self.m = len(self.ft_names)

        owned = set(sub.contact_frames)
        self.contact_names = [c for c in contact_names if c in owned]
        self.l = len(self.contact_names)
        self.contact_mounts = [self.st.frame(c) for c in self.contact_names]

        sub_links = set(sub.links)
        self.accels = [s.name for s in model.sensors_of_kind("accelerometer")
                       if s.link in sub_links]
        self.gyros = [s.name for s in model.sensors_of_kind("gyroscope")
                      if s.link in sub_links]

        self.layout = state_layout(self.n, self.m, self.l)
        self.dim = 3 * self.n + 6 * self.m + 6 * self.l
        self.config = config
        self.q_diag = _diag_for_layout(self.layout, {
            "s_dot": noise.q_s_dot, "tau_m": noise.q_tau_m,
            "tau_F": noise.q_tau_F, "f_FT": noise.q_f_FT,
            "f_ext": noise.q_f_ext})
        self.p0_diag = _diag_for_layout(self.layout, {
            "s_dot": noise.p0_s_dot, "tau_m": noise.p0_tau_m,
            "tau_F": noise.p0_tau_F, "f_FT": noise.p0_f_FT,
            "f_ext": noise.p0_f_ext})
        self.r_by_block = {
            "s_dot": noise.r_s_dot, "i_m": noise.r_i_m, "f_FT": noise.r_f_FT,
            "alpha_acc": noise.r_alpha_acc, "omega_gyro": noise.r_omega_gyro}
        self.belief = None

    # -------------------------------------------------------- tick context

    def prepare(self, model_kin, V_full, A_full, link_pos, u):
        anchor = self.sub.anchor_link or self.st.root
        pos = link_pos[anchor]
        tick = _SubTick()
        tick.V0 = V_full[pos]
        tick.A0 = A_full[pos]
        pose = RigidTransform(model_kin.Rw[pos], model_kin.pw[pos])
        tick.kin = Kinematics(self.st, pose, u.s[self.joint_idx])
        tick.A0g = _gravity_offset(tick.kin, tick.A0)

        state = RobotState(pose, u.s[self.joint_idx], np.zeros(self.n),
                           tick.V0, tick.A0)
        M = mass_matrix(self.st, state)[6:, 6:]
        try:
            tick.mass_factor = scipy.linalg.cho_factor(M)
        except scipy.linalg.LinAlgError:
            raise EstimatorError(
                f"singular submodel mass matrix "
                f"(condition estimate {np.linalg.cond(M):.3e})")

        # relative transform taking each cut wrench from its sensor frame to
        # the parent link it reacts on, from full-model (input) kinematics
        tick.ft_rel = []
        for name, link in zip(self.ft_names, self.ft_apply_link):
            rel = model_kin.frame_pose(link).inverse().compose(
                model_kin.frame_pose(name))
            apply_pos = self.st.frames[link][0]
            tick.ft_rel.append((apply_pos, rel.rotation, rel.translation))

        tick.imu = {}
        for name in self.accels + self.gyros:
            pos_s, R_off, p_off = self.st.frame(name)
            tick.imu[name] = (pos_s, R_off, p_off, tick.kin.Rw[pos_s] @ R_off)
        return tick

    def _fext_by_pos(self, tick, X):
        out = {}
        fts = X[..., self.layout["f_FT"]]
        for k, (pos, R, p) in enumerate(tick.ft_rel):
            lw = _xf_to_parent(R, p, -fts[..., 6 * k:6 * k + 6])
            out[pos] = out.get(pos, 0.0) + lw
        exts = X[..., self.layout["f_ext"]]
        for k, (pos, R_off, p_off) in enumerate(self.contact_mounts):
            lw = _xf_to_parent(R_off, p_off, exts[..., 6 * k:6 * k + 6])
            out[pos] = out.get(pos, 0.0) + lw
        return out

    def _accelerations(self, tick, X):
        """Joint accelerations for a sigma stack via anchored forward dynamics."""
        sd = X[..., self.layout["s_dot"]]
        tau = self.gear * X[..., self.layout["tau_m"]] - X[..., self.layout["tau_F"]]
        fext = self._fext_by_pos(tick, X)
        bias, _, _, _ = _rnea_core(tick.kin, tick.V0, tick.A0g, sd, None, fext)
        return scipy.linalg.cho_solve(tick.mass_factor, (tau - bias).T).T

    def process(self, tick, X, dt):
        sd = X[..., self.layout["s_dot"]]
        sdd = self._accelerations(tick, X)
        out = X.copy()
        out[..., self.layout["s_dot"]] = sd + dt * sdd
        rate = (self.k0 * self.k1 * _sech2(self.k1 * sd) + self.k2) * sdd
        out[..., self.layout["tau_F"]] = X[..., self.layout["tau_F"]] + dt * rate
        return out

    def measurement(self, tick, X, active):
        parts = []
        sd = X[..., self.layout["s_dot"]]
        if active["s_dot"]:
            parts.append(sd)
        if active["i_m"]:
            parts.append(X[..., self.layout["tau_m"]] / self.ktau)
        if active["f_FT"] and self.m:
            parts.append(X[..., self.layout["f_FT"]])
        want_acc = active["alpha_acc"] and self.accels
        want_gyro = active["omega_gyro"] and self.gyros
        if want_acc or want_gyro:
            sdd = self._accelerations(tick, X) if want_acc else None
            _, _, V, A = _rnea_core(tick.kin, tick.V0, tick.A0, sd, sdd, None)
            if want_acc:
                for name in self.accels:
                    pos, R_off, p_off, Rwf = tick.imu[name]
                    Vf = _xm_twist(R_off, p_off, V[pos])
                    Af = _xm_twist(R_off, p_off, A[pos])
                    parts.append(Af[..., :3]
                                 + np.cross(Vf[..., 3:], Vf[..., :3])
                                 - Rwf.T @ self.st.gravity)
            if want_gyro:
                for name in self.gyros:
                    pos, R_off, p_off, _ = tick.imu[name]
                    Vf = _xm_twist(R_off, p_off, V[pos])
                    parts.append(Vf[..., 3:])
        if not parts:
            return np.zeros(X.shape[:-1] + (0,))
        return np.concatenate(parts, axis=-1)

    # ------------------------------------------------------------ filtering

    def measurement_slices(self, active):
        """(block, local slice) pairs in the order `measurement` emits them."""
        out = []
        start = 0
        def add(name, size):
            nonlocal start
            out.append((name, slice(start, start + size)))
            start += size
        if active["s_dot"]:
            add("s_dot", self.n)
        if active["i_m"]:
            add("i_m", self.n)
        if active["f_FT"] and self.m:
            add("f_FT", 6 * self.m)
        if active["alpha_acc"]:
            for _ in self.accels:
                add("alpha_acc", 3)
        if active["omega_gyro"]:
            for _ in self.gyros:
                add("omega_gyro", 3)
        return out

    def initialize(self, y_slices):
        x0 = np.zeros(self.dim)
        if y_slices.get("s_dot") is not None:
            x0[self.layout["s_dot"]] = y_slices["s_dot"]
        if y_slices.get("i_m") is not None:
            x0[self.layout["tau_m"]] = y_slices["i_m"] * self.ktau
        sd = x0[self.layout["s_dot"]]
        x0[self.layout["tau_F"]] = self.k0 * np.tanh(self.k1 * sd) + self.k2 * sd
        if self.m and y_slices.get("f_FT") is not None:
            x0[self.layout["f_FT"]] = y_slices["f_FT"]
        self.belief = ukf.GaussianBelief(x0, np.diag(self.p0_diag))


class TorqueEstimator:
    """Facade running one UKF per submodel and fusing their outputs."""

    def __init__(self, model: KinematicModel, friction=None, contact_frames=(),
                 noise: NoiseConfig = None, config: ukf.UkfConfig = None):
        self.model = model
        self.noise = noise or NoiseConfig()
        self.config = config or ukf.UkfConfig()
        friction = dict(friction or {})
        for name in friction:
            model.joint(name)  # unknown joint -> ModelError

        declared = {c.name for c in model.contact_frames}
        for name in contact_frames:
            if name not in declared:
                raise EstimatorError(f"unknown contact frame '{name}'")
        if len(set(contact_frames)) != len(tuple(contact_frames)):
            raise EstimatorError("duplicate contact frame")
        self.contact_frames = list(contact_frames)

        for joint in model.joints:
            kinds = {s.kind for s in model.sensors if s.link == joint.child
                     and s.kind in ("encoder", "current")}
            if kinds != {"encoder", "current"}:
                raise EstimatorError(
                    f"joint '{joint.name}' needs an encoder and a current "
                    f"sensor on its child link")

        self.submodels = split_at_ft_sensors(model)
        self.subs = [_SubEstimator(model, sub, friction, self.contact_frames,
                                   self.noise, self.config)
                     for sub in self.submodels]

        self.ft_order = [s.name for s in model.sensors_of_kind("ft") if s.cut]
        self.accel_order = [s.name for s in model.sensors_of_kind("accelerometer")]
        self.gyro_order = [s.name for s in model.sensors_of_kind("gyroscope")]
        self.n = model.n_joints
        self.m = len(self.ft_order)
        self.l = len(self.contact_frames)
        self.layout = state_layout(self.n, self.m, self.l)
        self.dim = 3 * self.n + 6 * self.m + 6 * self.l

        self._st_full = _as_structure(model)
        self._link_pos = {name: p for p, name in enumerate(self._st_full.link_names)}

        # scatter indices: submodel block -> rows in the global state vector
        self._gear_full = np.zeros(self.n)
        for sub in self.subs:
            self._gear_full[sub.joint_idx] = sub.gear
        self._scatter = []
        for sub in self.subs:
            idx = {}
            idx["s_dot"] = self.layout["s_dot"].start + sub.joint_idx
            idx["tau_m"] = self.layout["tau_m"].start + sub.joint_idx
            idx["tau_F"] = self.layout["tau_F"].start + sub.joint_idx
            ft_rows = []
            for name in sub.ft_names:
                k = self.ft_order.index(name)
                ft_rows.extend(range(6 * k, 6 * k + 6))
            idx["f_FT"] = self.layout["f_FT"].start + np.array(ft_rows, dtype=int)
            ext_rows = []
            for name in sub.contact_names:
                k = self.contact_frames.index(name)
                ext_rows.extend(range(6 * k, 6 * k + 6))
            idx["f_ext"] = self.layout["f_ext"].start + np.array(ext_rows, dtype=int)
            self._scatter.append(idx)

    # ----------------------------------------------------------- validation

    def _validate(self, u: InputVector, y: MeasurementVector):
        if u.s.size != self.n:
            raise EstimatorError(
                f"input s has {u.s.size} entries, model has {self.n} joints")
        expected = {"s_dot": self.n, "i_m": self.n, "f_FT": 6 * self.m,
                    "alpha_acc": 3 * len(self.accel_order),
                    "omega_gyro": 3 * len(self.gyro_order)}
        for name, size in expected.items():
            arr = getattr(y, name)
            if arr is None:
                continue
            if arr.size != size:
                raise EstimatorError(
                    f"measurement block '{name}' has {arr.size} entries, "
                    f"expected {size}")
            if y.mask[name] and not np.all(np.isfinite(arr)):
                raise EstimatorError(
                    f"non-finite values in measurement block '{name}'")

    def _slices_for(self, sub, y: MeasurementVector):
        out = {}
        if y.s_dot is not None:
            out["s_dot"] = y.s_dot[sub.joint_idx]
        if y.i_m is not None:
            out["i_m"] = y.i_m[sub.joint_idx]
        if y.f_FT is not None and sub.m:
            rows = []
            for name in sub.ft_names:
                k = self.ft_order.index(name)
                rows.extend(range(6 * k, 6 * k + 6))
            out["f_FT"] = y.f_FT[rows]
        if y.alpha_acc is not None and sub.accels:
            rows = []
            for name in sub.accels:
                k = self.accel_order.index(name)
                rows.extend(range(3 * k, 3 * k + 3))
            out["alpha_acc"] = y.alpha_acc[rows]
        if y.omega_gyro is not None and sub.gyros:
            rows = []
            for name in sub.gyros:
                k = self.gyro_order.index(name)
                rows.extend(range(3 * k, 3 * k + 3))
            out["omega_gyro"] = y.omega_gyro[rows]
        return out

    # -------------------------------------------------------- tick plumbing

    def _tick_context(self, u: InputVector, s_dot_full):
        kin = Kinematics(self._st_full, u.base_pose, u.s)
        # quasi-static anchor accelerations: upstream joint accelerations are
        # unknown here, so they propagate as zero while velocity products stay
        _, _, V, A = _rnea_core(kin, u.base_velocity, u.base_acceleration,
                                s_dot_full, None, None)
        return kin, V, A

    @property
    def initialized(self) -> bool:
        return all(sub.belief is not None for sub in self.subs)

    def initialize(self, u: InputVector, y: MeasurementVector):
        self._validate(u, y)
        for sub in self.subs:
            sub.initialize(self._slices_for(sub, y))

    def _mean_state_vector(self):
        vec = np.zeros(self.dim)
        for sub, idx in zip(self.subs, self._scatter):
            for name in STATE_BLOCKS:
                rows = idx[name]
                if np.size(rows):
                    vec[rows] = sub.belief.mean[sub.layout[name]]
        return vec

    def state(self) -> EstimatorState:
        if not self.initialized:
            raise EstimatorError("estimator is not initialized")
        return EstimatorState(self._mean_state_vector(), dict(self.layout))

    # ------------------------------------------------------------ operation

    def step(self, u: InputVector, y: MeasurementVector, dt: float) -> EstimatorOutput:
        if dt <= 0:
            raise EstimatorError("dt must be positive")
        self._validate(u, y)
        if not self.initialized:
            self.initialize(u, y)
        mean = self._mean_state_vector()
        kin, V, A = self._tick_context(u, mean[self.layout["s_dot"]])

        sq_norms = {name: 0.0 for name in MEASUREMENT_BLOCKS}
        seen = {name: False for name in MEASUREMENT_BLOCKS}
        for sub in self.subs:
            tick = sub.prepare(kin, V, A, self._link_pos, u)
            belief = ukf.predict(sub.belief, lambda X, dt_: sub.process(tick, X, dt_),
                                 np.diag(sub.q_diag * dt), dt, sub.config)
            active = dict(y.mask)
            slices = self._slices_for(sub, y)
            segments = sub.measurement_slices(active)
            # assemble observed vector in the same order as the model output
            y_vec = []
            r_parts = []
            cursor = {name: 0 for name in MEASUREMENT_BLOCKS}
            for name, sl in segments:
                width = sl.stop - sl.start
                block = slices[name]
                y_vec.append(block[cursor[name]:cursor[name] + width])
                cursor[name] += width
                r_parts.append(np.full(width, sub.r_by_block[name]))
            if y_vec:
                y_all = np.concatenate(y_vec)
                R = np.diag(np.concatenate(r_parts))
                res = ukf.update(belief,
                                 lambda X: sub.measurement(tick, X, active),
                                 y_all, R, sub.config)
                belief = res.belief
                for name, sl in segments:
                    sq_norms[name] += float(np.sum(res.innovation[sl] ** 2))
                    seen[name] = True
            sub.belief = belief

        state_vec = self._mean_state_vector()
        state = EstimatorState(state_vec, dict(self.layout))
        tau = self._gear_full * state.block("tau_m") - state.block("tau_F")
        norms = {name: (np.sqrt(sq_norms[name]) if seen[name] else np.nan)
                 for name in MEASUREMENT_BLOCKS}
        cov_diag = np.zeros(self.dim)
        for sub, idx in zip(self.subs, self._scatter):
            diag = np.diag(sub.belief.covariance)
            for name in STATE_BLOCKS:
                rows = idx[name]
                if np.size(rows):
                    cov_diag[rows] = diag[sub.layout[name]]
        return EstimatorOutput(tau, state, norms, cov_diag, _gear=self._gear_full)

    # ------------------------------------------- reference model evaluation

    def process_model(self, x: EstimatorState, u: InputVector,
                      dt: float) -> EstimatorState:
        """One explicit step of the deterministic process dynamics."""
        if dt < 0:
            raise EstimatorError("dt must be non-negative")
        self._validate(u, MeasurementVector())
        kin, V, A = self._tick_context(u, x.block("s_dot"))
        out = x.vector.copy()
        for sub, idx in zip(self.subs, self._scatter):
            tick = sub.prepare(kin, V, A, self._link_pos, u)
            xs = np.zeros(sub.dim)
            for name in STATE_BLOCKS:
                rows = idx[name]
                if np.size(rows):
                    xs[sub.layout[name]] = x.vector[rows]
            new = sub.process(tick, xs[None, :], dt)[0]
            for name in STATE_BLOCKS:
                rows = idx[name]
                if np.size(rows):
                    out[rows] = new[sub.layout[name]]
        return EstimatorState(out, dict(x.layout))

    def measurement_model(self, x: EstimatorState, u: InputVector) -> MeasurementVector:
        """Predicted sensor readings for a state, all blocks present."""
        self._validate(u, MeasurementVector())
        kin, V, A = self._tick_context(u, x.block("s_dot"))
        s_dot = np.zeros(self.n)
        i_m = np.zeros(self.n)
        f_FT = np.zeros(6 * self.m)
        alpha = np.zeros(3 * len(self.accel_order))
        omega = np.zeros(3 * len(self.gyro_order))
        active = {name: True for name in MEASUREMENT_BLOCKS}
        for sub, idx in zip(self.subs, self._scatter):
            tick = sub.prepare(kin, V, A, self._link_pos, u)
            xs = np.zeros(sub.dim)
            for name in STATE_BLOCKS:
                rows = idx[name]
                if np.size(rows):
                    xs[sub.layout[name]] = x.vector[rows]
            z = sub.measurement(tick, xs[None, :], active)[0]
            for name, sl in sub.measurement_slices(active):
                seg = z[sl]
                if name == "s_dot":
                    s_dot[sub.joint_idx] = seg
                elif name == "i_m":
                    i_m[sub.joint_idx] = seg
                elif name == "f_FT":
                    for j, ft in enumerate(sub.ft_names):
                        k = self.ft_order.index(ft)
                        f_FT[6 * k:6 * k + 6] = seg[6 * j:6 * j + 6]
            # IMU segments arrive one sensor at a time in declaration order
            imu_segs = [(name, sl) for name, sl in sub.measurement_slices(active)
                        if name in ("alpha_acc", "omega_gyro")]
            acc_i = gyro_i = 0
            for name, sl in imu_segs:
                if name == "alpha_acc":
                    k = self.accel_order.index(sub.accels[acc_i])
                    alpha[3 * k:3 * k + 3] = z[sl]
                    acc_i += 1
                else:
                    k = self.gyro_order.index(sub.gyros[gyro_i])
                    omega[3 * k:3 * k + 3] = z[sl]
                    gyro_i += 1
        return MeasurementVector(s_dot=s_dot, i_m=i_m,
                                 f_FT=f_FT if self.m else None,
                                 alpha_acc=alpha if self.accel_order else None,
                                 omega_gyro=omega if self.gyro_order else None)


# ---------------------------------------------------------------------------
# classical baseline: measured FT wrenches propagated through the chain


def _submodels_of(model):
    cached = getattr(model, "_submodels_cache", None)
    if cached is None:
        cached = split_at_ft_sensors(model)
        model._submodels_cache = cached
    return cached


def rnea_baseline(model: KinematicModel, state: RobotState, nu_dot,
                  ft_measurements) -> np.ndarray:
    """Joint torques from inverse dynamics with measured FT wrenches as the
    only external loads.

    Above each cut the measured wrench is applied as a reaction on the cut
    joint's parent link; below a cut the discrepancy between the measured and
    the model-consistent transmitted wrench is propagated down the chain, so
    loads acting below a sensor are accounted for exactly as the sensor saw
    them. The propagation stops at a branching link, where the discrepancy
    cannot be attributed to one branch.
    """
    st = _as_structure(model)
    nu_dot = np.asarray(nu_dot, dtype=float).reshape(6 + st.n)
    kin = Kinematics(st, state.base_pose, state.s)
    _, _, V, A = _rnea_core(kin, state.base_velocity, nu_dot[:6],
                            state.s_dot, nu_dot[6:], None)
    link_pos = {name: p for p, name in enumerate(st.link_names)}
    qmap = {name: i for i, name in enumerate(st.joint_names)}

    out = np.zeros(st.n)
    for sub in _submodels_of(model):
        sub_st = compile_submodel(model, sub)
        idx = [qmap[j] for j in sub_st.joint_names]
        anchor = link_pos[sub.anchor_link or st.root]
        sub_state = RobotState(
            base_pose=RigidTransform(kin.Rw[anchor], kin.pw[anchor]),
            s=state.s[idx], s_dot=state.s_dot[idx],
            base_velocity=V[anchor], base_acceleration=A[anchor])
        acc = np.concatenate((A[anchor], nu_dot[6:][idx]))

        if sub.anchor_link is None:
            externals = {}
            for name, sign in sub.boundary_ft:
                try:
                    wrench = np.asarray(ft_measurements[name], dtype=float).reshape(6)
                except KeyError:
                    raise EstimatorError(
                        f"missing FT measurement for cut sensor '{name}'")
                cut_joint = model.parent_joint(model.sensor(name).link)
                rel = kin.frame_pose(cut_joint.parent).inverse().compose(
                    kin.frame_pose(name))
                lw = _xf_to_parent(rel.rotation, rel.translation, -wrench)
                externals[cut_joint.parent] = externals.get(cut_joint.parent, 0.0) + lw
            gf = rnea(sub_st, sub_state, acc, externals)
            out[idx] = gf.joint
            continue

        gf = rnea(sub_st, sub_state, acc)
        tau = gf.joint.copy()
        sensor = next(name for name, sign in sub.boundary_ft if sign > 0)
        wrench = np.asarray(ft_measurements[sensor], dtype=float).reshape(6)
        _, R_off, p_off = sub_st.frame(sensor)
        f_link = _xf_to_parent(R_off, p_off, wrench)

        sub_kin = Kinematics(sub_st, sub_state.base_pose, sub_state.s)
        # wrench entering the first link per the model: the anchor is massless
        # and unloaded, so invert the base-row transform one step
        R1, p1 = sub_kin.R_rel[1], sub_kin.p_rel[1]
        f_model = _xf_to_parent(R1.T, -R1.T @ p1, gf.base)
        delta = f_link - f_model
        children = np.bincount(sub_st.parent_pos[1:], minlength=sub_st.n + 1)
        k = 1
        while True:
            tau[sub_st.qidx[k]] += float(sub_st.S[k] @ delta)
            if children[k] != 1:
                break
            k += 1  # breadth-first order makes the single child the next row
            Rr, pr = sub_kin.R_rel[k], sub_kin.p_rel[k]
            delta = _xf_to_parent(Rr.T, -Rr.T @ pr, delta)
        out[idx] = tau
    return out


# ---------------------------------------------------------------------------
# covariance tuning


@dataclass
class TuneReport:
    best: NoiseConfig
    best_score: float
    evaluations: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "best": dict(self.best.__dict__),
            "best_score": self.best_score,
            "evaluations": [{"overrides": ov, "score": sc}
                            for ov, sc in self.evaluations],
        }, indent=2, sort_keys=True)


def tune_covariances(scenarios, search_spec, base: NoiseConfig = None,
                     seed: int = 0, max_evals: int = None) -> TuneReport:
    """Grid search over diagonal noise parameters, scored by mean torque RMSE.

    search_spec maps NoiseConfig field names to candidate value lists; the
    full cartesian grid is evaluated unless max_evals caps it, in which case
    a seeded random subset is drawn. Scenarios must carry ground truth.
    """
    from .simulation import load_scenario, run_scenario

    scenarios = list(scenarios)
    if not scenarios:
        raise EstimatorError("tune_covariances needs at least one scenario")
    if not search_spec:
        raise EstimatorError("empty search spec")
    base = base or NoiseConfig()

    names = sorted(search_spec)
    grids = [list(search_spec[name]) for name in names]
    combos = [dict(zip(names, values))
              for values in itertools.product(*grids)]
    if max_evals is not None and len(combos) > max_evals:
        rng = np.random.default_rng(seed)
        keep = rng.choice(len(combos), size=max_evals, replace=False)
        combos = [combos[i] for i in sorted(keep)]

    evaluations = []
    best = None
    best_score = np.inf
    for overrides in combos:
        candidate = base.replace(**overrides)
        scores = []
        for scn in scenarios:
            scenario = load_scenario(scn) if isinstance(scn, (str,)) else scn
            result = run_scenario(scenario, noise_config=candidate,
                                  estimator="ukf")
            err = result.log.column("tau_truth") - result.log.column("tau_ukf")
            scores.append(float(np.sqrt(np.mean(err ** 2))))
        score = float(np.mean(scores))
        evaluations.append((overrides, score))
        if score < best_score:
            best_score = score
            best = candidate
    return TuneReport(best=best, best_score=best_score, evaluations=evaluations)
