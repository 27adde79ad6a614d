"""Closed-loop simulation harness: plant, sensors, scenarios, run logs.

The plant integrates the FULL model with fixed-step RK4 while estimation runs
on submodels, so FT readings carry real coupling information. Contacts are
wrench injections at declared frames (no collision geometry): each event
specifies a peak wrench in world axes applied at the contact frame origin,
shaped in time by its profile.

Scenario files are canonical JSON; run logs are CSV plus a plain-text summary
block. Reruns with the same seed produce byte-identical logs.
"""

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import dynamics as dyn
from .control import (CartesianTask, ControlError, HlcOptions,
                      JointRegularizationTask, LowLevelGains, low_level_step,
                      solve_hlc)
from .estimator import (EstimatorError, InputVector, MeasurementVector,
                        NoiseConfig, TorqueEstimator, rnea_baseline,
                        _submodels_of)
from .friction import FrictionParams, friction_torque
from .model import KinematicModel, RigidTransform, load_model
from .ukf import UkfError


class SimulationError(Exception):
    pass


class ScenarioError(SimulationError):
    pass


PROFILES = ("constant", "ramp", "half_sine")


@dataclass
class ContactEvent:
    frame: str
    start: float
    end: float
    profile: str
    force: np.ndarray = field(default_factory=lambda: np.zeros(3))
    torque: np.ndarray = field(default_factory=lambda: np.zeros(3))
    measured_by_ft: bool = False

    def __post_init__(self):
        self.force = np.asarray(self.force, dtype=float).reshape(3)
        self.torque = np.asarray(self.torque, dtype=float).reshape(3)
        if not self.end > self.start:
            raise ScenarioError(f"contact on '{self.frame}': end must be "
                                f"after start ({self.start}..{self.end})")
        if self.profile not in PROFILES:
            raise ScenarioError(f"unknown wrench profile '{self.profile}'")
        if not (np.all(np.isfinite(self.force))
                and np.all(np.isfinite(self.torque))):
            raise ScenarioError(f"contact on '{self.frame}': wrench not finite")

    def wrench_at(self, t: float):
        """World-axes [force; torque] at time t, or None when inactive."""
        if t < self.start or t >= self.end:
            return None
        frac = (t - self.start) / (self.end - self.start)
        if self.profile == "constant":
            scale = 1.0
        elif self.profile == "ramp":
            scale = frac
        else:
            scale = math.sin(math.pi * frac)
        return np.concatenate((self.force, self.torque)) * scale


@dataclass
class SensorNoiseSpec:
    encoder: float = 0.0      # rad/s
    current: float = 0.0      # A
    ft: float = 0.0           # N and Nm
    accel: float = 0.0        # m/s^2
    gyro: float = 0.0         # rad/s
    encoder_bias: float = 0.0
    current_bias: float = 0.0
    ft_bias: float = 0.0
    accel_bias: float = 0.0
    gyro_bias: float = 0.0

    def __post_init__(self):
        for kind in ("encoder", "current", "ft", "accel", "gyro"):
            if getattr(self, kind) < 0:
                raise ScenarioError(f"noise std for {kind} must be >= 0")

    @classmethod
    def from_dict(cls, doc: dict):
        known = {f for f in cls.__dataclass_fields__}
        bad = set(doc) - known
        if bad:
            raise ScenarioError(f"unknown noise keys {sorted(bad)}")
        return cls(**doc)


@dataclass
class Rates:
    plant_hz: int = 10000
    filter_hz: int = 1000
    llc_hz: int = 1000
    hlc_hz: int = 250

    def __post_init__(self):
        for name in ("plant_hz", "filter_hz", "llc_hz", "hlc_hz"):
            if getattr(self, name) <= 0:
                raise ScenarioError(f"{name} must be positive")
        if self.llc_hz != self.filter_hz:
            raise ScenarioError("llc_hz must equal filter_hz so the current "
                                "command uses the freshest estimate")
        if self.plant_hz % self.filter_hz:
            raise ScenarioError("plant_hz must be a multiple of filter_hz")
        if self.filter_hz % self.hlc_hz:
            raise ScenarioError("filter_hz must be a multiple of hlc_hz")


@dataclass
class Reference:
    kind: str
    params: dict

    KINDS = ("zero_torque", "hold", "joint_sinusoid", "cartesian_pose")

    @classmethod
    def from_dict(cls, doc: dict, model: KinematicModel, initial_s):
        doc = dict(doc)
        kind = doc.pop("type", None)
        if kind not in cls.KINDS:
            raise ScenarioError(f"unknown reference type '{kind}'")
        n = model.n_joints
        p = {}
        if kind == "hold":
            p["s_des"] = np.asarray(doc.pop("s_des", initial_s),
                                    dtype=float).reshape(n)
            p["kp"] = doc.pop("kp", 80.0)
            p["kd"] = doc.pop("kd", 30.0)
        elif kind == "joint_sinusoid":
            p["center"] = np.asarray(doc.pop("center", initial_s),
                                     dtype=float).reshape(n)
            # scalars broadcast to every joint
            for key, default in (("amplitude", None), ("frequency_hz", None),
                                 ("phase", np.zeros(n))):
                raw = doc.pop(key) if default is None else doc.pop(key, default)
                arr = np.asarray(raw, dtype=float)
                p[key] = (np.full(n, float(arr)) if arr.ndim == 0
                          else arr.reshape(n))
            p["kp"] = doc.pop("kp", 80.0)
            p["kd"] = doc.pop("kd", 30.0)
        elif kind == "cartesian_pose":
            frame = doc.pop("frame")
            st = dyn._as_structure(model)
            kin = dyn.Kinematics(st, RigidTransform.identity(),
                                 np.asarray(initial_s, dtype=float))
            pose = kin.frame_pose(frame)
            p["frame"] = frame
            p["position"] = np.asarray(doc.pop("position", pose.translation),
                                       dtype=float).reshape(3)
            p["rotation"] = np.asarray(doc.pop("rotation", pose.rotation),
                                       dtype=float).reshape(3, 3)
            for g in ("kp_linear", "kd_linear", "kp_angular", "kd_angular"):
                p[g] = doc.pop(g, {"kp_linear": 60.0, "kd_linear": 15.0,
                                   "kp_angular": 20.0, "kd_angular": 6.0}[g])
            p["weight"] = doc.pop("weight", 1.0)
            reg = doc.pop("regularization", {})
            p["reg_kp"] = reg.get("kp", 4.0)
            p["reg_kd"] = reg.get("kd", 2.0)
            p["reg_weight"] = reg.get("weight", 1e-2)
            p["reg_s_des"] = np.asarray(initial_s, dtype=float).copy()
        if doc:
            raise ScenarioError(f"unknown reference keys {sorted(doc)}")
        return cls(kind=kind, params=p)

    @property
    def needs_hlc(self) -> bool:
        return self.kind != "zero_torque"

    def tasks_at(self, t: float):
        p = self.params
        if self.kind == "hold":
            n = p["s_des"].size
            return [JointRegularizationTask(p["s_des"], np.zeros(n),
                                            np.zeros(n), kp=p["kp"],
                                            kd=p["kd"])]
        if self.kind == "joint_sinusoid":
            w = 2.0 * np.pi * p["frequency_hz"]
            ph = w * t + p["phase"]
            s_des = p["center"] + p["amplitude"] * np.sin(ph)
            v_des = p["amplitude"] * w * np.cos(ph)
            a_des = -p["amplitude"] * w ** 2 * np.sin(ph)
            return [JointRegularizationTask(s_des, v_des, a_des,
                                            kp=p["kp"], kd=p["kd"])]
        if self.kind == "cartesian_pose":
            n = p["reg_s_des"].size
            cart = CartesianTask(p["frame"], p["position"], p["rotation"],
                                 kp_linear=p["kp_linear"],
                                 kd_linear=p["kd_linear"],
                                 kp_angular=p["kp_angular"],
                                 kd_angular=p["kd_angular"],
                                 weight=p["weight"])
            reg = JointRegularizationTask(p["reg_s_des"], np.zeros(n),
                                          np.zeros(n), kp=p["reg_kp"],
                                          kd=p["reg_kd"],
                                          weight=p["reg_weight"])
            return [cart, reg]
        return []


ESTIMATOR_CHOICES = ("ukf", "rnea_baseline", "both")


@dataclass
class Scenario:
    name: str
    model: KinematicModel
    duration: float
    seed: int
    initial_s: np.ndarray
    initial_s_dot: np.ndarray
    reference: Reference
    contacts: list
    noise: SensorNoiseSpec
    friction: dict
    llc_gains: LowLevelGains
    estimator: str = "ukf"
    estimator_contacts: tuple = ()
    rates: Rates = field(default_factory=Rates)
    torque_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.model.n_joints
        self.initial_s = np.asarray(self.initial_s, dtype=float).reshape(n)
        self.initial_s_dot = np.asarray(self.initial_s_dot,
                                        dtype=float).reshape(n)
        if self.duration <= 0:
            raise ScenarioError("duration must be positive")
        if self.estimator not in ESTIMATOR_CHOICES:
            raise ScenarioError(f"estimator must be one of {ESTIMATOR_CHOICES}")
        declared = {c.name for c in self.model.contact_frames}
        joint_names = set(self.model.joint_names())
        for j in self.torque_overrides:
            if j not in joint_names:
                raise ScenarioError(f"torque override for unknown joint '{j}'")
        for ev in self.contacts:
            if ev.frame not in declared:
                raise ScenarioError(f"contact frame '{ev.frame}' is not "
                                    "declared in the model")
            if not (0.0 <= ev.start and ev.end <= self.duration):
                raise ScenarioError(f"contact on '{ev.frame}' lies outside "
                                    "the scenario duration")
        self._check_ft_flags()

    def _check_ft_flags(self):
        """measured_by_ft must match the topology: a contact is in the FT
        load path exactly when its link hangs below a cut sensor."""
        link_of = {c.name: c.link for c in self.model.contact_frames}
        below = set()
        for sub in _submodels_of(self.model):
            if sub.anchor_link is not None:
                below.update(sub.links)
        for ev in self.contacts:
            in_path = link_of[ev.frame] in below
            if ev.measured_by_ft != in_path:
                want = "true" if in_path else "false"
                raise ScenarioError(
                    f"contact on '{ev.frame}': measured_by_ft must be {want} "
                    f"(link '{link_of[ev.frame]}' is "
                    f"{'below' if in_path else 'above'} every FT cut)")


def load_scenario(path) -> Scenario:
    """Parse a canonical-JSON scenario file; model path is relative to it."""
    path = os.fspath(path)
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ScenarioError(f"scenario file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"scenario file {path} is not valid JSON: {exc}")
    return scenario_from_dict(doc, base_dir=os.path.dirname(path))


def scenario_from_dict(doc: dict, base_dir: str = ".") -> Scenario:
    doc = dict(doc)
    try:
        model_ref = doc.pop("model")
    except KeyError:
        raise ScenarioError("scenario needs a 'model' path") from None
    model_path = os.path.join(base_dir, model_ref)
    if not os.path.exists(model_path):
        raise ScenarioError(f"model file not found: {model_path}")
    model = load_model(model_path)
    n = model.n_joints

    name = doc.pop("name", "scenario")
    duration = float(doc.pop("duration"))
    seed = int(doc.pop("seed"))
    initial = doc.pop("initial", {})
    s0 = initial.get("s", [0.0] * n)
    sd0 = initial.get("s_dot", [0.0] * n)
    reference = Reference.from_dict(doc.pop("reference", {"type": "hold"}),
                                    model, s0)
    contacts = [ContactEvent(**c) for c in doc.pop("contacts", [])]
    noise = SensorNoiseSpec.from_dict(doc.pop("noise", {}))
    friction = {name_: FrictionParams(*vals)
                for name_, vals in doc.pop("friction", {}).items()}
    gains_doc = dict(doc.pop("gains", {}))
    llc = LowLevelGains(**gains_doc.pop("llc", {}))
    if gains_doc:
        raise ScenarioError(f"unknown gains sections {sorted(gains_doc)}")
    rates = Rates(**doc.pop("rates", {}))
    scenario = Scenario(
        name=name, model=model, duration=duration, seed=seed,
        initial_s=s0, initial_s_dot=sd0, reference=reference,
        contacts=contacts, noise=noise, friction=friction, llc_gains=llc,
        estimator=doc.pop("estimator", "ukf"),
        estimator_contacts=tuple(doc.pop("estimator_contacts", ())),
        rates=rates, torque_overrides=doc.pop("torque_overrides", {}))
    doc.pop("comment", None)
    if doc:
        raise ScenarioError(f"unknown scenario keys {sorted(doc)}")
    return scenario


# ---------------------------------------------------------------------------
# plant: scalar-float fixed-base forward dynamics
#
# The batched spatial kernels in dynamics are tuned for sigma-point stacks;
# the plant evaluates one state at a fine step where per-call numpy overhead
# dominates, so the same recursions run here on plain floats. The tests
# cross-check this against the dynamics module on random trees.


def _cross(a, b):
    return (a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0])


def _rtv(R, v):   # R^T v for a row-major 9-tuple
    return (R[0] * v[0] + R[3] * v[1] + R[6] * v[2],
            R[1] * v[0] + R[4] * v[1] + R[7] * v[2],
            R[2] * v[0] + R[5] * v[1] + R[8] * v[2])


def _rv(R, v):    # R v
    return (R[0] * v[0] + R[1] * v[1] + R[2] * v[2],
            R[3] * v[0] + R[4] * v[1] + R[5] * v[2],
            R[6] * v[0] + R[7] * v[1] + R[8] * v[2])


def _rmul(A, B):  # A B for row-major 9-tuples
    return (A[0] * B[0] + A[1] * B[3] + A[2] * B[6],
            A[0] * B[1] + A[1] * B[4] + A[2] * B[7],
            A[0] * B[2] + A[1] * B[5] + A[2] * B[8],
            A[3] * B[0] + A[4] * B[3] + A[5] * B[6],
            A[3] * B[1] + A[4] * B[4] + A[5] * B[7],
            A[3] * B[2] + A[4] * B[5] + A[5] * B[8],
            A[6] * B[0] + A[7] * B[3] + A[8] * B[6],
            A[6] * B[1] + A[7] * B[4] + A[8] * B[7],
            A[6] * B[2] + A[7] * B[5] + A[8] * B[8])


def _flat(M):
    return tuple(float(x) for x in np.asarray(M, dtype=float).reshape(-1))


class _ScalarPlant:
    """Fixed-base plant dynamics for one model plus its friction map."""

    def __init__(self, model: KinematicModel, friction=None):
        st = dyn._as_structure(model)
        self.st = st
        n = st.n
        self.n = n
        self.parent = [int(p) for p in st.parent_pos]
        self.qidx = [int(q) for q in st.qidx]
        self.prismatic = [bool(b) for b in st.prismatic]
        self.axis = [tuple(float(x) for x in a) for a in st.axis]
        self.oR = [_flat(st.oR[k]) for k in range(n + 1)]
        self.oRK = [None] * (n + 1)
        self.oRK2 = [None] * (n + 1)
        self.oRa = [None] * (n + 1)
        for k in range(1, n + 1):
            K = dyn.skew(st.axis[k])
            self.oRK[k] = _flat(st.oR[k] @ K)
            self.oRK2[k] = _flat(st.oR[k] @ K @ K)
            self.oRa[k] = tuple(float(x) for x in st.oR[k] @ st.axis[k])
        self.op = [tuple(float(x) for x in p) for p in st.op]
        self.mass = [float(m) for m in st.mass]
        self.mc = [tuple(float(x) for x in c) for c in st.mc]
        self.Io = [_flat(I) for I in st.Io]
        self.motor_inertia = [float(x) for x in st.motor_inertia]
        self.drive = [float(g * k)
                      for g, k in zip(st.gear_ratio, st.torque_constant)]
        # fixed base at identity: fictitious base acceleration replaces gravity
        self.a0 = tuple(-float(g) for g in st.gravity)
        friction = friction or {}
        self.fric = [friction.get(name) for name in st.joint_names]
        self.contact_info = {}
        for c in model.contact_frames:
            pos, _, p_off = st.frame(c.name)
            self.contact_info[c.name] = (pos, tuple(float(x) for x in p_off))

    def joint_torque(self, i_cmd, s_dot):
        """tau_j = r k_tau i - friction(s_dot), per joint."""
        out = [0.0] * self.n
        for q in range(self.n):
            tau = self.drive[q] * i_cmd[q]
            f = self.fric[q]
            if f is not None:
                sd = s_dot[q]
                tau -= f.k0 * math.tanh(f.k1 * sd) + f.k2 * sd
            out[q] = tau
        return out

    def _body_frames(self, s):
        n = self.n
        R_rel = [None] * (n + 1)
        p_rel = [None] * (n + 1)
        for k in range(1, n + 1):
            q = s[self.qidx[k]]
            if self.prismatic[k]:
                R_rel[k] = self.oR[k]
                a = self.oRa[k]
                o = self.op[k]
                p_rel[k] = (o[0] + a[0] * q, o[1] + a[1] * q, o[2] + a[2] * q)
            else:
                sq, cq = math.sin(q), math.cos(q)
                t = 1.0 - cq
                R0, K, K2 = self.oR[k], self.oRK[k], self.oRK2[k]
                R_rel[k] = (R0[0] + sq * K[0] + t * K2[0],
                            R0[1] + sq * K[1] + t * K2[1],
                            R0[2] + sq * K[2] + t * K2[2],
                            R0[3] + sq * K[3] + t * K2[3],
                            R0[4] + sq * K[4] + t * K2[4],
                            R0[5] + sq * K[5] + t * K2[5],
                            R0[6] + sq * K[6] + t * K2[6],
                            R0[7] + sq * K[7] + t * K2[7],
                            R0[8] + sq * K[8] + t * K2[8])
                p_rel[k] = self.op[k]
        return R_rel, p_rel

    def _local_wrenches(self, R_rel, wrenches):
        """World wrenches at contact frames -> {body: (f, mu)} body-local."""
        if not wrenches:
            return None
        n = self.n
        Rw = [None] * (n + 1)
        Rw[0] = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0)
        for k in range(1, n + 1):
            Rw[k] = _rmul(Rw[self.parent[k]], R_rel[k])
        out = {}
        for frame, vec in wrenches.items():
            pos, p_off = self.contact_info[frame]
            fw = (vec[0], vec[1], vec[2])
            muw = (vec[3], vec[4], vec[5])
            f = _rtv(Rw[pos], fw)
            mu = _rtv(Rw[pos], muw)
            arm = _cross(p_off, f)
            prev = out.get(pos)
            add = (f[0], f[1], f[2],
                   mu[0] + arm[0], mu[1] + arm[1], mu[2] + arm[2])
            if prev is not None:
                add = tuple(a + b for a, b in zip(prev, add))
            out[pos] = add
        return out

    def sddot(self, s, s_dot, tau, wrenches=None):
        """Joint accelerations; wrenches is {frame: world 6-vector} or None."""
        n = self.n
        R_rel, p_rel = self._body_frames(s)
        fext = self._local_wrenches(R_rel, wrenches)

        v = [None] * (n + 1)
        w = [None] * (n + 1)
        al = [None] * (n + 1)
        aa = [None] * (n + 1)
        v[0] = (0.0, 0.0, 0.0)
        w[0] = (0.0, 0.0, 0.0)
        al[0] = self.a0
        aa[0] = (0.0, 0.0, 0.0)
        for k in range(1, n + 1):
            par = self.parent[k]
            R, p = R_rel[k], p_rel[k]
            qd = s_dot[self.qidx[k]]
            ax = self.axis[k]
            wp = w[par]
            c = _cross(wp, p)
            vp = v[par]
            vk = _rtv(R, (vp[0] + c[0], vp[1] + c[1], vp[2] + c[2]))
            wk = _rtv(R, wp)
            ap = aa[par]
            c = _cross(ap, p)
            lp = al[par]
            ak = _rtv(R, (lp[0] + c[0], lp[1] + c[1], lp[2] + c[2]))
            gk = _rtv(R, ap)
            if self.prismatic[k]:
                vk = (vk[0] + ax[0] * qd, vk[1] + ax[1] * qd,
                      vk[2] + ax[2] * qd)
                c = _cross(wk, ax)
                ak = (ak[0] + qd * c[0], ak[1] + qd * c[1], ak[2] + qd * c[2])
            else:
                wk = (wk[0] + ax[0] * qd, wk[1] + ax[1] * qd,
                      wk[2] + ax[2] * qd)
                c = _cross(vk, ax)
                ak = (ak[0] + qd * c[0], ak[1] + qd * c[1], ak[2] + qd * c[2])
                c = _cross(wk, ax)
                gk = (gk[0] + qd * c[0], gk[1] + qd * c[1], gk[2] + qd * c[2])
            v[k], w[k], al[k], aa[k] = vk, wk, ak, gk

        fl = [None] * (n + 1)
        fa = [None] * (n + 1)
        for k in range(n + 1):
            m, h, Io = self.mass[k], self.mc[k], self.Io[k]
            vk, wk, lk, gk = v[k], w[k], al[k], aa[k]
            ivl = (m * vk[0] - (h[1] * wk[2] - h[2] * wk[1]),
                   m * vk[1] - (h[2] * wk[0] - h[0] * wk[2]),
                   m * vk[2] - (h[0] * wk[1] - h[1] * wk[0]))
            c = _cross(h, vk)
            iva = (c[0] + Io[0] * wk[0] + Io[1] * wk[1] + Io[2] * wk[2],
                   c[1] + Io[3] * wk[0] + Io[4] * wk[1] + Io[5] * wk[2],
                   c[2] + Io[6] * wk[0] + Io[7] * wk[1] + Io[8] * wk[2])
            ial = (m * lk[0] - (h[1] * gk[2] - h[2] * gk[1]),
                   m * lk[1] - (h[2] * gk[0] - h[0] * gk[2]),
                   m * lk[2] - (h[0] * gk[1] - h[1] * gk[0]))
            c = _cross(h, lk)
            iaa = (c[0] + Io[0] * gk[0] + Io[1] * gk[1] + Io[2] * gk[2],
                   c[1] + Io[3] * gk[0] + Io[4] * gk[1] + Io[5] * gk[2],
                   c[2] + Io[6] * gk[0] + Io[7] * gk[1] + Io[8] * gk[2])
            c1 = _cross(wk, ivl)
            c2 = _cross(wk, iva)
            c3 = _cross(vk, ivl)
            Fl = (ial[0] + c1[0], ial[1] + c1[1], ial[2] + c1[2])
            Fa = (iaa[0] + c2[0] + c3[0], iaa[1] + c2[1] + c3[1],
                  iaa[2] + c2[2] + c3[2])
            if fext is not None and k in fext:
                e = fext[k]
                Fl = (Fl[0] - e[0], Fl[1] - e[1], Fl[2] - e[2])
                Fa = (Fa[0] - e[3], Fa[1] - e[4], Fa[2] - e[5])
            fl[k], fa[k] = Fl, Fa

        bias = [0.0] * n
        for k in range(n, 0, -1):
            ax = self.axis[k]
            Fl, Fa = fl[k], fa[k]
            if self.prismatic[k]:
                bias[self.qidx[k]] = (ax[0] * Fl[0] + ax[1] * Fl[1]
                                      + ax[2] * Fl[2])
            else:
                bias[self.qidx[k]] = (ax[0] * Fa[0] + ax[1] * Fa[1]
                                      + ax[2] * Fa[2])
            par = self.parent[k]
            R, p = R_rel[k], p_rel[k]
            f = _rv(R, Fl)
            mu = _rv(R, Fa)
            arm = _cross(p, f)
            pl, pa = fl[par], fa[par]
            fl[par] = (pl[0] + f[0], pl[1] + f[1], pl[2] + f[2])
            fa[par] = (pa[0] + mu[0] + arm[0], pa[1] + mu[1] + arm[1],
                       pa[2] + mu[2] + arm[2])

        M = self._joint_mass_matrix(R_rel, p_rel)
        if n == 1:
            return np.array([(tau[0] - bias[0]) / M[0, 0]])
        rhs = np.array([tau[q] - bias[q] for q in range(n)])
        return np.linalg.solve(M, rhs)

    def _joint_mass_matrix(self, R_rel, p_rel) -> np.ndarray:
        """Joint-space block of the composite-rigid-body mass matrix."""
        n = self.n
        cm = list(self.mass)
        ch = list(self.mc)
        cJ = list(self.Io)
        M = np.zeros((n, n))
        for k in range(n, 0, -1):
            ax = self.axis[k]
            m, h, J = cm[k], ch[k], cJ[k]
            if self.prismatic[k]:
                Fl = (m * ax[0], m * ax[1], m * ax[2])
                Fa = _cross(h, ax)
                mkk = ax[0] * Fl[0] + ax[1] * Fl[1] + ax[2] * Fl[2]
            else:
                Fl = _cross(ax, h)
                Fa = (J[0] * ax[0] + J[1] * ax[1] + J[2] * ax[2],
                      J[3] * ax[0] + J[4] * ax[1] + J[5] * ax[2],
                      J[6] * ax[0] + J[7] * ax[1] + J[8] * ax[2])
                mkk = ax[0] * Fa[0] + ax[1] * Fa[1] + ax[2] * Fa[2]
            col = self.qidx[k]
            M[col, col] = mkk + self.motor_inertia[col]
            j = k
            while True:
                R, p = R_rel[j], p_rel[j]
                f = _rv(R, Fl)
                mu = _rv(R, Fa)
                arm = _cross(p, f)
                Fl = f
                Fa = (mu[0] + arm[0], mu[1] + arm[1], mu[2] + arm[2])
                j = self.parent[j]
                if j == 0:
                    break
                axj = self.axis[j]
                if self.prismatic[j]:
                    val = axj[0] * Fl[0] + axj[1] * Fl[1] + axj[2] * Fl[2]
                else:
                    val = axj[0] * Fa[0] + axj[1] * Fa[1] + axj[2] * Fa[2]
                row = self.qidx[j]
                M[row, col] = val
                M[col, row] = val

            # fold this composite body into its parent
            par = self.parent[k]
            R, p = R_rel[k], p_rel[k]
            Rh = _rv(R, h)
            cm[par] = cm[par] + m
            hp = ch[par]
            ch[par] = (hp[0] + Rh[0] + m * p[0], hp[1] + Rh[1] + m * p[1],
                       hp[2] + Rh[2] + m * p[2])
            RJ = _rmul(_rmul(R, J), (R[0], R[3], R[6], R[1], R[4], R[7],
                                     R[2], R[5], R[8]))
            pp = p[0] * p[0] + p[1] * p[1] + p[2] * p[2]
            pRh = p[0] * Rh[0] + p[1] * Rh[1] + p[2] * Rh[2]
            Jp = cJ[par]
            out = []
            for r in range(3):
                for c in range(3):
                    val = Jp[3 * r + c] + RJ[3 * r + c] \
                        - m * p[r] * p[c] - Rh[r] * p[c] - p[r] * Rh[c]
                    if r == c:
                        val += m * pp + 2.0 * pRh
                    out.append(val)
            cJ[par] = tuple(out)
        return M


def _plant_for(model: KinematicModel, friction) -> _ScalarPlant:
    friction = friction or {}
    key = tuple(sorted((name, p.k0, p.k1, p.k2)
                       for name, p in friction.items()))
    cache = getattr(model, "_plant_cache", None)
    if cache is None:
        cache = {}
        object.__setattr__(model, "_plant_cache", cache)
    if key not in cache:
        cache[key] = _ScalarPlant(model, friction)
    return cache[key]


def plant_step(model, state: dyn.RobotState, i_cmd, contacts, t: float,
               dt: float, friction=None) -> dyn.RobotState:
    """One fixed-step RK4 advance of the full fixed-base model.

    The applied torque is r k_tau i_cmd minus joint friction; contact events
    are evaluated at the RK4 stage times. Raises SimulationError with the
    time stamp when the state leaves the finite range.
    """
    if dt <= 0:
        raise SimulationError("dt must be positive")
    plant = _plant_for(model, friction)
    i_cmd = [float(x) for x in np.asarray(i_cmd, dtype=float).reshape(plant.n)]

    def wrenches_at(tk):
        out = {}
        for ev in contacts or ():
            vec = ev.wrench_at(tk)
            if vec is not None:
                prev = out.get(ev.frame)
                out[ev.frame] = vec if prev is None else prev + vec
        return out

    def deriv(s, sd, tk):
        tau = plant.joint_torque(i_cmd, sd)
        return plant.sddot(s, sd, tau, wrenches_at(tk))

    s = state.s.copy()
    sd = state.s_dot.copy()
    try:
        # a state already past float range makes the trig calls raise; the
        # errstate keeps the doomed stages from spraying nan warnings first
        with np.errstate(invalid="ignore", over="ignore"):
            k1v = deriv(s, sd, t)
            half = 0.5 * dt
            k2v = deriv(s + half * sd, sd + half * k1v, t + half)
            k2p = sd + half * k1v
            k3v = deriv(s + half * k2p, sd + half * k2v, t + half)
            k3p = sd + half * k2v
            k4v = deriv(s + dt * k3p, sd + dt * k3v, t + dt)
            k4p = sd + dt * k3v
    except (ValueError, OverflowError):
        raise SimulationError(f"plant state diverged at t={t + dt:.6f}")
    s_new = s + dt / 6.0 * (sd + 2.0 * k2p + 2.0 * k3p + k4p)
    sd_new = sd + dt / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
    if not (np.all(np.isfinite(s_new)) and np.all(np.isfinite(sd_new))):
        raise SimulationError(f"plant state diverged at t={t + dt:.6f}")
    return dyn.RobotState(state.base_pose, s_new, sd_new)


# ---------------------------------------------------------------------------
# sensors


def synthesize_measurements(model, state: dyn.RobotState, nu_dot, i_applied,
                            active_wrenches, noise: SensorNoiseSpec,
                            rng) -> tuple:
    """Exact sensor values plus seeded Gaussian noise -> (u, y).

    active_wrenches maps contact frame -> world-axes 6-vector at time t. FT
    sensors see the true transmitted wrench across their cut, including the
    effect of any contact below it.
    """
    st = dyn._as_structure(model)
    n = st.n
    nu_dot = np.asarray(nu_dot, dtype=float).reshape(6 + n)
    kin = dyn.Kinematics(st, state.base_pose, state.s)
    local = {}
    for frame, vec in (active_wrenches or {}).items():
        pos, R_off, p_off = st.frame(frame)
        Rwf = kin.Rw[pos] @ R_off
        local[frame] = dyn.Wrench(frame, Rwf.T @ vec[:3], Rwf.T @ vec[3:])

    u = InputVector(state.base_pose, state.base_velocity.copy(),
                    nu_dot[:6].copy(), state.s.copy())

    gear = st.gear_ratio
    ktau = st.torque_constant
    del gear, ktau  # current is commanded upstream; kept for clarity

    s_dot = (state.s_dot + noise.encoder_bias
             + noise.encoder * rng.standard_normal(n))
    i_m = (np.asarray(i_applied, dtype=float).reshape(n) + noise.current_bias
           + noise.current * rng.standard_normal(n))

    ft_names = [s.name for s in model.sensors_of_kind("ft") if s.cut]
    f_FT = None
    if ft_names:
        wt = dyn.cut_transmitted_wrenches(model, _submodels_of(model), state,
                                          nu_dot, local)
        f_FT = np.concatenate([wt[name] for name in ft_names])
        f_FT = f_FT + noise.ft_bias + noise.ft * rng.standard_normal(f_FT.size)

    accel_names = [s.name for s in model.sensors_of_kind("accelerometer")]
    alpha = None
    if accel_names:
        alpha = np.concatenate([
            dyn.sensor_proper_acceleration(model, state, nu_dot, f)
            for f in accel_names])
        alpha = (alpha + noise.accel_bias
                 + noise.accel * rng.standard_normal(alpha.size))

    gyro_names = [s.name for s in model.sensors_of_kind("gyroscope")]
    omega = None
    if gyro_names:
        parts = []
        for f in gyro_names:
            pos, R_off, _ = st.frame(f)
            vel = dyn.frame_velocity(st, state, f)
            Rwf = kin.Rw[pos] @ R_off
            parts.append(Rwf.T @ vel.angular)
        omega = np.concatenate(parts)
        omega = (omega + noise.gyro_bias
                 + noise.gyro * rng.standard_normal(omega.size))

    y = MeasurementVector(s_dot=s_dot, i_m=i_m, f_FT=f_FT, alpha_acc=alpha,
                          omega_gyro=omega)
    return u, y


# ---------------------------------------------------------------------------
# logs and metrics


class RunLog:
    """Uniform-grid time series with flat float columns."""

    def __init__(self, columns):
        self.columns = list(columns)
        self._index = {c: i for i, c in enumerate(self.columns)}
        self._rows = []

    def add_row(self, values):
        if len(values) != len(self.columns):
            raise SimulationError("row width does not match the column set")
        self._rows.append([float(v) for v in values])

    @property
    def n_rows(self):
        return len(self._rows)

    def _data(self):
        return np.asarray(self._rows, dtype=float).reshape(len(self._rows),
                                                           len(self.columns))

    def column(self, name: str) -> np.ndarray:
        """Exact column as 1-D; a prefix groups `name_*` columns as 2-D."""
        data = self._data()
        if name in self._index:
            return data[:, self._index[name]]
        picks = [i for i, c in enumerate(self.columns)
                 if c.startswith(name + "_")]
        if not picks:
            raise SimulationError(f"no column or column group '{name}'")
        return data[:, picks]

    def to_csv(self) -> str:
        lines = [",".join(self.columns)]
        for row in self._rows:
            lines.append(",".join(repr(v) for v in row))
        return "\n".join(lines) + "\n"


def compute_rmse(a, b) -> np.ndarray:
    """Root mean square difference along time, per trailing column."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise SimulationError(f"series shapes differ: {a.shape} vs {b.shape}")
    return np.sqrt(np.mean((a - b) ** 2, axis=0))


@dataclass
class ScenarioResult:
    scenario: Scenario
    log: RunLog
    aborted: bool = False
    abort_reason: str = ""
    abort_time: float = None

    def summary_text(self) -> str:
        names = self.scenario.model.joint_names()
        lines = [f"scenario: {self.scenario.name}",
                 f"seed: {self.scenario.seed}",
                 f"duration_s: {repr(float(self.scenario.duration))}",
                 f"rows: {self.log.n_rows}",
                 f"aborted: {'yes' if self.aborted else 'no'}"]
        if self.aborted:
            lines.append(f"abort_time_s: {repr(float(self.abort_time))}")
            lines.append(f"abort_reason: {self.abort_reason}")
        if self.log.n_rows:
            truth = self.log.column("tau_truth")
            for label, col in (("track", "tau_des"), ("est_ukf", "tau_ukf"),
                               ("est_rnea", "tau_rnea")):
                try:
                    series = self.log.column(col)
                except SimulationError:
                    continue
                rmse = compute_rmse(series, truth)
                for j, name in enumerate(names):
                    lines.append(f"rmse_{label}_{name}: {repr(float(rmse[j]))}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# closed loop


def _log_columns(model: KinematicModel, events) -> list:
    names = model.joint_names()
    cols = ["t"]
    for group in ("s", "sdot", "tau_truth", "tau_des", "tau_ukf", "tau_rnea",
                  "i_cmd", "clamp", "push_tau"):
        cols.extend(f"{group}_{j}" for j in names)
    cols.extend(f"y_sdot_{j}" for j in names)
    cols.extend(f"y_cur_{j}" for j in names)
    for s in model.sensors_of_kind("ft"):
        if s.cut:
            cols.extend(f"y_ft_{s.name}_{i}" for i in range(6))
    for s in model.sensors_of_kind("accelerometer"):
        cols.extend(f"y_acc_{s.name}_{i}" for i in range(3))
    for s in model.sensors_of_kind("gyroscope"):
        cols.extend(f"y_gyro_{s.name}_{i}" for i in range(3))
    cols.extend(f"innov_{b}" for b in ("s_dot", "i_m", "f_FT", "alpha_acc",
                                       "omega_gyro"))
    cols.extend(f"contact{k}_{ev.frame}_active" for k, ev in enumerate(events))
    return cols


def run_scenario(scenario: Scenario, noise_config: NoiseConfig = None,
                 estimator: str = None) -> ScenarioResult:
    """Execute the closed loop and return the log plus outcome.

    `estimator` picks which estimate drives the torque loop ('ukf' or
    'rnea_baseline'); both estimates are logged either way. A scenario whose
    estimator field is 'both' needs the override to say which loop to run.
    """
    in_loop = estimator or scenario.estimator
    if in_loop == "both":
        raise ScenarioError("run_scenario drives one loop: pass "
                            "estimator='ukf' or 'rnea_baseline'")
    if in_loop not in ("ukf", "rnea_baseline"):
        raise ScenarioError(f"unknown estimator '{in_loop}'")

    model = scenario.model
    n = model.n_joints
    names = model.joint_names()
    rates = scenario.rates
    plant_dt = 1.0 / rates.plant_hz
    filter_dt = 1.0 / rates.filter_hz
    f_div = rates.plant_hz // rates.filter_hz
    h_div = rates.plant_hz // rates.hlc_hz

    est = TorqueEstimator(model, friction=scenario.friction,
                          contact_frames=scenario.estimator_contacts,
                          noise=noise_config)
    plant = _plant_for(model, scenario.friction)
    st = dyn._as_structure(model)
    override_idx = [(names.index(j), float(v))
                    for j, v in scenario.torque_overrides.items()]

    state = dyn.RobotState(RigidTransform.identity(),
                           scenario.initial_s.copy(),
                           scenario.initial_s_dot.copy())
    i_cmd = np.zeros(n)
    integ = None
    clamped = np.zeros(n, dtype=bool)
    tau_des = np.zeros(n)
    tau_ukf = np.zeros(n)
    tau_rnea = np.zeros(n)
    prev_sdot_meas = None

    log = RunLog(_log_columns(model, scenario.contacts))
    result = ScenarioResult(scenario=scenario, log=log)
    n_plant = max(round(scenario.duration * rates.plant_hz), f_div)

    for k in range(n_plant):
        t = k * plant_dt
        active = {}
        for ev in scenario.contacts:
            vec = ev.wrench_at(t)
            if vec is None:
                continue
            prev = active.get(ev.frame)
            active[ev.frame] = vec if prev is None else prev + vec

        try:
            if k % f_div == 0:
                tick = k // f_div
                rng = np.random.default_rng((scenario.seed, tick))
                tau_applied = plant.joint_torque(i_cmd, state.s_dot)
                sdd = plant.sddot(state.s, state.s_dot, tau_applied, active)
                nu_dot = np.concatenate((np.zeros(6), sdd))
                u, y = synthesize_measurements(model, state, nu_dot, i_cmd,
                                               active, scenario.noise, rng)

                out = est.step(u, y, filter_dt)
                tau_ukf = out.tau_j_hat

                if prev_sdot_meas is None:
                    sdd_meas = np.zeros(n)
                else:
                    sdd_meas = (y.s_dot - prev_sdot_meas) / filter_dt
                prev_sdot_meas = y.s_dot.copy()
                meas_state = dyn.RobotState(RigidTransform.identity(),
                                            u.s, y.s_dot)
                ft_meas = {}
                cursor = 0
                for s_name in est.ft_order:
                    ft_meas[s_name] = y.f_FT[cursor:cursor + 6]
                    cursor += 6
                tau_rnea = rnea_baseline(model, meas_state,
                                         np.concatenate((np.zeros(6),
                                                         sdd_meas)), ft_meas)

                tau_hat = tau_ukf if in_loop == "ukf" else tau_rnea

                if k % h_div == 0 and scenario.reference.needs_hlc:
                    tasks = scenario.reference.tasks_at(t)
                    sol = solve_hlc(model, meas_state, tasks)
                    tau_des = sol.tau
                elif not scenario.reference.needs_hlc:
                    tau_des = np.zeros(n)
                for idx, value in override_idx:
                    tau_des[idx] = value

                res = low_level_step(tau_des, tau_hat, y.s_dot, model,
                                     scenario.friction, scenario.llc_gains,
                                     filter_dt, integ)
                i_cmd, integ, clamped = res.i_ref, res.integrator, res.clamped

                push_tau = np.zeros(n)
                if active:
                    truth_state = state
                    for frame, vec in active.items():
                        J = dyn.frame_jacobian(st, truth_state, frame)
                        push_tau += (J.T @ vec)[6:]

                tau_truth = np.array(plant.joint_torque(i_cmd, state.s_dot))
                row = [t]
                row.extend(state.s)
                row.extend(state.s_dot)
                row.extend(tau_truth)
                row.extend(tau_des)
                row.extend(tau_ukf)
                row.extend(tau_rnea)
                row.extend(i_cmd)
                row.extend(1.0 if c else 0.0 for c in clamped)
                row.extend(push_tau)
                row.extend(y.s_dot)
                row.extend(y.i_m)
                if y.f_FT is not None:
                    row.extend(y.f_FT)
                if y.alpha_acc is not None:
                    row.extend(y.alpha_acc)
                if y.omega_gyro is not None:
                    row.extend(y.omega_gyro)
                row.extend(out.innovation_norms.get(b, float("nan"))
                           for b in ("s_dot", "i_m", "f_FT", "alpha_acc",
                                     "omega_gyro"))
                row.extend(1.0 if ev.wrench_at(t) is not None else 0.0
                           for ev in scenario.contacts)
                log.add_row(row)

            state = plant_step(model, state, i_cmd, scenario.contacts, t,
                               plant_dt, scenario.friction)
            if np.max(np.abs(state.s_dot)) > 1e4:
                raise SimulationError(
                    f"plant state diverged at t={t + plant_dt:.6f}")
        except (SimulationError, EstimatorError, UkfError,
                ControlError) as exc:
            result.aborted = True
            result.abort_reason = f"{type(exc).__name__}: {exc}"
            result.abort_time = t
            break

    return result
