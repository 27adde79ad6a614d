"""Robot description: links, joints, sensors, contact frames, submodel splitting.

A model document is strict JSON (SI units, radians). Every non-root link hangs
on exactly one 1-DoF joint (revolute or prismatic), so the link/joint graph is
a tree. Force-torque sensors may carry ``cut: true``, which declares that the
estimator treats the sensor as a boundary: the tree is split at the attached
link's parent joint and the transmitted wrench becomes a measured quantity
instead of a modeled one.

Frame names live in a single registry (links, sensors, contact frames), so a
name identifies a frame unambiguously anywhere in the library.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

SENSOR_KINDS = ("encoder", "current", "ft", "accelerometer", "gyroscope")
JOINT_TYPES = ("revolute", "prismatic")

_ROT_TOL = 1e-8
_AXIS_TOL = 1e-6


class ModelError(Exception):
    """Base class for model loading failures."""


class ModelSyntaxError(ModelError):
    """Malformed document; message carries line/column of the defect."""


class ModelSemanticError(ModelError):
    """Well-formed document that violates a model rule."""


@dataclass(eq=False)
class RigidTransform:
    """Pose of one frame in another: x_parent = rotation @ x_child + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def apply(self, point: np.ndarray) -> np.ndarray:
        return self.rotation @ np.asarray(point, dtype=float) + self.translation

    def is_valid(self, tol: float = _ROT_TOL) -> bool:
        r = self.rotation
        return (
            np.all(np.isfinite(r))
            and np.all(np.isfinite(self.translation))
            and np.linalg.norm(r.T @ r - np.eye(3)) < tol
            and np.linalg.det(r) > 0.0
        )


@dataclass(eq=False)
class Link:
    name: str
    mass: float
    com: np.ndarray            # center of mass in the link frame
    inertia: np.ndarray        # 3x3 rotational inertia about the com, link axes

    def __post_init__(self):
        self.com = np.asarray(self.com, dtype=float).reshape(3)
        self.inertia = np.asarray(self.inertia, dtype=float).reshape(3, 3)


@dataclass(eq=False)
class Joint:
    name: str
    parent: str
    child: str
    joint_type: str            # revolute | prismatic
    axis: np.ndarray           # unit axis in the child link frame
    origin: RigidTransform     # child frame pose in parent frame at q = 0
    gear_ratio: float
    motor_torque_constant: float
    motor_inertia: float = 0.0           # reflected to the joint side
    position_limits: tuple | None = None

    def __post_init__(self):
        self.axis = np.asarray(self.axis, dtype=float).reshape(3)


@dataclass(eq=False)
class SensorSpec:
    kind: str
    name: str
    link: str
    transform: RigidTransform = field(default_factory=RigidTransform.identity)
    cut: bool = False          # ft only: split the model at this sensor


@dataclass(eq=False)
class ContactFrame:
    name: str
    link: str
    transform: RigidTransform = field(default_factory=RigidTransform.identity)


@dataclass(eq=False)
class KinematicModel:
    name: str
    gravity: np.ndarray
    root_link: str
    links: list
    joints: list
    sensors: list
    contact_frames: list

    def __post_init__(self):
        self.gravity = np.asarray(self.gravity, dtype=float).reshape(3)

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    def joint_names(self) -> list:
        return [j.name for j in self.joints]

    def link(self, name: str) -> Link:
        for l in self.links:
            if l.name == name:
                return l
        raise KeyError(name)

    def joint(self, name: str) -> Joint:
        for j in self.joints:
            if j.name == name:
                return j
        raise KeyError(name)

    def joint_index(self, name: str) -> int:
        for i, j in enumerate(self.joints):
            if j.name == name:
                return i
        raise KeyError(name)

    def sensor(self, name: str) -> SensorSpec:
        for s in self.sensors:
            if s.name == name:
                return s
        raise KeyError(name)

    def sensors_of_kind(self, kind: str) -> list:
        return [s for s in self.sensors if s.kind == kind]

    def parent_joint(self, link_name: str):
        """Joint whose child is link_name, or None for the root link."""
        for j in self.joints:
            if j.child == link_name:
                return j
        return None


@dataclass(eq=False)
class SubModel:
    """Connected subtree produced by cutting at FT sensors.

    For a non-root submodel the first joint is the cut joint itself; its
    parent link (anchor_link) belongs to the neighbouring submodel and the
    anchor frame's motion has to be supplied from outside. boundary_ft holds
    (sensor name, sign) pairs: +1 on the child side of the cut (the measured
    wrench supports this submodel), -1 on the parent side (reaction).
    """

    index: int
    links: list
    joints: list
    anchor_link: str | None
    anchor_joint: str | None
    boundary_ft: list
    contact_frames: list

    def contains_joint(self, name: str) -> bool:
        return name in self.joints


# ---------------------------------------------------------------------------
# parsing


def _require_keys(obj: dict, required: tuple, optional: tuple, where: str):
    for k in required:
        if k not in obj:
            raise ModelSemanticError(f"{where}: missing required key '{k}'")
    for k in obj:
        if k not in required and k not in optional:
            raise ModelSemanticError(f"{where}: unknown key '{k}'")


def _parse_transform(obj, where: str) -> RigidTransform:
    if obj is None:
        return RigidTransform.identity()
    if not isinstance(obj, dict):
        raise ModelSemanticError(f"{where}: transform must be an object")
    _require_keys(obj, ("rotation", "translation"), (), where)
    try:
        return RigidTransform(np.array(obj["rotation"], dtype=float),
                              np.array(obj["translation"], dtype=float))
    except (ValueError, TypeError) as e:
        raise ModelSemanticError(f"{where}: bad transform shape ({e})")


def parse_model(text: str) -> KinematicModel:
    """Parse and validate a model document; raises on any defect."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ModelSyntaxError(
            f"line {e.lineno}, column {e.colno}: {e.msg}") from None
    if not isinstance(doc, dict):
        raise ModelSemanticError("top level: document must be an object")
    _require_keys(doc, ("name", "gravity", "root_link", "links", "joints",
                        "sensors", "contact_frames"), (), "top level")

    links = []
    for i, lo in enumerate(doc["links"]):
        where = f"links[{i}]"
        _require_keys(lo, ("name", "mass", "com", "inertia"), (), where)
        try:
            links.append(Link(str(lo["name"]), float(lo["mass"]),
                              np.array(lo["com"], dtype=float),
                              np.array(lo["inertia"], dtype=float)))
        except (ValueError, TypeError) as e:
            raise ModelSemanticError(f"{where}: bad field shape ({e})")

    joints = []
    for i, jo in enumerate(doc["joints"]):
        where = f"joints[{i}]"
        _require_keys(jo, ("name", "parent", "child", "type", "axis", "origin",
                           "gear_ratio", "motor_torque_constant"),
                      ("motor_inertia", "position_limits"), where)
        limits = jo.get("position_limits")
        if limits is not None:
            if not (isinstance(limits, (list, tuple)) and len(limits) == 2):
                raise ModelSemanticError(f"{where}: position_limits must be [lo, hi]")
            limits = (float(limits[0]), float(limits[1]))
        try:
            joints.append(Joint(
                str(jo["name"]), str(jo["parent"]), str(jo["child"]),
                str(jo["type"]), np.array(jo["axis"], dtype=float),
                _parse_transform(jo["origin"], where + ".origin"),
                float(jo["gear_ratio"]), float(jo["motor_torque_constant"]),
                float(jo.get("motor_inertia", 0.0)), limits))
        except (ValueError, TypeError) as e:
            raise ModelSemanticError(f"{where}: bad field shape ({e})")

    sensors = []
    for i, so in enumerate(doc["sensors"]):
        where = f"sensors[{i}]"
        _require_keys(so, ("kind", "name", "link"), ("transform", "cut"), where)
        sensors.append(SensorSpec(
            str(so["kind"]), str(so["name"]), str(so["link"]),
            _parse_transform(so.get("transform"), where + ".transform"),
            bool(so.get("cut", False))))

    contacts = []
    for i, co in enumerate(doc["contact_frames"]):
        where = f"contact_frames[{i}]"
        _require_keys(co, ("name", "link"), ("transform",), where)
        contacts.append(ContactFrame(
            str(co["name"]), str(co["link"]),
            _parse_transform(co.get("transform"), where + ".transform")))

    try:
        gravity = np.array(doc["gravity"], dtype=float).reshape(3)
    except (ValueError, TypeError):
        raise ModelSemanticError("gravity: must be a 3-vector")

    model = KinematicModel(str(doc["name"]), gravity, str(doc["root_link"]),
                           links, joints, sensors, contacts)
    diagnostics = validate_model(model)
    if diagnostics:
        raise ModelSemanticError("; ".join(diagnostics))
    return model


def load_model(path) -> KinematicModel:
    with open(path, "r", encoding="utf-8") as f:
        return parse_model(f.read())


# ---------------------------------------------------------------------------
# validation


def _principal_moments_ok(inertia: np.ndarray) -> bool:
    w = np.linalg.eigvalsh(0.5 * (inertia + inertia.T))
    if np.any(w <= 0.0):
        return False
    tol = 1e-9 * max(1.0, w[-1])
    # physical rigid body: each principal moment bounded by the other two
    return (w[0] + w[1] >= w[2] - tol)


def validate_model(model: KinematicModel) -> list:
    """Return a list of 'element: rule' diagnostics; empty means valid."""
    diags = []
    link_names = [l.name for l in model.links]
    joint_names = [j.name for j in model.joints]

    for pool, label in ((link_names, "link"), (joint_names, "joint"),
                        ([s.name for s in model.sensors], "sensor"),
                        ([c.name for c in model.contact_frames], "contact frame")):
        seen = set()
        for n in pool:
            if n in seen:
                diags.append(f"{label} '{n}': duplicate name")
            seen.add(n)

    # links, sensors and contact frames share the frame registry
    frame_pool = link_names + [s.name for s in model.sensors] \
        + [c.name for c in model.contact_frames]
    seen = set()
    for n in frame_pool:
        if n in seen and n not in [d.split("'")[1] for d in diags if "duplicate" in d]:
            diags.append(f"frame '{n}': name collides across links/sensors/contacts")
        seen.add(n)

    if not np.all(np.isfinite(model.gravity)):
        diags.append("gravity: must be finite")

    if model.root_link not in link_names:
        diags.append(f"root_link '{model.root_link}': no such link")

    for l in model.links:
        if not (np.isfinite(l.mass) and l.mass > 0.0):
            diags.append(f"link '{l.name}': mass must be positive")
        if not np.all(np.isfinite(l.com)):
            diags.append(f"link '{l.name}': com must be finite")
        ine = l.inertia
        if not np.all(np.isfinite(ine)) or np.linalg.norm(ine - ine.T) > 1e-9 * max(1.0, np.abs(ine).max()):
            diags.append(f"link '{l.name}': inertia must be finite and symmetric")
        elif not _principal_moments_ok(ine):
            diags.append(f"link '{l.name}': inertia must be positive definite "
                         "with principal moments satisfying the triangle inequality")

    child_seen = {}
    for j in model.joints:
        if j.joint_type not in JOINT_TYPES:
            diags.append(f"joint '{j.name}': type must be one of {JOINT_TYPES}")
        if j.parent not in link_names:
            diags.append(f"joint '{j.name}': parent link '{j.parent}' missing")
        if j.child not in link_names:
            diags.append(f"joint '{j.name}': child link '{j.child}' missing")
        if j.child == model.root_link:
            diags.append(f"joint '{j.name}': root link cannot be a joint child")
        if j.child in child_seen:
            diags.append(f"joint '{j.name}': link '{j.child}' already has parent "
                         f"joint '{child_seen[j.child]}'")
        child_seen.setdefault(j.child, j.name)
        if abs(np.linalg.norm(j.axis) - 1.0) > _AXIS_TOL:
            diags.append(f"joint '{j.name}': axis must be a unit vector")
        if not j.origin.is_valid():
            diags.append(f"joint '{j.name}': origin rotation must be orthonormal "
                         "with determinant +1")
        if not (np.isfinite(j.gear_ratio) and j.gear_ratio > 0.0):
            diags.append(f"joint '{j.name}': gear_ratio must be positive")
        if not (np.isfinite(j.motor_torque_constant) and j.motor_torque_constant > 0.0):
            diags.append(f"joint '{j.name}': motor_torque_constant must be positive")
        if not (np.isfinite(j.motor_inertia) and j.motor_inertia >= 0.0):
            diags.append(f"joint '{j.name}': motor_inertia must be non-negative")
        if j.position_limits is not None and not j.position_limits[0] < j.position_limits[1]:
            diags.append(f"joint '{j.name}': position_limits must satisfy lo < hi")

    # connectivity: every link reachable from the root through joints
    if model.root_link in link_names:
        children = {}
        for j in model.joints:
            children.setdefault(j.parent, []).append(j.child)
        reached = set()
        stack = [model.root_link]
        while stack:
            l = stack.pop()
            if l in reached:
                continue
            reached.add(l)
            stack.extend(children.get(l, []))
        for n in link_names:
            if n not in reached:
                diags.append(f"link '{n}': not connected to the root")
        if len(model.joints) != len(link_names) - 1 and not any(
                "not connected" in d or "already has parent" in d for d in diags):
            diags.append("structure: link/joint counts do not form a tree")

    for s in model.sensors:
        if s.kind not in SENSOR_KINDS:
            diags.append(f"sensor '{s.name}': kind must be one of {SENSOR_KINDS}")
        if s.link not in link_names:
            diags.append(f"sensor '{s.name}': link '{s.link}' missing")
        if s.cut and s.kind != "ft":
            diags.append(f"sensor '{s.name}': cut is only meaningful for ft sensors")
        if s.kind == "ft" and s.cut and s.link == model.root_link:
            diags.append(f"sensor '{s.name}': a cut ft sensor cannot sit on the root link")
        if s.kind in ("encoder", "current") and s.link == model.root_link:
            diags.append(f"sensor '{s.name}': {s.kind} sensors measure the parent "
                         "joint of their link; the root link has none")
        if not s.transform.is_valid():
            diags.append(f"sensor '{s.name}': mounting rotation must be orthonormal")

    cut_edges = set()
    for s in model.sensors:
        if s.kind == "ft" and s.cut and s.link in child_seen:
            edge = child_seen[s.link]
            if edge in cut_edges:
                diags.append(f"sensor '{s.name}': joint '{edge}' already cut by "
                             "another ft sensor")
            cut_edges.add(edge)

    for c in model.contact_frames:
        if c.link not in link_names:
            diags.append(f"contact frame '{c.name}': link '{c.link}' missing")
        if not c.transform.is_valid():
            diags.append(f"contact frame '{c.name}': rotation must be orthonormal")

    return diags


# ---------------------------------------------------------------------------
# serialization


def _transform_doc(t: RigidTransform) -> dict:
    return {"rotation": [[float(v) for v in row] for row in t.rotation],
            "translation": [float(v) for v in t.translation]}


def serialize_model(model: KinematicModel) -> str:
    """Emit the document form; parse_model(serialize_model(m)) reproduces m."""
    doc = {
        "name": model.name,
        "gravity": [float(v) for v in model.gravity],
        "root_link": model.root_link,
        "links": [{"name": l.name, "mass": float(l.mass),
                   "com": [float(v) for v in l.com],
                   "inertia": [[float(v) for v in row] for row in l.inertia]}
                  for l in model.links],
        "joints": [],
        "sensors": [],
        "contact_frames": [{"name": c.name, "link": c.link,
                            "transform": _transform_doc(c.transform)}
                           for c in model.contact_frames],
    }
    for j in model.joints:
        jd = {"name": j.name, "parent": j.parent, "child": j.child,
              "type": j.joint_type, "axis": [float(v) for v in j.axis],
              "origin": _transform_doc(j.origin),
              "gear_ratio": float(j.gear_ratio),
              "motor_torque_constant": float(j.motor_torque_constant),
              "motor_inertia": float(j.motor_inertia)}
        if j.position_limits is not None:
            jd["position_limits"] = [float(j.position_limits[0]),
                                     float(j.position_limits[1])]
        doc["joints"].append(jd)
    for s in model.sensors:
        sd = {"kind": s.kind, "name": s.name, "link": s.link,
              "transform": _transform_doc(s.transform)}
        if s.kind == "ft":
            sd["cut"] = bool(s.cut)
        doc["sensors"].append(sd)
    return json.dumps(doc, indent=2)


# ---------------------------------------------------------------------------
# splitting


def split_at_ft_sensors(model: KinematicModel) -> list:
    """Split the tree at every cut FT sensor into m+1 submodels.

    The cut happens at the attached link's parent joint; that joint moves into
    the child-side submodel (so the submodel joint sets partition the full
    joint set) and the child submodel is anchored at the joint's parent link.
    """
    child_of = {j.child: j for j in model.joints}
    cut_sensors = [s for s in model.sensors if s.kind == "ft" and s.cut]
    cut_joints = {}
    for s in cut_sensors:
        j = child_of.get(s.link)
        if j is None:
            raise ModelSemanticError(
                f"sensor '{s.name}': cut ft sensor must sit on a link with a parent joint")
        if j.name in cut_joints:
            raise ModelSemanticError(
                f"sensor '{s.name}': joint '{j.name}' already cut by another ft sensor")
        cut_joints[j.name] = s

    children = {}
    for j in model.joints:
        children.setdefault(j.parent, []).append(j)

    def collect(root_link: str):
        links, joints = [root_link], []
        stack = [root_link]
        while stack:
            l = stack.pop(0)
            for j in children.get(l, []):
                if j.name in cut_joints and j.parent == l:
                    continue  # a cut edge starts a new submodel
                joints.append(j.name)
                links.append(j.child)
                stack.append(j.child)
        return links, joints

    pieces = []
    root_links, root_joints = collect(model.root_link)
    pieces.append((model.root_link, None, root_links, root_joints))
    for s in cut_sensors:
        j = child_of[s.link]
        sub_links, sub_joints = collect(j.child)
        pieces.append((j.child, j, sub_links, [j.name] + sub_joints))

    link_home = {}
    for idx, (_, _, links, _) in enumerate(pieces):
        for l in links:
            link_home[l] = idx

    submodels = []
    for idx, (root, cut_joint, links, joints) in enumerate(pieces):
        boundary = []
        for s in cut_sensors:
            j = child_of[s.link]
            if cut_joint is not None and j.name == cut_joint.name:
                boundary.append((s.name, +1))
            elif link_home[j.parent] == idx:
                boundary.append((s.name, -1))
        frames = [c.name for c in model.contact_frames if link_home[c.link] == idx]
        submodels.append(SubModel(
            index=idx, links=links, joints=joints,
            anchor_link=None if cut_joint is None else cut_joint.parent,
            anchor_joint=None if cut_joint is None else cut_joint.name,
            boundary_ft=boundary, contact_frames=frames))
    return submodels
