"""Shared fixtures: two hand-built chains used across the suite plus a
random-tree generator for the dynamics identity checks."""

import copy
import json

import numpy as np
import pytest

from torquefusion.model import parse_model

I3 = [[1, 0, 0], [0, 1, 0], [0, 0, 1]]


def _tf(translation, rotation=None):
    return {"rotation": rotation or I3, "translation": list(translation)}


def leg3_doc():
    """Planar 3-joint leg: mount -> hip -> thigh -> knee -> shin -> ankle ->
    foot, all joints about y. One cut FT under the ankle, IMUs on shin and
    foot, contact frames above and below the cut."""
    return {
        "name": "leg3",
        "gravity": [0.0, 0.0, -9.81],
        "root_link": "mount",
        "links": [
            {"name": "mount", "mass": 2.0, "com": [0, 0, 0],
             "inertia": [[0.02, 0, 0], [0, 0.02, 0], [0, 0, 0.02]]},
            {"name": "thigh", "mass": 1.2, "com": [0, 0, -0.15],
             "inertia": [[0.02, 0, 0], [0, 0.02, 0], [0, 0, 0.02]]},
            {"name": "shin", "mass": 1.0, "com": [0, 0, -0.15],
             "inertia": [[0.015, 0, 0], [0, 0.015, 0], [0, 0, 0.015]]},
            {"name": "foot", "mass": 0.8, "com": [0.05, 0, -0.05],
             "inertia": [[0.008, 0, 0], [0, 0.008, 0], [0, 0, 0.008]]},
        ],
        "joints": [
            {"name": "hip", "parent": "mount", "child": "thigh",
             "type": "revolute", "axis": [0, 1, 0],
             "origin": _tf([0, 0, -0.1]),
             "gear_ratio": 100.0, "motor_torque_constant": 0.11,
             "motor_inertia": 1e-5},
            {"name": "knee", "parent": "thigh", "child": "shin",
             "type": "revolute", "axis": [0, 1, 0],
             "origin": _tf([0, 0, -0.3]),
             "gear_ratio": 80.0, "motor_torque_constant": 0.09,
             "motor_inertia": 1e-5},
            {"name": "ankle", "parent": "shin", "child": "foot",
             "type": "revolute", "axis": [0, 1, 0],
             "origin": _tf([0, 0, -0.3]),
             "gear_ratio": 60.0, "motor_torque_constant": 0.08,
             "motor_inertia": 1e-5},
        ],
        "sensors": [
            {"kind": "encoder", "name": "hip_enc", "link": "thigh"},
            {"kind": "encoder", "name": "knee_enc", "link": "shin"},
            {"kind": "encoder", "name": "ankle_enc", "link": "foot"},
            {"kind": "current", "name": "hip_cur", "link": "thigh"},
            {"kind": "current", "name": "knee_cur", "link": "shin"},
            {"kind": "current", "name": "ankle_cur", "link": "foot"},
            {"kind": "ft", "name": "foot_ft", "link": "foot", "cut": True},
            {"kind": "accelerometer", "name": "shin_acc", "link": "shin",
             "transform": _tf([0.02, 0, -0.1])},
            {"kind": "gyroscope", "name": "shin_gyro", "link": "shin",
             "transform": _tf([0.02, 0, -0.1])},
            {"kind": "accelerometer", "name": "foot_acc", "link": "foot",
             "transform": _tf([0.06, 0, -0.02])},
            {"kind": "gyroscope", "name": "foot_gyro", "link": "foot",
             "transform": _tf([0.06, 0, -0.02])},
        ],
        "contact_frames": [
            {"name": "shin_push", "link": "shin",
             "transform": _tf([0, 0, -0.2])},
            {"name": "foot_push", "link": "foot",
             "transform": _tf([0.1, 0, -0.02])},
        ],
    }


def torso3_doc():
    """Roll/pitch/yaw torso chain, no FT sensors (single-submodel path)."""
    return {
        "name": "torso3",
        "gravity": [0.0, 0.0, -9.81],
        "root_link": "base",
        "links": [
            {"name": "base", "mass": 3.0, "com": [0, 0, 0],
             "inertia": [[0.03, 0, 0], [0, 0.03, 0], [0, 0, 0.03]]},
            {"name": "lower", "mass": 2.0, "com": [0, 0, 0.1],
             "inertia": [[0.02, 0, 0], [0, 0.02, 0], [0, 0, 0.02]]},
            {"name": "mid", "mass": 1.5, "com": [0, 0, 0.1],
             "inertia": [[0.015, 0, 0], [0, 0.015, 0], [0, 0, 0.015]]},
            {"name": "upper", "mass": 2.5, "com": [0.02, 0, 0.15],
             "inertia": [[0.03, 0, 0], [0, 0.03, 0], [0, 0, 0.03]]},
        ],
        "joints": [
            {"name": "torso_roll", "parent": "base", "child": "lower",
             "type": "revolute", "axis": [1, 0, 0],
             "origin": _tf([0, 0, 0.1]),
             "gear_ratio": 100.0, "motor_torque_constant": 0.1,
             "motor_inertia": 1e-5},
            {"name": "torso_pitch", "parent": "lower", "child": "mid",
             "type": "revolute", "axis": [0, 1, 0],
             "origin": _tf([0, 0, 0.2]),
             "gear_ratio": 100.0, "motor_torque_constant": 0.1,
             "motor_inertia": 1e-5},
            {"name": "torso_yaw", "parent": "mid", "child": "upper",
             "type": "revolute", "axis": [0, 0, 1],
             "origin": _tf([0, 0, 0.2]),
             "gear_ratio": 100.0, "motor_torque_constant": 0.1,
             "motor_inertia": 1e-5},
        ],
        "sensors": [
            {"kind": "encoder", "name": "roll_enc", "link": "lower"},
            {"kind": "encoder", "name": "pitch_enc", "link": "mid"},
            {"kind": "encoder", "name": "yaw_enc", "link": "upper"},
            {"kind": "current", "name": "roll_cur", "link": "lower"},
            {"kind": "current", "name": "pitch_cur", "link": "mid"},
            {"kind": "current", "name": "yaw_cur", "link": "upper"},
            {"kind": "accelerometer", "name": "upper_acc", "link": "upper",
             "transform": _tf([0, 0.03, 0.2])},
            {"kind": "gyroscope", "name": "upper_gyro", "link": "upper",
             "transform": _tf([0, 0.03, 0.2])},
        ],
        "contact_frames": [
            {"name": "upper_push", "link": "upper",
             "transform": _tf([0, 0, 0.25])},
            {"name": "mid_push", "link": "mid",
             "transform": _tf([0, 0, 0.15])},
        ],
    }


def pendulum_doc():
    """Point mass 1 kg at 1 m on a y-axis hinge; at s=0 the arm lies along
    +x, so the static torque is m*g*l and the joint-space inertia m*l**2."""
    return {
        "name": "pendulum",
        "gravity": [0.0, 0.0, -9.81],
        "root_link": "mount",
        "links": [
            {"name": "mount", "mass": 1.0, "com": [0, 0, 0],
             "inertia": [[0.01, 0, 0], [0, 0.01, 0], [0, 0, 0.01]]},
            {"name": "rod", "mass": 1.0, "com": [1.0, 0, 0],
             "inertia": [[1e-9, 0, 0], [0, 1e-9, 0], [0, 0, 1e-9]]},
        ],
        "joints": [
            {"name": "hinge", "parent": "mount", "child": "rod",
             "type": "revolute", "axis": [0, -1, 0],
             "origin": _tf([0, 0, 0]),
             "gear_ratio": 50.0, "motor_torque_constant": 0.1},
        ],
        "sensors": [
            {"kind": "encoder", "name": "hinge_enc", "link": "rod"},
            {"kind": "current", "name": "hinge_cur", "link": "rod"},
        ],
        "contact_frames": [
            {"name": "tip", "link": "rod", "transform": _tf([1.0, 0, 0])},
        ],
    }


def _rotation_about(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]],
                  [axis[2], 0, -axis[0]],
                  [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


def _random_rotation(rng):
    axis = rng.normal(size=3)
    return _rotation_about(axis, rng.uniform(0, np.pi))


def _random_inertia(rng, scale):
    # principal moments (a+b, b+c, c+a) satisfy the triangle inequality
    a, b, c = rng.uniform(0.2, 1.0, size=3) * scale
    R = _random_rotation(rng)
    return R @ np.diag([a + b, b + c, c + a]) @ R.T


def random_tree_doc(rng, n_joints):
    """Valid random tree with mixed revolute/prismatic joints."""
    links = [{"name": "link0", "mass": float(rng.uniform(0.5, 3.0)),
              "com": rng.uniform(-0.1, 0.1, size=3).tolist(),
              "inertia": _random_inertia(rng, 0.02).tolist()}]
    joints = []
    for k in range(1, n_joints + 1):
        parent = f"link{rng.integers(0, k)}"
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        links.append({"name": f"link{k}",
                      "mass": float(rng.uniform(0.3, 2.5)),
                      "com": rng.uniform(-0.15, 0.15, size=3).tolist(),
                      "inertia": _random_inertia(rng, 0.02).tolist()})
        joints.append({
            "name": f"j{k}", "parent": parent, "child": f"link{k}",
            "type": "prismatic" if rng.uniform() < 0.3 else "revolute",
            "axis": axis.tolist(),
            "origin": {"rotation": _random_rotation(rng).tolist(),
                       "translation": rng.uniform(-0.3, 0.3, size=3).tolist()},
            "gear_ratio": float(rng.uniform(10, 120)),
            "motor_torque_constant": float(rng.uniform(0.05, 0.2)),
            "motor_inertia": float(rng.uniform(0, 2e-5)),
        })
    return {"name": "random_tree", "gravity": [0.0, 0.0, -9.81],
            "root_link": "link0", "links": links, "joints": joints,
            "sensors": [], "contact_frames": []}


def make_model(doc):
    return parse_model(json.dumps(doc))


@pytest.fixture
def leg3():
    return make_model(leg3_doc())


@pytest.fixture
def torso3():
    return make_model(torso3_doc())


@pytest.fixture
def pendulum():
    return make_model(pendulum_doc())


def doc_copy(doc):
    return copy.deepcopy(doc)
