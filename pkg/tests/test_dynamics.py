"""Dynamics oracles: closed-form pendulum values, finite-difference checks,
the ID/FD round trip, and consistency of the submodel split against the full
model."""

import numpy as np
import pytest

import torquefusion.dynamics as dyn
from torquefusion.model import RigidTransform, split_at_ft_sensors
from torquefusion.dynamics import (
    DynamicsError, Kinematics, RobotState, Wrench, compile_structure,
    compile_submodel, rotation_about, rotation_log,
)
from conftest import doc_copy, leg3_doc, make_model, random_tree_doc

IDENT = RigidTransform(np.eye(3), np.zeros(3))


def fixed_state(s, s_dot=None):
    s = np.asarray(s, dtype=float)
    if s_dot is None:
        s_dot = np.zeros_like(s)
    return RobotState(IDENT, s, s_dot)


# --- rotation helpers -------------------------------------------------------


def test_rotation_log_identity():
    np.testing.assert_allclose(rotation_log(np.eye(3)), 0, atol=1e-15)


@pytest.mark.parametrize("angle", [1e-8, 0.3, 2.0, np.pi - 1e-7, np.pi])
def test_rotation_log_round_trip(angle):
    rng = np.random.default_rng(int(angle * 1e6) + 1)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    R = rotation_about(axis, angle)
    w = rotation_log(R)
    np.testing.assert_allclose(rotation_about(w / max(np.linalg.norm(w), 1e-300),
                                              np.linalg.norm(w)), R, atol=1e-6)
    assert abs(np.linalg.norm(w) - angle) < 1e-6


# --- closed-form pendulum values ---------------------------------------------


def test_pendulum_static_torque(pendulum):
    gf = dyn.rnea(pendulum, fixed_state([0.0]), np.zeros(7))
    assert abs(gf.joint[0] - 9.81) < 1e-9  # m*g*l at the horizontal


def test_pendulum_static_torque_angle(pendulum):
    s = 0.7
    gf = dyn.rnea(pendulum, fixed_state([s]), np.zeros(7))
    assert abs(gf.joint[0] - 9.81 * np.cos(s)) < 1e-9


def test_pendulum_mass_matrix_unit(pendulum):
    M = dyn.mass_matrix(pendulum, fixed_state([0.3]))
    assert abs(M[6, 6] - 1.0) < 1e-6  # m*l**2


def test_pendulum_tip_wrench_cancels_gravity(pendulum):
    w = Wrench("tip", np.array([0, 0, 9.81]), np.zeros(3))
    gf = dyn.rnea(pendulum, fixed_state([0.0]), np.zeros(7), {"tip": w})
    assert abs(gf.joint[0]) < 1e-9


def test_pendulum_unit_torque_acceleration():
    doc = doc_copy(__import__("conftest").pendulum_doc())
    doc["gravity"] = [0.0, 0.0, 0.0]
    model = make_model(doc)
    acc = dyn.submodel_forward_dynamics(model, fixed_state([0.2]), [1.0])
    assert abs(acc[6] - 1.0) < 1e-6  # s_dd = tau / (m*l**2)


def test_zero_gravity_rest_forces_vanish():
    doc = leg3_doc()
    doc["gravity"] = [0.0, 0.0, 0.0]
    model = make_model(doc)
    gf = dyn.rnea(model, fixed_state(np.zeros(3)), np.zeros(9))
    np.testing.assert_allclose(gf.stacked(), 0, atol=1e-14)


# --- mass matrix -------------------------------------------------------------


def test_mass_matrix_symmetry_and_cholesky(leg3, torso3):
    rng = np.random.default_rng(5)
    for model in (leg3, torso3):
        for _ in range(10):
            st = fixed_state(rng.uniform(-1.5, 1.5, size=3))
            M = dyn.mass_matrix(model, st)
            assert np.max(np.abs(M - M.T)) < 1e-10
            np.linalg.cholesky(M)


def test_mass_matrix_matches_rnea_columns():
    # with zero gravity and zero velocity, rnea(e_j) is column j of M
    doc = leg3_doc()
    doc["gravity"] = [0.0, 0.0, 0.0]
    model = make_model(doc)
    rng = np.random.default_rng(9)
    st = fixed_state(rng.uniform(-1, 1, size=3))
    M = dyn.mass_matrix(model, st)
    for j in range(9):
        e = np.zeros(9)
        e[j] = 1.0
        col = dyn.rnea(model, st, e).stacked()
        np.testing.assert_allclose(col, M[:, j], atol=1e-12)


def test_bias_forces_match_zero_acceleration_rnea(leg3):
    rng = np.random.default_rng(13)
    st = RobotState(IDENT, rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 3))
    h = dyn.bias_forces(leg3, st)
    np.testing.assert_allclose(h, dyn.rnea(leg3, st, np.zeros(9)).stacked(),
                               atol=1e-14)


def test_coriolis_power_matches_mass_matrix_rate(leg3):
    # nu^T M_dot nu = 2 nu^T C nu, with C nu = bias at zero gravity
    doc = leg3_doc()
    doc["gravity"] = [0.0, 0.0, 0.0]
    model = make_model(doc)
    rng = np.random.default_rng(17)
    q = rng.uniform(-1, 1, 3)
    qd = rng.uniform(-1, 1, 3)
    eps = 1e-6
    Mp = dyn.mass_matrix(model, fixed_state(q + eps * qd))[6:, 6:]
    Mm = dyn.mass_matrix(model, fixed_state(q - eps * qd))[6:, 6:]
    Mdot = (Mp - Mm) / (2 * eps)
    h = dyn.bias_forces(model, RobotState(IDENT, q, qd))[6:]
    lhs = qd @ Mdot @ qd
    rhs = 2 * qd @ h
    assert abs(lhs - rhs) < 1e-6 * max(1.0, abs(rhs))


# --- jacobians ---------------------------------------------------------------


def _numeric_frame_rates(model, q, qd, frame, eps=1e-6):
    """World-aligned twist of `frame` by central differences of its pose."""
    st = compile_structure(model)

    def pose(qq):
        return Kinematics(st, IDENT, qq).frame_pose(frame)

    a = pose(q - eps * qd)
    b = pose(q + eps * qd)
    v_world = (b.translation - a.translation) / (2 * eps)
    dR = b.rotation @ a.rotation.T
    w_world = rotation_log(dR) / (2 * eps)
    return v_world, w_world


@pytest.mark.parametrize("frame", ["foot_ft", "shin_acc", "foot_push"])
def test_frame_jacobian_matches_finite_differences(leg3, frame):
    rng = np.random.default_rng(21)
    q = rng.uniform(-1, 1, 3)
    qd = rng.uniform(-1, 1, 3)
    J = dyn.frame_jacobian(leg3, fixed_state(q), frame)
    tw = J @ np.concatenate((np.zeros(6), qd))
    v_num, w_num = _numeric_frame_rates(leg3, q, qd, frame)
    np.testing.assert_allclose(tw[:3], v_num, atol=1e-6)
    np.testing.assert_allclose(tw[3:], w_num, atol=1e-6)


def test_frame_jacobian_off_path_columns_zero(leg3):
    # shin-mounted frame does not move with the ankle
    J = dyn.frame_jacobian(leg3, fixed_state([0.3, -0.4, 0.9]), "shin_acc")
    np.testing.assert_allclose(J[:, 8], 0, atol=1e-14)
    assert np.linalg.norm(J[:, 6]) > 1e-3


def test_frame_jacobian_unknown_frame(leg3):
    with pytest.raises(DynamicsError):
        dyn.frame_jacobian(leg3, fixed_state(np.zeros(3)), "nope")


def test_pendulum_tip_speed(pendulum):
    J = dyn.frame_jacobian(pendulum, fixed_state([0.4]), "tip")
    tw = J @ np.concatenate((np.zeros(6), [1.0]))
    assert abs(np.linalg.norm(tw[:3]) - 1.0) < 1e-12  # l * |s_dot|


def test_jdot_nu_zero_velocity(leg3):
    out = dyn.jdot_nu(leg3, fixed_state([0.2, 0.1, -0.4]), "foot_ft")
    np.testing.assert_allclose(out, 0, atol=1e-14)


def test_jdot_nu_matches_finite_differences(leg3):
    rng = np.random.default_rng(23)
    q = rng.uniform(-1, 1, 3)
    qd = rng.uniform(-1, 1, 3)
    nu = np.concatenate((np.zeros(6), qd))
    eps = 1e-6
    Jp = dyn.frame_jacobian(leg3, fixed_state(q + eps * qd), "foot_push")
    Jm = dyn.frame_jacobian(leg3, fixed_state(q - eps * qd), "foot_push")
    num = ((Jp - Jm) / (2 * eps)) @ nu
    out = dyn.jdot_nu(leg3, RobotState(IDENT, q, qd), "foot_push")
    np.testing.assert_allclose(out, num, atol=1e-5)


def test_pendulum_centripetal_magnitude(pendulum):
    st = RobotState(IDENT, [0.3], [1.0])
    out = dyn.jdot_nu(pendulum, st, "tip")
    assert abs(np.linalg.norm(out[:3]) - 1.0) < 1e-9  # l * s_dot**2


# --- forward/inverse round trip ----------------------------------------------


def test_id_fd_round_trip_fixtures(leg3, torso3):
    rng = np.random.default_rng(29)
    for model in (leg3, torso3):
        for _ in range(5):
            st = RobotState(IDENT, rng.uniform(-1, 1, 3),
                            rng.uniform(-1, 1, 3))
            g = rng.uniform(-5, 5, 9)
            nu_dot = dyn.forward_dynamics(model, st, g)
            back = dyn.rnea(model, st, nu_dot).stacked()
            assert np.max(np.abs(back - g)) < 1e-8


def test_id_fd_round_trip_random_trees():
    rng = np.random.default_rng(31)
    for _ in range(20):
        n = int(rng.integers(1, 7))
        model = make_model(random_tree_doc(rng, n))
        st = RobotState(IDENT, rng.uniform(-1, 1, n), rng.uniform(-1, 1, n))
        g = rng.uniform(-5, 5, 6 + n)
        nu_dot = dyn.forward_dynamics(model, st, g)
        back = dyn.rnea(model, st, nu_dot).stacked()
        assert np.max(np.abs(back - g)) < 1e-8


def test_submodel_fd_static_equilibrium(pendulum):
    st = fixed_state([0.5])
    tau = dyn.rnea(pendulum, st, np.zeros(7)).joint
    acc = dyn.submodel_forward_dynamics(pendulum, st, tau)
    np.testing.assert_allclose(acc, 0, atol=1e-10)


def test_submodel_fd_round_trip(leg3):
    rng = np.random.default_rng(37)
    st = RobotState(IDENT, rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 3))
    tau = rng.uniform(-3, 3, 3)
    w = {"shin_push": rng.uniform(-5, 5, 6)}
    acc = dyn.submodel_forward_dynamics(leg3, st, tau, w)
    back = dyn.rnea(leg3, st, acc, w).joint
    assert np.max(np.abs(back - tau)) < 1e-8


def test_singular_mass_matrix_reports_condition(leg3, monkeypatch):
    monkeypatch.setattr(dyn, "mass_matrix",
                        lambda model, state: np.zeros((9, 9)))
    with pytest.raises(DynamicsError) as err:
        dyn.submodel_forward_dynamics(leg3, fixed_state(np.zeros(3)),
                                      np.zeros(3))
    assert "singular" in str(err.value)
    assert "condition" in str(err.value)


def test_rnea_unknown_wrench_frame(leg3):
    with pytest.raises(DynamicsError) as err:
        dyn.rnea(leg3, fixed_state(np.zeros(3)), np.zeros(9),
                 {"ghost": np.zeros(6)})
    assert "ghost" in str(err.value)


# --- sensor acceleration -------------------------------------------------------


def test_accelerometer_at_rest(leg3):
    out = dyn.sensor_proper_acceleration(leg3, fixed_state(np.zeros(3)),
                                         np.zeros(9), "shin_acc")
    np.testing.assert_allclose(out, [0, 0, 9.81], atol=1e-12)


def test_accelerometer_free_fall(leg3):
    nu_dot = np.zeros(9)
    nu_dot[:3] = [0, 0, -9.81]  # base dropping with gravity
    out = dyn.sensor_proper_acceleration(leg3, fixed_state(np.zeros(3)),
                                         nu_dot, "shin_acc")
    np.testing.assert_allclose(out, 0, atol=1e-12)


def test_accelerometer_matches_position_second_derivative(leg3):
    # track the sensor point along a polynomial joint trajectory
    rng = np.random.default_rng(41)
    q0 = rng.uniform(-1, 1, 3)
    qd = rng.uniform(-1, 1, 3)
    qdd = rng.uniform(-1, 1, 3)
    st = compile_structure(leg3)

    def sensor_world(t):
        q = q0 + qd * t + 0.5 * qdd * t * t
        return Kinematics(st, IDENT, q).frame_pose("foot_acc")

    eps = 1e-5
    p0 = sensor_world(0.0)
    acc_world = (sensor_world(eps).translation - 2 * p0.translation
                 + sensor_world(-eps).translation) / eps**2
    expected = p0.rotation.T @ (acc_world - leg3.gravity)
    out = dyn.sensor_proper_acceleration(
        leg3, RobotState(IDENT, q0, qd),
        np.concatenate((np.zeros(6), qdd)), "foot_acc")
    np.testing.assert_allclose(out, expected, atol=1e-3)


def test_frame_velocity_matches_pose_rates(leg3):
    rng = np.random.default_rng(43)
    q = rng.uniform(-1, 1, 3)
    qd = rng.uniform(-1, 1, 3)
    vel = dyn.frame_velocity(leg3, RobotState(IDENT, q, qd), "foot_gyro")
    v_num, w_num = _numeric_frame_rates(leg3, q, qd, "foot_gyro")
    np.testing.assert_allclose(vel.linear, v_num, atol=1e-6)
    np.testing.assert_allclose(vel.angular, w_num, atol=1e-6)


# --- submodel split consistency ------------------------------------------------


def test_static_cut_wrench_matches_hand_value(leg3):
    subs = split_at_ft_sensors(leg3)
    wt = dyn.cut_transmitted_wrenches(leg3, subs, fixed_state(np.zeros(3)),
                                      np.zeros(9))
    # supports the 0.8 kg foot whose com sits 0.05 m ahead of the sensor
    expected = [0, 0, 0.8 * 9.81, 0, -0.8 * 9.81 * 0.05, 0]
    np.testing.assert_allclose(wt["foot_ft"], expected, atol=1e-12)


def test_submodel_torques_match_full_model(leg3):
    subs = split_at_ft_sensors(leg3)
    rng = np.random.default_rng(47)
    q = rng.uniform(-1, 1, 3)
    sd = rng.uniform(-1, 1, 3)
    sdd = rng.uniform(-2, 2, 3)
    ext = {"shin_push": rng.uniform(-5, 5, 6),
           "foot_push": rng.uniform(-5, 5, 6)}
    state = RobotState(IDENT, q, sd)
    nu_dot = np.concatenate((np.zeros(6), sdd))
    gf_full = dyn.rnea(leg3, state, nu_dot, ext)
    wt = dyn.cut_transmitted_wrenches(leg3, subs, state, nu_dot, ext)

    root = next(s for s in subs if s.anchor_link is None)
    child = next(s for s in subs if s.anchor_link is not None)
    full_st = compile_structure(leg3)
    kin = Kinematics(full_st, IDENT, q)

    # parent side carries the reaction, re-expressed at a frame it owns
    root_st = compile_submodel(leg3, root)
    react = dyn.reexpress_wrench(kin, "foot_ft", "shin", -wt["foot_ft"])
    gf_root = dyn.rnea(root_st, RobotState(IDENT, q[:2], sd[:2]),
                       np.concatenate((np.zeros(6), sdd[:2])),
                       {"shin_push": ext["shin_push"], "shin": react})
    assert np.max(np.abs(gf_root.joint - gf_full.joint[:2])) < 1e-10

    # child side anchored at the shin with its true motion
    child_st = compile_submodel(leg3, child)
    _, _, V, A = dyn._rnea_core(kin, np.zeros(6), np.zeros(6), sd, sdd, None)
    shin = full_st.link_names.index("shin")
    cs = RobotState(RigidTransform(kin.Rw[shin], kin.pw[shin]),
                    q[2:], sd[2:], base_velocity=V[shin],
                    base_acceleration=A[shin])
    gf_child = dyn.rnea(child_st, cs, np.concatenate((A[shin], sdd[2:])),
                        {"foot_push": ext["foot_push"]})
    assert np.max(np.abs(gf_child.joint - gf_full.joint[2:])) < 1e-10

    # forward dynamics round trips on both submodels
    acc_c = dyn.submodel_forward_dynamics(child_st, cs, gf_child.joint,
                                          {"foot_push": ext["foot_push"]})
    assert np.max(np.abs(acc_c[6:] - sdd[2:])) < 1e-10
    acc_r = dyn.submodel_forward_dynamics(
        root_st, RobotState(IDENT, q[:2], sd[:2]), gf_root.joint,
        {"shin_push": ext["shin_push"], "shin": react})
    assert np.max(np.abs(acc_r[6:] - sdd[:2])) < 1e-10


def test_reexpress_wrench_round_trip(leg3):
    st = compile_structure(leg3)
    kin = Kinematics(st, IDENT, np.array([0.4, -0.7, 0.2]))
    rng = np.random.default_rng(53)
    w = rng.uniform(-5, 5, 6)
    same = dyn.reexpress_wrench(kin, "foot_ft", "foot_ft", w)
    np.testing.assert_allclose(same, w, atol=1e-12)
    there = dyn.reexpress_wrench(kin, "foot_ft", "shin", w)
    back = dyn.reexpress_wrench(kin, "shin", "foot_ft", there)
    np.testing.assert_allclose(back, w, atol=1e-12)
