"""Friction model values, derivative consistency, and identification."""

import numpy as np
import pytest

from torquefusion.friction import (
    FrictionFit, FrictionParams, FrictionSample, IdentifiabilityError,
    friction_torque, friction_torque_rate, identify_friction,
    load_samples_csv, save_samples_csv,
)

# measured leg-joint parameters used as ground truth throughout (k0, k1, k2)
LEG_PARAMS = {
    "hip_pitch": (4.9, 4.0, 0.6),
    "hip_roll": (4.0, 4.7, 0.3),
    "hip_yaw": (2.5, 2.6, 0.5),
    "knee": (2.3, 2.7, 0.1),
    "ankle_pitch": (2.3, 2.3, 0.3),
    "ankle_roll": (1.3, 2.0, 0.3),
}

K1_GRID = np.arange(0.5, 8.0, 0.05)


def test_zero_velocity_zero_friction():
    p = FrictionParams(4.9, 4.0, 0.6)
    assert friction_torque(p, 0.0) == 0.0


def test_hip_pitch_value_at_unit_velocity():
    p = FrictionParams(4.9, 4.0, 0.6)
    val = friction_torque(p, 1.0)
    assert abs(val - (4.9 * np.tanh(4.0) + 0.6)) < 1e-12
    assert abs(val - 5.4967) < 5e-5


def test_odd_function():
    p = FrictionParams(2.3, 2.7, 0.1)
    sd = np.linspace(-5, 5, 101)
    np.testing.assert_allclose(friction_torque(p, -sd),
                               -friction_torque(p, sd), atol=0)


def test_monotone_on_dense_grid():
    for k0, k1, k2 in LEG_PARAMS.values():
        vals = friction_torque(FrictionParams(k0, k1, k2),
                               np.linspace(-6, 6, 4001))
        assert np.all(np.diff(vals) >= 0)


def test_saturation_asymptote():
    p = FrictionParams(4.9, 4.0, 0.6)
    for sd in (10 / 4.0, 5.0, -5.0, -10 / 4.0):
        lin = np.sign(sd) * p.k0 + p.k2 * sd
        assert abs(friction_torque(p, sd) - lin) < 1e-6


def test_negative_params_rejected():
    with pytest.raises(ValueError):
        FrictionParams(-0.1, 1.0, 0.0)


def test_rate_zero_acceleration():
    p = FrictionParams(2.5, 2.6, 0.5)
    assert friction_torque_rate(p, 1.3, 0.0) == 0.0


def test_rate_at_zero_velocity():
    p = FrictionParams(2.5, 2.6, 0.5)
    assert abs(friction_torque_rate(p, 0.0, 1.0) - (2.5 * 2.6 + 0.5)) < 1e-12


def test_rate_matches_finite_difference():
    p = FrictionParams(4.0, 4.7, 0.3)
    sd = np.linspace(-5, 5, 201)
    eps = 1e-6
    num = (friction_torque(p, sd + eps) - friction_torque(p, sd - eps)) / (2 * eps)
    np.testing.assert_allclose(friction_torque_rate(p, sd, 1.0), num,
                               atol=1e-6)


def test_rate_stable_at_large_velocity():
    p = FrictionParams(4.9, 4.0, 0.6)
    out = friction_torque_rate(p, 1e6, 2.0)
    assert np.isfinite(out)
    assert abs(out - 2 * p.k2) < 1e-9


# --- identification ----------------------------------------------------------


def _dataset(params, rng=None, n=4000, sigma=0.0):
    sd = np.linspace(-6, 6, n)
    y = friction_torque(params, sd)
    if sigma:
        y = y + rng.normal(0, sigma, size=n)
    return [FrictionSample(float(a), float(b)) for a, b in zip(sd, y)]


@pytest.mark.parametrize("joint", sorted(LEG_PARAMS))
def test_noiseless_recovery_within_one_percent(joint):
    truth = FrictionParams(*LEG_PARAMS[joint])
    fit = identify_friction(_dataset(truth), K1_GRID)
    for name in ("k0", "k1", "k2"):
        got, want = getattr(fit.params, name), getattr(truth, name)
        assert abs(got - want) <= 0.01 * want, (joint, name, got, want)
    assert fit.rmse < 1e-8


def test_noisy_recovery_within_five_percent():
    grid = np.arange(0.5, 8.0, 0.02)
    for seed in range(3):  # the acceptance suite runs the full 20 seeds
        rng = np.random.default_rng(100 + seed)
        for joint, (k0, k1, k2) in LEG_PARAMS.items():
            truth = FrictionParams(k0, k1, k2)
            fit = identify_friction(_dataset(truth, rng, sigma=0.1), grid)
            for name in ("k0", "k1", "k2"):
                got, want = getattr(fit.params, name), getattr(truth, name)
                assert abs(got - want) <= 0.05 * want, (seed, joint, name)


def test_zero_residuals_give_zero_params():
    sd = np.linspace(-3, 3, 50)
    fit = identify_friction([FrictionSample(float(v), 0.0) for v in sd],
                            K1_GRID)
    assert fit.params.k0 == 0.0
    assert fit.params.k2 == 0.0
    assert fit.rmse == 0.0


def test_fit_report_fields():
    truth = FrictionParams(2.3, 2.7, 0.1)
    fit = identify_friction(_dataset(truth, n=500), K1_GRID)
    assert isinstance(fit, FrictionFit)
    assert fit.residuals.shape == (500,)
    assert fit.grid_rmse.shape == fit.k1_grid.shape
    assert fit.grid_rmse.min() == pytest.approx(fit.rmse, abs=1e-12)


def test_one_sided_samples_rejected():
    sd = np.linspace(0.1, 3, 50)
    with pytest.raises(IdentifiabilityError):
        identify_friction([FrictionSample(float(v), 1.0) for v in sd], K1_GRID)


def test_near_zero_velocities_rejected():
    with pytest.raises(IdentifiabilityError):
        identify_friction([FrictionSample(1e-9 * (-1) ** i, 0.0)
                           for i in range(30)], K1_GRID)


def test_too_few_samples_rejected():
    with pytest.raises(IdentifiabilityError):
        identify_friction([FrictionSample(1.0, 1.0),
                           FrictionSample(-1.0, -1.0)], K1_GRID)


def test_csv_round_trip(tmp_path):
    truth = FrictionParams(1.3, 2.0, 0.3)
    samples = _dataset(truth, n=40)
    path = tmp_path / "residuals.csv"
    save_samples_csv(path, samples)
    back = load_samples_csv(path)
    assert len(back) == 40
    assert back[0] == samples[0]
    assert back[-1].residual_torque == samples[-1].residual_torque


def test_csv_header_enforced(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("vel,torque\n1.0,2.0\n")
    with pytest.raises(IdentifiabilityError):
        load_samples_csv(path)
