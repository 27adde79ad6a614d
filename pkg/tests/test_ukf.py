import time

import numpy as np
import pytest

from torquefusion import ukf
from torquefusion.ukf import (GaussianBelief, NoiseModel, UkfConfig, UkfError,
                              ensure_psd, predict, sigma_points, update)


def _random_psd(rng, d, scale=1.0):
    a = rng.standard_normal((d, d))
    return scale * (a @ a.T + d * np.eye(d))


# ---------------------------------------------------------------- sigma points

def test_weights_sum_to_one():
    cfg = UkfConfig()
    for d in (1, 3, 7):
        lam, wm, wc = ukf.sigma_weights(d, cfg)
        assert wm.shape == (2 * d + 1,)
        assert abs(wm.sum() - 1.0) < 1e-12
        assert abs(wc[0] - (lam / (d + lam) + 1 - cfg.alpha**2 + cfg.beta)) < 1e-14
        assert np.allclose(wm[1:], 1.0 / (2 * (d + lam)))


def test_sigma_points_reconstruct_moments():
    rng = np.random.default_rng(3)
    for d in (2, 5, 9):
        mean = rng.standard_normal(d)
        cov = _random_psd(rng, d)
        pts, wm, wc = sigma_points(GaussianBelief(mean, cov), UkfConfig())
        assert pts.shape == (2 * d + 1, d)
        m = wm @ pts
        dev = pts - m
        c = (dev * wc[:, None]).T @ dev
        assert np.max(np.abs(m - mean)) < 1e-10
        assert np.max(np.abs(c - cov)) < 1e-10


def test_center_point_is_mean():
    b = GaussianBelief([1.0, -2.0], np.eye(2))
    pts, _, _ = sigma_points(b, UkfConfig())
    assert np.array_equal(pts[0], b.mean)


def test_unit_alpha_singleton_symmetric():
    # alpha=1, kappa=0, d=1 gives lambda=0: center weight 0, points at +-sqrt(var)
    pts, wm, _ = sigma_points(GaussianBelief([0.0], [[1.0]]), UkfConfig(alpha=1.0))
    assert abs(wm[0]) < 1e-15
    assert np.allclose(sorted(pts.ravel()), [-1.0, 0.0, 1.0], atol=1e-12)


def test_degenerate_scaling_guard():
    with pytest.raises(UkfError, match="positive"):
        ukf.sigma_weights(1, UkfConfig(alpha=1.0, kappa=-1.0))


def test_zero_variance_direction_nearly_duplicates_points():
    cov = np.diag([1.0, 0.0])
    pts, _, _ = sigma_points(GaussianBelief([0.0, 0.0], cov), UkfConfig())
    # the flat direction only moves by the repair jitter
    assert np.max(np.abs(pts[:, 1])) < 1e-5
    assert np.max(np.abs(pts[:, 0])) > 1e-2


def test_indefinite_covariance_exhausts_jitter():
    bad = np.diag([1.0, -1.0])
    with pytest.raises(UkfError, match="jitter"):
        sigma_points(GaussianBelief([0.0, 0.0], bad), UkfConfig())


# ---------------------------------------------------------------- belief type

def test_nonsymmetric_covariance_rejected():
    with pytest.raises(ValueError, match="symmetric"):
        GaussianBelief([0.0, 0.0], [[1.0, 0.5], [0.0, 1.0]])


def test_covariance_shape_mismatch_rejected():
    with pytest.raises(ValueError, match="dimension"):
        GaussianBelief([0.0, 0.0, 0.0], np.eye(2))


def test_noise_model_from_diagonals():
    nm = NoiseModel.from_diagonals([1.0, 2.0], [0.5])
    assert np.array_equal(nm.process, np.diag([1.0, 2.0]))
    assert np.array_equal(nm.measurement, [[0.5]])
    with pytest.raises(ValueError):
        NoiseModel.from_diagonals([-1.0], [1.0])


def test_alpha_out_of_range():
    with pytest.raises(ValueError):
        UkfConfig(alpha=0.0)
    with pytest.raises(ValueError):
        UkfConfig(alpha=1.5)


# ---------------------------------------------------------------- predict

def test_identity_process_preserves_belief():
    rng = np.random.default_rng(5)
    b = GaussianBelief(rng.standard_normal(3), _random_psd(rng, 3))
    out = predict(b, lambda X, dt: X, np.zeros((3, 3)), 0.01)
    assert np.max(np.abs(out.mean - b.mean)) < 1e-12
    assert np.max(np.abs(out.covariance - b.covariance)) < 1e-11


def test_linear_process_is_exact():
    rng = np.random.default_rng(6)
    d = 4
    A = rng.standard_normal((d, d)) * 0.4 + np.eye(d)
    bvec = rng.standard_normal(d)
    Q = _random_psd(rng, d, 0.01)
    bel = GaussianBelief(rng.standard_normal(d), _random_psd(rng, d))
    out = predict(bel, lambda X, dt: X @ A.T + bvec, Q, 0.1)
    assert np.max(np.abs(out.mean - (A @ bel.mean + bvec))) < 1e-9
    assert np.max(np.abs(out.covariance - (A @ bel.covariance @ A.T + Q))) < 1e-9


def test_constant_process_collapses_to_q():
    Q = np.diag([0.1, 0.2])
    bel = GaussianBelief([3.0, -1.0], np.eye(2))
    out = predict(bel, lambda X, dt: np.full_like(X, 7.0), Q, 0.1)
    assert np.allclose(out.mean, 7.0)
    assert np.max(np.abs(out.covariance - Q)) < 1e-12


def test_predict_nonfinite_names_sigma_point():
    def bad(X, dt):
        Y = X.copy()
        Y[3, 0] = np.nan
        return Y
    bel = GaussianBelief(np.zeros(2), np.eye(2))
    with pytest.raises(UkfError, match=r"sigma point\(s\) \[3\]"):
        predict(bel, bad, np.eye(2), 0.1)


def test_predict_shape_mismatch_raises():
    bel = GaussianBelief(np.zeros(2), np.eye(2))
    with pytest.raises(UkfError, match="shape"):
        predict(bel, lambda X, dt: X[:, :1], np.eye(2), 0.1)


# ---------------------------------------------------------------- update

def test_update_exposes_innovation_and_gain():
    rng = np.random.default_rng(7)
    d, m = 3, 2
    P = _random_psd(rng, d)
    H = rng.standard_normal((m, d))
    R = np.diag([0.2, 0.5])
    bel = GaussianBelief(rng.standard_normal(d), P)
    y = rng.standard_normal(m)
    res = update(bel, lambda X: X @ H.T, y, R)
    S = H @ P @ H.T + R
    K = P @ H.T @ np.linalg.inv(S)
    assert np.max(np.abs(res.innovation - (y - H @ bel.mean))) < 1e-10
    assert np.max(np.abs(res.innovation_covariance - S)) < 1e-9
    assert np.max(np.abs(res.gain - K)) < 1e-9
    assert np.max(np.abs(res.belief.mean - (bel.mean + K @ res.innovation))) < 1e-9


def test_huge_r_keeps_prior():
    bel = GaussianBelief([1.0, 2.0], np.eye(2))
    res = update(bel, lambda X: X, [100.0, -100.0], 1e12 * np.eye(2))
    assert np.max(np.abs(res.belief.mean - bel.mean)) < 1e-6
    assert np.max(np.abs(res.belief.covariance - bel.covariance)) < 1e-6


def test_tiny_r_snaps_to_measurement():
    bel = GaussianBelief([1.0, 2.0], 10.0 * np.eye(2))
    y = [4.0, -3.0]
    res = update(bel, lambda X: X, y, 1e-12 * np.eye(2))
    assert np.max(np.abs(res.belief.mean - y)) < 1e-6
    assert np.trace(res.belief.covariance) < 1e-6


def test_trace_never_increases_with_identity_measurement():
    rng = np.random.default_rng(11)
    bel = GaussianBelief(rng.standard_normal(3), _random_psd(rng, 3))
    for _ in range(5):
        res = update(bel, lambda X: X, rng.standard_normal(3), 0.1 * np.eye(3))
        assert np.trace(res.belief.covariance) <= np.trace(bel.covariance) + 1e-12
        bel = res.belief


def test_posterior_covariance_psd():
    rng = np.random.default_rng(13)
    bel = GaussianBelief(rng.standard_normal(4), _random_psd(rng, 4))
    H = rng.standard_normal((2, 4))
    for _ in range(20):
        bel = predict(bel, lambda X, dt: X @ (np.eye(4) + 0.01 * rng.standard_normal((4, 4))).T,
                      1e-4 * np.eye(4), 0.01)
        res = update(bel, lambda X: np.tanh(X @ H.T), rng.standard_normal(2),
                     0.05 * np.eye(2))
        bel = res.belief
        w = np.linalg.eigvalsh(bel.covariance)
        assert w[0] >= -1e-12
        assert np.max(np.abs(bel.covariance - bel.covariance.T)) < 1e-12


def test_update_rejects_nonfinite_observation():
    bel = GaussianBelief([0.0], [[1.0]])
    with pytest.raises(UkfError, match="non-finite"):
        update(bel, lambda X: X, [np.nan], [[1.0]])


def test_update_names_bad_sigma_point():
    def meas(X):
        Z = X.copy()
        Z[1, 0] = np.inf
        return Z
    bel = GaussianBelief(np.zeros(2), np.eye(2))
    with pytest.raises(UkfError, match=r"\[1\]"):
        update(bel, meas, [0.0, 0.0], np.eye(2))


def test_update_measurement_shape_mismatch():
    bel = GaussianBelief(np.zeros(2), np.eye(2))
    with pytest.raises(UkfError, match="incompatible"):
        update(bel, lambda X: X, [0.0, 0.0, 1.0], np.eye(3))


def test_update_singular_innovation_raises():
    bel = GaussianBelief(np.zeros(2), np.eye(2))
    with pytest.raises(UkfError, match="innovation covariance"):
        update(bel, lambda X: X, [0.0, 0.0], -2.0 * np.eye(2))


def test_update_is_deterministic():
    rng = np.random.default_rng(17)
    bel = GaussianBelief(rng.standard_normal(3), _random_psd(rng, 3))
    y = rng.standard_normal(3)
    a = update(bel, lambda X: np.sin(X), y, 0.1 * np.eye(3))
    b = update(bel, lambda X: np.sin(X), y, 0.1 * np.eye(3))
    assert np.array_equal(a.belief.mean, b.belief.mean)
    assert np.array_equal(a.belief.covariance, b.belief.covariance)
    assert np.array_equal(a.gain, b.gain)


# ---------------------------------------------------------------- ensure_psd

def test_ensure_psd_repairs_negative_eigenvalue():
    rng = np.random.default_rng(19)
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    m = q @ np.diag([1.0, 0.5, -1e-8]) @ q.T
    fixed = ensure_psd(m)
    assert np.linalg.eigvalsh(fixed)[0] >= 0.0
    assert np.max(np.abs(fixed - m)) < 1e-7


def test_ensure_psd_idempotent_on_psd():
    rng = np.random.default_rng(23)
    m = _random_psd(rng, 4)
    assert np.max(np.abs(ensure_psd(m) - m)) < 1e-12
    twice = ensure_psd(ensure_psd(m))
    assert np.max(np.abs(twice - ensure_psd(m))) < 1e-12


def test_ensure_psd_symmetrizes():
    m = np.array([[2.0, 1.0], [0.0, 2.0]])
    fixed = ensure_psd(m)
    assert np.array_equal(fixed, fixed.T)


# ------------------------------------------------- linear-Gaussian KF oracle

def run_linear_gaussian_comparison(steps=200):
    """Run a UKF and a textbook Kalman filter on the same 4-state system.

    Returns (max mean error, max covariance error, elapsed seconds).
    """
    dt = 0.1
    A = np.array([[1.0, 0.0, dt, 0.0],
                  [0.0, 1.0, 0.0, dt],
                  [0.0, 0.0, 1.0, 0.0],
                  [0.0, 0.0, 0.0, 1.0]])
    H = np.array([[1.0, 0.0, 0.0, 0.0],
                  [0.0, 1.0, 0.0, 0.0]])
    Q = np.diag([1e-4, 1e-4, 1e-3, 1e-3])
    R = np.diag([0.05, 0.08])

    rng = np.random.default_rng(42)
    x_true = np.array([0.0, 0.0, 1.0, -0.5])
    ys = []
    Lq = np.linalg.cholesky(Q)
    Lr = np.linalg.cholesky(R)
    for _ in range(steps):
        x_true = A @ x_true + Lq @ rng.standard_normal(4)
        ys.append(H @ x_true + Lr @ rng.standard_normal(2))

    mean = np.zeros(4)
    cov = np.diag([1.0, 1.0, 4.0, 4.0])
    kf_mean, kf_cov = mean.copy(), cov.copy()
    bel = GaussianBelief(mean, cov)
    cfg = UkfConfig()

    worst_mean = 0.0
    worst_cov = 0.0
    t0 = time.perf_counter()
    for y in ys:
        # closed-form filter
        kf_mean = A @ kf_mean
        kf_cov = A @ kf_cov @ A.T + Q
        S = H @ kf_cov @ H.T + R
        K = kf_cov @ H.T @ np.linalg.inv(S)
        kf_mean = kf_mean + K @ (y - H @ kf_mean)
        kf_cov = kf_cov - K @ S @ K.T

        bel = predict(bel, lambda X, _dt: X @ A.T, Q, dt, cfg)
        bel = update(bel, lambda X: X @ H.T, y, R, cfg).belief

        worst_mean = max(worst_mean, np.max(np.abs(bel.mean - kf_mean)))
        worst_cov = max(worst_cov, np.max(np.abs(bel.covariance - kf_cov)))
    elapsed = time.perf_counter() - t0
    return worst_mean, worst_cov, elapsed


def test_matches_kalman_filter_on_linear_gaussian_system():
    worst_mean, worst_cov, elapsed = run_linear_gaussian_comparison()
    assert worst_mean < 1e-9
    assert worst_cov < 1e-9
    assert elapsed < 1.0
