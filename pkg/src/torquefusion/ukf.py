"""Additive-noise Unscented Kalman Filter.

Process and measurement callables receive the full (2d+1, d) sigma stack so
models can vectorize across points; both predict and update draw fresh sigma
points from the belief they are given, which keeps the filter exact on
affine models (reusing propagated points would drop the additive process
noise from the innovation covariance).
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg


class UkfError(Exception):
    pass


@dataclass
class UkfConfig:
    alpha: float = 0.1
    beta: float = 2.0
    kappa: float = 0.0
    jitter: float = 1e-12  # starting variance floor for covariance repair

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.jitter < 0:
            raise ValueError("jitter must be >= 0")


@dataclass
class NoiseModel:
    process: np.ndarray      # Q, (d, d)
    measurement: np.ndarray  # R, (m, m)

    @classmethod
    def from_diagonals(cls, q_diag, r_diag):
        q = np.asarray(q_diag, dtype=float)
        r = np.asarray(r_diag, dtype=float)
        if np.any(q < 0) or np.any(r < 0):
            raise ValueError("noise variances must be >= 0")
        return cls(np.diag(q), np.diag(r))


@dataclass
class GaussianBelief:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).reshape(-1)
        self.covariance = np.asarray(self.covariance, dtype=float)
        d = self.mean.size
        if self.covariance.shape != (d, d):
            raise ValueError(
                f"covariance shape {self.covariance.shape} does not match "
                f"state dimension {d}")
        if np.max(np.abs(self.covariance - self.covariance.T)) > 1e-10:
            raise ValueError("covariance is not symmetric")

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass
class UpdateResult:
    belief: GaussianBelief
    innovation: np.ndarray
    innovation_covariance: np.ndarray
    gain: np.ndarray


def ensure_psd(matrix, jitter: float = 0.0) -> np.ndarray:
    """Symmetrize and floor the spectrum at `jitter`; PSD inputs pass through."""
    m = np.asarray(matrix, dtype=float)
    sym = 0.5 * (m + m.T)
    w = scipy.linalg.eigvalsh(sym)
    lo = w[0]
    if lo < jitter:
        sym = sym + (jitter - lo) * np.eye(sym.shape[0])
    return sym


def _attempt_cholesky(mat, start_jitter):
    """Lower Cholesky factor with escalating diagonal jitter up to 1e-6."""
    sym = 0.5 * (mat + mat.T)
    try:
        return np.linalg.cholesky(sym)
    except np.linalg.LinAlgError:
        pass
    jit = max(start_jitter, 1e-15)
    while jit <= 1e-6:
        try:
            return np.linalg.cholesky(sym + jit * np.eye(sym.shape[0]))
        except np.linalg.LinAlgError:
            jit *= 10
    raise UkfError(
        "covariance is not positive definite even after diagonal jitter "
        "up to 1e-6")


def sigma_weights(d: int, config: UkfConfig):
    lam = config.alpha**2 * (d + config.kappa) - d
    if d + lam <= 0:
        raise UkfError(
            f"sigma scaling d+lambda = {d + lam} must be positive "
            f"(alpha={config.alpha}, kappa={config.kappa}, d={d})")
    wm = np.full(2 * d + 1, 1.0 / (2 * (d + lam)))
    wc = wm.copy()
    wm[0] = lam / (d + lam)
    wc[0] = lam / (d + lam) + 1.0 - config.alpha**2 + config.beta
    return lam, wm, wc


def sigma_points(belief: GaussianBelief, config: UkfConfig):
    """2d+1 deterministic points plus mean/covariance weights."""
    d = belief.dim
    lam, wm, wc = sigma_weights(d, config)
    L = _attempt_cholesky((d + lam) * belief.covariance, config.jitter)
    pts = np.empty((2 * d + 1, d))
    pts[0] = belief.mean
    pts[1:d + 1] = belief.mean + L.T
    pts[d + 1:] = belief.mean - L.T
    return pts, wm, wc


def _moments(points, wm, wc, extra_cov=None):
    mean = wm @ points
    dev = points - mean
    cov = (dev * wc[:, None]).T @ dev
    if extra_cov is not None:
        cov = cov + extra_cov
    return mean, 0.5 * (cov + cov.T), dev


def predict(belief: GaussianBelief, process, Q, dt: float,
            config: UkfConfig = None) -> GaussianBelief:
    """Unscented propagation through `process` plus additive Q."""
    config = config or UkfConfig()
    pts, wm, wc = sigma_points(belief, config)
    out = np.asarray(process(pts, dt), dtype=float)
    if out.shape != pts.shape:
        raise UkfError(
            f"process output shape {out.shape} != sigma stack {pts.shape}")
    bad = ~np.all(np.isfinite(out), axis=1)
    if np.any(bad):
        raise UkfError(
            f"process returned non-finite values at sigma point(s) "
            f"{np.flatnonzero(bad).tolist()}")
    mean, cov, _ = _moments(out, wm, wc, np.asarray(Q, dtype=float))
    return GaussianBelief(mean, cov)


def update(belief: GaussianBelief, measurement, y_observed, R,
           config: UkfConfig = None) -> UpdateResult:
    """Standard unscented update; innovation and gain exposed for logging."""
    config = config or UkfConfig()
    y = np.asarray(y_observed, dtype=float).reshape(-1)
    if not np.all(np.isfinite(y)):
        raise UkfError("observed measurement contains non-finite values")
    pts, wm, wc = sigma_points(belief, config)
    Z = np.asarray(measurement(pts), dtype=float)
    if Z.ndim != 2 or Z.shape[0] != pts.shape[0] or Z.shape[1] != y.size:
        raise UkfError(
            f"measurement output shape {Z.shape} incompatible with "
            f"{pts.shape[0]} sigma points and {y.size} observations")
    bad = ~np.all(np.isfinite(Z), axis=1)
    if np.any(bad):
        raise UkfError(
            f"measurement returned non-finite values at sigma point(s) "
            f"{np.flatnonzero(bad).tolist()}")
    z_mean, S, z_dev = _moments(Z, wm, wc, np.asarray(R, dtype=float))
    x_dev = pts - belief.mean
    cross = (x_dev * wc[:, None]).T @ z_dev

    jit = 0.0
    while True:
        try:
            chol = scipy.linalg.cho_factor(S + jit * np.eye(S.shape[0]))
            break
        except scipy.linalg.LinAlgError:
            jit = max(config.jitter, 1e-15) if jit == 0.0 else jit * 10
            if jit > 1e-6:
                raise UkfError(
                    "innovation covariance is singular even after diagonal "
                    "jitter up to 1e-6")
    gain = scipy.linalg.cho_solve(chol, cross.T).T
    innovation = y - z_mean
    mean = belief.mean + gain @ innovation
    cov = belief.covariance - gain @ S @ gain.T
    cov = ensure_psd(cov, config.jitter)
    return UpdateResult(GaussianBelief(mean, cov), innovation, S, gain)
