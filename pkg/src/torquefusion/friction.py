"""Harmonic-drive friction: saturating Coulomb term plus viscous term.

The model is tau_F = k0*tanh(k1*s_dot) + k2*s_dot, an odd, monotone map of
joint velocity. Identification fits (k0, k2) in closed form for each
candidate k1 on a caller-supplied grid and keeps the grid-best triple.
"""

import csv
from dataclasses import dataclass

import numpy as np


class IdentifiabilityError(Exception):
    """Raised when a sample set cannot pin down the friction parameters."""


@dataclass(frozen=True)
class FrictionParams:
    k0: float  # Nm, saturation level of the tanh term
    k1: float  # s/rad, velocity scale of the tanh term
    k2: float  # Nm*s/rad, viscous coefficient

    def __post_init__(self):
        for name in ("k0", "k1", "k2"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class FrictionSample:
    s_dot: float
    residual_torque: float  # gear_ratio*tau_m - tau_j with no disturbance


@dataclass(frozen=True)
class FrictionFit:
    params: FrictionParams
    rmse: float
    residuals: np.ndarray     # data minus model at the fitted params
    k1_grid: np.ndarray
    grid_rmse: np.ndarray     # best-fit RMSE per candidate k1


def friction_torque(params: FrictionParams, s_dot):
    s_dot = np.asarray(s_dot, dtype=float)
    return params.k0 * np.tanh(params.k1 * s_dot) + params.k2 * s_dot


def _sech2(x):
    # sech(x)^2 without overflow for large |x|
    ex = np.exp(-np.abs(np.asarray(x, dtype=float)))
    s = 2.0 * ex / (1.0 + ex * ex)
    return s * s


def friction_torque_rate(params: FrictionParams, s_dot, s_ddot):
    s_dot = np.asarray(s_dot, dtype=float)
    s_ddot = np.asarray(s_ddot, dtype=float)
    return (params.k0 * params.k1 * _sech2(params.k1 * s_dot)
            + params.k2) * s_ddot


def _as_arrays(samples):
    sd, rt = [], []
    for s in samples:
        if isinstance(s, FrictionSample):
            sd.append(s.s_dot)
            rt.append(s.residual_torque)
        else:
            sd.append(s[0])
            rt.append(s[1])
    return np.asarray(sd, dtype=float), np.asarray(rt, dtype=float)


def _solve_pair(a, b, c, d, e, yy):
    """Min of ||y - k0 t - k2 v||^2 over k0,k2 >= 0 given the Gram sums
    a=t.t, b=t.v, c=v.v, d=t.y, e=v.y, yy=y.y. Vectorized over a,b,d."""
    det = a * c - b * b
    with np.errstate(divide="ignore", invalid="ignore"):
        k0 = np.where(det > 0, (c * d - b * e) / det, 0.0)
        k2 = np.where(det > 0, (a * e - b * d) / det, 0.0)
        k0_only = np.where(a > 0, d / a, 0.0)
        k2_only = np.where(c > 0, e / c, 0.0)
    # clamp each candidate into the feasible quadrant
    k0_only = np.maximum(k0_only, 0.0)
    k2_only = np.maximum(k2_only, 0.0)

    def sse(p0, p2):
        return (yy - 2 * p0 * d - 2 * p2 * e
                + p0 * p0 * a + 2 * p0 * p2 * b + p2 * p2 * c)

    interior_ok = (k0 >= 0) & (k2 >= 0)
    cand0 = np.where(interior_ok, k0, np.nan)
    cand2 = np.where(interior_ok, k2, np.nan)
    sse_int = np.where(interior_ok, sse(k0, k2), np.inf)
    sse_e0 = sse(k0_only, np.zeros_like(k0_only))
    sse_e2 = sse(np.zeros_like(k2_only), k2_only)
    pick_e2 = sse_e2 < sse_e0
    edge0 = np.where(pick_e2, 0.0, k0_only)
    edge2 = np.where(pick_e2, k2_only, 0.0)
    sse_edge = np.where(pick_e2, sse_e2, sse_e0)
    use_edge = ~interior_ok | (sse_edge < sse_int)
    best0 = np.where(use_edge, edge0, cand0)
    best2 = np.where(use_edge, edge2, cand2)
    best_sse = np.where(use_edge, sse_edge, sse_int)
    return best0, best2, np.maximum(best_sse, 0.0)


def identify_friction(samples, k1_grid) -> FrictionFit:
    """Grid over k1 with closed-form least squares in (k0, k2)."""
    s_dot, y = _as_arrays(samples)
    if s_dot.size < 10:
        raise IdentifiabilityError(
            f"need at least 10 samples, got {s_dot.size}")
    if np.all(np.abs(s_dot) < 1e-6):
        raise IdentifiabilityError("all joint velocities are numerically zero")
    if np.all(s_dot >= 0) or np.all(s_dot <= 0):
        raise IdentifiabilityError(
            "samples must span both velocity signs to separate the "
            "saturating and viscous terms")
    grid = np.asarray(k1_grid, dtype=float).ravel()
    if grid.size == 0 or np.any(grid < 0) or not np.all(np.isfinite(grid)):
        raise IdentifiabilityError("k1 grid must be non-empty, finite, >= 0")

    t = np.tanh(grid[:, None] * s_dot[None, :])  # (G, N)
    a = np.einsum("gn,gn->g", t, t)
    b = t @ s_dot
    d = t @ y
    c = float(s_dot @ s_dot)
    e = float(s_dot @ y)
    yy = float(y @ y)
    k0s, k2s, sses = _solve_pair(a, b, c, d, e, yy)
    grid_rmse = np.sqrt(sses / s_dot.size)
    best = int(np.argmin(grid_rmse))
    params = FrictionParams(float(k0s[best]), float(grid[best]),
                            float(k2s[best]))
    residuals = y - friction_torque(params, s_dot)
    rmse = float(np.sqrt(np.mean(residuals**2)))
    # the Gram-sum SSE loses precision near zero; pin the winner to the
    # directly computed value so the report is self-consistent
    grid_rmse[best] = rmse
    return FrictionFit(params, rmse, residuals, grid, grid_rmse)


CSV_HEADER = ["s_dot", "residual_torque"]


def load_samples_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise IdentifiabilityError(
                f"expected CSV header {','.join(CSV_HEADER)!r}, got {header}")
        return [FrictionSample(float(row[0]), float(row[1]))
                for row in reader if row]


def save_samples_csv(path, samples):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for s in samples:
            sd, rt = (s.s_dot, s.residual_torque) \
                if isinstance(s, FrictionSample) else (s[0], s[1])
            writer.writerow([repr(float(sd)), repr(float(rt))])
