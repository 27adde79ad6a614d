"""Figure rendering for run, comparison, and friction-fit artifacts.

Everything here draws to files through the Agg backend; nothing opens a
window. PNG metadata is pinned so a rerun with the same inputs produces
byte-identical images.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .friction import friction_torque

_PNG_META = {"Software": "torquefusion"}
_SHADE = dict(color="0.82", alpha=0.55, linewidth=0, zorder=0)


def _save(fig, path):
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)


def _shade_contacts(ax, scenario):
    for ev in scenario.contacts:
        end = min(ev.end, scenario.duration)
        if end > ev.start:
            ax.axvspan(ev.start, end, **_SHADE)


def _joint_axes(n, title):
    fig, axes = plt.subplots(n, 1, sharex=True, figsize=(7.0, 2.2 * n),
                             squeeze=False)
    fig.suptitle(title)
    return fig, axes[:, 0]


def save_tracking_figure(result, path):
    """Per joint: plant torque vs commanded torque, contacts shaded."""
    scn = result.scenario
    names = scn.model.joint_names()
    t = result.log.column("t")
    truth = result.log.column("tau_truth")
    des = result.log.column("tau_des")
    fig, axes = _joint_axes(len(names), f"{scn.name}: torque tracking")
    for j, (name, ax) in enumerate(zip(names, axes)):
        _shade_contacts(ax, scn)
        ax.plot(t, truth[:, j], label="plant", linewidth=1.0)
        ax.plot(t, des[:, j], label="command", linewidth=1.0,
                linestyle="--")
        ax.set_ylabel(f"{name} [Nm]")
        ax.grid(True, linewidth=0.3)
    axes[0].legend(loc="upper right", fontsize="small")
    axes[-1].set_xlabel("t [s]")
    _save(fig, path)


def save_estimation_figure(result, path):
    """Per joint: estimation error of each estimator, contacts shaded."""
    scn = result.scenario
    names = scn.model.joint_names()
    t = result.log.column("t")
    truth = result.log.column("tau_truth")
    fig, axes = _joint_axes(len(names), f"{scn.name}: estimation error")
    for j, (name, ax) in enumerate(zip(names, axes)):
        _shade_contacts(ax, scn)
        for col, label in (("tau_ukf", "fused"), ("tau_rnea", "model-only")):
            err = result.log.column(col)[:, j] - truth[:, j]
            ax.plot(t, err, label=label, linewidth=1.0)
        ax.set_ylabel(f"{name} [Nm]")
        ax.grid(True, linewidth=0.3)
    axes[0].legend(loc="upper right", fontsize="small")
    axes[-1].set_xlabel("t [s]")
    _save(fig, path)


def save_comparison_figure(joint_names, rmse_ukf, rmse_rnea, path,
                           title="estimation RMSE"):
    rmse_ukf = np.asarray(rmse_ukf, dtype=float)
    rmse_rnea = np.asarray(rmse_rnea, dtype=float)
    x = np.arange(len(joint_names))
    width = 0.38
    fig, ax = plt.subplots(figsize=(1.6 + 1.4 * len(joint_names), 3.6))
    ax.bar(x - width / 2, rmse_ukf, width, label="fused")
    ax.bar(x + width / 2, rmse_rnea, width, label="model-only")
    ax.set_xticks(x)
    ax.set_xticklabels(joint_names)
    ax.set_ylabel("RMSE [Nm]")
    ax.set_title(title)
    ax.legend(fontsize="small")
    ax.grid(True, axis="y", linewidth=0.3)
    fig.tight_layout()
    _save(fig, path)


def save_friction_figure(samples, fit, path):
    """Samples as points, fitted curve over their velocity span."""
    sd = np.array([smp.s_dot for smp in samples])
    res = np.array([smp.residual_torque for smp in samples])
    span = max(abs(sd.min()), abs(sd.max()))
    grid = np.linspace(-span, span, 400)
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    ax.plot(sd, res, ".", markersize=3, alpha=0.6, label="samples")
    ax.plot(grid, friction_torque(fit.params, grid), linewidth=1.2,
            label="fit")
    p = fit.params
    ax.set_title(f"k0={p.k0:.3f} Nm, k1={p.k1:.2f} s/rad, "
                 f"k2={p.k2:.4f} Nm*s/rad (rmse {fit.rmse:.4f})")
    ax.set_xlabel("joint velocity [rad/s]")
    ax.set_ylabel("residual torque [Nm]")
    ax.legend(fontsize="small")
    ax.grid(True, linewidth=0.3)
    fig.tight_layout()
    _save(fig, path)
