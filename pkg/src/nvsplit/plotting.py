"""Figures written next to the CSV outputs of the CLI."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

SMALL_SIZE = 9
MEDIUM_SIZE = 11

params = {
    "font.size": MEDIUM_SIZE,
    "axes.titlesize": MEDIUM_SIZE,
    "axes.labelsize": MEDIUM_SIZE,
    "legend.fontsize": SMALL_SIZE,
    "xtick.labelsize": SMALL_SIZE,
    "ytick.labelsize": SMALL_SIZE,
    "xtick.direction": "in",
    "ytick.direction": "in",
    "lines.markersize": 5,
}

# no timestamps or version strings, so identical data give identical files
_PNG_METADATA = {"Software": None}


def _figure(width=5.0, height=None):
    golden_ratio = (math.sqrt(5) - 1.0) / 2.0
    with plt.rc_context(params):
        fig, ax = plt.subplots(figsize=(width, height or width * golden_ratio))
    return fig, ax


def _save(fig, path):
    with plt.rc_context(params):
        fig.tight_layout()
        fig.savefig(path, dpi=120, metadata=_PNG_METADATA)
    plt.close(fig)


def plot_rates(table, path, title=""):
    """Log-log strong error against N with CI bars and the fitted line."""
    fig, ax = _figure()
    Ns, errs = table.Ns, table.errs
    ci = np.array([r.ci_half for r in table.rows])
    pos = errs > 0
    ax.errorbar(Ns[pos], errs[pos], yerr=ci[pos], fmt="o", capsize=3, label="measured")
    if table.slope is not None:
        fit = np.exp(table.intercept) * Ns.astype(float) ** (-table.slope)
        ax.plot(Ns, fit, "-", label=f"order {table.slope:.3f} $\\pm$ {table.slope_ci:.3f}")
    ax.set_xscale("log", base=2)
    if np.any(pos):
        ax.set_yscale("log")
    ax.set_xlabel("N")
    ax.set_ylabel(r"$E[\max_k |X_{t_k}-\hat X_{t_k}|^2]^{1/2}$")
    ax.set_title(title)
    ax.legend()
    _save(fig, path)


def plot_distributions(emp, lim, path, title=""):
    """Empirical CDFs of each coordinate of the two sample sets."""
    n = emp.samples.shape[1]
    with plt.rc_context(params):
        fig, axes = plt.subplots(1, n, figsize=(4.0 * n, 3.2), squeeze=False)
    for i, ax in enumerate(axes[0]):
        for s, label in ((emp, emp.kind), (lim, lim.kind)):
            x = np.sort(s.samples[:, i])
            ax.step(x, np.arange(1, x.size + 1) / x.size, where="post", label=label)
        ax.set_xlabel(f"x{i + 1}")
        ax.set_ylabel("ECDF")
        ax.legend()
    fig.suptitle(title)
    _save(fig, path)


def plot_bracket(rows, T, path):
    """|bracket - t T^2 / 12| against N, with the T^3 / (12 N) envelope."""
    fig, ax = _figure()
    Ns = np.array([r[0] for r in rows], dtype=float)
    gaps = np.array([abs(r[2] - r[3]) for r in rows])
    ax.loglog(Ns, np.maximum(gaps, 1e-300), "o", label="|gap|")
    grid = np.unique(Ns)
    ax.loglog(grid, T ** 3 / (12.0 * grid), "-", label=r"$T^3/(12N)$")
    ax.set_xlabel("N")
    ax.set_ylabel("gap to limit")
    ax.legend()
    _save(fig, path)


def plot_trajectory(traj, path, title=""):
    fig, ax = _figure()
    for i in range(traj.states.shape[-1]):
        ax.plot(traj.grid.times, traj.states[0, :, i], label=f"x{i + 1}")
    ax.set_xlabel("t")
    ax.set_title(title)
    ax.legend()
    _save(fig, path)
