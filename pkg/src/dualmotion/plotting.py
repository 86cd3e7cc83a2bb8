"""Figures for a pipeline run, rendered to files from the persisted CSV artifacts."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {"figure.dpi": 120, "axes.grid": True, "grid.alpha": 0.3, "font.size": 9, "axes.spines.top": False, "axes.spines.right": False}


def _read(path):
    """CSV with a header row as a dict of float columns (non-numeric cells become nan)."""
    with open(path) as fh:
        cols = fh.readline().strip().split(",")
        rows = [line.strip().split(",") for line in fh if line.strip()]

    def num(s):
        try:
            return float(s)
        except ValueError:
            return np.inf if s == "unbounded" else np.nan

    data = np.array([[num(v) for v in r] for r in rows]) if rows else np.empty((0, len(cols)))
    return {c: data[:, i] for i, c in enumerate(cols)}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def plot_de_history(csv, path):
    d = _read(csv)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot(d["generation"], d["best_mu"], lw=1.5)
        ax.set_xlabel("generation")
        ax.set_ylabel("best $\\mu$ (mm/s)")
        ax.set_title("configuration search")
        return _save(fig, path)


def plot_speed_profile(csv, path):
    d = _read(csv)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3))
        ax.plot(d["lam"], d["vel_bound"], lw=1, label="velocity bound")
        ax.plot(d["lam"], d["acc_bound"], lw=1, label="acceleration bound")
        mu = np.nanmin(d["combined"])
        ax.axhline(mu, color="k", ls="--", lw=1, label=f"$\\mu$ = {mu:.0f} mm/s")
        finite = d["combined"][np.isfinite(d["combined"])]
        if finite.size:
            ax.set_ylim(0, min(np.percentile(finite, 95) * 1.5, finite.max() * 1.05))
        ax.set_xlabel("$\\lambda$ (mm)")
        ax.set_ylabel("speed bound (mm/s)")
        ax.legend(loc="upper right", fontsize=8)
        return _save(fig, path)


def plot_traces(traces, path, tol=None):
    """Relative speed, position error and normal error against lambda for labelled trace CSVs."""
    with plt.rc_context(STYLE):
        fig, axs = plt.subplots(3, 1, figsize=(6.5, 6.5), sharex=True)
        for label, csv in traces:
            d = _read(csv)
            g = d["gate"] > 0.5
            axs[0].plot(d["lam"][g], d["speed"][g], lw=1, label=label)
            axs[1].plot(d["lam"][g], d["pos_err"][g], lw=1)
            axs[2].plot(d["lam"][g], d["norm_err_deg"][g], lw=1)
        if tol is not None:
            axs[1].axhline(tol.eps_pos, color="r", ls=":", lw=1)
            axs[2].axhline(tol.eps_norm, color="r", ls=":", lw=1)
        axs[0].set_ylabel("speed (mm/s)")
        axs[1].set_ylabel("position error (mm)")
        axs[2].set_ylabel("normal error (deg)")
        axs[2].set_xlabel("$\\lambda$ (mm)")
        axs[0].legend(fontsize=8)
        return _save(fig, path)


def plot_tune_history(csv, path, tol=None):
    d = _read(csv)
    with plt.rc_context(STYLE):
        fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3))
        it = d["iteration"]
        a.plot(it, d["max_pos_err"], "o-", ms=3)
        if tol is not None:
            a.axhline(tol.eps_pos, color="r", ls=":", lw=1)
        a.set_xlabel("iteration")
        a.set_ylabel("max position error (mm)")
        b.plot(it, d["mu_cmd"], "o-", ms=3, label="commanded")
        b.plot(it, d["mu_avg"], "s-", ms=3, label="executed mean")
        b.set_xlabel("iteration")
        b.set_ylabel("speed (mm/s)")
        b.legend(fontsize=8)
        return _save(fig, path)


def render_run(root, name, out_dir, tol=None):
    """Every figure whose inputs exist for run ``name`` under ``root``; returns written paths."""
    root = Path(root)
    out_dir = Path(out_dir)
    made = []
    f = root / "config" / name / "de_history.csv"
    if f.exists():
        made.append(plot_de_history(f, out_dir / "de_history.png"))
    f = root / "program" / name / "speed_profile.csv"
    if f.exists():
        made.append(plot_speed_profile(f, out_dir / "speed_profile.png"))
    traces = [(label, root / "exec" / name / f"{stem}_trace.csv") for label, stem in (("dual (tuned)", "tuned"), ("baseline", "baseline"), ("dual (fitted)", "dual"))]
    traces = [(label, p) for label, p in traces if p.exists()]
    if traces:
        made.append(plot_traces(traces, out_dir / "traces.png", tol))
    f = out_dir / "tune_history.csv"
    if f.exists():
        made.append(plot_tune_history(f, out_dir / "tune_history.png", tol))
    return made
