"""Report figures: daily active devices and the daily-active-ratio CDF."""

from __future__ import annotations

import datetime as dt
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
from matplotlib import pyplot as plt  # noqa: E402

EPOCH = dt.date(1970, 1, 1)


def setup_plt():
    plt.rcParams["figure.dpi"] = 120
    plt.rcParams["axes.grid"] = True
    plt.rcParams["grid.alpha"] = 0.3
    plt.rcParams["savefig.bbox"] = "tight"
    # Stable output bytes across runs.
    plt.rcParams["svg.hashsalt"] = "fleetbed"


def save_fig(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"Software": None} if path.suffix == ".png" else {}
    fig.savefig(path, metadata=meta)
    plt.close(fig)
    return path


def plot_daily_active(days, path, title="Daily active devices"):
    """``days``: iterable of DayActivity (or dicts with day/active/enrolled)."""
    setup_plt()
    days = [d if isinstance(d, dict) else {"day": d.day, "active": d.active, "enrolled": d.enrolled} for d in days]
    x = [EPOCH + dt.timedelta(days=d["day"]) for d in days]
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.plot(x, [d["active"] for d in days], marker="o", ms=3, label="active")
    ax.plot(x, [d["enrolled"] for d in days], ls="--", color="gray", label="enrolled")
    ax.set_ylabel("devices")
    ax.set_ylim(bottom=0)
    ax.set_title(title)
    ax.legend(loc="lower left")
    fig.autofmt_xdate()
    return save_fig(fig, path)


def plot_ratio_cdf(curves, path, title="CDF of daily active ratio"):
    """``curves``: mapping label -> RatioCDF."""
    setup_plt()
    fig, ax = plt.subplots(figsize=(4.5, 3))
    for label, cdf in curves.items():
        xs = [0.0] + [x for x, _ in cdf.points]
        ys = [0.0] + [y for _, y in cdf.points]
        ax.step(xs + [1.0], ys + [1.0], where="post", label=label)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("daily active ratio")
    ax.set_ylabel("CDF")
    ax.set_title(title)
    ax.legend(loc="upper left")
    return save_fig(fig, path)
