"""Matplotlib figures written next to the CSV reports.

Each data series is drawn as one line whose SVG group id is
``series-<index>`` so downstream tooling can find it.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.ticker import FixedLocator, NullLocator  # noqa: E402

# 800 x 600 SVG user units (points).
FIGSIZE = (800 / 72.0, 600 / 72.0)

matplotlib.rcParams.update({
    "svg.hashsalt": "attnlab",
    "svg.fonttype": "none",
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 12,
})


def _save(fig, path, formats=("svg",)):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    written = []
    for fmt in formats:
        target = path.with_suffix("." + fmt)
        tmp = target.with_name("." + target.name + ".tmp")
        fig.savefig(tmp, format=fmt, metadata={"Date": None} if fmt == "svg" else None)
        tmp.replace(target)
        written.append(target)
    plt.close(fig)
    return written


def _length_axis(ax, lengths):
    ax.set_xscale("log", base=2)
    ax.xaxis.set_major_locator(FixedLocator(sorted(set(lengths))))
    ax.xaxis.set_minor_locator(NullLocator())
    ax.set_xticklabels([str(L) for L in sorted(set(lengths))])


def line_chart(series, path, xlabel, ylabel, title=None, log_x=True, formats=("svg",)):
    """``series`` maps a legend label to (xs, ys); NaN points leave gaps."""
    fig, ax = plt.subplots(figsize=FIGSIZE)
    all_x = []
    for i, (label, (xs, ys)) in enumerate(series.items()):
        (line,) = ax.plot(xs, ys, marker="o", label=label)
        line.set_gid(f"series-{i}")
        all_x.extend(xs)
    if log_x and all_x:
        _length_axis(ax, all_x)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if series:
        ax.legend(loc="best")
    fig.tight_layout()
    return _save(fig, path, formats)


def plot_report(report, path, metric="val_loss", formats=("svg",)):
    """Metric vs evaluation length, one line per (mechanism, p) group."""
    series = {}
    for (mech, p), rows in report.groups().items():
        label = mech if p is None else f"{mech} (p={p:g})"
        series[label] = ([r.eval_len for r in rows], [getattr(r, metric) for r in rows])
    ylabel = {"val_loss": "validation loss (nats/byte)", "mean_entropy": "last-row attention entropy (nats)",
              "mean_max_gap": "last-row max gap"}.get(metric, metric)
    return line_chart(series, path, "evaluation length (tokens)", ylabel, formats=formats)


def plot_passkey(rows, path, formats=("svg",)):
    xs = [r["ctx_len"] for r in rows]
    ys = [r["accuracy"] for r in rows]
    return line_chart({"passkey accuracy": (xs, ys)}, path, "context length (bytes)", "accuracy",
                      formats=formats)


def plot_probe(label, rows, path, formats=("svg",)):
    xs = [r[0] for r in rows]
    return line_chart({f"{label} entropy": (xs, [r[1] for r in rows]),
                       f"{label} max gap": (xs, [r[2] for r in rows])},
                      path, "sequence length", "last-row statistic", formats=formats)

