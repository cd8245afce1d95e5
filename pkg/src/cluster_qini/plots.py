"""Figure rendering for the plot-ready panel CSVs."""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 4.0),
    "figure.dpi": 150,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.fontsize": 8,
}

_ORACLE = "oracle"


def _read_panel(path: Path) -> list[dict]:
    with open(path, newline="") as handle:
        return list(csv.DictReader(handle))


def _series(rows: list[dict], x_key: str):
    """Group panel rows into per-estimator (x, mean, stderr) triples."""
    grouped: dict[str, list[tuple[float, float, float]]] = defaultdict(list)
    for row in rows:
        grouped[row["estimator_id"]].append(
            (float(row[x_key]), float(row["mean"]), float(row["stderr"]))
        )
    return grouped


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def _plot_lines(rows, x_key, x_label, y_label, path, *, log_y=False, log_x=False):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for estimator_id, triples in _series(rows, x_key).items():
            triples.sort()
            x = [t[0] for t in triples]
            mean = [t[1] for t in triples]
            err = [t[2] for t in triples]
            if estimator_id == _ORACLE:
                ax.plot(x, mean, "k--", label=_ORACLE)
            else:
                ax.errorbar(x, mean, yerr=err, marker="o", capsize=2,
                            markersize=3, label=estimator_id)
        if log_y:
            ax.set_yscale("log")
        if log_x:
            ax.set_xscale("log")
        ax.set_xlabel(x_label)
        ax.set_ylabel(y_label)
        ax.legend()
        return _save(fig, path)


def render_panels(out_dir) -> list[Path]:
    """Render a PNG next to every panel CSV present in the directory."""
    out_dir = Path(out_dir)
    rendered: list[Path] = []
    panel = out_dir / "panel_budget_qini.csv"
    if panel.exists():
        rendered.append(
            _plot_lines(_read_panel(panel), "budget", "budget (treated fraction)",
                        "incremental value", out_dir / "qini_curves.png")
        )
    for axis, x_label in (("m", "units per cluster"), ("n", "clusters")):
        for metric, log_y in (("bias", False), ("mse", True), ("variance", True)):
            panel = out_dir / f"panel_{metric}_vs_{axis}.csv"
            if panel.exists():
                rendered.append(
                    _plot_lines(
                        _read_panel(panel), axis, x_label, metric,
                        out_dir / f"{metric}_vs_{axis}.png",
                        log_y=log_y, log_x=True,
                    )
                )
    panel = out_dir / "panel_tau.csv"
    if panel.exists():
        rows = _read_panel(panel)
        with plt.rc_context(STYLE):
            fig, ax = plt.subplots()
            names = [row["estimator_id"] for row in rows]
            means = [float(row["mean"]) for row in rows]
            errs = [float(row["stderr"]) for row in rows]
            ax.bar(names, means, yerr=errs, capsize=3)
            ax.set_ylabel("kendall tau vs oracle ranking")
            ax.set_ylim(0, 1.05)
            ax.tick_params(axis="x", rotation=30)
            rendered.append(_save(fig, out_dir / "kendall_tau.png"))
    return rendered
