"""Figure rendering for run artifacts.

Each task's delimited outputs get a small set of matplotlib figures written
next to them.  Rendering is read-only over the emitted CSV/JSON files, uses
the Agg backend, and fixes the dpi so repeated runs produce identical files.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_DPI = 110


def _save(fig, path):
    fig.savefig(path, dpi=_DPI, metadata={"Software": "reflectmc"})
    plt.close(fig)


def _read_field_csv(path):
    rows = []
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        for row in rd:
            x = tuple(float(v) for v in row["x"].split(";"))
            rows.append({"s": float(row["s"]), "x": x,
                         "mean": float(row["mean"]),
                         "std_error": float(row["std_error"])})
    return rows


def _field_figure(rows, title):
    fig, ax = plt.subplots(figsize=(6, 4))
    dim = len(rows[0]["x"]) if rows else 1
    if dim == 1:
        by_s = {}
        for r in rows:
            by_s.setdefault(r["s"], []).append(r)
        for s, group in sorted(by_s.items()):
            group = sorted(group, key=lambda r: r["x"][0])
            xs = [r["x"][0] for r in group]
            ms = [r["mean"] for r in group]
            es = [3 * r["std_error"] for r in group]
            ax.errorbar(xs, ms, yerr=es, marker="o", ms=3, capsize=2,
                        label=f"s = {s:g}")
        ax.set_xlabel("x")
        ax.legend(fontsize=8)
    else:
        xs = [r["x"][0] for r in rows]
        ys = [r["x"][1] for r in rows]
        sc = ax.scatter(xs, ys, c=[r["mean"] for r in rows], cmap="viridis")
        fig.colorbar(sc, ax=ax, label="estimate")
        ax.set_xlabel("x1")
        ax.set_ylabel("x2")
        ax.set_aspect("equal")
    ax.set_title(title)
    fig.tight_layout()
    return fig


def render_figures(task, out_dir) -> list:
    """Render the figures for a finished task; returns created file names."""
    out_dir = Path(out_dir)
    created = []

    def emit(fig, name):
        _save(fig, out_dir / name)
        created.append(name)

    field_csv = out_dir / "field.csv"
    if field_csv.exists():
        rows = _read_field_csv(field_csv)
        if rows:
            emit(_field_figure(rows, "Monte Carlo solution field"),
                 "field.png")

    compare_json = out_dir / "compare.json"
    if compare_json.exists():
        rep = json.loads(compare_json.read_text())
        pts = rep.get("points", [])
        if pts:
            fig, ax = plt.subplots(figsize=(6, 4))
            idx = range(len(pts))
            ax.bar(idx, [abs(p["gap"]) for p in pts], label="|MC - FD|")
            ax.plot(idx, [3 * p["std_error"] + rep["fd_tol"] for p in pts],
                    "r--", label="3 SE + FD tol")
            ax.set_xlabel("grid point")
            ax.set_ylabel("absolute gap")
            ax.set_title("Monte Carlo vs finite-difference oracle")
            ax.legend(fontsize=8)
            fig.tight_layout()
            emit(fig, "compare.png")

    probe_csv = out_dir / "probe.csv"
    if probe_csv.exists():
        rows = _read_field_csv(probe_csv)
        if rows:
            fig, ax = plt.subplots(figsize=(6, 4))
            idx = range(len(rows))
            ax.errorbar(idx, [abs(r["mean"]) for r in rows],
                        yerr=[3 * r["std_error"] for r in rows],
                        marker="o", capsize=2)
            ax.set_xlabel("approach index")
            ax.set_ylabel("|estimate|")
            ax.set_title("Boundary continuity probe")
            fig.tight_layout()
            emit(fig, "probe.png")

    log_path = out_dir / "eval_log.jsonl"
    if log_path.exists():
        entries = [json.loads(line) for line in
                   log_path.read_text().splitlines() if line.strip()]
        finite = [e for e in entries if e["V"] != float("inf")]
        if finite:
            fig, ax = plt.subplots(figsize=(6, 4))
            ax.semilogy(range(len(finite)), [e["V"] for e in finite], ".-",
                        ms=4)
            ax.set_xlabel("evaluation")
            ax.set_ylabel("cost V")
            ax.set_title("Shape-inversion cost trace")
            fig.tight_layout()
            emit(fig, "inversion.png")

    ens_csv = out_dir / "ensemble.csv"
    if ens_csv.exists():
        thetas, weights = [], []
        with open(ens_csv, newline="") as fh:
            rd = csv.DictReader(fh)
            for row in rd:
                thetas.append(float(row["theta1"]))
                weights.append(float(row["weight"]))
        if thetas:
            fig, ax = plt.subplots(figsize=(6, 4))
            ax.hist(thetas, bins=60, weights=weights, density=True,
                    alpha=0.8)
            ax.set_xlabel("theta1")
            ax.set_ylabel("posterior density")
            ax.set_title("Posterior marginal (importance-weighted)")
            fig.tight_layout()
            emit(fig, "posterior.png")

    return created
