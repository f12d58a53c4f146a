"""Sweep and removal report files: CSV, a dependency-free SVG chart, matplotlib PNGs."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import geometry as geo
from .io import write_png
from .pipeline import CSV_COLUMNS, RemovalReport, SweepReport

SVG_W, SVG_H = 640, 400
PAD_L, PAD_R, PAD_T, PAD_B = 60, 170, 20, 45
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "nan"
    return repr(v)


def write_sweep_csv(path, report: SweepReport) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for row in report.rows:
            w.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
    return path


def chart_series(report: SweepReport) -> list[tuple[str, list[tuple[float, float]]]]:
    """Named ``(|delta|, value)`` series: mean d and TPR per rotation, plus the sinc curve."""
    cfg = report.config
    series = []
    for theta in sorted({r["rotation_deg"] for r in report.rows}):
        rows = sorted((r for r in report.rows if r["rotation_deg"] == theta), key=lambda r: r["translation_px"])
        series.append((f"mean d, rot {theta:g} deg", [(abs(r["translation_px"]), r["mean_d"]) for r in rows]))
        series.append((f"TPR, rot {theta:g} deg", [(abs(r["translation_px"]), r["tpr_at_fpr"]) for r in rows]))
    if report.rows:
        top = max(abs(r["translation_px"]) for r in report.rows)
        xs = np.linspace(0.0, top, 65) if top > 0 else np.array([0.0])
        curve = [(float(x), geo.predict(x, 0.0, cfg.r_max, cfg.stride, cfg.latent_width).attenuation) for x in xs]
        series.append(("predicted sin(a)/a", curve))
    return series


def render_svg(report: SweepReport) -> str:
    """Line chart with exactly one ``<polyline>`` per series."""
    series = chart_series(report)
    xmax = max([x for _, pts in series for x, _ in pts] + [1.0])
    ymin = min([y for _, pts in series for _, y in pts] + [0.0])
    ymax = max([y for _, pts in series for _, y in pts] + [1.0])
    pw, ph = SVG_W - PAD_L - PAD_R, SVG_H - PAD_T - PAD_B

    def sx(x):
        return PAD_L + pw * x / xmax

    def sy(y):
        return PAD_T + ph * (1.0 - (y - ymin) / (ymax - ymin))

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_W}" height="{SVG_H}" '
        f'viewBox="0 0 {SVG_W} {SVG_H}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{SVG_W}" height="{SVG_H}" fill="white"/>',
        f'<line x1="{PAD_L}" y1="{PAD_T + ph}" x2="{PAD_L + pw}" y2="{PAD_T + ph}" stroke="black"/>',
        f'<line x1="{PAD_L}" y1="{PAD_T}" x2="{PAD_L}" y2="{PAD_T + ph}" stroke="black"/>',
    ]
    for k in range(5):
        xv = xmax * k / 4
        yv = ymin + (ymax - ymin) * k / 4
        out.append(f'<text x="{sx(xv):.2f}" y="{PAD_T + ph + 15}" text-anchor="middle">{xv:.3g}</text>')
        out.append(f'<text x="{PAD_L - 6}" y="{sy(yv) + 4:.2f}" text-anchor="end">{yv:.3g}</text>')
    out.append(f'<text x="{PAD_L + pw / 2:.2f}" y="{SVG_H - 8}" text-anchor="middle">translation |delta| (px)</text>')
    for i, (name, pts) in enumerate(series):
        color = COLORS[i % len(COLORS)]
        dash = ' stroke-dasharray="5,3"' if name.startswith("predicted") else ""
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in pts)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5"{dash} points="{coords}"/>')
        ly = PAD_T + 12 + 16 * i
        out.append(f'<text x="{PAD_L + pw + 10}" y="{ly}" fill="{color}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_sweep_png(path, report: SweepReport) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for name, pts in chart_series(report):
        xs, ys = zip(*pts)
        style = "--" if name.startswith("predicted") else "-o"
        ax.plot(xs, ys, style, ms=3, lw=1.2, label=name)
    ax.set_xlabel("translation |delta| (px)")
    ax.set_ylabel("distance / rate")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7, frameon=False)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path


def emit_report(report: SweepReport, out_dir, stem: str = "sweep", svg: bool = True,
                png: bool = True) -> dict[str, Path]:
    """Write ``<stem>.csv`` and optionally the SVG and PNG charts; returns the paths."""
    out_dir = Path(out_dir)
    paths = {"csv": write_sweep_csv(out_dir / f"{stem}.csv", report)}
    if svg:
        p = out_dir / f"{stem}.svg"
        p.write_text(render_svg(report))
        paths["svg"] = p
    if png and report.rows:
        paths["png"] = plot_sweep_png(out_dir / f"{stem}.png", report)
    return paths


def emit_removal(report: RemovalReport, out_dir, png: bool = True) -> dict[str, Path]:
    """``removal.json``, ``loss.csv``, the output image, and a loss-curve PNG."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"json": out_dir / "removal.json", "loss": out_dir / "loss.csv"}
    paths["json"].write_text(json.dumps(report.summary(), indent=1) + "\n")
    with open(paths["loss"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "loss"])
        for i, v in enumerate(report.loss_trace):
            w.writerow([i, repr(float(v))])
    for name, img in report.images.items():
        paths[name] = write_png(out_dir / f"{name}.png", img)
    if png:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        ax.semilogy(report.loss_trace, lw=1.0)
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.grid(alpha=0.3, which="both")
        fig.tight_layout()
        paths["loss_png"] = out_dir / "loss.png"
        fig.savefig(paths["loss_png"], dpi=120, metadata={"Software": None})
        plt.close(fig)
    return paths
