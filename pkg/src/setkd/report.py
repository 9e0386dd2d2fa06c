"""CSV logs and standalone SVG plots.

CSV is the source of truth; every SVG here is derived from CSV-equivalent
data and written with fixed number formatting, so identical inputs give
identical bytes.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f", "#17becf")


def csv_text(rows: Sequence[Mapping], fields: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(fields), lineterminator="\n", extrasaction="raise")
    w.writeheader()
    for r in rows:
        w.writerow({f: r.get(f, "") for f in fields})
    return buf.getvalue()


def write_csv(path, rows: Sequence[Mapping], fields: Sequence[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(csv_text(rows, fields))
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def log_fields(rows: Sequence[Mapping]) -> list[str]:
    """Union of keys in first-seen order."""
    seen: dict[str, None] = {}
    for r in rows:
        for k in r:
            seen.setdefault(k, None)
    return list(seen)


def is_curve(rows: Sequence[Mapping]) -> tuple[list[dict], list[str]]:
    """(epoch, mean_IS, IS_k_k+1 ...) rows from a training log."""
    stage_cols = [k for k in log_fields(rows) if k.startswith("IS_")]
    fields = ["epoch", "mean_IS"] + stage_cols
    return [{f: r.get(f, "") for f in fields} for r in rows], fields


def mask_csv(mask: np.ndarray) -> str:
    """Row-major H x W grid, one image row per line."""
    return "".join(",".join(f"{v:.6f}" for v in row) + "\n" for row in np.asarray(mask, dtype=np.float64))


def _esc(s: str) -> str:
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _num(v: float) -> str:
    return f"{v:.2f}"


def line_chart_svg(
    series: Mapping[str, tuple[Sequence[float], Sequence[float]]],
    title: str,
    xlabel: str,
    ylabel: str,
    width: int = 640,
    height: int = 400,
) -> str:
    """Polyline chart with axes, ticks and a legend."""
    left, right, top, bottom = 60, 150, 36, 48
    pw, ph = width - left - right, height - top - bottom
    xs = [float(x) for s in series.values() for x in s[0]]
    ys = [float(y) for s in series.values() for y in s[1]]
    x0, x1 = (min(xs), max(xs)) if xs else (0.0, 1.0)
    y0, y1 = (min(0.0, min(ys)), max(ys)) if ys else (0.0, 1.0)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0

    def px(x):
        return left + (x - x0) / (x1 - x0) * pw

    def py(y):
        return top + ph - (y - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{_esc(title)}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for t in np.linspace(x0, x1, 6):
        out.append(f'<line x1="{_num(px(t))}" y1="{top + ph}" x2="{_num(px(t))}" y2="{top + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{_num(px(t))}" y="{top + ph + 16}" text-anchor="middle">{t:.4g}</text>')
    for t in np.linspace(y0, y1, 6):
        out.append(f'<line x1="{left - 4}" y1="{_num(py(t))}" x2="{left}" y2="{_num(py(t))}" stroke="black"/>')
        out.append(f'<text x="{left - 6}" y="{_num(py(t) + 4)}" text-anchor="end">{t:.3g}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle">{_esc(xlabel)}</text>')
    out.append(f'<text x="14" y="{top + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 14 {top + ph / 2:.1f})">{_esc(ylabel)}</text>')
    for i, (name, (sx, sy)) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{_num(px(float(x)))},{_num(py(float(y)))}" for x, y in zip(sx, sy))
        if pts:
            out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = top + 14 * i + 6
        out.append(f'<line x1="{left + pw + 12}" y1="{ly}" x2="{left + pw + 32}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 36}" y="{ly + 4}">{_esc(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def heatmap_svg(grid: np.ndarray, title: str, cell: int = 20) -> str:
    """Grey-to-red heatmap of an H x W array, row 0 at the top."""
    g = np.asarray(grid, dtype=np.float64)
    h, w = g.shape
    lo, hi = float(g.min()), float(g.max())
    span = hi - lo if hi > lo else 1.0
    top = 30
    width, height = w * cell + 20, h * cell + top + 30
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{_esc(title)}</text>',
    ]
    for r in range(h):
        for c in range(w):
            t = (g[r, c] - lo) / span
            red, green, blue = 255, int(round(255 * (1 - t))), int(round(255 * (1 - t)))
            out.append(f'<rect x="{10 + c * cell}" y="{top + r * cell}" width="{cell}" height="{cell}" '
                       f'fill="rgb({red},{green},{blue})"/>')
    out.append(f'<text x="10" y="{height - 10}">min {lo:.4g}  max {hi:.4g}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def curves_from_logs(logs: Mapping[str, Sequence[Mapping]], column: str) -> dict:
    """``{run: (epochs, values)}`` for one numeric log column, skipping blanks."""
    series = {}
    for name, rows in logs.items():
        pts = [(float(r["epoch"]), float(r[column])) for r in rows if r.get(column, "") != ""]
        series[name] = ([p[0] for p in pts], [p[1] for p in pts])
    return series


def write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def write_curve_plots(out_dir, logs: Mapping[str, Sequence[Mapping]]) -> list[Path]:
    out_dir = Path(out_dir)
    return [
        write_text(out_dir / "ap_curves.svg",
                   line_chart_svg(curves_from_logs(logs, "mAP"), "Validation mAP", "epoch", "mAP")),
        write_text(out_dir / "is_curves.svg",
                   line_chart_svg(curves_from_logs(logs, "mean_IS"), "Stage instability", "epoch", "mean IS")),
    ]


def write_mask(out_dir, stem: str, mask: np.ndarray, title: str) -> list[Path]:
    out_dir = Path(out_dir)
    return [write_text(out_dir / f"{stem}.csv", mask_csv(mask)), write_text(out_dir / f"{stem}.svg", heatmap_svg(mask, title))]

