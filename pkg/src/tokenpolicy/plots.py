"""Minimal SVG line charts (no plotting library)."""

from __future__ import annotations

import math
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")
WIDTH, HEIGHT = 640, 400
MARGIN = dict(left=70, right=20, top=40, bottom=55)


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((s * mag for s in (1, 2, 5, 10) if s * mag >= raw), default=10 * mag)
    start = math.ceil(lo / step) * step
    return [start + i * step for i in range(int((hi - start) / step + 1e-9) + 1)]


def _fmt(v: float) -> str:
    return f"{v:.3g}"


def line_chart(series: dict, title: str = "", xlabel: str = "", ylabel: str = "") -> str:
    """Render ``{name: (x, y)}`` as an SVG document string.

    Non-finite points are skipped, breaking the polyline.
    """
    clean = {}
    for name, (x, y) in series.items():
        x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
        if x.shape != y.shape:
            raise ValueError(f"series {name!r}: x and y lengths differ")
        clean[name] = (x, y)
    finite = [(x[np.isfinite(x) & np.isfinite(y)], y[np.isfinite(x) & np.isfinite(y)])
              for x, y in clean.values()]
    xs = np.concatenate([f[0] for f in finite] or [np.zeros(0)])
    ys = np.concatenate([f[1] for f in finite] or [np.zeros(0)])
    if xs.size == 0:
        xs, ys = np.array([0.0, 1.0]), np.array([0.0, 1.0])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def px(v):
        return MARGIN["left"] + (v - x0) / (x1 - x0) * pw

    def py(v):
        return MARGIN["top"] + (1.0 - (v - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
           f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>']
    bottom, left = MARGIN["top"] + ph, MARGIN["left"]
    out.append(f'<line x1="{left}" y1="{bottom}" x2="{left + pw}" y2="{bottom}" stroke="black"/>')
    out.append(f'<line x1="{left}" y1="{MARGIN["top"]}" x2="{left}" y2="{bottom}" stroke="black"/>')
    for t in _ticks(x0, x1):
        out.append(f'<line x1="{px(t):.1f}" y1="{bottom}" x2="{px(t):.1f}" y2="{bottom + 5}" stroke="black"/>')
        out.append(f'<text x="{px(t):.1f}" y="{bottom + 18}" text-anchor="middle">{_fmt(t)}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<line x1="{left - 5}" y1="{py(t):.1f}" x2="{left}" y2="{py(t):.1f}" stroke="black"/>')
        out.append(f'<text x="{left - 8}" y="{py(t) + 4:.1f}" text-anchor="end">{_fmt(t)}</text>')
    if title:
        out.append(f'<text x="{WIDTH / 2}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>')
    if xlabel:
        out.append(f'<text x="{left + pw / 2}" y="{HEIGHT - 12}" text-anchor="middle">{escape(xlabel)}</text>')
    if ylabel:
        cy = MARGIN["top"] + ph / 2
        out.append(f'<text x="16" y="{cy}" text-anchor="middle" transform="rotate(-90 16 {cy})">'
                   f'{escape(ylabel)}</text>')
    for i, (name, (x, y)) in enumerate(clean.items()):
        color = COLORS[i % len(COLORS)]
        ok = np.isfinite(x) & np.isfinite(y)
        runs, current = [], []
        for xi, yi, good in zip(x, y, ok):
            if good:
                current.append(f"{px(xi):.1f},{py(yi):.1f}")
            elif current:
                runs.append(current)
                current = []
        if current:
            runs.append(current)
        for run in runs:
            if len(run) == 1:
                cx, cy = run[0].split(",")
                out.append(f'<circle cx="{cx}" cy="{cy}" r="2.5" fill="{color}"/>')
            else:
                out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{" ".join(run)}"/>')
        ly = MARGIN["top"] + 14 + 16 * i
        out.append(f'<line x1="{left + pw - 130}" y1="{ly - 4}" x2="{left + pw - 112}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw - 106}" y="{ly}">{escape(str(name))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def save_line_chart(path, series: dict, **kw) -> None:
    Path(path).write_text(line_chart(series, **kw))


def training_curves(train_log, out_dir) -> list[Path]:
    """Reward-vs-loop and toy-FID-vs-loop charts from a :class:`TrainingLog`."""
    out_dir = Path(out_dir)
    loops = train_log.column("loop")
    paths = [out_dir / "reward_curve.svg", out_dir / "toy_fid_curve.svg"]
    save_line_chart(paths[0], {"mean reward": (loops, train_log.column("mean_reward"))},
                    title="Mean reward during training", xlabel="loop", ylabel="mean reward")
    fid = train_log.column("toy_fid_every_k")
    keep = np.isfinite(fid)
    save_line_chart(paths[1], {"toy-FID": (loops[keep], fid[keep])},
                    title="Toy-FID during training", xlabel="loop", ylabel="toy-FID")
    return paths
