"""Static SVG overlay of reference and predicted glucose."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 900, 360
MARGIN = 50
Y_RANGE = (40.0, 400.0)


def _polyline(x, y, color, dash=""):
    pts = []
    segs = []
    for xi, yi in zip(x, y):
        if np.isfinite(yi):
            pts.append(f"{xi:.1f},{yi:.1f}")
        elif pts:
            segs.append(pts)
            pts = []
    if pts:
        segs.append(pts)
    style = f' stroke-dasharray="{dash}"' if dash else ""
    return "".join(f'<polyline fill="none" stroke="{color}" stroke-width="1.5"{style} '
                   f'points="{" ".join(s)}"/>\n' for s in segs)


def overlay_svg(reference, prediction, path, title: str = "", step_min: int = 5,
                guides=(70.0, 180.0)) -> None:
    """Write a line chart of two series with horizontal threshold guides."""
    ref = np.asarray(reference, dtype=np.float64)
    pred = np.asarray(prediction, dtype=np.float64)
    n = len(ref)
    lo, hi = Y_RANGE
    xs = MARGIN + (WIDTH - 2 * MARGIN) * np.arange(n) / max(n - 1, 1)

    def ymap(v):
        return HEIGHT - MARGIN - (HEIGHT - 2 * MARGIN) * (np.clip(v, lo, hi) - lo) / (hi - lo)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}">\n',
             f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>\n',
             f'<text x="{MARGIN}" y="25" font-family="sans-serif" font-size="14">{escape(title)}</text>\n']
    for g in guides:
        y = ymap(g)
        parts.append(f'<line x1="{MARGIN}" x2="{WIDTH - MARGIN}" y1="{y:.1f}" y2="{y:.1f}" '
                     f'stroke="grey" stroke-dasharray="2,4"/>\n')
        parts.append(f'<text x="8" y="{y + 4:.1f}" font-family="sans-serif" font-size="11">{g:g}</text>\n')
    hours = n * step_min / 60
    for h in range(0, int(hours) + 1, 3):
        x = MARGIN + (WIDTH - 2 * MARGIN) * h / max(hours, 1e-9)
        parts.append(f'<text x="{x:.1f}" y="{HEIGHT - MARGIN + 18}" font-family="sans-serif" '
                     f'font-size="11" text-anchor="middle">{h}h</text>\n')
    parts.append(_polyline(xs, ymap(ref), "black"))
    parts.append(_polyline(xs, ymap(pred), "crimson", dash="6,3"))
    parts.append(f'<text x="{WIDTH - MARGIN}" y="25" font-family="sans-serif" font-size="12" '
                 f'text-anchor="end">black: reference, red dashed: prediction (mg/dL)</text>\n')
    parts.append("</svg>\n")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("".join(parts))
