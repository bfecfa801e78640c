"""Self-contained SVG heatmaps for Grad-CAM attributions (no plotting deps)."""

from __future__ import annotations

from typing import Mapping, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .gradcam import SegmentImportance

WIDTH = 900
MARGIN = 40


def diverging_color(v: float) -> str:
    """Blue for -1, white for 0, red for +1."""
    v = float(np.clip(v, -1.0, 1.0)) if np.isfinite(v) else 0.0
    if v >= 0:
        r, g, b = 255, round(255 * (1 - v)), round(255 * (1 - v))
    else:
        r, g, b = round(255 * (1 + v)), round(255 * (1 + v)), 255
    return f"#{r:02x}{g:02x}{b:02x}"


def _header(width: int, height: int, desc: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f"<desc>{escape(desc)}</desc>",
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]


def recording_heatmap_svg(
    segments: Sequence[SegmentImportance],
    duration_s: float,
    title: str = "",
    desc: str = "",
) -> str:
    """One horizontal band per chunk, colored by its normalized score."""
    height = 150
    plot_w = WIDTH - 2 * MARGIN
    top, band_h = 40, 50
    duration_s = max(duration_s, max((s.end_s for s in segments), default=0.0), 1e-9)

    def x_of(t):
        return MARGIN + plot_w * t / duration_s

    out = _header(WIDTH, height, desc)
    out.append(f'<text x="{MARGIN}" y="20" font-size="13">{escape(title)}</text>')
    out.append(f'<rect x="{MARGIN}" y="{top}" width="{plot_w}" height="{band_h}" fill="#f4f4f4" stroke="#999"/>')
    for s in segments:
        x0, x1 = x_of(s.start_s), x_of(s.end_s)
        stroke = ' stroke="black" stroke-width="2"' if s.selected else ""
        out.append(
            f'<rect x="{x0:.2f}" y="{top}" width="{max(x1 - x0, 0.5):.2f}" height="{band_h}" '
            f'fill="{diverging_color(s.score)}"{stroke}><title>{escape(" ".join(s.words))}: {s.score:.3f}</title></rect>'
        )
        label = escape(" ".join(s.words))
        if label:
            out.append(f'<text x="{(x0 + x1) / 2:.2f}" y="{top + band_h + 14}" text-anchor="middle">{label}</text>')
    # time axis
    axis_y = top + band_h + 30
    out.append(f'<line x1="{MARGIN}" y1="{axis_y}" x2="{MARGIN + plot_w}" y2="{axis_y}" stroke="black"/>')
    step = max(0.5, round(duration_s / 8 * 2) / 2)
    t = 0.0
    while t <= duration_s + 1e-9:
        x = x_of(t)
        out.append(f'<line x1="{x:.2f}" y1="{axis_y}" x2="{x:.2f}" y2="{axis_y + 4}" stroke="black"/>')
        out.append(f'<text x="{x:.2f}" y="{axis_y + 16}" text-anchor="middle">{t:g}s</text>')
        t += step
    out.append("</svg>")
    return "\n".join(out) + "\n"


def class_average_svg(maps: Mapping[str, np.ndarray], desc: str = "", max_cells: int = 256) -> str:
    """Stacked strips of class-averaged Grad-CAM maps on a shared color scale."""
    names = list(maps)
    strip_h = 36
    height = 40 + len(names) * (strip_h + 24) + 10
    plot_w = WIDTH - 2 * MARGIN - 40
    peak = max((float(np.max(np.abs(m))) for m in maps.values() if len(m)), default=0.0) or 1.0
    out = _header(WIDTH, height, desc)
    out.append(f'<text x="{MARGIN}" y="20" font-size="13">Class-averaged Grad-CAM (shared scale, |max| = {peak:.3g})</text>')
    for row, name in enumerate(names):
        m = np.asarray(maps[name], dtype=np.float64)
        cells = np.array([c.mean() for c in np.array_split(m, min(max_cells, len(m)))]) if len(m) else np.zeros(0)
        y = 40 + row * (strip_h + 24)
        out.append(f'<text x="{MARGIN}" y="{y + strip_h / 2 + 4}">{escape(name)}</text>')
        w = plot_w / max(len(cells), 1)
        for i, v in enumerate(cells):
            x = MARGIN + 40 + i * w
            out.append(f'<rect x="{x:.2f}" y="{y}" width="{w + 0.05:.2f}" height="{strip_h}" fill="{diverging_color(v / peak)}"/>')
        out.append(f'<rect x="{MARGIN + 40}" y="{y}" width="{plot_w}" height="{strip_h}" fill="none" stroke="#666"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
