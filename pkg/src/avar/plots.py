"""Dependency-free SVG line charts for JSONL training histories."""

from __future__ import annotations

import math

_COLOURS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
DEFAULT_SERIES = ("mean_vas", "mean_accuracy", "mean_reward", "mean_visual_reward", "vas_model",
                  "mean_image_attention_mass", "total")


def _series(history: list[dict], keys) -> dict[str, list[tuple[float, float]]]:
    out = {}
    for key in keys:
        pts = [(float(h.get("step", i)), float(h[key])) for i, h in enumerate(history)
               if isinstance(h.get(key), (int, float)) and math.isfinite(h[key])]
        if pts:
            out[key] = pts
    return out


def _panel(key: str, pts, colour: str, x0: int, y0: int, w: int, h: int) -> list[str]:
    xs, ys = [p[0] for p in pts], [p[1] for p in pts]
    xlo, xhi = min(xs), max(xs)
    ylo, yhi = min(ys), max(ys)
    xspan = xhi - xlo or 1.0
    yspan = yhi - ylo or 1.0
    coords = " ".join(f"{x0 + (x - xlo) / xspan * w:.2f},{y0 + h - (y - ylo) / yspan * h:.2f}" for x, y in pts)
    return [
        f'<rect x="{x0}" y="{y0}" width="{w}" height="{h}" fill="none" stroke="#bbb"/>',
        f'<text x="{x0}" y="{y0 - 6}">{key} (last {ys[-1]:.4g})</text>',
        f'<text x="{x0 - 4}" y="{y0 + 10}" text-anchor="end">{yhi:.3g}</text>',
        f'<text x="{x0 - 4}" y="{y0 + h}" text-anchor="end">{ylo:.3g}</text>',
        f'<text x="{x0}" y="{y0 + h + 14}">{xlo:g}</text>',
        f'<text x="{x0 + w}" y="{y0 + h + 14}" text-anchor="end">{xhi:g}</text>',
        f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{coords}"/>',
    ]


def curves_svg(history: list[dict], keys=DEFAULT_SERIES, width: int = 420, height: int = 140) -> str:
    """One stacked panel per metric present in ``history``; x axis is ``step``."""
    series = _series(history, keys)
    left, top, gap = 70, 30, 50
    total_h = top + max(1, len(series)) * (height + gap)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{left + width + 30}" height="{total_h}" '
           f'font-family="monospace" font-size="11">']
    if not series:
        out.append(f'<text x="{left}" y="{top}">no plottable series</text>')
    for i, (key, pts) in enumerate(series.items()):
        out += _panel(key, pts, _COLOURS[i % len(_COLOURS)], left, top + i * (height + gap), width, height)
    out.append("</svg>")
    return "\n".join(out) + "\n"


__all__ = ["DEFAULT_SERIES", "curves_svg"]
