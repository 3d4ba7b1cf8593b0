"""Minimal deterministic SVG writer: axes, polylines and bars."""
from __future__ import annotations

from xml.sax.saxutils import escape

WIDTH, HEIGHT = 480, 320
LEFT, RIGHT, TOP, BOTTOM = 56, 16, 32, 56
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf")


def _f(x: float) -> str:
    return f"{x:.2f}"


def _frame(title: str, y_lo: float, y_hi: float) -> list[str]:
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.0f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{LEFT}" y1="{HEIGHT - BOTTOM}" x2="{WIDTH - RIGHT}" y2="{HEIGHT - BOTTOM}" stroke="black"/>',
        f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{HEIGHT - BOTTOM}" stroke="black"/>',
    ]
    for k in range(5):
        v = y_lo + (y_hi - y_lo) * k / 4
        y = _y(v, y_lo, y_hi)
        parts.append(f'<text x="{LEFT - 6}" y="{_f(y + 4)}" text-anchor="end" font-size="10">{v:.3g}</text>')
    return parts


def _y(v: float, lo: float, hi: float) -> float:
    span = hi - lo if hi > lo else 1.0
    return HEIGHT - BOTTOM - (v - lo) / span * (HEIGHT - TOP - BOTTOM)


def _range(values, y_min, y_max):
    lo = min(values, default=0.0) if y_min is None else y_min
    hi = max(values, default=1.0) if y_max is None else y_max
    if hi <= lo:
        hi = lo + 1.0
    return lo, hi


def bar_chart(labels, values, title: str = "", y_min: float | None = 0.0, y_max: float | None = None) -> str:
    values = [float(v) for v in values]
    lo, hi = _range(values, y_min, y_max)
    parts = _frame(title, lo, hi)
    n = max(len(values), 1)
    slot = (WIDTH - LEFT - RIGHT) / n
    for i, (lab, v) in enumerate(zip(labels, values)):
        x = LEFT + i * slot + slot * 0.15
        y = _y(v, lo, hi)
        h = HEIGHT - BOTTOM - y
        parts.append(f'<rect x="{_f(x)}" y="{_f(y)}" width="{_f(slot * 0.7)}" height="{_f(max(h, 0.0))}" '
                     f'fill="{PALETTE[0]}"/>')
        parts.append(f'<text x="{_f(x + slot * 0.35)}" y="{HEIGHT - BOTTOM + 16}" text-anchor="middle" '
                     f'font-size="10">{escape(str(lab))}</text>')
        parts.append(f'<text x="{_f(x + slot * 0.35)}" y="{_f(y - 4)}" text-anchor="middle" '
                     f'font-size="9">{v:.3f}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def line_chart(xs, series: dict[str, list[float]], title: str = "", x_label: str = "",
               y_min: float | None = None, y_max: float | None = None) -> str:
    xs = [float(x) for x in xs]
    allv = [float(v) for vs in series.values() for v in vs]
    lo, hi = _range(allv, y_min, y_max)
    parts = _frame(title, lo, hi)
    x_lo, x_hi = (min(xs), max(xs)) if xs else (0.0, 1.0)
    x_span = x_hi - x_lo if x_hi > x_lo else 1.0

    def px(x):
        if x_hi == x_lo:
            return (LEFT + WIDTH - RIGHT) / 2
        return LEFT + (x - x_lo) / x_span * (WIDTH - LEFT - RIGHT)

    for x in xs:
        parts.append(f'<text x="{_f(px(x))}" y="{HEIGHT - BOTTOM + 16}" text-anchor="middle" '
                     f'font-size="10">{x:g}</text>')
    if x_label:
        parts.append(f'<text x="{WIDTH / 2:.0f}" y="{HEIGHT - 16}" text-anchor="middle" '
                     f'font-size="11">{escape(x_label)}</text>')
    for k, (name, vs) in enumerate(series.items()):
        color = PALETTE[k % len(PALETTE)]
        pts = " ".join(f"{_f(px(x))},{_f(_y(float(v), lo, hi))}" for x, v in zip(xs, vs))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, v in zip(xs, vs):
            parts.append(f'<circle cx="{_f(px(x))}" cy="{_f(_y(float(v), lo, hi))}" r="3" fill="{color}"/>')
        parts.append(f'<text x="{WIDTH - RIGHT - 4}" y="{TOP + 14 * (k + 1)}" text-anchor="end" '
                     f'font-size="10" fill="{color}">{escape(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
