"""Minimal deterministic SVG rendering of profiles over a shaded band."""

from __future__ import annotations

import numpy as np

_WIDTH, _HEIGHT = 720, 480
_MARGIN = 50
_COLORS = ("#000000", "#b2182b", "#2166ac", "#4dac26", "#d01c8b", "#e66101")


def _fmt(x: float) -> str:
    return format(x, ".2f")


def render_plot(times, series, band=None, start_hour=None, title="") -> str:
    """``series`` is a list of (label, values); ``band`` is (lower, upper)."""
    times = np.asarray(times, dtype=float)
    ys = [np.asarray(v, dtype=float) for _, v in series]
    stack = np.concatenate(ys + ([band[0], band[1]] if band is not None else []))
    ylo, yhi = float(stack.min()), float(stack.max())
    pad = 0.05 * max(yhi - ylo, 1.0)
    ylo, yhi = ylo - pad, yhi + pad
    tlo, thi = float(times.min()), float(times.max())

    def sx(t):
        return _MARGIN + (t - tlo) / max(thi - tlo, 1e-9) * (_WIDTH - 2 * _MARGIN)

    def sy(v):
        return _HEIGHT - _MARGIN - (v - ylo) / (yhi - ylo) * (_HEIGHT - 2 * _MARGIN)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_WIDTH}" height="{_HEIGHT}" '
        f'viewBox="0 0 {_WIDTH} {_HEIGHT}">',
        f'<rect width="{_WIDTH}" height="{_HEIGHT}" fill="#ffffff"/>',
    ]
    if title:
        parts.append(
            f'<text x="{_WIDTH // 2}" y="24" text-anchor="middle" '
            f'font-family="sans-serif" font-size="16">{title}</text>'
        )
    if band is not None:
        lower, upper = band
        pts = [f"{_fmt(sx(t))},{_fmt(sy(v))}" for t, v in zip(times, upper)]
        pts += [f"{_fmt(sx(t))},{_fmt(sy(v))}" for t, v in zip(times[::-1], lower[::-1])]
        parts.append(f'<polygon points="{" ".join(pts)}" fill="#cccccc" fill-opacity="0.6"/>')
    for i, (label, values) in enumerate(series):
        color = _COLORS[i % len(_COLORS)]
        pts = " ".join(f"{_fmt(sx(t))},{_fmt(sy(v))}" for t, v in zip(times, values))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        parts.append(
            f'<text x="{_WIDTH - _MARGIN + 4}" y="{_fmt(sy(values[-1]))}" '
            f'font-family="sans-serif" font-size="11" fill="{color}">{label}</text>'
        )
    # axes
    parts.append(
        f'<line x1="{_MARGIN}" y1="{_HEIGHT - _MARGIN}" x2="{_WIDTH - _MARGIN}" '
        f'y2="{_HEIGHT - _MARGIN}" stroke="#000000"/>'
    )
    parts.append(
        f'<line x1="{_MARGIN}" y1="{_MARGIN}" x2="{_MARGIN}" y2="{_HEIGHT - _MARGIN}" '
        f'stroke="#000000"/>'
    )
    for t in range(0, 25, 4):
        if not tlo <= t <= thi:
            continue
        label = t if start_hour is None else int((start_hour + t) % 24)
        parts.append(
            f'<text x="{_fmt(sx(t))}" y="{_HEIGHT - _MARGIN + 18}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="11">{label}</text>'
        )
    axis_label = "clock hour" if start_hour is not None else "elapsed hours"
    parts.append(
        f'<text x="{_WIDTH // 2}" y="{_HEIGHT - 12}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="12">{axis_label}</text>'
    )
    for k in range(5):
        v = ylo + k * (yhi - ylo) / 4
        parts.append(
            f'<text x="{_MARGIN - 6}" y="{_fmt(sy(v) + 4)}" text-anchor="end" '
            f'font-family="sans-serif" font-size="11">{_fmt(v)}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
