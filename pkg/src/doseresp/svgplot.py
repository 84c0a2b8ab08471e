"""Dependency-free static SVG rendering of dose-response curves.

Output is deterministic text so reruns diff cleanly; the only volatile
line allowed is the version comment near the top.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .estimator import DoseResponseCurve

VERSION_COMMENT = "<!-- doseresp 0.1.0 -->"

WIDTH, HEIGHT = 720, 480
MARGIN = {"left": 72, "right": 24, "top": 40, "bottom": 52}


def _ticks(lo: float, hi: float, n: int = 6) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / max(n - 1, 1)
    mag = 10.0 ** np.floor(np.log10(raw))
    step = min(
        (m * mag for m in (1.0, 2.0, 2.5, 5.0, 10.0) if m * mag >= raw),
        default=raw,
    )
    start = np.ceil(lo / step) * step
    ticks = []
    t = start
    while t <= hi + 1e-9 * step:
        ticks.append(float(round(t, 10)))
        t += step
    return ticks


def render_curve_svg(
    curve: DoseResponseCurve,
    path: str | Path | None = None,
    title: str = "Dose-response function",
    support: tuple[float, float] | None = None,
) -> str:
    """Render the effect line, confidence band, zero line and grey
    significance intervals; optionally clip the drawing to the dose support."""
    dose = np.asarray(curve.dose, dtype=float)
    keep = np.ones(len(dose), dtype=bool)
    if support is not None and np.isfinite(support[0]) and np.isfinite(support[1]):
        keep = (dose >= support[0] - 1e-9) & (dose <= support[1] + 1e-9)
        if not keep.any():
            keep[:] = True
    dose = dose[keep]
    effect = curve.effect[keep]
    lo = curve.ci_low[keep]
    hi = curve.ci_high[keep]

    x0, x1 = float(dose.min()), float(dose.max())
    y0 = float(min(lo.min(), 0.0))
    y1 = float(max(hi.max(), 0.0))
    pad = 0.05 * (y1 - y0) if y1 > y0 else 1.0
    y0, y1 = y0 - pad, y1 + pad

    plot_w = WIDTH - MARGIN["left"] - MARGIN["right"]
    plot_h = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def sx(v: float) -> float:
        return MARGIN["left"] + (v - x0) / (x1 - x0) * plot_w if x1 > x0 else MARGIN["left"]

    def sy(v: float) -> float:
        return MARGIN["top"] + (y1 - v) / (y1 - y0) * plot_h

    def fmt(v: float) -> str:
        return f"{v:.2f}"

    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        VERSION_COMMENT,
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
    ]

    # grey intervals where the curve is significant
    for seg in curve.segments:
        lo_d = max(seg.start, x0)
        hi_d = min(seg.end, x1)
        if hi_d < lo_d:
            continue
        parts.append(
            f'<rect x="{fmt(sx(lo_d))}" y="{MARGIN["top"]}" '
            f'width="{fmt(max(sx(hi_d) - sx(lo_d), 1.0))}" height="{plot_h}" '
            'fill="#d9d9d9" fill-opacity="0.6"/>'
        )

    # confidence band
    band = " ".join(
        [f"{fmt(sx(d))},{fmt(sy(v))}" for d, v in zip(dose, hi)]
        + [f"{fmt(sx(d))},{fmt(sy(v))}" for d, v in zip(dose[::-1], lo[::-1])]
    )
    parts.append(f'<polygon points="{band}" fill="#9ecae1" fill-opacity="0.5"/>')

    # zero line
    if y0 <= 0.0 <= y1:
        parts.append(
            f'<line x1="{MARGIN["left"]}" y1="{fmt(sy(0.0))}" '
            f'x2="{WIDTH - MARGIN["right"]}" y2="{fmt(sy(0.0))}" '
            'stroke="#555555" stroke-dasharray="5,4" stroke-width="1"/>'
        )

    # effect line
    line = " ".join(f"{fmt(sx(d))},{fmt(sy(v))}" for d, v in zip(dose, effect))
    parts.append(
        f'<polyline points="{line}" fill="none" stroke="#084594" stroke-width="2"/>'
    )

    # axes
    parts.append(
        f'<rect x="{MARGIN["left"]}" y="{MARGIN["top"]}" width="{plot_w}" '
        f'height="{plot_h}" fill="none" stroke="#333333" stroke-width="1"/>'
    )
    for t in _ticks(x0, x1):
        parts.append(
            f'<line x1="{fmt(sx(t))}" y1="{MARGIN["top"] + plot_h}" '
            f'x2="{fmt(sx(t))}" y2="{MARGIN["top"] + plot_h + 5}" stroke="#333333"/>'
        )
        parts.append(
            f'<text x="{fmt(sx(t))}" y="{MARGIN["top"] + plot_h + 20}" '
            f'font-family="sans-serif" font-size="12" text-anchor="middle">{t:g}</text>'
        )
    for t in _ticks(y0, y1):
        parts.append(
            f'<line x1="{MARGIN["left"] - 5}" y1="{fmt(sy(t))}" '
            f'x2="{MARGIN["left"]}" y2="{fmt(sy(t))}" stroke="#333333"/>'
        )
        parts.append(
            f'<text x="{MARGIN["left"] - 8}" y="{fmt(sy(t) + 4)}" '
            f'font-family="sans-serif" font-size="12" text-anchor="end">{t:g}</text>'
        )

    parts.append(
        f'<text x="{WIDTH / 2:g}" y="24" font-family="sans-serif" font-size="15" '
        f'text-anchor="middle">{title}</text>'
    )
    parts.append(
        f'<text x="{WIDTH / 2:g}" y="{HEIGHT - 12}" font-family="sans-serif" '
        'font-size="13" text-anchor="middle">dose</text>'
    )
    parts.append("</svg>")
    text = "\n".join(parts) + "\n"
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text
