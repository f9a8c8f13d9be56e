"""Minimal standalone SVG line plots (no display dependency).

Presentation only: the simulator and CLI write trajectory, actuator,
governor, and distance traces as self-contained SVG files.
"""

from __future__ import annotations

import numpy as np

_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def _ticks(lo: float, hi: float, n: int = 6) -> np.ndarray:
    if not np.isfinite(lo) or not np.isfinite(hi) or hi <= lo:
        return np.array([lo])
    raw = (hi - lo) / max(n, 2)
    mag = 10.0 ** np.floor(np.log10(raw))
    for m in (1.0, 2.0, 2.5, 5.0, 10.0):
        if raw <= m * mag:
            step = m * mag
            break
    t0 = np.ceil(lo / step) * step
    return np.arange(t0, hi + 0.5 * step, step)


class LinePlot:
    def __init__(self, title: str, xlabel: str, ylabel: str,
                 width: int = 640, height: int = 420, equal_axes: bool = False):
        self.title = title
        self.xlabel = xlabel
        self.ylabel = ylabel
        self.w = width
        self.h = height
        self.equal = equal_axes
        self.series: list[tuple[np.ndarray, np.ndarray, str, str, bool]] = []

    def add(self, x, y, label: str = "", color: str | None = None, scatter: bool = False):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        color = color or _COLORS[len(self.series) % len(_COLORS)]
        self.series.append((x, y, label, color, scatter))

    def render(self) -> str:
        ml, mr, mt, mb = 62, 16, 34, 46
        pw, ph = self.w - ml - mr, self.h - mt - mb
        xs = np.concatenate([s[0] for s in self.series]) if self.series else np.array([0.0, 1.0])
        ys = np.concatenate([s[1] for s in self.series]) if self.series else np.array([0.0, 1.0])
        xs = xs[np.isfinite(xs)]
        ys = ys[np.isfinite(ys)]
        if xs.size == 0:
            xs = np.array([0.0, 1.0])
        if ys.size == 0:
            ys = np.array([0.0, 1.0])
        x0, x1 = float(xs.min()), float(xs.max())
        y0, y1 = float(ys.min()), float(ys.max())
        if x1 <= x0:
            x1 = x0 + 1.0
        if y1 <= y0:
            y1 = y0 + 1.0
        padx = 0.04 * (x1 - x0)
        pady = 0.06 * (y1 - y0)
        x0, x1, y0, y1 = x0 - padx, x1 + padx, y0 - pady, y1 + pady
        if self.equal:
            sx, sy = pw / (x1 - x0), ph / (y1 - y0)
            s = min(sx, sy)
            cx, cy = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
            x0, x1 = cx - 0.5 * pw / s, cx + 0.5 * pw / s
            y0, y1 = cy - 0.5 * ph / s, cy + 0.5 * ph / s

        def px(v):
            return ml + (v - x0) / (x1 - x0) * pw

        def py(v):
            return mt + ph - (v - y0) / (y1 - y0) * ph

        out = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.w}" height="{self.h}" '
            f'viewBox="0 0 {self.w} {self.h}" font-family="Helvetica,Arial,sans-serif">',
            f'<rect width="{self.w}" height="{self.h}" fill="white"/>',
            f'<text x="{self.w/2:.0f}" y="20" text-anchor="middle" font-size="14">{self.title}</text>',
        ]
        for tx in _ticks(x0, x1):
            out.append(f'<line x1="{px(tx):.1f}" y1="{mt}" x2="{px(tx):.1f}" y2="{mt+ph}" stroke="#eeeeee"/>')
            out.append(f'<text x="{px(tx):.1f}" y="{mt+ph+16}" text-anchor="middle" font-size="10">{tx:g}</text>')
        for ty in _ticks(y0, y1):
            out.append(f'<line x1="{ml}" y1="{py(ty):.1f}" x2="{ml+pw}" y2="{py(ty):.1f}" stroke="#eeeeee"/>')
            out.append(f'<text x="{ml-6}" y="{py(ty)+3:.1f}" text-anchor="end" font-size="10">{ty:g}</text>')
        out.append(f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#444444"/>')
        out.append(f'<text x="{ml+pw/2:.0f}" y="{self.h-10}" text-anchor="middle" font-size="12">{self.xlabel}</text>')
        out.append(f'<text x="16" y="{mt+ph/2:.0f}" text-anchor="middle" font-size="12" '
                   f'transform="rotate(-90 16 {mt+ph/2:.0f})">{self.ylabel}</text>')

        for x, y, label, color, scatter in self.series:
            keep = np.isfinite(x) & np.isfinite(y)
            if scatter:
                pts = "".join(
                    f'<circle cx="{px(a):.1f}" cy="{py(b):.1f}" r="1.4" fill="{color}" fill-opacity="0.5"/>'
                    for a, b in zip(x[keep][::1], y[keep][::1])
                )
                out.append(pts)
            else:
                coords = " ".join(f"{px(a):.1f},{py(b):.1f}" for a, b in zip(x[keep], y[keep]))
                out.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = mt + 14
        for _, _, label, color, _ in self.series:
            if label:
                out.append(f'<line x1="{ml+pw-130}" y1="{ly-4}" x2="{ml+pw-110}" y2="{ly-4}" '
                           f'stroke="{color}" stroke-width="2"/>')
                out.append(f'<text x="{ml+pw-104}" y="{ly}" font-size="11">{label}</text>')
                ly += 15
        out.append("</svg>")
        return "\n".join(out)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.render())
