"""Minimal SVG figures: curves with optional bands, and balance bar charts."""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 640, 420
MARGIN = dict(left=70, right=150, top=40, bottom=50)
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


def _nice_ticks(lo, hi, n=5):
    if not np.isfinite(lo) or not np.isfinite(hi) or hi <= lo:
        return np.array([lo])
    step = 10 ** np.floor(np.log10((hi - lo) / n))
    for m in (1, 2, 5, 10):
        if (hi - lo) / (m * step) <= n:
            step *= m
            break
    return np.arange(np.ceil(lo / step) * step, hi + 1e-9 * step, step)


class _Canvas:
    def __init__(self, xlim, ylim, title, xlabel, ylabel):
        self.x0, self.x1 = xlim
        self.y0, self.y1 = ylim
        if self.x1 <= self.x0:
            self.x0, self.x1 = self.x0 - 0.5, self.x1 + 0.5
        if self.y1 <= self.y0:
            self.y0, self.y1 = self.y0 - 0.5, self.y1 + 0.5
        self.pw = WIDTH - MARGIN["left"] - MARGIN["right"]
        self.ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
            f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
            f'<text x="{WIDTH / 2:.1f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
        ]
        self._axes(xlabel, ylabel)

    def px(self, x):
        return MARGIN["left"] + (np.asarray(x, float) - self.x0) / (self.x1 - self.x0) * self.pw

    def py(self, y):
        return MARGIN["top"] + (self.y1 - np.asarray(y, float)) / (self.y1 - self.y0) * self.ph

    def _axes(self, xlabel, ylabel):
        l, t = MARGIN["left"], MARGIN["top"]
        self.parts.append(f'<rect x="{l}" y="{t}" width="{self.pw}" height="{self.ph}" fill="none" stroke="black"/>')
        for v in _nice_ticks(self.x0, self.x1):
            x = self.px(v)
            self.parts.append(f'<line x1="{x:.1f}" y1="{t + self.ph}" x2="{x:.1f}" y2="{t + self.ph + 5}" stroke="black"/>')
            self.parts.append(f'<text x="{x:.1f}" y="{t + self.ph + 18}" text-anchor="middle">{v:.4g}</text>')
        for v in _nice_ticks(self.y0, self.y1):
            y = self.py(v)
            self.parts.append(f'<line x1="{l - 5}" y1="{y:.1f}" x2="{l}" y2="{y:.1f}" stroke="black"/>')
            self.parts.append(f'<text x="{l - 8}" y="{y + 4:.1f}" text-anchor="end">{v:.4g}</text>')
        self.parts.append(f'<text x="{l + self.pw / 2:.1f}" y="{HEIGHT - 12}" text-anchor="middle">{escape(xlabel)}</text>')
        cy = t + self.ph / 2
        self.parts.append(f'<text x="16" y="{cy:.1f}" text-anchor="middle" transform="rotate(-90 16 {cy:.1f})">{escape(ylabel)}</text>')

    def polyline(self, x, y, color, dash=None):
        ok = np.isfinite(y)
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(self.px(x[ok]), self.py(y[ok])))
        d = f' stroke-dasharray="{dash}"' if dash else ""
        self.parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.6"{d}/>')

    def band(self, x, lo, hi, color):
        ok = np.isfinite(lo) & np.isfinite(hi)
        xs = x[ok]
        top = [f"{a:.2f},{b:.2f}" for a, b in zip(self.px(xs), self.py(hi[ok]))]
        bot = [f"{a:.2f},{b:.2f}" for a, b in zip(self.px(xs[::-1]), self.py(lo[ok][::-1]))]
        self.parts.append(f'<polygon points="{" ".join(top + bot)}" fill="{color}" fill-opacity="0.2" stroke="none"/>')

    def legend(self, labels):
        x = WIDTH - MARGIN["right"] + 12
        for k, (label, color) in enumerate(labels):
            y = MARGIN["top"] + 14 + 18 * k
            self.parts.append(f'<line x1="{x}" y1="{y - 4}" x2="{x + 18}" y2="{y - 4}" stroke="{color}" stroke-width="2"/>')
            self.parts.append(f'<text x="{x + 24}" y="{y}">{escape(label)}</text>')

    def text(self):
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def curves_svg(curves, title="", xlabel="exposure", ylabel="outcome quantile") -> str:
    """Overlay several :class:`~qerf.quantile.QuantileCurve` objects, shading bands when present."""
    xs = np.concatenate([c.grid for c in curves])
    ys = [c.estimate for c in curves]
    ys += [c.lower for c in curves if c.lower is not None] + [c.upper for c in curves if c.upper is not None]
    yall = np.concatenate(ys)
    yall = yall[np.isfinite(yall)]
    ylo, yhi = (yall.min(), yall.max()) if yall.size else (0.0, 1.0)
    pad = 0.05 * (yhi - ylo) if yhi > ylo else 0.5
    cv = _Canvas((xs.min(), xs.max()), (ylo - pad, yhi + pad), title, xlabel, ylabel)
    labels = []
    for k, c in enumerate(curves):
        color = PALETTE[k % len(PALETTE)]
        if c.lower is not None and c.upper is not None:
            cv.band(c.grid, c.lower, c.upper, color)
        cv.polyline(c.grid, c.estimate, color)
        labels.append((f"tau={c.tau:g}", color))
    cv.legend(labels)
    return cv.text()


def balance_svg(reports, threshold=0.1, title="Covariate balance") -> str:
    """Horizontal dot chart of per-covariate absolute correlations, one colour per report."""
    names = list(reports[0].covariate_names)
    vmax = max([threshold] + [float(np.max(r.per_covariate_abs_corr, initial=0.0)) for r in reports])
    height_rows = len(names)
    cv = _Canvas((0.0, vmax * 1.1), (-0.5, height_rows - 0.5), title, "absolute correlation with exposure", "")
    for k, name in enumerate(names):
        y = cv.py(height_rows - 1 - k)
        cv.parts.append(f'<text x="{MARGIN["left"] + 4}" y="{y - 6:.1f}" font-size="10">{escape(name)}</text>')
    x = cv.px(threshold)
    cv.parts.append(f'<line x1="{x:.1f}" y1="{MARGIN["top"]}" x2="{x:.1f}" y2="{MARGIN["top"] + cv.ph}" '
                    'stroke="gray" stroke-dasharray="4,3"/>')
    labels = []
    for r_i, rep in enumerate(reports):
        color = PALETTE[r_i % len(PALETTE)]
        for k, v in enumerate(rep.per_covariate_abs_corr):
            cv.parts.append(f'<circle cx="{cv.px(v):.1f}" cy="{cv.py(height_rows - 1 - k):.1f}" r="4" fill="{color}"/>')
        labels.append((f"{rep.label} (AAC {rep.aac:.3f})", color))
    cv.legend(labels)
    return cv.text()


def write_svg(text, path):
    Path(path).write_text(text)
