"""Minimal hand-built SVG plots (no plotting library, byte-stable output)."""

from __future__ import annotations

from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#2ca02c", "#ffbf00", "#9467bd", "#d62728", "#8c564b", "#e377c2", "#7f7f7f",
           "#17becf", "#bcbd22")
REGION_PALETTE = ("#c6dbef", "#c7e9c0", "#fff2b3", "#dadaeb", "#fcbba1", "#e5d3c9", "#fbd3ea", "#d9d9d9",
                  "#c2eef2", "#eded9e")


def _f(v: float) -> str:
    return f"{v:.2f}"


def _doc(width: int, height: int, body: list[str]) -> str:
    head = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">'
    )
    return "\n".join(['<?xml version="1.0" encoding="UTF-8"?>', head, *body, "</svg>"]) + "\n"


def learning_curve(curves: dict[str, list[float]], width: int = 640, height: int = 400) -> str:
    """Accuracy against round, one polyline per strategy."""
    left, right, top, bottom = 60, 140, 30, 50
    pw, ph = width - left - right, height - top - bottom
    n_rounds = max((len(c) for c in curves.values()), default=1)
    xmax = max(n_rounds - 1, 1)

    def px(i):
        return left + pw * i / xmax

    def py(acc):
        return top + ph * (1.0 - acc)

    body = [
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="white" stroke="black"/>',
        f'<text x="{left + pw / 2}" y="{height - 12}" text-anchor="middle">acquisition round</text>',
        f'<text x="16" y="{top + ph / 2}" transform="rotate(-90 16 {top + ph / 2})" '
        'text-anchor="middle">test accuracy</text>',
    ]
    for tick in range(0, 11, 2):
        y = py(tick / 10)
        body.append(f'<line x1="{left - 4}" y1="{_f(y)}" x2="{left}" y2="{_f(y)}" stroke="black"/>')
        body.append(f'<text x="{left - 8}" y="{_f(y + 4)}" text-anchor="end">{tick / 10:.1f}</text>')
    for i in range(n_rounds):
        body.append(f'<text x="{_f(px(i))}" y="{top + ph + 18}" text-anchor="middle">{i + 1}</text>')
    for j, (name, accs) in enumerate(curves.items()):
        colour = PALETTE[j % len(PALETTE)]
        pts = " ".join(f"{_f(px(i))},{_f(py(a))}" for i, a in enumerate(accs))
        body.append(f'<polyline points="{pts}" fill="none" stroke="{colour}" stroke-width="2"/>')
        ly = top + 16 + 18 * j
        body.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 30}" y2="{ly}" '
                    f'stroke="{colour}" stroke-width="2"/>')
        body.append(f'<text x="{left + pw + 36}" y="{ly + 4}">{escape(name)}</text>')
    return _doc(width, height, body)


def decision_scatter(scatter, size: int = 480) -> str:
    """Predicted class regions with the pool on top; acquired points are ringed."""
    margin = 30
    gx, gy = scatter.grid_x, scatter.grid_y
    x0, x1, y0, y1 = gx[0], gx[-1], gy[0], gy[-1]
    span = size - 2 * margin

    def sx(v):
        return margin + span * (v - x0) / (x1 - x0)

    def sy(v):
        return margin + span * (1.0 - (v - y0) / (y1 - y0))

    cw = span / (len(gx) - 1)
    ch = span / (len(gy) - 1)
    body = [f'<text x="{size / 2}" y="18" text-anchor="middle">{escape(scatter.title)}</text>']
    for r in range(len(gy)):
        for c in range(len(gx)):
            fill = REGION_PALETTE[int(scatter.grid_pred[r, c]) % len(REGION_PALETTE)]
            body.append(f'<rect x="{_f(sx(gx[c]) - cw / 2)}" y="{_f(sy(gy[r]) - ch / 2)}" '
                        f'width="{_f(cw)}" height="{_f(ch)}" fill="{fill}"/>')
    acquired = set(int(i) for i in scatter.acquired)
    for i, (x, y) in enumerate(scatter.features):
        colour = "#555555" if scatter.is_noisy[i] else PALETTE[int(scatter.labels[i]) % len(PALETTE)]
        if i in acquired:
            body.append(f'<circle cx="{_f(sx(x))}" cy="{_f(sy(y))}" r="3.5" fill="{colour}" '
                        'stroke="black" stroke-width="1"/>')
        else:
            body.append(f'<circle cx="{_f(sx(x))}" cy="{_f(sy(y))}" r="1.2" fill="{colour}" '
                        'fill-opacity="0.5"/>')
    return _doc(size, size, body)
