"""Self-contained SVG figures: line plots over g and ternary maps over the simplex.

Every plotted datum carries its exact value in ``data-*`` attributes (floats
written with ``repr``), so a figure can be checked against the table it was
drawn from.
"""

from __future__ import annotations

import math
from pathlib import Path
from xml.sax.saxutils import escape, quoteattr

from .pipeline import parse_observable, parse_point

WIDTH, HEIGHT = 640, 420
MARGIN = 60
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
# anchor colors for the sequential map (dark blue -> teal -> yellow)
_RAMP = ((68, 1, 84), (59, 82, 139), (33, 145, 140), (94, 201, 98), (253, 231, 37))


def _num(x: float) -> str:
    return f"{x:.2f}"


def _header(title: str) -> list[str]:
    return [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2}" y="24" text-anchor="middle" font-size="15">{escape(title)}</text>',
    ]


def _ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    step = 10 ** math.floor(math.log10((hi - lo) / count))
    for mult in (1, 2, 5, 10):
        if (hi - lo) / (step * mult) <= count:
            step *= mult
            break
    start = math.ceil(lo / step) * step
    return [start + k * step for k in range(int((hi - start) / step + 1e-9) + 1)]


def line_plot(series: list[dict], title: str, xlabel: str, ylabel: str, vlines=()) -> str:
    """``series``: dicts with ``label``, ``x``, ``y`` and ``style`` ("line" or "markers")."""
    xs = [x for s in series for x in s["x"]] + list(vlines)
    ys = [y for s in series for y in s["y"] if math.isfinite(y)]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    pad = 0.05 * (y1 - y0 or 1.0)
    y0, y1 = y0 - pad, y1 + pad
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    left, right, top, bottom = MARGIN, WIDTH - 20, 40, HEIGHT - MARGIN

    def px(x):
        return left + (x - x0) / (x1 - x0) * (right - left)

    def py(y):
        return bottom - (y - y0) / (y1 - y0) * (bottom - top)

    out = _header(title)
    out.append(f'<g stroke="black" fill="none"><rect x="{left}" y="{top}" width="{right - left}" '
               f'height="{bottom - top}"/></g>')
    for v in vlines:
        out.append(f'<line class="train-mark" data-x={quoteattr(repr(float(v)))} x1="{_num(px(v))}" '
                   f'x2="{_num(px(v))}" y1="{top}" y2="{bottom}" stroke="#bbbbbb" stroke-width="1"/>')
    for t in _ticks(x0, x1):
        out.append(f'<text x="{_num(px(t))}" y="{bottom + 16}" text-anchor="middle">{t:g}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<text x="{left - 6}" y="{_num(py(t) + 4)}" text-anchor="end">{t:.3g}</text>')
    out.append(f'<text x="{(left + right) / 2}" y="{HEIGHT - 18}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{(top + bottom) / 2}" text-anchor="middle" '
               f'transform="rotate(-90 16 {(top + bottom) / 2})">{escape(ylabel)}</text>')
    for k, s in enumerate(series):
        color = PALETTE[k % len(PALETTE)]
        label = quoteattr(s["label"])
        out.append(f'<g class="series" data-label={label}>')
        pts = [(x, y) for x, y in zip(s["x"], s["y"]) if math.isfinite(y)]
        if s.get("style", "line") == "line" and len(pts) > 1:
            path = " ".join(f"{_num(px(x))},{_num(py(y))}" for x, y in pts)
            out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        for x, y in pts:
            r = 1.5 if s.get("style", "line") == "line" else 3
            out.append(f'<circle class="datum" data-x={quoteattr(repr(float(x)))} data-y={quoteattr(repr(float(y)))} '
                       f'cx="{_num(px(x))}" cy="{_num(py(y))}" r="{r}" fill="{color}"/>')
        out.append("</g>")
        ly = top + 14 + 16 * k
        out.append(f'<circle cx="{right - 120}" cy="{ly - 4}" r="4" fill="{color}"/>')
        out.append(f'<text x="{right - 110}" y="{ly}">{escape(s["label"])}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _color(t: float) -> str:
    t = min(max(t, 0.0), 1.0) * (len(_RAMP) - 1)
    i = min(int(t), len(_RAMP) - 2)
    f = t - i
    rgb = [round(a + (b - a) * f) for a, b in zip(_RAMP[i], _RAMP[i + 1])]
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def _ternary_xy(p, size: float, ox: float, oy: float) -> tuple[float, float]:
    # g1 at bottom-left, g2 at bottom-right, g3 at the top
    g1, g2, g3 = p
    x = ox + size * (g2 + g3 / 2)
    y = oy - size * g3 * math.sqrt(3) / 2
    return x, y


def ternary_map(points: list[tuple], values: list[float], title: str, marks=(), step: float = 0.1) -> str:
    """Heat map over the simplex; each point is drawn as a hexagonal cell of lattice spacing ``step``."""
    size = 420.0
    ox, oy = 80.0, HEIGHT - 50.0
    finite = [v for v in values if math.isfinite(v)]
    lo, hi = (min(finite), max(finite)) if finite else (0.0, 1.0)
    span = hi - lo or 1.0
    out = _header(title)
    corners = [_ternary_xy(c, size, ox, oy) for c in ((1, 0, 0), (0, 1, 0), (0, 0, 1))]
    out.append('<polygon points="' + " ".join(f"{_num(x)},{_num(y)}" for x, y in corners)
               + '" fill="none" stroke="black"/>')
    for (x, y), name, dx, dy in zip(corners, ("g1", "g2", "g3"), (-18, 18, 0), (14, 14, -8)):
        out.append(f'<text x="{_num(x + dx)}" y="{_num(y + dy)}" text-anchor="middle">{name}</text>')
    r = size * step / math.sqrt(3)
    for p, v in zip(points, values):
        cx, cy = _ternary_xy(p, size, ox, oy)
        hexagon = " ".join(f"{_num(cx + r * math.cos(math.pi / 6 + k * math.pi / 3))},"
                           f"{_num(cy + r * math.sin(math.pi / 6 + k * math.pi / 3))}" for k in range(6))
        fill = _color((v - lo) / span) if math.isfinite(v) else "#ffffff"
        out.append(f'<polygon class="datum" data-point={quoteattr(",".join(repr(float(x)) for x in p))} '
                   f'data-value={quoteattr(repr(float(v)))} points="{hexagon}" fill="{fill}" stroke="none"/>')
    for p in marks:
        cx, cy = _ternary_xy(p, size, ox, oy)
        out.append(f'<g class="train-mark" data-point={quoteattr(",".join(repr(float(x)) for x in p))} '
                   f'stroke="#888888" stroke-width="1.5">'
                   f'<line x1="{_num(cx - 4)}" y1="{_num(cy - 4)}" x2="{_num(cx + 4)}" y2="{_num(cy + 4)}"/>'
                   f'<line x1="{_num(cx - 4)}" y1="{_num(cy + 4)}" x2="{_num(cx + 4)}" y2="{_num(cy - 4)}"/></g>')
    bx = WIDTH - 60
    for k in range(50):
        out.append(f'<rect x="{bx}" y="{_num(340 - 5 * k)}" width="16" height="5.5" fill="{_color(k / 49)}"/>')
    out.append(f'<text x="{bx + 8}" y="355" text-anchor="middle">{lo:.3g}</text>')
    out.append(f'<text x="{bx + 8}" y="84" text-anchor="middle">{hi:.3g}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _curve(rows, obs, column):
    sel = sorted((parse_point(r["point"])[0], r[column]) for r in rows if r["observable"] == obs)
    return [x for x, _ in sel], [y for _, y in sel]


def write_figures(rows: list[dict], family: str, train_points, out_dir) -> list[Path]:
    """Figures for an evaluation table; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    observables = sorted({r["observable"] for r in rows})
    written = []

    def save(name, text):
        path = out / name
        path.write_text(text)
        written.append(path)

    if family == "tfim":
        vlines = [p[0] for p in train_points]
        if "energy" in observables:
            xe, ye = _curve(rows, "energy", "exact")
            xp, yp = _curve(rows, "energy", "predicted")
            save("energy.svg", line_plot([
                {"label": "exact", "x": xe, "y": ye, "style": "line"},
                {"label": "predicted", "x": xp, "y": yp, "style": "markers"},
            ], "Ground-state energy", "g", "E0", vlines))
        for kind, label in (("zz", "<Z_i Z_i+n>"), ("xstr", "<X_i ... X_i+n-1>")):
            sel = sorted((o for o in observables if parse_observable(o)[0] == kind), key=lambda o: parse_observable(o)[1])
            if not sel:
                continue
            series = []
            for o in sel:
                x, y = _curve(rows, o, "predicted")
                series.append({"label": f"n={parse_observable(o)[1]}", "x": x, "y": y, "style": "line"})
            save(f"{kind}.svg", line_plot(series, label, "g", label, vlines))
    else:
        for o in observables:
            sel = [r for r in rows if r["observable"] == o]
            pts = [parse_point(r["point"]) for r in sel]
            for column in ("predicted", "exact"):
                save(f"{o}_{column}.svg", ternary_map(pts, [r[column] for r in sel], f"{o} ({column})", train_points))
    return written
