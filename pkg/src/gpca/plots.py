"""Self-contained SVG line and bar charts (no plotting library needed)."""

import math
from xml.sax.saxutils import escape

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
_W, _H, _PAD = 640, 400, 60


def _ticks(lo, hi, n=5):
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def _frame(title, xlabel, ylabel):
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" font-family="sans-serif" font-size="12">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<text x="{_W / 2}" y="{_H - 10}" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="15" y="{_H / 2}" text-anchor="middle" transform="rotate(-90 15 {_H / 2})">{escape(ylabel)}</text>',
        f'<line x1="{_PAD}" y1="{_H - _PAD}" x2="{_W - _PAD}" y2="{_H - _PAD}" stroke="black"/>',
        f'<line x1="{_PAD}" y1="{_PAD}" x2="{_PAD}" y2="{_H - _PAD}" stroke="black"/>',
    ]


def line_chart(series, path, title="", xlabel="", ylabel="", log=False):
    """``series`` maps a label to (xs, ys). ``log`` plots both axes in log10."""
    tf = (lambda v: math.log10(v)) if log else (lambda v: v)
    pts = {k: ([tf(x) for x in xs], [tf(y) for y in ys]) for k, (xs, ys) in series.items()}
    allx = [x for xs, _ in pts.values() for x in xs]
    ally = [y for _, ys in pts.values() for y in ys]
    x0, x1 = min(allx), max(allx)
    y0, y1 = min(ally), max(ally)
    x1 = x1 if x1 > x0 else x0 + 1
    y1 = y1 if y1 > y0 else y0 + 1

    def sx(v):
        return _PAD + (v - x0) / (x1 - x0) * (_W - 2 * _PAD)

    def sy(v):
        return _H - _PAD - (v - y0) / (y1 - y0) * (_H - 2 * _PAD)

    out = _frame(title, xlabel, ylabel)
    for t in _ticks(x0, x1):
        label = f"{10 ** t:.3g}" if log else f"{t:.3g}"
        out.append(f'<text x="{sx(t):.1f}" y="{_H - _PAD + 16}" text-anchor="middle">{label}</text>')
    for t in _ticks(y0, y1):
        label = f"{10 ** t:.3g}" if log else f"{t:.3g}"
        out.append(f'<text x="{_PAD - 5}" y="{sy(t):.1f}" text-anchor="end">{label}</text>')
    for i, (name, (xs, ys)) in enumerate(pts.items()):
        color = _COLORS[i % len(_COLORS)]
        coords = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(xs, ys))
        out.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{_W - _PAD + 5}" y="{_PAD + 15 * i}" fill="{color}">{escape(name)}</text>')
    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out))


def bar_chart(groups, labels, values, path, title="", ylabel=""):
    """Grouped bars: ``values[g][k]`` is bar k of group g (NaN bars are skipped)."""
    finite = [v for row in values for v in row if math.isfinite(v)]
    top = max(finite) if finite else 1.0
    top = top if top > 0 else 1.0
    out = _frame(title, "", ylabel)
    gw = (_W - 2 * _PAD) / max(len(groups), 1)
    bw = gw / (len(labels) + 1)
    for g, (name, row) in enumerate(zip(groups, values)):
        gx = _PAD + g * gw
        for k, v in enumerate(row):
            if not math.isfinite(v):
                continue
            h = v / top * (_H - 2 * _PAD)
            out.append(f'<rect x="{gx + k * bw:.1f}" y="{_H - _PAD - h:.1f}" width="{bw:.1f}" '
                       f'height="{h:.1f}" fill="{_COLORS[k % len(_COLORS)]}"/>')
        out.append(f'<text x="{gx + gw / 2:.1f}" y="{_H - _PAD + 16}" text-anchor="middle" '
                   f'font-size="9">{escape(str(name))}</text>')
    for k, lab in enumerate(labels):
        out.append(f'<text x="{_W - _PAD + 5}" y="{_PAD + 15 * k}" fill="{_COLORS[k % len(_COLORS)]}">'
                   f'{escape(lab)}</text>')
    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out))
