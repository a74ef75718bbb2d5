"""Minimal standalone SVG charts: ROC curve, waterfall and signature bars.

Output is plain text built from fixed-precision numbers so identical inputs
give byte-identical files.
"""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .attribution import SignatureDescription, Waterfall

W, H = 640, 420
PAD = 60


def _f(x: float) -> str:
    return f"{x:.2f}"


def _doc(body: list[str], width: int = W, height: int = H) -> str:
    head = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">'
    )
    return "\n".join([head, f'<rect width="{width}" height="{height}" fill="white"/>', *body, "</svg>"]) + "\n"


def _text(x, y, s, anchor="start", size=12, weight="normal") -> str:
    return f'<text x="{_f(x)}" y="{_f(y)}" text-anchor="{anchor}" font-size="{size}" font-weight="{weight}">{escape(s)}</text>'


def roc_svg(fpr: np.ndarray, tpr: np.ndarray, auc: float, title: str = "ROC curve") -> str:
    side = H - 2 * PAD
    x0, y0 = PAD, H - PAD
    px = lambda v: x0 + v * side  # noqa: E731
    py = lambda v: y0 - v * side  # noqa: E731
    pts = " ".join(f"{_f(px(a))},{_f(py(b))}" for a, b in zip(fpr, tpr))
    body = [
        f'<rect x="{x0}" y="{PAD}" width="{side}" height="{side}" fill="none" stroke="#888"/>',
        f'<line x1="{_f(px(0))}" y1="{_f(py(0))}" x2="{_f(px(1))}" y2="{_f(py(1))}" stroke="#bbb" stroke-dasharray="4 4"/>',
        f'<polyline points="{pts}" fill="none" stroke="#1f4e9c" stroke-width="2"/>',
        _text(W / 2, PAD - 25, f"{title} (AUC = {auc:.3f})", "middle", 14, "bold"),
        _text(x0 + side / 2, y0 + 35, "False positive rate", "middle"),
        f'<text x="{PAD - 35}" y="{_f(y0 - side / 2)}" text-anchor="middle" transform="rotate(-90 {PAD - 35} {_f(y0 - side / 2)})">True positive rate</text>',
    ]
    for v in (0.0, 0.5, 1.0):
        body.append(_text(px(v), y0 + 16, f"{v:.1f}", "middle", 10))
        body.append(_text(x0 - 6, py(v) + 4, f"{v:.1f}", "end", 10))
    return _doc(body)


def waterfall_svg(wf: Waterfall, title: str = "Contribution breakdown") -> str:
    steps = wf.steps
    rows = len(steps) + 2
    row_h = 24
    height = PAD + rows * row_h + 30
    label_w = 180
    plot_w = W - label_w - 40
    vals = [wf.base_value, wf.prediction, *(s.start for s in steps), *(s.end for s in steps)]
    lo, hi = min(vals), max(vals)
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    px = lambda v: label_w + (v - lo) / (hi - lo) * plot_w  # noqa: E731
    body = [_text(W / 2, 25, title, "middle", 14, "bold")]
    y = PAD
    body.append(_text(label_w - 8, y + 15, f"base value {wf.base_value:.4f}", "end"))
    body.append(f'<line x1="{_f(px(wf.base_value))}" y1="{y}" x2="{_f(px(wf.base_value))}" y2="{y + (rows - 1) * row_h}" stroke="#999" stroke-dasharray="3 3"/>')
    for s in steps:
        y += row_h
        a, b = sorted((px(s.start), px(s.end)))
        color = "#c0392b" if s.value > 0 else "#2e86c1"
        body.append(_text(label_w - 8, y + 15, s.label, "end"))
        body.append(f'<rect x="{_f(a)}" y="{y + 4}" width="{_f(max(b - a, 0.5))}" height="{row_h - 8}" fill="{color}"/>')
        body.append(_text(max(a, b) + 4, y + 15, f"{s.value:+.4f}", "start", 10))
    y += row_h
    body.append(_text(label_w - 8, y + 15, f"prediction {wf.prediction:.4f}", "end", 12, "bold"))
    body.append(f'<line x1="{_f(px(wf.prediction))}" y1="{PAD}" x2="{_f(px(wf.prediction))}" y2="{y + row_h}" stroke="#333"/>')
    return _doc(body, W, height)


def signature_svg(desc: SignatureDescription, title: str | None = None) -> str:
    entries = desc.entries
    row_h = 22
    inset_h = 90 if desc.hist_counts is not None else 0
    height = PAD + len(entries) * row_h + inset_h + 40
    label_w = 200
    half = (W - label_w - 40) / 2
    mid = label_w + half
    body = [_text(W / 2, 25, title or f"Signature of source {desc.source}", "middle", 14, "bold")]
    body.append(f'<line x1="{_f(mid)}" y1="{PAD - 5}" x2="{_f(mid)}" y2="{PAD + len(entries) * row_h}" stroke="#999"/>')
    for i, e in enumerate(entries):
        y = PAD + i * row_h
        w = abs(e.bar) * half
        x = mid if e.bar >= 0 else mid - w
        color = "#c0392b" if e.bar >= 0 else "#2e86c1"
        body.append(_text(label_w - 8, y + 14, f"{e.variable} ({e.weight:+.3f})", "end"))
        body.append(f'<rect x="{_f(x)}" y="{y + 3}" width="{_f(w)}" height="{row_h - 6}" fill="{color}"/>')
    if desc.hist_counts is not None:
        y0 = PAD + len(entries) * row_h + 20
        logc = desc.log_counts
        top = float(logc.max()) if logc.max() > 0 else 1.0
        nb = len(logc)
        bw = (W - 2 * PAD) / nb
        body.append(_text(PAD, y0 - 4, "expression histogram (log10 1+count)", "start", 10))
        for i, c in enumerate(logc):
            h = c / top * (inset_h - 20)
            body.append(f'<rect x="{_f(PAD + i * bw)}" y="{_f(y0 + inset_h - 20 - h)}" width="{_f(bw * 0.9)}" height="{_f(h)}" fill="#7f8c8d"/>')
        e0, e1 = desc.hist_edges[0], desc.hist_edges[-1]
        body.append(_text(PAD, y0 + inset_h - 4, f"{e0:.2f}", "start", 10))
        body.append(_text(W - PAD, y0 + inset_h - 4, f"{e1:.2f}", "end", 10))
    return _doc(body, W, height)


def write(path: str | Path, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8")
