"""Minimal SVG rendering of reference vs. quantized phase-plane trajectories."""

import csv
import os
from xml.sax.saxutils import escape, quoteattr

import numpy as np

COLORS = {"reference": "#1f77b4", "quantized": "#d62728"}


def read_rollout_csv(path):
    """``(quantized, reference)`` state arrays from a rollout CSV."""
    with open(path) as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    q = [i for i, name in enumerate(header) if name.startswith("xqs_")]
    r = [i for i, name in enumerate(header) if name.startswith("xref_")]
    if len(q) < 2 or len(r) != len(q):
        raise ValueError(f"{path}: not a rollout CSV with xqs_/xref_ columns")
    Q = np.array([[float(row[i]) for i in q[:2]] for row in body]).reshape(-1, 2)
    R = np.array([[float(row[i]) for i in r[:2]] for row in body]).reshape(-1, 2)
    return Q, R


def render_svg(quantized, reference, size=480, margin=24, title=None):
    """Two polylines on a common axis-equal frame; y points up."""
    pts = np.vstack([quantized, reference])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = max(float(np.max(hi - lo)), 1e-9)
    center = (lo + hi) / 2
    scale = (size - 2 * margin) / span

    def fmt(P):
        X = margin + (P[:, 0] - center[0]) * scale + (size - 2 * margin) / 2
        Y = margin + (center[1] - P[:, 1]) * scale + (size - 2 * margin) / 2
        return " ".join(f"{x:.3f},{y:.3f}" for x, y in zip(X, Y))

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    if title:
        out.append(f"<title>{escape(title)}</title>")
    for label, P in (("reference", reference), ("quantized", quantized)):
        out.append(
            f'<polyline class={quoteattr(label)} fill="none" stroke="{COLORS[label]}" '
            f'stroke-width="1.5" points="{fmt(P)}"/>'
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_rollout_csv(path, out_path=None):
    Q, R = read_rollout_csv(path)
    text = render_svg(Q, R, title=os.path.basename(str(path)))
    if out_path is not None:
        with open(out_path, "w") as fh:
            fh.write(text)
    return text
