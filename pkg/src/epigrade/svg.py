"""Small SVG documents: attention bar charts and segment overlays."""

from __future__ import annotations

import base64
import io
from xml.sax.saxutils import escape

import numpy as np
from PIL import Image

from .encoder import EmptySequence


def emit_attention_svg(report, width: int = 480, height: int = 220, pad: int = 28) -> str:
    """Bars of height proportional to each weight with a dotted line at the mean.

    Bars strictly above the mean get class ``above`` and a green fill.
    """
    alphas = np.asarray(report.alphas, dtype=np.float64)
    n = len(alphas)
    if n == 0:
        raise EmptySequence("attention report has no segments")
    mean = 1.0 / n
    top = max(float(alphas.max()), mean)
    plot_w, plot_h = width - 2 * pad, height - 2 * pad
    bw = plot_w / n
    base = height - pad

    def y_of(v):
        return base - plot_h * v / top

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f"<title>{escape(str(report.image_id))}: {escape(str(report.predicted))}</title>",
        f'<line class="axis" x1="{pad}" y1="{base}" x2="{width - pad}" y2="{base}" stroke="black"/>',
    ]
    for i, a in enumerate(alphas):
        cls = "bar above" if a > mean else "bar"
        fill = "#2e9d4d" if a > mean else "#8c8c8c"
        y = y_of(a)
        parts.append(
            f'<rect class="{cls}" data-index="{i + 1}" data-alpha="{a:.6g}" x="{pad + i * bw + 0.1 * bw:.2f}" y="{y:.2f}" '
            f'width="{0.8 * bw:.2f}" height="{base - y:.2f}" fill="{fill}"/>'
        )
    ym = y_of(mean)
    parts.append(f'<line class="mean" x1="{pad}" y1="{ym:.2f}" x2="{width - pad}" y2="{ym:.2f}" stroke="#c0392b" stroke-dasharray="3,3"/>')
    parts.append("</svg>")
    return "\n".join(parts)


def _png_data_uri(image: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(buf, format="PNG")
    return "data:image/png;base64," + base64.b64encode(buf.getvalue()).decode("ascii")


def emit_overlay_svg(image: np.ndarray, quads: list[np.ndarray]) -> str:
    """Source image with each segment's quadrilateral outlined and numbered."""
    h, w = image.shape[:2]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" xmlns:xlink="http://www.w3.org/1999/xlink" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
        f'<image x="0" y="0" width="{w}" height="{h}" xlink:href="{_png_data_uri(image)}"/>',
    ]
    for i, q in enumerate(quads, start=1):
        q = np.asarray(q, dtype=np.float64)
        # pixel centers sit at integer coordinates; SVG pixels start at their corners
        pts = " ".join(f"{x + 0.5:.2f},{y + 0.5:.2f}" for x, y in q)
        cx, cy = q.mean(axis=0) + 0.5
        parts.append(f'<polygon class="segment" data-index="{i}" points="{pts}" fill="none" stroke="#1f77b4" stroke-width="1.5"/>')
        parts.append(f'<text x="{cx:.1f}" y="{cy:.1f}" font-size="12" text-anchor="middle" fill="#1f77b4">{i}</text>')
    parts.append("</svg>")
    return "\n".join(parts)
