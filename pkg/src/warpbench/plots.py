"""Learning-curve charts and warp contact sheets.

Charts are emitted as self-contained SVG with fixed number formatting and
sorted iteration order, so identical results always produce byte-identical
files.  The figure convention follows the curves being reproduced: dashed
polylines for training error, solid for test error, x = samples per class,
y = mean error % over repeats.
"""

from collections import defaultdict
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ParameterError
from .warp import elastic_warp, generate_displacement_field
from .seeding import derive_seed

_CHART_W, _CHART_H = 640, 360
_MARGIN_L, _MARGIN_R, _MARGIN_T, _MARGIN_B = 64, 24, 40, 48


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def _mean_curves(results):
    """Group rows into {(classifier, recipe): (points, mean_train, mean_test)}."""
    cells = defaultdict(lambda: defaultdict(list))
    for r in results:
        cells[(r.classifier, r.recipe)][r.n_per_class].append(
            (r.train_error_percent, r.test_error_percent)
        )
    curves = {}
    for key in sorted(cells):
        points = sorted(cells[key])
        train = [float(np.mean([e[0] for e in cells[key][p]])) for p in points]
        test = [float(np.mean([e[1] for e in cells[key][p]])) for p in points]
        curves[key] = (points, train, test)
    return curves


def _svg_chart(title: str, points, train, test, y_origin: int) -> list:
    """SVG fragment for one chart placed at vertical offset y_origin."""
    x0, x1 = _MARGIN_L, _CHART_W - _MARGIN_R
    y0, y1 = y_origin + _CHART_H - _MARGIN_B, y_origin + _MARGIN_T

    p_lo, p_hi = min(points), max(points)
    e_hi = max(max(train), max(test), 1e-9)
    e_hi *= 1.1

    def sx(p):
        if p_hi == p_lo:
            return (x0 + x1) / 2.0
        return x0 + (x1 - x0) * (p - p_lo) / (p_hi - p_lo)

    def sy(e):
        return y0 - (y0 - y1) * (e / e_hi)

    parts = [
        f'<rect x="{x0}" y="{y1}" width="{x1 - x0}" height="{y0 - y1}" '
        'fill="none" stroke="#888" stroke-width="1"/>',
        f'<text x="{(x0 + x1) // 2}" y="{y_origin + 24}" text-anchor="middle" '
        f'font-size="14" font-family="sans-serif">{title}</text>',
        f'<text x="{(x0 + x1) // 2}" y="{y0 + 36}" text-anchor="middle" '
        'font-size="12" font-family="sans-serif">samples per class</text>',
        f'<text x="{x0 - 48}" y="{(y0 + y1) // 2}" text-anchor="middle" font-size="12" '
        f'font-family="sans-serif" transform="rotate(-90 {x0 - 48} {(y0 + y1) // 2})">error %</text>',
    ]
    for p in points:
        parts.append(
            f'<text x="{_fmt(sx(p))}" y="{y0 + 16}" text-anchor="middle" '
            f'font-size="11" font-family="sans-serif">{p}</text>'
        )
        parts.append(
            f'<line x1="{_fmt(sx(p))}" y1="{y0}" x2="{_fmt(sx(p))}" y2="{y0 + 4}" '
            'stroke="#888" stroke-width="1"/>'
        )
    for frac in (0.0, 0.5, 1.0):
        e = e_hi * frac
        parts.append(
            f'<text x="{x0 - 6}" y="{_fmt(sy(e) + 4)}" text-anchor="end" '
            f'font-size="11" font-family="sans-serif">{_fmt(e)}</text>'
        )

    for values, dash, color, label, ly in (
        (train, ' stroke-dasharray="6 4"', "#cc3333", "train error %", y1 + 14),
        (test, "", "#2255cc", "test error %", y1 + 30),
    ):
        coords = " ".join(f"{_fmt(sx(p))},{_fmt(sy(e))}" for p, e in zip(points, values))
        if len(points) >= 2:
            parts.append(
                f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>'
            )
        for p, e in zip(points, values):
            parts.append(f'<circle cx="{_fmt(sx(p))}" cy="{_fmt(sy(e))}" r="3" fill="{color}"/>')
        parts.append(
            f'<line x1="{x1 - 140}" y1="{ly - 4}" x2="{x1 - 110}" y2="{ly - 4}" '
            f'stroke="{color}" stroke-width="1.5"{dash}/>'
        )
        parts.append(
            f'<text x="{x1 - 104}" y="{ly}" font-size="11" font-family="sans-serif">{label}</text>'
        )
    return parts


def emit_learning_curve_plot(results, path) -> None:
    """Write one SVG with a chart per (classifier, recipe) pair."""
    curves = _mean_curves(results)
    if not curves:
        raise ParameterError("no results to plot")
    total_h = _CHART_H * len(curves)
    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_CHART_W}" height="{total_h}" '
        f'viewBox="0 0 {_CHART_W} {total_h}">',
        f'<rect x="0" y="0" width="{_CHART_W}" height="{total_h}" fill="white"/>',
    ]
    for i, ((classifier, recipe), (points, train, test)) in enumerate(sorted(curves.items())):
        parts.extend(_svg_chart(f"{classifier} / {recipe}", points, train, test, i * _CHART_H))
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")


def render_warp_contact_sheet(
    dataset,
    alpha: float,
    sigma: float,
    seed: int,
    path,
    per_class: int = 3,
    upscale: int = 4,
) -> None:
    """PNG grid for visual label-integrity checks: original rows next to
    their warped versions at the given displacement strength."""
    if len(dataset) == 0:
        raise ParameterError("empty dataset")
    cols = []
    for cls in range(dataset.class_count):
        idx = dataset.class_indices(cls)[:per_class]
        for j, i in enumerate(idx):
            original = dataset.images[i]
            field = generate_displacement_field(
                dataset.height, dataset.width, sigma, derive_seed(seed, cls, j)
            )
            warped = elastic_warp(original, field, alpha)
            cols.append(np.concatenate([original, warped], axis=0))
    sheet = np.concatenate(cols, axis=1)
    img = Image.fromarray((sheet * 255).round().astype(np.uint8), mode="L")
    img = img.resize((img.width * upscale, img.height * upscale), Image.NEAREST)
    img.save(path)
