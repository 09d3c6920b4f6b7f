"""File emission: CSV records/curves/tables, training logs, manifests, SVG charts.

CSV files carry a header row, '.' decimal separator and full round-trip float
formatting (repr of the Python float), and are written with '\\n' newlines so
identical inputs produce byte-identical files on any platform. The SVG writer
is a tiny hand-rolled polyline chart: deterministic output, parseable XML.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

from .analysis import (
    OMISSION_METRICS,
    SENSITIVITY_METRICS,
    AggregateCurve,
    OmissionRecord,
    SensitivityRecord,
    WordClassTable,
)
from .trainer import EpochStats

__all__ = [
    "PACKAGE_VERSION",
    "fmt",
    "write_csv",
    "write_sensitivity_csv",
    "write_omission_csv",
    "write_curves_csv",
    "write_classes_csv",
    "write_training_log_csv",
    "write_manifest",
    "svg_line_chart",
    "SENSITIVITY_COLUMNS",
    "OMISSION_COLUMNS",
]

PACKAGE_VERSION = "0.1.0"

SENSITIVITY_COLUMNS = ("caption_id", "position", "grad_image", "grad_prevword")
OMISSION_COLUMNS = ("caption_id", "position", "cos_multimodal", "cos_softmax",
                    "jsd_softmax", "cos_logits", "frac_neg_orig", "frac_neg_foil")

# CSV column -> record attribute for the two record kinds.
_SENS_FIELDS = dict(zip(SENSITIVITY_COLUMNS[2:], SENSITIVITY_METRICS))
_OMIS_FIELDS = dict(zip(OMISSION_COLUMNS[2:], OMISSION_METRICS))


def fmt(value) -> str:
    """Lossless cell formatting: strings/ints verbatim, floats via repr."""
    if isinstance(value, str):
        return value
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, int):
        return str(value)
    return repr(float(value))


def write_csv(path, header: Sequence[str], rows: Sequence[Sequence]):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")


def write_sensitivity_csv(path, records: Sequence[SensitivityRecord]):
    rows = [(r.caption_id, r.position,
             r.mean_abs_grad_image, r.mean_abs_grad_prevword) for r in records]
    write_csv(path, SENSITIVITY_COLUMNS, rows)


def write_omission_csv(path, records: Sequence[OmissionRecord]):
    rows = [(r.caption_id, r.position, r.cos_dist_multimodal, r.cos_dist_softmax,
             r.jsd_softmax, r.cos_dist_logits, r.frac_neg_logits_orig,
             r.frac_neg_logits_foil) for r in records]
    write_csv(path, OMISSION_COLUMNS, rows)


def write_curves_csv(path, curves: Sequence[AggregateCurve]):
    rows = []
    for curve in curves:
        for pos, pt in enumerate(curve.points):
            rows.append((curve.metric, pos, pt.mean, pt.count, pt.std))
    write_csv(path, ("metric", "position", "mean", "count", "std"), rows)


_CLASS_ORDER = ("ADJ", "ADP", "ADV", "CONJ", "DET", "NOUN", "NUM",
                "PRON", "PRT", "VERB", "END", "UNK")


def write_classes_csv(path, table: WordClassTable):
    present = [c for c in _CLASS_ORDER if any(c in row for row in table.rows)]
    extra = sorted(set(table.classes()) - set(present))
    columns = ["position", "count", *present, *extra]
    rows = []
    for pos, row in enumerate(table.rows):
        rows.append((pos, table.counts[pos],
                     *[row.get(c, 0.0) for c in [*present, *extra]]))
    write_csv(path, columns, rows)


def write_training_log_csv(path, log: Sequence[EpochStats]):
    rows = [(e.epoch, e.train_loss, e.val_loss, e.seconds) for e in log]
    write_csv(path, ("epoch", "train_loss", "val_loss", "seconds"), rows)


def write_manifest(out_dir, command: str, config: Mapping, seed) -> Path:
    """Record everything needed to rerun a command next to its outputs."""
    path = Path(out_dir) / "manifest.json"
    payload = {
        "command": command,
        "config": dict(config),
        "seed": seed,
        "versions": {
            "package": PACKAGE_VERSION,
            "checkpoint_format": 1,
            "dataset_format": 1,
        },
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd",
            "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


def svg_line_chart(
    path,
    series: Mapping[str, Sequence[tuple[float, float]]],
    title: str,
    x_label: str = "position",
    y_label: str = "value",
    width: int = 640,
    height: int = 400,
):
    """Minimal multi-series line chart; one polyline and legend entry per series."""
    if not series:
        raise ValueError("svg_line_chart: no series")
    pts_all = [p for pts in series.values() for p in pts]
    if not pts_all:
        raise ValueError("svg_line_chart: series contain no points")
    xs = [p[0] for p in pts_all]
    ys = [p[1] for p in pts_all]
    x_min, x_max = min(xs), max(xs)
    y_min, y_max = min(ys), max(ys)
    if x_max == x_min:
        x_max = x_min + 1.0
    if y_max == y_min:
        y_max = y_min + 1.0
    left, right, top, bottom = 60, 16, 28, 44
    plot_w = width - left - right
    plot_h = height - top - bottom

    def sx(x: float) -> float:
        return left + (x - x_min) / (x_max - x_min) * plot_w

    def sy(y: float) -> float:
        return top + plot_h - (y - y_min) / (y_max - y_min) * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" '
        f'font-family="sans-serif" font-size="13">{escape(title)}</text>',
        f'<line x1="{left}" y1="{top + plot_h}" x2="{left + plot_w}" '
        f'y2="{top + plot_h}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="black"/>',
        f'<text x="{left + plot_w / 2:.1f}" y="{height - 8}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="11">{escape(x_label)}</text>',
        f'<text x="14" y="{top + plot_h / 2:.1f}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="11" '
        f'transform="rotate(-90 14 {top + plot_h / 2:.1f})">{escape(y_label)}</text>',
        f'<text x="{left - 6}" y="{top + plot_h + 4}" text-anchor="end" '
        f'font-family="sans-serif" font-size="10">{y_min:.4g}</text>',
        f'<text x="{left - 6}" y="{top + 4}" text-anchor="end" '
        f'font-family="sans-serif" font-size="10">{y_max:.4g}</text>',
        f'<text x="{left}" y="{top + plot_h + 14}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="10">{x_min:.4g}</text>',
        f'<text x="{left + plot_w}" y="{top + plot_h + 14}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="10">{x_max:.4g}</text>',
    ]
    for i, (label, pts) in enumerate(series.items()):
        color = _PALETTE[i % len(_PALETTE)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in pts)
        parts.append(f'<polyline points="{coords}" fill="none" '
                     f'stroke="{color}" stroke-width="1.5"/>')
        ly = top + 14 + 14 * i
        parts.append(f'<line x1="{left + plot_w - 110}" y1="{ly - 4}" '
                     f'x2="{left + plot_w - 90}" y2="{ly - 4}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{left + plot_w - 84}" y="{ly}" '
                     f'font-family="sans-serif" font-size="10">{escape(label)}</text>')
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(parts))
        fh.write("\n")
