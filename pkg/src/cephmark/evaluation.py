"""Radial-error metrology and table assembly.

Distances are reported in centimetres.  A prediction decoded at network
resolution is mapped back to original pixels with real-valued ratios before
the distance is taken; nothing is rounded until a table is printed.
"""
from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Mapping, Sequence

import numpy as np

from .data import LANDMARKS, LandmarkAnnotation

MODEL_VS_ANNOTATOR = "model_vs_annotator"
ANNOTATOR_PAIRWISE = "annotator_pairwise"
COMPARISON = "comparison"


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class PixelSpacing:
    cm_per_px_x: float
    cm_per_px_y: float

    def __post_init__(self):
        if not (self.cm_per_px_x > 0 and self.cm_per_px_y > 0):
            raise EvalError(f"pixel spacing must be positive, got "
                            f"({self.cm_per_px_x}, {self.cm_per_px_y})")


@dataclass
class EvalReport:
    """Landmark rows of per-column distances (cm) plus an optional row-mean column."""

    columns: list[str]
    rows: dict[str, list[float]]
    comparison_kind: str = MODEL_VS_ANNOTATOR
    spacing: PixelSpacing | None = None
    with_mean: bool = True
    notes: list[str] = field(default_factory=list)

    def row_mean(self, landmark: str) -> float:
        vals = self.rows[landmark]
        return math.fsum(vals) / len(vals)

    @property
    def means(self) -> dict[str, float]:
        return {k: self.row_mean(k) for k in self.rows}

    @property
    def overall_mean(self) -> float:
        if not self.rows:
            return float("nan")
        return math.fsum(self.means.values()) / len(self.rows)

    def column_means(self) -> list[float]:
        if not self.rows:
            return []
        cols = list(zip(*self.rows.values()))
        return [math.fsum(c) / len(c) for c in cols]


def decode_heatmap(channel) -> tuple[int, int]:
    """``(x, y)`` of the channel maximum; ties go to the first row-major index."""
    arr = np.asarray(getattr(channel, "data", channel))
    if arr.ndim != 2 or arr.size == 0:
        raise EvalError(f"expected a non-empty 2-d channel, got shape {arr.shape}")
    y, x = np.unravel_index(int(np.argmax(arr)), arr.shape)
    return int(x), int(y)


def decode_stack(stack) -> list[tuple[int, int]]:
    arr = np.asarray(getattr(stack, "data", stack))
    return [decode_heatmap(c) for c in arr]


def radial_error_cm(pred: tuple[float, float], truth: tuple[float, float],
                    resized_hw: tuple[int, int], original_hw: tuple[int, int],
                    spacing: PixelSpacing) -> float:
    if not isinstance(spacing, PixelSpacing):
        raise EvalError("spacing must be a PixelSpacing")
    rh, rw = resized_hw
    oh, ow = original_hw
    px, py = pred
    tx, ty = truth
    if not (0 <= px < rw and 0 <= py < rh):
        raise EvalError(f"prediction ({px}, {py}) outside resized {rw}x{rh}")
    if not (0 <= tx < ow and 0 <= ty < oh):
        raise EvalError(f"truth ({tx}, {ty}) outside original {ow}x{oh}")
    dx = (px * ow / rw - tx) * spacing.cm_per_px_x
    dy = (py * oh / rh - ty) * spacing.cm_per_px_y
    return math.hypot(dx, dy)


def point_distance_cm(a: tuple[float, float], b: tuple[float, float],
                      spacing: PixelSpacing) -> float:
    """Distance between two points in the same (original) pixel frame."""
    return math.hypot((a[0] - b[0]) * spacing.cm_per_px_x, (a[1] - b[1]) * spacing.cm_per_px_y)


def build_table(per_fold_errors: Sequence[Mapping[str, Sequence[float]]] | Mapping,
                spacing: PixelSpacing | None = None) -> EvalReport:
    """Per-landmark table with one column per fold.

    Each cell is the mean over that fold's test images; the Mean column is the
    plain mean of the fold cells, and the overall mean is the mean of row means.
    """
    folds = list(per_fold_errors.values()) if isinstance(per_fold_errors, Mapping) \
        else list(per_fold_errors)
    if not folds:
        return EvalReport([], {}, spacing=spacing)
    names = list(folds[0])
    for i, fold in enumerate(folds[1:], start=2):
        if set(fold) != set(names):
            diff = sorted(set(fold) ^ set(names))
            raise EvalError(f"fold {i} landmark set differs from fold 1: {diff}")
    rows = {}
    for name in _canonical_order(names):
        cells = []
        for i, fold in enumerate(folds, start=1):
            vals = np.atleast_1d(np.asarray(fold[name], dtype=np.float64))
            if vals.size == 0:
                raise EvalError(f"fold {i} has no errors for {name!r}")
            if np.any(vals < 0):
                raise EvalError(f"negative distance for {name!r} in fold {i}")
            cells.append(math.fsum(vals) / vals.size)
        rows[name] = cells
    cols = [f"Split {i}" for i in range(1, len(folds) + 1)]
    return EvalReport(cols, rows, MODEL_VS_ANNOTATOR, spacing)


def _canonical_order(names) -> list[str]:
    known = [n for n in LANDMARKS if n in names]
    return known + [n for n in names if n not in LANDMARKS]


def _group(annotations: Sequence[LandmarkAnnotation]):
    by = {}
    for ann in annotations:
        by.setdefault(ann.annotator_id, {})[ann.image_id] = ann
    return by


def interobserver_table(annotations: Sequence[LandmarkAnnotation], spacing: PixelSpacing,
                        landmarks: Sequence[str] | None = None) -> EvalReport:
    """Mean pairwise distance between three annotators, per landmark."""
    by = _group(annotations)
    if len(by) != 3:
        raise EvalError(f"expected exactly 3 annotators, got {sorted(by)}")
    images = sorted(set().union(*(set(v) for v in by.values())))
    if landmarks is None:
        present = set().union(*(set(a.points) for a in annotations)) if annotations else set()
        landmarks = [n for n in LANDMARKS if n in present]
    missing = []
    for annot, per_img in sorted(by.items()):
        for img in images:
            ann = per_img.get(img)
            for name in landmarks:
                if ann is None or name not in ann.points:
                    missing.append((img, annot, name))
    if missing:
        shown = ", ".join(f"({i}, {a}, {n})" for i, a, n in missing[:5])
        more = f" and {len(missing) - 5} more" if len(missing) > 5 else ""
        raise EvalError(f"coverage mismatch, missing (image, annotator, landmark): {shown}{more}")
    for img in images:
        hws = {by[a][img].original_hw for a in by}
        if len(hws) != 1:
            raise EvalError(f"annotators disagree on original size of {img}: {sorted(hws)}")
    pairs = list(itertools.combinations(sorted(by), 2))
    rows = {}
    for name in landmarks:
        d = [point_distance_cm(by[a][img].points[name], by[b][img].points[name], spacing)
             for img in images for a, b in pairs]
        rows[name] = [math.fsum(d) / len(d)]
    return EvalReport(["Three doctors"], rows, ANNOTATOR_PAIRWISE, spacing, with_mean=False)


def comparison_table(columns: Mapping[str, EvalReport]) -> EvalReport:
    """Side-by-side table of row means (one column per report), overall mean row included."""
    names: list[str] = []
    for rep in columns.values():
        for n in rep.rows:
            if n not in names:
                names.append(n)
    for label, rep in columns.items():
        if set(rep.rows) != set(names):
            raise EvalError(f"report {label!r} covers different landmarks")
    rows = {n: [rep.row_mean(n) for rep in columns.values()] for n in _canonical_order(names)}
    return EvalReport(list(columns), rows, COMPARISON, with_mean=False)


# serialization -------------------------------------------------------------------

def fmt2(v: float) -> str:
    """Two decimals, halves rounded away from zero (on the shortest decimal repr)."""
    return str(Decimal(repr(float(v))).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def _slug(col: str) -> str:
    return col.lower().replace(" ", "").replace("-", "") if col.startswith("Split") \
        else col.lower().replace(" ", "_").replace("-", "")


def _footer(report: EvalReport) -> list[float]:
    """Values for the trailing overall row: column means, then the mean of row means."""
    vals = report.column_means()
    if report.with_mean:
        vals.append(report.overall_mean)
    return vals


def emit_report(report: EvalReport, fmt: str = "csv") -> bytes:
    if fmt == "csv":
        return _emit_csv(report)
    if fmt in ("md", "markdown"):
        return _emit_markdown(report)
    raise ValueError(f"unknown report format {fmt!r}")


def _emit_csv(report: EvalReport) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["landmark"] + [_slug(c) for c in report.columns]
    if report.with_mean:
        header.append("mean")
    w.writerow(header)
    for name, vals in report.rows.items():
        row = [fmt2(v) for v in vals]
        if report.with_mean:
            row.append(fmt2(report.row_mean(name)))
        w.writerow([name] + row)
    if report.rows:
        w.writerow(["OVERALL"] + [fmt2(v) for v in _footer(report)])
    return buf.getvalue().encode("utf-8")


def _emit_markdown(report: EvalReport) -> bytes:
    head = ["Reference type"] + list(report.columns) + (["Mean"] if report.with_mean else [])
    lines = ["| " + " | ".join(head) + " |", "|" + "|".join(["---"] * len(head)) + "|"]
    for name, vals in report.rows.items():
        cells = [fmt2(v) for v in vals]
        if report.with_mean:
            cells.append(fmt2(report.row_mean(name)))
        lines.append("| " + " | ".join([name] + cells) + " |")
    if report.rows:
        lines.append("| " + " | ".join(["**Mean**"] + [fmt2(v) for v in _footer(report)]) + " |")
    for note in report.notes:
        lines.append("")
        lines.append(note)
    return ("\n".join(lines) + "\n").encode("utf-8")


def parse_report_csv(blob: bytes | str) -> EvalReport:
    """Read back a report written by :func:`emit_report` (or a published-table fixture).

    Lines starting with ``#`` are comments.  A trailing ``mean`` column is kept
    aside in ``printed_means`` rather than re-used, so it can be checked.
    """
    text = blob.decode("utf-8") if isinstance(blob, bytes) else blob
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    reader = csv.reader(lines)
    header = next(reader)
    if not header or header[0] != "landmark":
        raise EvalError("report CSV must start with a 'landmark' column")
    has_mean = header[-1] == "mean"
    value_cols = header[1:-1] if has_mean else header[1:]
    rows, printed, overall = {}, {}, None
    for rec in reader:
        vals = [float(v) for v in rec[1:]]
        if rec[0] == "OVERALL":
            overall = vals
            continue
        rows[rec[0]] = vals[:len(value_cols)]
        if has_mean:
            printed[rec[0]] = vals[-1]
    cols = [f"Split {c[5:]}" if c.startswith("split") else c for c in value_cols]
    rep = PrintedReport(cols, rows, with_mean=has_mean)
    rep.printed_means = printed
    rep.printed_overall = overall
    return rep


@dataclass
class PrintedReport(EvalReport):
    printed_means: dict[str, float] = field(default_factory=dict)
    printed_overall: list[float] | None = None


@dataclass
class FixtureCheck:
    landmark: str
    recomputed: float
    printed: float

    @property
    def delta(self) -> float:
        return abs(self.recomputed - self.printed)


def check_printed_means(printed: PrintedReport) -> tuple[EvalReport, list[FixtureCheck]]:
    """Rebuild a split table from its split cells and compare against its printed Mean column."""
    n = len(printed.columns)
    folds = [{name: [vals[i]] for name, vals in printed.rows.items()} for i in range(n)]
    rebuilt = build_table(folds)
    checks = [FixtureCheck(name, rebuilt.row_mean(name), printed.printed_means[name])
              for name in rebuilt.rows if name in printed.printed_means]
    return rebuilt, checks
