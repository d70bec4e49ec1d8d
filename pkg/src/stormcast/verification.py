"""Categorical verification of cell forecasts.

Forecasts are scored against observed labels through a 2x2 contingency
table. A probability meeting the decision threshold counts as a yes
forecast; the threshold comparison is inclusive, mirroring the 35 dBZ
event definition. Scores with an empty denominator are reported as None
and serialized as "NA" rather than silently coerced to zero.

The ROC sweeps every distinct predicted value as a threshold, descending,
after an infinity sentinel that pins the curve at (0, 0). AUC is the
trapezoidal area, which on tied groups gives half credit and therefore
equals the Mann-Whitney pairwise statistic exactly.

The persistence baseline forecasts a cell positive when its composite
reflectivity already meets the threshold at the anchor time, recovered by
undoing the normalization of the stored R block (or from raw grids when
the block values are not at hand). Being binary, its ROC collapses to a
degenerate curve, which is flagged rather than hidden.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .pipeline import (
    CELL,
    MARGIN,
    THRESHOLD_DBZ,
    EventTensors,
    Normalizer,
    label_cell,
)

OUTCOME_COLORS = {
    "hit": "#000000",
    "false_alarm": "#d62728",
    "miss": "#ffffff",
    "correct_null": "#e8e8e8",
}


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fn: int = 0
    fp: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fn + self.fp + self.tn

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(
            self.tp + other.tp, self.fn + other.fn,
            self.fp + other.fp, self.tn + other.tn,
        )


@dataclass(frozen=True)
class SkillScores:
    pod: float | None
    far: float | None
    csi: float | None


def _check_pair(preds, labels) -> tuple[np.ndarray, np.ndarray]:
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels)
    if preds.ndim != 1 or labels.ndim != 1:
        raise DataError("predictions and labels must be 1D")
    if preds.shape != labels.shape:
        raise DataError(
            f"prediction/label length mismatch: {preds.shape[0]} vs {labels.shape[0]}"
        )
    if labels.size and not np.isin(labels, (0, 1)).all():
        raise DataError("labels must be 0 or 1")
    return preds, labels.astype(np.int64)


def confusion(preds, labels, threshold: float = 0.5) -> ConfusionMatrix:
    """Tabulate yes/no forecasts against labels. pred >= threshold is yes."""
    preds, labels = _check_pair(preds, labels)
    yes = preds >= threshold
    pos = labels == 1
    return ConfusionMatrix(
        tp=int(np.sum(yes & pos)),
        fn=int(np.sum(~yes & pos)),
        fp=int(np.sum(yes & ~pos)),
        tn=int(np.sum(~yes & ~pos)),
    )


def skill_scores(m: ConfusionMatrix) -> SkillScores:
    """POD, FAR and CSI; None where the denominator is empty."""
    pod = m.tp / (m.tp + m.fn) if (m.tp + m.fn) else None
    far = m.fp / (m.tp + m.fp) if (m.tp + m.fp) else None
    csi = m.tp / (m.tp + m.fn + m.fp) if (m.tp + m.fn + m.fp) else None
    return SkillScores(pod=pod, far=far, csi=csi)


@dataclass(frozen=True)
class RocPoint:
    threshold: float
    fpr: float
    tpr: float


@dataclass(frozen=True)
class RocCurve:
    points: tuple[RocPoint, ...]
    auc: float
    degenerate: bool     # two or fewer distinct predicted values


def roc_curve(preds, labels) -> RocCurve:
    """Threshold sweep over the distinct predicted values, descending."""
    preds, labels = _check_pair(preds, labels)
    n_pos = int(labels.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise DataError(
            f"ROC needs both classes, got {n_pos} positives and {n_neg} negatives"
        )
    order = np.argsort(-preds, kind="stable")
    ps = preds[order]
    ls = labels[order]
    cum_tp = np.cumsum(ls)
    cum_fp = np.cumsum(1 - ls)
    ends = np.nonzero(np.append(ps[1:] != ps[:-1], True))[0]
    thr = np.concatenate(([np.inf], ps[ends]))
    fpr = np.concatenate(([0.0], cum_fp[ends] / n_neg))
    tpr = np.concatenate(([0.0], cum_tp[ends] / n_pos))
    auc = float(np.trapezoid(tpr, fpr))
    points = tuple(
        RocPoint(float(t), float(f), float(r)) for t, f, r in zip(thr, fpr, tpr)
    )
    return RocCurve(points=points, auc=auc, degenerate=len(ends) <= 2)


def persistence_baseline(
    samples,
    normalizer: Normalizer,
    events_by_id: dict[str, EventTensors] | None = None,
) -> np.ndarray:
    """Binary forecast: cell is already at/above 35 dBZ at the anchor time.

    Reads each sample's stored R block and inverts the normalization; when
    a sample carries no values (metadata-only load), the raw reflectivity
    grid is consulted instead.
    """
    out = np.zeros(len(samples), dtype=np.float64)
    for i, s in enumerate(samples):
        if s.values is not None:
            region = s.values[0][MARGIN:MARGIN + CELL, MARGIN:MARGIN + CELL, :]
            peak = float(normalizer.inverse(region, "R").max())
            out[i] = 1.0 if peak >= THRESHOLD_DBZ else 0.0
        else:
            if events_by_id is None or s.event_id not in events_by_id:
                raise DataError(
                    f"sample ({s.event_id}, t={s.frame}) has no values and no grid"
                )
            ev = events_by_id[s.event_id]
            dy, dx = s.offset
            out[i] = float(label_cell(ev.raw_r[s.frame], s.row, s.col, dy, dx))
    return out


# ---------------------------------------------------------------------------
# Outcome maps


@dataclass(frozen=True)
class OutcomeCell:
    row: int
    col: int
    pred: float
    label: int
    category: str


@dataclass(frozen=True)
class OutcomeMap:
    rows: int
    cols: int
    cells: tuple[OutcomeCell, ...]


def outcome_map(preds, labels, cells, rows: int, cols: int,
                threshold: float = 0.5) -> OutcomeMap:
    """Categorize each cell of one frame as hit/miss/false alarm/null."""
    preds, labels = _check_pair(preds, labels)
    if len(cells) != preds.size:
        raise DataError(f"{len(cells)} cells for {preds.size} predictions")
    seen = set()
    out = []
    for (row, col), p, y in zip(cells, preds, labels):
        if (row, col) in seen:
            raise DataError(f"duplicate cell ({row}, {col}) in outcome map")
        seen.add((row, col))
        yes = p >= threshold
        if yes and y:
            cat = "hit"
        elif yes:
            cat = "false_alarm"
        elif y:
            cat = "miss"
        else:
            cat = "correct_null"
        out.append(OutcomeCell(row=row, col=col, pred=float(p), label=int(y),
                               category=cat))
    return OutcomeMap(rows=rows, cols=cols, cells=tuple(out))


def write_outcome_csv(omap: OutcomeMap, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["row", "col", "category", "pred", "label"])
        for c in omap.cells:
            w.writerow([c.row, c.col, c.category, _fmt(c.pred), c.label])


def write_outcome_svg(omap: OutcomeMap, path, cell_px: int = 14):
    """Small-multiples style map: hits black, false alarms red, misses as
    white squares with a black outline, correct nulls pale gray."""
    width = omap.cols * cell_px
    height = omap.rows * cell_px + 18
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="#fafafa"/>',
    ]
    for c in omap.cells:
        x = c.col * cell_px
        y = c.row * cell_px
        fill = OUTCOME_COLORS[c.category]
        stroke = ' stroke="#000000" stroke-width="1"' if c.category == "miss" else ""
        lines.append(
            f'<rect x="{x}" y="{y}" width="{cell_px}" height="{cell_px}" '
            f'fill="{fill}"{stroke}/>'
        )
    legend_y = omap.rows * cell_px + 13
    lines.append(
        f'<text x="2" y="{legend_y}" font-family="sans-serif" font-size="10">'
        "hit=black false alarm=red miss=white outline</text>"
    )
    lines.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Per-frame breakdown


@dataclass(frozen=True)
class FrameStats:
    frame: int
    n: int
    matrix: ConfusionMatrix
    scores: SkillScores


def per_frame_series(preds, labels, frames, threshold: float = 0.5) -> list[FrameStats]:
    """Contingency tables stratified by anchor frame, chronological."""
    preds, labels = _check_pair(preds, labels)
    frames = np.asarray(frames)
    if frames.shape != preds.shape:
        raise DataError("frames array must match predictions length")
    out = []
    for t in np.unique(frames):
        sel = frames == t
        m = confusion(preds[sel], labels[sel], threshold)
        out.append(FrameStats(
            frame=int(t), n=int(sel.sum()), matrix=m, scores=skill_scores(m)
        ))
    return out


# ---------------------------------------------------------------------------
# Report serialization


def _fmt(x) -> str:
    if x is None:
        return "NA"
    if isinstance(x, float):
        if np.isposinf(x):
            return "inf"
        return repr(x)
    return str(x)


def write_report_csv(path, rows: list[dict]):
    """One row per method: counts, scores, AUC, and the config hash."""
    cols = [
        "method", "threshold", "n", "tp", "fn", "fp", "tn",
        "pod", "far", "csi", "auc", "roc_degenerate", "config_hash",
    ]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in cols])


def write_frames_csv(path, rows: list[dict]):
    cols = ["method", "frame", "n", "tp", "fn", "fp", "tn", "pod", "far", "csi",
            "config_hash"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in cols])


def write_roc_csv(path, curves: dict[str, RocCurve]):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["method", "threshold", "fpr", "tpr", "degenerate"])
        for method, curve in curves.items():
            flag = int(curve.degenerate)
            for p in curve.points:
                w.writerow([method, _fmt(p.threshold), _fmt(p.fpr), _fmt(p.tpr), flag])


def write_predictions_csv(path, samples, probs, persistence, config_hash=None):
    """Raw per-sample dump so every reported score can be recomputed."""
    probs = np.asarray(probs)
    persistence = np.asarray(persistence)
    if not (len(samples) == probs.size == persistence.size):
        raise DataError("prediction dump arrays must align with samples")
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["event", "frame", "row", "col", "label", "prob",
                    "persistence", "config_hash"])
        for s, p, q in zip(samples, probs, persistence):
            w.writerow([s.event_id, s.frame, s.row, s.col, s.label,
                        _fmt(float(p)), _fmt(float(q)), _fmt(config_hash)])
