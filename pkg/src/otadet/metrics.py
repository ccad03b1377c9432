"""Evaluation metrics for grounding and detection outputs.

Grounding accuracy counts an expression correct when its top-1 box reaches
IoU 0.5 (inclusive) with any of its ground-truth boxes. The stricter
attribute-aligned accuracy additionally requires the mean attribute
probability on that box to exceed a threshold (strict), so it can never
exceed the plain accuracy and is non-increasing in the threshold. Detection
quality uses interpolated average precision with greedy score-ordered
matching and COCO-style threshold averaging for mAP.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import BoxXYXY, iou

logger = logging.getLogger(__name__)

COCO_IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
_RECALL_GRID = np.linspace(0.0, 1.0, 101)


@dataclass(frozen=True)
class ExpressionOutcome:
    """Top-1 answer for one expression: predicted box, truth, attr scores."""

    pred_box: BoxXYXY | None
    gt_boxes: tuple[BoxXYXY, ...]
    attr_scores: tuple[float, ...] = ()


@dataclass(frozen=True)
class DetectionRecord:
    image_id: str
    category: str
    score: float
    box: BoxXYXY


@dataclass(frozen=True)
class GroundTruthRecord:
    image_id: str
    category: str
    box: BoxXYXY


@dataclass
class MetricReport:
    acc_at_05: float
    attr_align: dict[float, float]
    ap50: float | None = None
    map_coco: float | None = None
    counts: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "acc_at_05": self.acc_at_05,
            "attr_align": {str(k): v for k, v in self.attr_align.items()},
            "ap50": self.ap50,
            "map_coco": self.map_coco,
            "counts": self.counts,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(
            acc_at_05=float(d["acc_at_05"]),
            attr_align={float(k): float(v) for k, v in d.get("attr_align", {}).items()},
            ap50=d.get("ap50"),
            map_coco=d.get("map_coco"),
            counts=dict(d.get("counts", {})),
        )


def _localized(outcome: ExpressionOutcome) -> bool:
    if outcome.pred_box is None or not outcome.gt_boxes:
        return False
    # merged expressions may carry several boxes; best match counts
    return max(iou(outcome.pred_box, g) for g in outcome.gt_boxes) >= 0.5


def acc_at_05(outcomes: Sequence[ExpressionOutcome]) -> float:
    """Fraction of expressions whose top-1 box reaches IoU 0.5 (inclusive)."""
    if not outcomes:
        return 0.0
    return sum(1 for o in outcomes if _localized(o)) / len(outcomes)


def attr_align(outcomes: Sequence[ExpressionOutcome], tau: float) -> float:
    """Localization plus mean attribute probability strictly above ``tau``.

    Expressions without attribute scores are excluded from the denominator
    and reported through the module logger.
    """
    if not (0.0 < tau < 1.0):
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    scored = [o for o in outcomes if o.attr_scores]
    excluded = len(outcomes) - len(scored)
    if excluded:
        logger.info("attr_align excluded %d expressions without attributes", excluded)
    if not scored:
        return 0.0
    hits = sum(
        1 for o in scored
        if _localized(o) and float(np.mean(o.attr_scores)) > tau
    )
    return hits / len(scored)


# ---------------------------------------------------------------------------
# Average precision

def _greedy_match_flags(
    dets: list[DetectionRecord],
    gts: list[GroundTruthRecord],
    iou_thr: float,
) -> list[bool]:
    """True-positive flags for score-ordered detections of one category.

    Each ground-truth box is consumed by at most one detection; a duplicate
    hit on an already-consumed box counts as a false positive.
    """
    consumed: set[int] = set()
    by_image: dict[str, list[int]] = {}
    for gi, g in enumerate(gts):
        by_image.setdefault(g.image_id, []).append(gi)
    flags: list[bool] = []
    for d in dets:
        best_iou, best_gi = 0.0, -1
        for gi in by_image.get(d.image_id, []):
            if gi in consumed:
                continue
            v = iou(d.box, gts[gi].box)
            if v > best_iou:
                best_iou, best_gi = v, gi
        if best_gi >= 0 and best_iou >= iou_thr:
            consumed.add(best_gi)
            flags.append(True)
        else:
            flags.append(False)
    return flags


def _sorted_dets(dets: Sequence[DetectionRecord]) -> list[DetectionRecord]:
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].image_id, i))
    return [dets[i] for i in order]


def _ap_from_flags(flags: Sequence[bool], n_gt: int) -> float:
    """101-point interpolated AP from ordered true-positive flags."""
    if n_gt == 0:
        return 0.0
    tp = np.cumsum(np.asarray(flags, dtype=np.float64))
    ranks = np.arange(1, len(flags) + 1, dtype=np.float64)
    precision = tp / ranks
    recall = tp / n_gt
    ap = 0.0
    for r in _RECALL_GRID:
        mask = recall >= r - 1e-12
        ap += float(precision[mask].max()) if mask.any() else 0.0
    return ap / len(_RECALL_GRID)


def ap_per_category(
    detections: Sequence[DetectionRecord],
    ground_truth: Sequence[GroundTruthRecord],
    iou_thr: float,
) -> dict[str, float]:
    """AP for every category with at least one ground-truth box."""
    categories = sorted({g.category for g in ground_truth})
    out: dict[str, float] = {}
    for cat in categories:
        cat_gts = [g for g in ground_truth if g.category == cat]
        cat_dets = _sorted_dets([d for d in detections if d.category == cat])
        flags = _greedy_match_flags(cat_dets, cat_gts, iou_thr)
        out[cat] = _ap_from_flags(flags, len(cat_gts))
    skipped = {d.category for d in detections} - set(categories)
    if skipped:
        logger.info("categories without ground truth excluded from AP: %s", sorted(skipped))
    return out


def average_precision(
    detections: Sequence[DetectionRecord],
    ground_truth: Sequence[GroundTruthRecord],
    iou_thr: float,
) -> float:
    """Mean AP over categories with ground truth, at one IoU threshold."""
    per_cat = ap_per_category(detections, ground_truth, iou_thr)
    if not per_cat:
        return 0.0
    return float(np.mean(list(per_cat.values())))


def map_coco(
    detections: Sequence[DetectionRecord],
    ground_truth: Sequence[GroundTruthRecord],
) -> float:
    """Mean AP over categories and the 0.50:0.05:0.95 threshold sweep."""
    values = [average_precision(detections, ground_truth, thr) for thr in COCO_IOU_THRESHOLDS]
    if not values:
        return 0.0
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# Report assembly and rendering

def build_report(
    outcomes: Sequence[ExpressionOutcome],
    detections: Sequence[DetectionRecord] = (),
    ground_truth: Sequence[GroundTruthRecord] = (),
    taus: Sequence[float] = (0.5, 0.6, 0.7),
) -> MetricReport:
    align = {tau: attr_align(outcomes, tau) for tau in taus}
    have_det = bool(ground_truth)
    scored = sum(1 for o in outcomes if o.attr_scores)
    return MetricReport(
        acc_at_05=acc_at_05(outcomes),
        attr_align=align,
        ap50=average_precision(detections, ground_truth, 0.5) if have_det else None,
        map_coco=map_coco(detections, ground_truth) if have_det else None,
        counts={
            "expressions": len(outcomes),
            "expressions_with_attrs": scored,
            "expressions_without_attrs": len(outcomes) - scored,
            "detections": len(detections),
            "gt_boxes": len(ground_truth),
        },
    )


def format_table(report: MetricReport) -> str:
    """Aligned-column text rendering of a metric report."""
    rows: list[tuple[str, str]] = [("acc@0.5", f"{report.acc_at_05:.4f}")]
    for tau in sorted(report.attr_align):
        rows.append((f"attr-align@{tau:g}", f"{report.attr_align[tau]:.4f}"))
    if report.ap50 is not None:
        rows.append(("ap50", f"{report.ap50:.4f}"))
    if report.map_coco is not None:
        rows.append(("map", f"{report.map_coco:.4f}"))
    for key in sorted(report.counts):
        rows.append((key, str(report.counts[key])))
    width = max(len(name) for name, _ in rows)
    return "\n".join(f"{name.ljust(width)}  {value}" for name, value in rows)
