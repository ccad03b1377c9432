"""Training objective: matchability-aware alignment plus localization.

The alignment loss treats the matched prediction's IoU with its ground truth
as a soft positive target, modulating the log terms by powers of that
quality. Positive and negative branches:

    y = 1:  -[q^g * log(p) + (1-q)^g * log(1-p)]
    y = 0:  -alpha_neg * p^g * log(1-p)

Log arguments are clamped below at 1e-7 to stay finite; an exactly zero
modulating base annihilates its whole term, so the boundary identities
(perfect positive and perfect negative give exactly zero loss) hold exactly
for every g, including g = 0 where the surviving terms are plain
cross-entropy logs.

Bipartite matching minimizes a weighted sum of classification, L1 box, and
generalized-IoU costs over injective prediction/object assignments, with a
deterministic lexicographic tie-break.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import expit

from .geometry import cxcywh_to_xyxy, giou_matrix, iou_matrix, l1_matrix
from .head import LogitBlock
from .supervision import CorrespondenceSet

logger = logging.getLogger(__name__)

EPS = 1e-7

DEFAULT_COST_WEIGHTS = (2.0, 5.0, 2.0)  # classification, L1 box, giou


@dataclass(frozen=True)
class MalConfig:
    """Focusing exponent and negative-branch weight of the alignment loss."""

    gamma: float = 1.5
    alpha_neg: float = 1.0

    def __post_init__(self) -> None:
        if not (math.isfinite(self.gamma) and math.isfinite(self.alpha_neg)):
            raise ValueError("mal parameters must be finite")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.alpha_neg <= 0:
            raise ValueError("alpha_neg must be > 0")


@dataclass(frozen=True)
class LossWeights:
    """Weights of the total objective; fgl and ddf slots are carried for
    config parity but their loss contributions are fixed to zero."""

    query: float = 1.0
    attr: float = 1.0
    box: float = 5.0
    giou: float = 2.0
    fgl: float = 0.15
    ddf: float = 1.5

    def __post_init__(self) -> None:
        for name in ("query", "attr", "box", "giou", "fgl", "ddf"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")


@dataclass(frozen=True)
class LossParts:
    query: float
    attr: float
    box: float
    giou: float
    fgl: float = 0.0
    ddf: float = 0.0


@dataclass(frozen=True)
class Assignment:
    """Injective prediction/object pairs plus the leftover predictions."""

    pairs: tuple[tuple[int, int], ...]
    unmatched_preds: tuple[int, ...]
    total_cost: float = 0.0

    @property
    def n_pos(self) -> int:
        return len(self.pairs)


def _safelog(x: float) -> float:
    return math.log(min(max(x, EPS), 1.0))


def _pw(base: float, g: float) -> float:
    # exact-zero modulating base annihilates its term regardless of g
    if base == 0.0:
        return 0.0
    return base ** g


def mal(p: float, q: float, y: int, cfg: MalConfig) -> float:
    """Scalar matchability-aware loss for one probability/target pair."""
    g = cfg.gamma
    if y == 1:
        return -(_pw(q, g) * _safelog(p) + _pw(1.0 - q, g) * _safelog(1.0 - p))
    return -cfg.alpha_neg * _pw(p, g) * _safelog(1.0 - p)


def mal_grad(p: float, q: float, y: int, cfg: MalConfig) -> float:
    """Derivative of :func:`mal` with respect to p, away from the clamps."""
    g = cfg.gamma
    if y == 1:
        return -(_pw(q, g) / max(p, EPS) - _pw(1.0 - q, g) / max(1.0 - p, EPS))
    focus = 0.0 if g == 0.0 else g * _pw(p, g - 1.0) * _safelog(1.0 - p)
    return -cfg.alpha_neg * (focus - _pw(p, g) / max(1.0 - p, EPS))


def mal_grid(p: np.ndarray, q: np.ndarray, y: np.ndarray, cfg: MalConfig) -> np.ndarray:
    """Vectorized :func:`mal` over broadcastable arrays."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    y = np.asarray(y)
    g = cfg.gamma
    log_p = np.log(np.clip(p, EPS, 1.0))
    log_1p = np.log(np.clip(1.0 - p, EPS, 1.0))
    with np.errstate(invalid="ignore"):
        cq = np.where(q == 0.0, 0.0, np.power(q, g))
        cqb = np.where(q == 1.0, 0.0, np.power(1.0 - q, g))
        cp = np.where(p == 0.0, 0.0, np.power(p, g))
    pos = -(cq * log_p + cqb * log_1p)
    neg = -cfg.alpha_neg * cp * log_1p
    return np.where(y == 1, pos, neg)


def mal_grad_grid(p: np.ndarray, q: np.ndarray, y: np.ndarray, cfg: MalConfig) -> np.ndarray:
    """Vectorized :func:`mal_grad` over broadcastable arrays."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    y = np.asarray(y)
    g = cfg.gamma
    inv_p = 1.0 / np.clip(p, EPS, None)
    inv_1p = 1.0 / np.clip(1.0 - p, EPS, None)
    log_1p = np.log(np.clip(1.0 - p, EPS, 1.0))
    with np.errstate(invalid="ignore", divide="ignore"):
        cq = np.where(q == 0.0, 0.0, np.power(q, g))
        cqb = np.where(q == 1.0, 0.0, np.power(1.0 - q, g))
        cp = np.where(p == 0.0, 0.0, np.power(p, g))
        if g == 0.0:
            focus = np.zeros_like(p)
        else:
            focus = g * np.where(p == 0.0, 0.0, np.power(p, g - 1.0)) * log_1p
    pos = -(cq * inv_p - cqb * inv_1p)
    neg = -cfg.alpha_neg * (focus - cp * inv_1p)
    return np.where(y == 1, pos, neg)


# ---------------------------------------------------------------------------
# Bipartite matching

def _logit_values(s_query: LogitBlock | np.ndarray) -> np.ndarray:
    if isinstance(s_query, LogitBlock):
        return s_query.values
    return np.asarray(s_query, dtype=np.float64)


def hungarian_match(
    pred_boxes: np.ndarray,
    s_query: LogitBlock | np.ndarray,
    gt_boxes: np.ndarray,
    gt_query_cols: Sequence[int],
    cost_weights: tuple[float, float, float] = DEFAULT_COST_WEIGHTS,
) -> Assignment:
    """Minimum-cost injective matching of predictions to ground-truth objects.

    ``pred_boxes`` and ``gt_boxes`` are ``(N, 4)`` / ``(M, 4)`` normalized
    center-size arrays; ``gt_query_cols[j]`` names the query column used for
    object j's classification cost. Among cost-optimal assignments the
    lexicographically smallest pair list (sorted by prediction index, then
    object index) is returned, so ties break identically across runs.
    """
    pred_boxes = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    n_pred, n_obj = pred_boxes.shape[0], gt_boxes.shape[0]
    if n_obj == 0 or n_pred == 0:
        return Assignment(pairs=(), unmatched_preds=tuple(range(n_pred)), total_cost=0.0)
    cols = list(gt_query_cols)
    if len(cols) != n_obj:
        raise ValueError(f"{len(cols)} query columns for {n_obj} objects")

    values = _logit_values(s_query)
    c_cls, c_box, c_giou = cost_weights
    cls_cost = -expit(values[:, cols])
    pred_xyxy = cxcywh_to_xyxy(pred_boxes)
    gt_xyxy = cxcywh_to_xyxy(gt_boxes)
    cost = (
        c_cls * cls_cost
        + c_box * l1_matrix(pred_boxes, gt_boxes)
        + c_giou * (-giou_matrix(pred_xyxy, gt_xyxy))
    )
    if not np.isfinite(cost).all():
        raise ValueError("matching cost matrix contains non-finite entries")

    rows, cols_sel = linear_sum_assignment(cost)
    best = float(cost[rows, cols_sel].sum())
    tol = 1e-9 * max(1.0, abs(best))

    # lexicographic refinement: fix pairs in (pred, gt) order, keeping each
    # choice only if an optimal completion still exists
    m = min(n_pred, n_obj)
    chosen: list[tuple[int, int]] = []
    used_preds: set[int] = set()
    used_gts: set[int] = set()
    forced = 0.0
    last_pred = -1
    for _ in range(m):
        placed = False
        for i in range(last_pred + 1, n_pred):
            if i in used_preds:
                continue
            free_preds_after = [r for r in range(i + 1, n_pred) if r not in used_preds]
            for j in range(n_obj):
                if j in used_gts:
                    continue
                remaining = m - len(chosen) - 1
                if len(free_preds_after) < remaining:
                    break
                free_gts = [g for g in range(n_obj) if g not in used_gts and g != j]
                if remaining == 0:
                    completion = 0.0
                else:
                    sub = cost[np.ix_(free_preds_after, free_gts)]
                    r2, c2 = linear_sum_assignment(sub)
                    if len(r2) < remaining:
                        continue
                    completion = float(sub[r2, c2].sum())
                if forced + cost[i, j] + completion <= best + tol:
                    chosen.append((i, j))
                    used_preds.add(i)
                    used_gts.add(j)
                    forced += float(cost[i, j])
                    last_pred = i
                    placed = True
                    break
            if placed:
                break
        if not placed:  # numerically impossible; fall back to the raw solution
            chosen = sorted(zip((int(r) for r in rows), (int(c) for c in cols_sel)))
            used_preds = {i for i, _ in chosen}
            break

    unmatched = tuple(i for i in range(n_pred) if i not in used_preds)
    return Assignment(pairs=tuple(chosen), unmatched_preds=unmatched, total_cost=best)


# ---------------------------------------------------------------------------
# Loss terms

def _alignment_targets(
    n_pred: int,
    assignment: Assignment,
    pred_xyxy: np.ndarray,
    gt_xyxy: np.ndarray,
    rows: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-prediction soft quality and binary target rows.

    Matched predictions take their object's supervision row and IoU quality;
    unmatched predictions are all-negative.
    """
    n_cols = rows.shape[1]
    q = np.zeros(n_pred, dtype=np.float64)
    y = np.zeros((n_pred, n_cols), dtype=np.float64)
    if assignment.pairs:
        ious = iou_matrix(pred_xyxy, gt_xyxy)
        for i, j in assignment.pairs:
            q[i] = ious[i, j]
            y[i, :] = rows[j, :]
    return q, y


def semantic_losses(
    s_query: LogitBlock,
    s_attr: LogitBlock,
    assignment: Assignment,
    pred_boxes_xyxy: np.ndarray,
    cs: CorrespondenceSet,
    cfg: MalConfig,
) -> tuple[float, float]:
    """Query-level and attribute-level alignment losses for one image."""
    l_query, l_attr, _, _ = semantic_losses_with_grads(
        s_query, s_attr, assignment, pred_boxes_xyxy, cs, cfg
    )
    return l_query, l_attr


def semantic_losses_with_grads(
    s_query: LogitBlock,
    s_attr: LogitBlock,
    assignment: Assignment,
    pred_boxes_xyxy: np.ndarray,
    cs: CorrespondenceSet,
    cfg: MalConfig,
) -> tuple[float, float, np.ndarray, np.ndarray]:
    """Alignment losses plus their gradients with respect to the logits.

    ``pred_boxes_xyxy`` must be corner boxes in the same frame as
    ``cs.gt_boxes`` (IoU is invariant to axis-aligned scaling, so either the
    pixel or the normalized frame works as long as both sides agree). Padded
    columns are excluded from the sums; each sum is divided by the number of
    matched pairs, clamped to at least one.
    """
    pred_xyxy = np.asarray(pred_boxes_xyxy, dtype=np.float64).reshape(-1, 4)
    n_pred = pred_xyxy.shape[0]
    if cs.n_obj == 0:
        logger.warning("semantic loss over an image with no retained objects")
        gt_xyxy = np.zeros((0, 4))
    else:
        gt_xyxy = np.array([b.as_tuple() for b in cs.gt_boxes], dtype=np.float64)
    n_pos = max(1, assignment.n_pos)

    q, y_q = _alignment_targets(n_pred, assignment, pred_xyxy, gt_xyxy, cs.m_q)
    _, y_a = _alignment_targets(n_pred, assignment, pred_xyxy, gt_xyxy, cs.m_a)
    qcol = q[:, None]

    out = []
    grads = []
    for block, y in ((s_query, y_q), (s_attr, y_a)):
        p = expit(block.values)
        grid = mal_grid(p, qcol, y, cfg)
        keep = block.mask[None, :]
        loss = float(np.where(keep, grid, 0.0).sum() / n_pos)
        dl_dp = mal_grad_grid(p, qcol, y, cfg)
        dl_ds = np.where(keep, dl_dp * p * (1.0 - p) / n_pos, 0.0)
        out.append(loss)
        grads.append(dl_ds)
    return out[0], out[1], grads[0], grads[1]


def localization_losses(
    pred_boxes: np.ndarray,
    gt_boxes: np.ndarray,
    assignment: Assignment,
) -> tuple[float, float]:
    """Mean L1 and mean (1 - giou) over matched pairs, in normalized frame."""
    if not assignment.pairs:
        logger.debug("localization loss with empty assignment")
        return 0.0, 0.0
    pred_boxes = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    pi = np.array([i for i, _ in assignment.pairs])
    gj = np.array([j for _, j in assignment.pairs])
    l1_vals = np.abs(pred_boxes[pi] - gt_boxes[gj]).sum(axis=1)
    gious = giou_matrix(cxcywh_to_xyxy(pred_boxes[pi]), cxcywh_to_xyxy(gt_boxes[gj]))
    giou_vals = np.diagonal(gious)
    return float(l1_vals.mean()), float((1.0 - giou_vals).mean())


def total_loss(parts: LossParts, weights: LossWeights) -> float:
    """Weighted sum of the loss components; fgl and ddf contribute zero."""
    return (
        weights.query * parts.query
        + weights.attr * parts.attr
        + weights.box * parts.box
        + weights.giou * parts.giou
        + weights.fgl * 0.0
        + weights.ddf * 0.0
    )


def breakdown_json(step: int, parts: LossParts, n_pos: int) -> str:
    """One loss-breakdown log line."""
    return json.dumps({
        "step": step,
        "l_query": parts.query,
        "l_attr": parts.attr,
        "l_box": parts.box,
        "l_giou": parts.giou,
        "n_pos": n_pos,
    })
