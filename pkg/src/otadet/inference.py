"""Multi-granular decoding of similarity logits into detections.

Detections carry a query-level label and score plus per-attribute scores
from the winning query's attribute block. Attribute-level logits can be
aggregated back to query-level probabilities through the ownership map,
giving an alternative scoring path for attribute-set queries.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

from .geometry import PIXEL, BoxXYXY
from .head import LogitBlock

logger = logging.getLogger(__name__)

REDUCTIONS: dict[str, Callable[[np.ndarray], float]] = {
    "mean": lambda x: float(np.mean(x)),
    "min": lambda x: float(np.min(x)),
    "max": lambda x: float(np.max(x)),
}


@dataclass(frozen=True)
class Detection:
    """One decoded box with query-level and attribute-level scores."""

    box: BoxXYXY
    query_index: int
    query_score: float
    attr_labels: tuple[tuple[int, float], ...] = ()


def aggregate_attr_to_query(
    s_attr: LogitBlock,
    m_map: np.ndarray,
    reduction: str = "mean",
) -> np.ndarray:
    """Reduce attribute probabilities onto their owning queries.

    Works in probability space (sigmoid first, then reduce) so the same
    definition serves decoding and the attribute-alignment metric. Queries
    with no valid attribute slot get probability zero.
    """
    if reduction not in REDUCTIONS:
        raise ValueError(f"unknown reduction {reduction!r}")
    reduce = REDUCTIONS[reduction]
    m_map = np.asarray(m_map)
    probs = expit(s_attr.values)
    n_pred = probs.shape[0]
    n_query = m_map.shape[0]
    out = np.zeros((n_pred, n_query), dtype=np.float64)
    flagged = []
    for j in range(n_query):
        slots = np.flatnonzero((m_map[j] > 0) & s_attr.mask)
        if slots.size == 0:
            if m_map[j].any():
                flagged.append(j)
            continue
        for i in range(n_pred):
            out[i, j] = reduce(probs[i, slots])
    if flagged:
        logger.debug("queries with zero valid attributes scored 0: %s", flagged)
    return out


def _attr_labels_for(
    s_attr: LogitBlock | None,
    m_map: np.ndarray | None,
    pred_index: int,
    query_index: int,
) -> tuple[tuple[int, float], ...]:
    if s_attr is None or m_map is None:
        return ()
    m_map = np.asarray(m_map)
    slots = np.flatnonzero((m_map[query_index] > 0) & s_attr.mask)
    probs = expit(s_attr.values[pred_index, slots])
    return tuple((int(s), float(p)) for s, p in zip(slots, probs))


def decode(
    s_query: LogitBlock,
    s_attr: LogitBlock | None,
    pred_boxes: Sequence[BoxXYXY],
    m_map: np.ndarray | None,
    score_threshold: float = 0.5,
    top_k: int | None = None,
) -> list[Detection]:
    """Threshold-and-rank decoding from query-level logits.

    Each prediction takes its best valid query column; detections below the
    score threshold are dropped, the rest are ordered by descending score
    with prediction index as the tie-break, and optionally cut to ``top_k``.
    """
    if not s_query.mask.any():
        return []
    probs = expit(s_query.values)
    probs = np.where(s_query.mask[None, :], probs, -1.0)
    dets: list[Detection] = []
    for i in range(probs.shape[0]):
        j = int(np.argmax(probs[i]))
        score = float(probs[i, j])
        if score < score_threshold:
            continue
        dets.append(Detection(
            box=pred_boxes[i],
            query_index=j,
            query_score=score,
            attr_labels=_attr_labels_for(s_attr, m_map, i, j),
        ))
    # detections were appended in prediction order, so a stable sort by score
    # breaks ties by prediction index
    dets.sort(key=lambda d: -d.query_score)
    if top_k is not None:
        dets = dets[:top_k]
    return dets


def select_top1_per_query(
    s_query: LogitBlock,
    query_index: int,
    pred_boxes: Sequence[BoxXYXY],
    s_attr: LogitBlock | None = None,
    m_map: np.ndarray | None = None,
) -> Detection | None:
    """Best prediction for one query column, ignoring any score threshold.

    Referring-expression evaluation always answers, so this returns a
    detection whenever the column is valid.
    """
    if query_index < 0 or query_index >= s_query.mask.shape[0] or not s_query.mask[query_index]:
        return None
    col = expit(s_query.values[:, query_index])
    i = int(np.argmax(col))
    return Detection(
        box=pred_boxes[i],
        query_index=query_index,
        query_score=float(col[i]),
        attr_labels=_attr_labels_for(s_attr, m_map, i, query_index),
    )


def decode_from_attributes(
    s_attr: LogitBlock,
    m_map: np.ndarray,
    pred_boxes: Sequence[BoxXYXY],
    score_threshold: float = 0.5,
    reduction: str = "mean",
    top_k: int | None = None,
) -> list[Detection]:
    """Decode with query scores aggregated from attribute probabilities.

    Mirrors :func:`decode` but the per-query score is the reduced attribute
    probability, converting attribute-level alignment into query-level
    detections. Queries without valid attribute slots never win.
    """
    m_map = np.asarray(m_map)
    agg = aggregate_attr_to_query(s_attr, m_map, reduction)
    eligible = np.array([
        bool(np.flatnonzero((m_map[j] > 0) & s_attr.mask).size)
        for j in range(m_map.shape[0])
    ])
    if not eligible.any():
        return []
    scores = np.where(eligible[None, :], agg, -1.0)
    dets: list[Detection] = []
    for i in range(scores.shape[0]):
        j = int(np.argmax(scores[i]))
        score = float(scores[i, j])
        if score < score_threshold:
            continue
        dets.append(Detection(
            box=pred_boxes[i],
            query_index=j,
            query_score=score,
            attr_labels=_attr_labels_for(s_attr, m_map, i, j),
        ))
    dets.sort(key=lambda d: -d.query_score)
    if top_k is not None:
        dets = dets[:top_k]
    return dets


# ---------------------------------------------------------------------------
# Predictions JSONL

def detections_to_dict(image_id: str, detections: Iterable[Detection]) -> dict:
    return {
        "image_id": image_id,
        "detections": [
            {
                "box": list(d.box.as_tuple()),
                "query_index": d.query_index,
                "query_score": d.query_score,
                "attrs": [{"slot": s, "score": p} for s, p in d.attr_labels],
            }
            for d in detections
        ],
    }


def detections_from_dict(d: dict) -> tuple[str, list[Detection]]:
    dets = [
        Detection(
            box=BoxXYXY(*[float(v) for v in item["box"]], frame=PIXEL),
            query_index=int(item["query_index"]),
            query_score=float(item["query_score"]),
            attr_labels=tuple(
                (int(a["slot"]), float(a["score"])) for a in item.get("attrs", [])
            ),
        )
        for item in d["detections"]
    ]
    return d["image_id"], dets


def write_predictions_jsonl(
    path: str | Path, records: Iterable[tuple[str, Iterable[Detection]]]
) -> None:
    with open(path, "w", encoding="utf-8") as fp:
        for image_id, dets in records:
            fp.write(json.dumps(detections_to_dict(image_id, dets), ensure_ascii=False) + "\n")


def read_predictions_jsonl(path: str | Path) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = {}
    with open(path, "r", encoding="utf-8") as fp:
        for line in fp:
            if not line.strip():
                continue
            image_id, dets = detections_from_dict(json.loads(line))
            out[image_id] = dets
    return out
