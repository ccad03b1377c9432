"""Synthetic end-to-end harness for the alignment mechanism.

A planted world provides per-image query sets with ground-truth boxes,
deterministic unit-Gaussian text embeddings keyed by text hash, and one
learnable visual feature row per prediction slot. Prediction boxes sit at
the ground truth plus a small jitter, so the harness isolates semantic
alignment: plain gradient descent on the weighted objective must recover the
planted correspondence matrices from the logits.

Worlds plant a one-to-many query (one query, two boxes) and a multi-label
object (one box under two queries) in the first image, exercising both
row-wise and column-wise supervision structure.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import KIND_EXPRESSION, AggregatedSample, GroundTruth, QueryEntry
from .decomp import Attribute, derive_rng
from .geometry import PIXEL, BoxXYXY, cxcywh_to_xyxy, to_normalized
from .head import HeadParams, backward, similarity_logits
from .losses import (
    Assignment,
    LossParts,
    LossWeights,
    MalConfig,
    hungarian_match,
    localization_losses,
    semantic_losses_with_grads,
    total_loss,
)
from .supervision import SamplerConfig, full_batch, sample_rsvg

_ASPECT_CYCLE = ("category", "color", "state", "position")


@dataclass(frozen=True)
class WorldSizes:
    n_images: int = 4
    queries_per_image: int = 3
    attrs_per_query: int = 3
    d_vis: int = 32
    d_txt: int = 32
    extra_preds: int = 1
    image_size: tuple[int, int] = (800, 800)
    jitter: float = 0.004


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 0
    sizes: WorldSizes = field(default_factory=WorldSizes)


@dataclass
class ToyWorld:
    """Planted samples, fixed boxes, and learnable feature initializations."""

    seed: int
    sizes: WorldSizes
    samples: list[AggregatedSample]
    features: list[np.ndarray]        # per image, (n_pred, d_vis), init values
    pred_cxcywh: list[np.ndarray]     # per image, (n_pred, 4) normalized
    pred_xyxy_pixel: list[np.ndarray]

    def __post_init__(self) -> None:
        self._emb_cache: dict[str, np.ndarray] = {}

    def text_embedding(self, text: str) -> np.ndarray:
        """Deterministic unit Gaussian keyed by (text, world seed)."""
        cached = self._emb_cache.get(text)
        if cached is not None:
            return cached
        if text == "":
            vec = np.zeros(self.sizes.d_txt)
        else:
            rng = derive_rng(self.seed, "emb", text)
            vec = rng.standard_normal(self.sizes.d_txt)
            vec = vec / np.linalg.norm(vec)
        self._emb_cache[text] = vec
        return vec

    def embed_batch(self, texts: list[str]) -> np.ndarray:
        return np.stack([self.text_embedding(t) for t in texts])


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    lr: float = 0.1
    weights: LossWeights = field(default_factory=LossWeights)
    mal: MalConfig = field(default_factory=MalConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    seed: int = 0
    share_head_scales: bool = False

    def __post_init__(self) -> None:
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")


@dataclass(frozen=True)
class StepStats:
    step: int
    total: float
    l_query: float
    l_attr: float
    l_box: float
    l_giou: float
    n_pos: int


@dataclass
class TrainState:
    params_query: HeadParams
    params_attr: HeadParams  # shares the projection array with params_query
    features: list[np.ndarray]
    history: list[StepStats]


def _grid_box(rng: np.random.Generator, slot: int, image_size: tuple[int, int]) -> BoxXYXY:
    # spread objects over a coarse grid so boxes stay well separated
    w, h = image_size
    gx, gy = slot % 3, (slot // 3) % 3
    cx = (gx + 0.5) * w / 3 + float(rng.uniform(-30, 30))
    cy = (gy + 0.5) * h / 3 + float(rng.uniform(-30, 30))
    bw = float(rng.uniform(80, 160))
    bh = float(rng.uniform(80, 160))
    x1 = max(0.0, cx - bw / 2)
    y1 = max(0.0, cy - bh / 2)
    x2 = min(float(w), cx + bw / 2)
    y2 = min(float(h), cy + bh / 2)
    return BoxXYXY(x1, y1, x2, y2, frame=PIXEL)


def generate_world(cfg: WorldConfig) -> ToyWorld:
    """Build a deterministic planted world; same seed gives identical worlds."""
    sz = cfg.sizes
    samples: list[AggregatedSample] = []
    features: list[np.ndarray] = []
    pred_cxcywh: list[np.ndarray] = []
    pred_xyxy_pixel: list[np.ndarray] = []

    for i in range(sz.n_images):
        rng = derive_rng(cfg.seed, "world", i)
        queries = []
        for j in range(sz.queries_per_image):
            if sz.attrs_per_query <= 1:
                n_attr = 1
            else:
                n_attr = 2 + (i + j) % (sz.attrs_per_query - 1)
            attrs = tuple(
                Attribute(
                    aspect=_ASPECT_CYCLE[k % len(_ASPECT_CYCLE)],
                    description=f"attr {i}-{j}-{k}",
                    evidence=(f"attr {i}-{j}-{k}",),
                    confidence=1.0,
                )
                for k in range(n_attr)
            )
            queries.append(QueryEntry(text=f"entity {i}-{j}", kind=KIND_EXPRESSION, attributes=attrs))

        gt: list[GroundTruth] = []
        slot = 0
        for j in range(len(queries)):
            gt.append(GroundTruth(box=_grid_box(rng, slot, sz.image_size), query_index=j))
            slot += 1
        if i == 0:
            # one-to-many: a second box for query 0
            gt.append(GroundTruth(box=_grid_box(rng, slot, sz.image_size), query_index=0))
            slot += 1
            if len(queries) >= 2:
                # multi-label: one box listed under two distinct queries
                shared = _grid_box(rng, slot, sz.image_size)
                slot += 1
                gt.append(GroundTruth(box=shared, query_index=max(0, len(queries) - 2)))
                gt.append(GroundTruth(box=shared, query_index=len(queries) - 1))

        sample = AggregatedSample(
            image_id=f"toy-{i:03d}",
            image_size=sz.image_size,
            queries=tuple(queries),
            ground_truth=tuple(gt),
        )
        samples.append(sample)

        # object rows follow first appearance of each distinct box
        distinct: list[BoxXYXY] = []
        seen: set[tuple] = set()
        for g in sample.ground_truth:
            key = g.box.as_tuple()
            if key not in seen:
                seen.add(key)
                distinct.append(g.box)
        n_pred = len(distinct) + sz.extra_preds
        boxes = np.array(
            [to_normalized(b, sz.image_size).as_tuple() for b in distinct]
        ).reshape(-1, 4)
        jit = rng.uniform(-sz.jitter, sz.jitter, size=boxes.shape)
        boxes = boxes + jit
        extras = np.column_stack([
            rng.uniform(0.1, 0.9, size=sz.extra_preds),
            rng.uniform(0.1, 0.9, size=sz.extra_preds),
            rng.uniform(0.05, 0.2, size=sz.extra_preds),
            rng.uniform(0.05, 0.2, size=sz.extra_preds),
        ])
        all_boxes = np.vstack([boxes, extras])
        all_boxes[:, 0] = np.clip(all_boxes[:, 0], 0.05, 0.95)
        all_boxes[:, 1] = np.clip(all_boxes[:, 1], 0.05, 0.95)
        all_boxes[:, 2] = np.clip(all_boxes[:, 2], 0.01, 0.6)
        all_boxes[:, 3] = np.clip(all_boxes[:, 3], 0.01, 0.6)
        pred_cxcywh.append(all_boxes)
        scale = np.array([sz.image_size[0], sz.image_size[1]] * 2, dtype=np.float64)
        pred_xyxy_pixel.append(cxcywh_to_xyxy(all_boxes) * scale)
        features.append(derive_rng(cfg.seed, "feat", i).standard_normal((n_pred, sz.d_vis)))

    return ToyWorld(
        seed=cfg.seed,
        sizes=sz,
        samples=samples,
        features=features,
        pred_cxcywh=pred_cxcywh,
        pred_xyxy_pixel=pred_xyxy_pixel,
    )


def _gt_cxcywh(cs_gt_boxes, image_size) -> np.ndarray:
    if not cs_gt_boxes:
        return np.zeros((0, 4))
    return np.array([to_normalized(b, image_size).as_tuple() for b in cs_gt_boxes])


def train(world: ToyWorld, cfg: TrainConfig) -> TrainState:
    """Plain full-batch gradient descent on the weighted objective.

    Each step redraws every image's text batch (fresh sampling, seeded by
    (train seed, image id, step)), so batches vary while runs stay bitwise
    reproducible. Boxes are fixed; localization terms flow into the total
    for plumbing validation but carry no gradient.
    """
    sz = world.sizes
    init_rng = derive_rng(cfg.seed, "head-init")
    params_q = HeadParams.init(sz.d_vis, sz.d_txt, rng=init_rng)
    if cfg.share_head_scales:
        params_a = params_q
    else:
        params_a = HeadParams(w=params_q.w, alpha_raw=params_q.alpha_raw, beta=params_q.beta)

    feats = [f.copy() for f in world.features]
    history: list[StepStats] = []

    for step in range(cfg.steps):
        g_w = np.zeros_like(params_q.w)
        g_feats = [np.zeros_like(f) for f in feats]
        g_ar_q = g_b_q = g_ar_a = g_b_a = 0.0
        sum_q = sum_a = sum_box = sum_giou = 0.0
        n_pos_total = 0

        for idx, sample in enumerate(world.samples):
            rng = derive_rng(cfg.seed, "draw", sample.image_id, step)
            tb, cs = sample_rsvg(sample, cfg.sampler, rng)
            f_query = world.embed_batch(tb.query_texts)
            f_attr = world.embed_batch(tb.attr_texts)
            s_q = similarity_logits(feats[idx], f_query, params_q, tb.query_valid)
            s_a = similarity_logits(feats[idx], f_attr, params_a, tb.attr_valid)
            if not (np.isfinite(s_q.values).all() and np.isfinite(s_a.values).all()):
                raise RuntimeError(f"non-finite logits at step {step}")

            gt_boxes = _gt_cxcywh(cs.gt_boxes, sample.image_size)
            assignment = hungarian_match(
                world.pred_cxcywh[idx], s_q, gt_boxes, cs.primary_columns()
            )
            l_q, l_a, g_sq, g_sa = semantic_losses_with_grads(
                s_q, s_a, assignment, world.pred_xyxy_pixel[idx], cs, cfg.mal
            )
            l_box, l_giou = localization_losses(world.pred_cxcywh[idx], gt_boxes, assignment)

            grads_q = backward(feats[idx], f_query, params_q, tb.query_valid,
                               cfg.weights.query * g_sq)
            grads_a = backward(feats[idx], f_attr, params_a, tb.attr_valid,
                               cfg.weights.attr * g_sa)
            g_feats[idx] += grads_q.v + grads_a.v
            g_w += grads_q.w + grads_a.w
            g_ar_q += grads_q.alpha_raw
            g_b_q += grads_q.beta
            g_ar_a += grads_a.alpha_raw
            g_b_a += grads_a.beta

            sum_q += l_q
            sum_a += l_a
            sum_box += l_box
            sum_giou += l_giou
            n_pos_total += assignment.n_pos

        parts = LossParts(query=sum_q, attr=sum_a, box=sum_box, giou=sum_giou)
        total = total_loss(parts, cfg.weights)
        if not math.isfinite(total):
            raise RuntimeError(f"non-finite loss at step {step}")
        history.append(StepStats(step, total, sum_q, sum_a, sum_box, sum_giou, n_pos_total))

        params_q.w -= cfg.lr * g_w  # shared array also updates params_a
        if cfg.share_head_scales:
            params_q.alpha_raw -= cfg.lr * (g_ar_q + g_ar_a)
            params_q.beta -= cfg.lr * (g_b_q + g_b_a)
        else:
            params_q.alpha_raw -= cfg.lr * g_ar_q
            params_q.beta -= cfg.lr * g_b_q
            params_a.alpha_raw -= cfg.lr * g_ar_a
            params_a.beta -= cfg.lr * g_b_a
        for idx in range(len(feats)):
            feats[idx] -= cfg.lr * g_feats[idx]

    return TrainState(params_query=params_q, params_attr=params_a,
                      features=feats, history=history)


@dataclass
class RecoveryReport:
    """Score margins and binarization agreement against the planted matrices.

    ``*_agreement`` is balanced over entry classes: the mean of the accuracy
    on planted ones and the accuracy on planted zeros (valid columns of
    matched rows only). An untrained head therefore sits near 0.5 regardless
    of matrix sparsity. Raw per-entry fractions are reported alongside.
    """

    query_pos_mean: float
    query_neg_mean: float
    attr_pos_mean: float
    attr_neg_mean: float
    query_agreement: float
    attr_agreement: float
    query_raw_agreement: float
    attr_raw_agreement: float
    multilabel_min_pos_score: float | None
    matched_objects: int

    def to_dict(self) -> dict:
        return {
            "query_pos_mean": self.query_pos_mean,
            "query_neg_mean": self.query_neg_mean,
            "attr_pos_mean": self.attr_pos_mean,
            "attr_neg_mean": self.attr_neg_mean,
            "query_agreement": self.query_agreement,
            "attr_agreement": self.attr_agreement,
            "query_raw_agreement": self.query_raw_agreement,
            "attr_raw_agreement": self.attr_raw_agreement,
            "multilabel_min_pos_score": self.multilabel_min_pos_score,
            "matched_objects": self.matched_objects,
        }


class _Tally:
    def __init__(self) -> None:
        self.pos_scores: list[float] = []
        self.neg_scores: list[float] = []
        self.pos_correct = 0
        self.neg_correct = 0

    def add(self, scores: np.ndarray, targets: np.ndarray) -> None:
        pos = targets > 0
        for s in scores[pos]:
            self.pos_scores.append(float(s))
            self.pos_correct += int(s > 0.5)
        for s in scores[~pos]:
            self.neg_scores.append(float(s))
            self.neg_correct += int(s <= 0.5)

    def summary(self) -> tuple[float, float, float, float]:
        pos_mean = float(np.mean(self.pos_scores)) if self.pos_scores else 0.0
        neg_mean = float(np.mean(self.neg_scores)) if self.neg_scores else 0.0
        pos_acc = self.pos_correct / max(1, len(self.pos_scores))
        neg_acc = self.neg_correct / max(1, len(self.neg_scores))
        balanced = (pos_acc + neg_acc) / 2.0
        raw = (self.pos_correct + self.neg_correct) / max(
            1, len(self.pos_scores) + len(self.neg_scores)
        )
        return pos_mean, neg_mean, balanced, raw


def evaluate_recovery(world: ToyWorld, state: TrainState,
                      sampler: SamplerConfig | None = None) -> RecoveryReport:
    """Score the trained head against the planted supervision.

    Every image is laid out as a deterministic full batch; matched prediction
    rows are binarized at 0.5 and compared entry-wise to the planted
    matrices over valid columns.
    """
    from scipy.special import expit

    base = sampler if sampler is not None else SamplerConfig()
    cfg = SamplerConfig(q_max=base.q_max, a_max=base.a_max, seed=0, shuffle=False)

    q_tally = _Tally()
    a_tally = _Tally()
    multilabel_scores: list[float] = []
    matched = 0

    for idx, sample in enumerate(world.samples):
        tb, cs = full_batch(sample, cfg)
        f_query = world.embed_batch(tb.query_texts)
        f_attr = world.embed_batch(tb.attr_texts)
        s_q = similarity_logits(state.features[idx], f_query, state.params_query, tb.query_valid)
        s_a = similarity_logits(state.features[idx], f_attr, state.params_attr, tb.attr_valid)
        gt_boxes = _gt_cxcywh(cs.gt_boxes, sample.image_size)
        assignment = hungarian_match(
            world.pred_cxcywh[idx], s_q, gt_boxes, cs.primary_columns()
        )
        probs_q = expit(s_q.values)
        probs_a = expit(s_a.values)
        for i, j in assignment.pairs:
            matched += 1
            q_scores = probs_q[i, tb.query_valid]
            q_targets = cs.m_q[j, tb.query_valid]
            q_tally.add(q_scores, q_targets)
            a_scores = probs_a[i, tb.attr_valid]
            a_targets = cs.m_a[j, tb.attr_valid]
            a_tally.add(a_scores, a_targets)
            if cs.m_q[j].sum() >= 2:
                for col in np.flatnonzero(cs.m_q[j]):
                    multilabel_scores.append(float(probs_q[i, col]))

    q_pos, q_neg, q_bal, q_raw = q_tally.summary()
    a_pos, a_neg, a_bal, a_raw = a_tally.summary()
    return RecoveryReport(
        query_pos_mean=q_pos,
        query_neg_mean=q_neg,
        attr_pos_mean=a_pos,
        attr_neg_mean=a_neg,
        query_agreement=q_bal,
        attr_agreement=a_bal,
        query_raw_agreement=q_raw,
        attr_raw_agreement=a_raw,
        multilabel_min_pos_score=min(multilabel_scores) if multilabel_scores else None,
        matched_objects=matched,
    )


def write_history_csv(history: list[StepStats], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fp:
        writer = csv.writer(fp)
        writer.writerow(["step", "total", "l_query", "l_attr", "l_box", "l_giou"])
        for h in history:
            writer.writerow([h.step, repr(h.total), repr(h.l_query), repr(h.l_attr),
                             repr(h.l_box), repr(h.l_giou)])


def write_recovery_json(report: RecoveryReport, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fp:
        json.dump(report.to_dict(), fp, indent=2)
