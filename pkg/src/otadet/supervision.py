"""Per-iteration text batches and binary correspondence supervision.

A sampler selects query texts for one image (all positive categories plus
random negatives for detection-style data; a random expression subset for
grounding-style data), lays them out in fixed-size padded slots, and builds
three binary matrices: object-to-query, object-to-attribute, and the
query-to-attribute ownership map. Attribute slots use a per-query block
layout of width ``a_max``, so the object-attribute matrix is exactly the
thresholded product of the other two.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import KIND_CATEGORY, AggregatedSample, GroundTruth, QueryEntry, category_query, normalize_text
from .decomp import derive_rng
from .geometry import BoxXYXY

PAD_TEXT = ""

MATRIX_MAGIC = b"OTCM"
_HEADER = struct.Struct("<4sIII")  # magic, rows, cols, reserved


@dataclass(frozen=True)
class SamplerConfig:
    q_max: int = 60
    a_max: int = 10
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self) -> None:
        if self.q_max < 1 or self.a_max < 1:
            raise ValueError("q_max and a_max must be >= 1")


@dataclass
class TextBatch:
    """Padded query/attribute text slots for one sampled image.

    ``attr_texts`` is flat with slot ``i * a_max + k`` holding attribute k of
    query slot i; valid attribute slots form a prefix of each query's block.
    ``query_origin`` maps a slot to the query's index in the source sample;
    negative-category slots have no origin.
    """

    query_texts: list[str]
    attr_texts: list[str]
    query_valid: np.ndarray
    attr_valid: np.ndarray
    query_origin: dict[int, int]

    @property
    def q_max(self) -> int:
        return len(self.query_texts)

    @property
    def a_max(self) -> int:
        return len(self.attr_texts) // len(self.query_texts)

    def block(self, slot: int) -> slice:
        return slice(slot * self.a_max, (slot + 1) * self.a_max)


@dataclass
class CorrespondenceSet:
    """Binary supervision matrices for one sampled image.

    ``m_q`` is objects x query slots, ``m_a`` objects x attribute slots,
    ``m_map`` query slots x attribute slots (ownership). Rows of ``m_q`` with
    several ones encode multi-label association; columns with several ones
    encode one-to-many detection.
    """

    m_q: np.ndarray
    m_a: np.ndarray
    m_map: np.ndarray
    gt_boxes: list[BoxXYXY]

    @property
    def n_obj(self) -> int:
        return self.m_q.shape[0]

    def primary_columns(self) -> list[int]:
        """First query column of each object; used as its matcher class."""
        cols = []
        for row in self.m_q:
            nz = np.flatnonzero(row)
            if nz.size == 0:
                raise ValueError("object row with no query column")
            cols.append(int(nz[0]))
        return cols


def _assemble(
    actives: list[tuple[int | None, QueryEntry]],
    sample: AggregatedSample,
    cfg: SamplerConfig,
    rng: np.random.Generator | None,
    shuffle: bool,
) -> tuple[TextBatch, CorrespondenceSet]:
    if shuffle:
        if rng is None:
            raise ValueError("shuffling requires an rng")
        order = rng.permutation(len(actives))
        actives = [actives[int(i)] for i in order]

    q_max, a_max = cfg.q_max, cfg.a_max
    query_texts = [PAD_TEXT] * q_max
    attr_texts = [PAD_TEXT] * (q_max * a_max)
    query_valid = np.zeros(q_max, dtype=bool)
    attr_valid = np.zeros(q_max * a_max, dtype=bool)
    query_origin: dict[int, int] = {}

    for slot, (origin, query) in enumerate(actives):
        query_texts[slot] = query.text
        query_valid[slot] = True
        if origin is not None:
            query_origin[slot] = origin
        for k, attr in enumerate(query.attributes[:a_max]):
            attr_texts[slot * a_max + k] = attr.description
            attr_valid[slot * a_max + k] = True

    tb = TextBatch(query_texts, attr_texts, query_valid, attr_valid, query_origin)
    slot_of = {origin: slot for slot, origin in query_origin.items()}
    cs = build_correspondence(sample.ground_truth, slot_of, tb)
    return tb, cs


def build_correspondence(
    gt_entries: Sequence[GroundTruth],
    slot_of_query: dict[int, int],
    tb: TextBatch,
) -> CorrespondenceSet:
    """Construct the supervision matrices for a slot layout.

    Ground-truth entries whose query was not sampled are dropped. Entries
    with bit-identical boxes merge into one object row carrying a one in
    every associated query column (multi-label association).
    """
    q_max, a_max = tb.q_max, tb.a_max
    objects: list[tuple[BoxXYXY, set[int]]] = []
    index: dict[tuple, int] = {}
    for g in gt_entries:
        slot = slot_of_query.get(g.query_index)
        if slot is None:
            continue
        key = g.box.as_tuple()
        if key not in index:
            index[key] = len(objects)
            objects.append((g.box, set()))
        objects[index[key]][1].add(slot)

    n_obj = len(objects)
    m_q = np.zeros((n_obj, q_max), dtype=np.int8)
    for i, (_, slots) in enumerate(objects):
        for slot in slots:
            m_q[i, slot] = 1

    m_map = np.zeros((q_max, q_max * a_max), dtype=np.int8)
    for slot in range(q_max):
        if tb.query_valid[slot]:
            block = tb.block(slot)
            m_map[slot, block] = tb.attr_valid[block]

    m_a = ((m_q.astype(np.int32) @ m_map.astype(np.int32)) > 0).astype(np.int8)
    return CorrespondenceSet(m_q=m_q, m_a=m_a, m_map=m_map,
                             gt_boxes=[b for b, _ in objects])


def sample_ovad(
    sample: AggregatedSample,
    vocabulary: Sequence[str],
    cfg: SamplerConfig,
    rng: np.random.Generator,
) -> tuple[TextBatch, CorrespondenceSet]:
    """Detection-style draw: all positive categories plus random negatives.

    The negative count is uniform on {1..|negatives|}, clipped so the batch
    never exceeds ``q_max`` (positives always win the room). Negative columns
    get all-zero supervision.
    """
    for q in sample.queries:
        if q.kind != KIND_CATEGORY:
            raise ValueError(f"sample_ovad requires category queries, got {q.kind!r}")
    positives: list[tuple[int | None, QueryEntry]] = list(enumerate(sample.queries))
    if len(positives) > cfg.q_max:
        raise ValueError(
            f"{len(positives)} positive categories exceed q_max={cfg.q_max}"
        )
    pos_texts = {normalize_text(q.text) for q in sample.queries}
    vocab_norm = [normalize_text(v) for v in vocabulary]
    if not pos_texts <= set(vocab_norm):
        missing = sorted(pos_texts - set(vocab_norm))
        raise ValueError(f"vocabulary is missing sample categories: {missing}")
    negatives_pool = [v for v in vocab_norm if v not in pos_texts]

    chosen_negs: list[str] = []
    if negatives_pool:
        n_neg = int(rng.integers(1, len(negatives_pool) + 1))
        n_neg = min(n_neg, cfg.q_max - len(positives), len(negatives_pool))
        if n_neg > 0:
            picks = rng.choice(len(negatives_pool), size=n_neg, replace=False)
            chosen_negs = [negatives_pool[int(i)] for i in picks]

    actives = positives + [(None, category_query(t)) for t in chosen_negs]
    return _assemble(actives, sample, cfg, rng, shuffle=cfg.shuffle)


def sample_rsvg(
    sample: AggregatedSample,
    cfg: SamplerConfig,
    rng: np.random.Generator,
) -> tuple[TextBatch, CorrespondenceSet]:
    """Grounding-style draw: a uniform-size random subset of the expressions.

    Ground-truth boxes of unsampled expressions are dropped for this
    iteration; keeping them would mark their objects negative for every
    sampled column and poison the negative branch of the alignment loss.
    """
    k = len(sample.queries)
    if k == 0:
        raise ValueError(f"sample {sample.image_id!r} has no queries")
    n = int(rng.integers(1, min(k, cfg.q_max) + 1))
    picks = sorted(int(i) for i in rng.choice(k, size=n, replace=False))
    actives: list[tuple[int | None, QueryEntry]] = [(i, sample.queries[i]) for i in picks]
    return _assemble(actives, sample, cfg, rng, shuffle=cfg.shuffle)


def full_batch(sample: AggregatedSample, cfg: SamplerConfig) -> tuple[TextBatch, CorrespondenceSet]:
    """Deterministic unshuffled layout with every query in original order."""
    if len(sample.queries) > cfg.q_max:
        raise ValueError(f"{len(sample.queries)} queries exceed q_max={cfg.q_max}")
    actives: list[tuple[int | None, QueryEntry]] = list(enumerate(sample.queries))
    return _assemble(actives, sample, cfg, rng=None, shuffle=False)


def verify_consistency(cs: CorrespondenceSet, tb: TextBatch) -> list[str]:
    """Check every structural invariant; returns one message per violation."""
    violations: list[str] = []
    q_max, a_max = tb.q_max, tb.a_max
    n_attr = q_max * a_max

    if cs.m_q.shape != (cs.n_obj, q_max):
        violations.append(f"m_q shape {cs.m_q.shape} != ({cs.n_obj}, {q_max})")
        return violations
    if cs.m_a.shape != (cs.n_obj, n_attr):
        violations.append(f"m_a shape {cs.m_a.shape} != ({cs.n_obj}, {n_attr})")
        return violations
    if cs.m_map.shape != (q_max, n_attr):
        violations.append(f"m_map shape {cs.m_map.shape} != ({q_max}, {n_attr})")
        return violations

    for name, m in (("m_q", cs.m_q), ("m_a", cs.m_a), ("m_map", cs.m_map)):
        if not np.isin(m, (0, 1)).all():
            violations.append(f"{name} contains non-binary entries")

    for j in range(q_max):
        col_used = cs.m_q[:, j].any() if cs.n_obj else False
        if col_used and not tb.query_valid[j]:
            violations.append(f"m_q has a one in padded query column {j}")
        block = tb.block(j)
        valid_block = tb.attr_valid[block]
        if not tb.query_valid[j]:
            if valid_block.any():
                violations.append(f"padded query slot {j} has valid attribute slots")
            if tb.query_texts[j] != PAD_TEXT:
                violations.append(f"padded query slot {j} holds non-empty text")
            if cs.m_map[j].any():
                violations.append(f"m_map row {j} non-zero for padded query")
            continue
        prefix = int(valid_block.sum())
        if valid_block[:prefix].sum() != prefix or valid_block[prefix:].any():
            violations.append(f"attribute validity of slot {j} is not a prefix")
        row = cs.m_map[j]
        outside = row.copy()
        outside[block] = 0
        if outside.any():
            violations.append(f"m_map row {j} has ones outside its block")
        if not np.array_equal(row[block], valid_block.astype(row.dtype)):
            violations.append(f"m_map row {j} disagrees with attribute validity")

    for k_slot in range(n_attr):
        if not tb.attr_valid[k_slot] and tb.attr_texts[k_slot] != PAD_TEXT:
            violations.append(f"padded attribute slot {k_slot} holds non-empty text")

    expected = ((cs.m_q.astype(np.int32) @ cs.m_map.astype(np.int32)) > 0).astype(np.int8)
    if not np.array_equal(expected, cs.m_a):
        bad = np.argwhere(expected != cs.m_a)
        i, k_slot = (int(v) for v in bad[0])
        violations.append(
            f"m_a disagrees with step(m_q @ m_map) at ({i}, {k_slot}) and "
            f"{len(bad) - 1} more entries"
        )

    if len(cs.gt_boxes) != cs.n_obj:
        violations.append(f"{len(cs.gt_boxes)} gt boxes for {cs.n_obj} object rows")
    for i in range(cs.n_obj):
        if not cs.m_q[i].any():
            violations.append(f"object row {i} has no query column")

    return violations


# ---------------------------------------------------------------------------
# Debug / export surfaces

def save_matrix(path: str | Path, m: np.ndarray) -> None:
    """Dense export: 16-byte header (magic, rows, cols) then row-major uint8."""
    m = np.asarray(m)
    if m.ndim != 2:
        raise ValueError("only 2-d matrices are exportable")
    with open(path, "wb") as fp:
        fp.write(_HEADER.pack(MATRIX_MAGIC, m.shape[0], m.shape[1], 0))
        fp.write(np.ascontiguousarray(m, dtype=np.uint8).tobytes())


def load_matrix(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fp:
        header = fp.read(_HEADER.size)
        if len(header) != _HEADER.size:
            raise ValueError(f"{path}: truncated header")
        magic, rows, cols, _ = _HEADER.unpack(header)
        if magic != MATRIX_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        payload = fp.read(rows * cols)
        if len(payload) != rows * cols:
            raise ValueError(f"{path}: truncated payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(rows, cols).copy()


def batch_debug_dict(tb: TextBatch, cs: CorrespondenceSet) -> dict:
    return {
        "query_texts": tb.query_texts,
        "attr_texts": tb.attr_texts,
        "query_valid": tb.query_valid.astype(int).tolist(),
        "attr_valid": tb.attr_valid.astype(int).tolist(),
        "query_origin": {str(k): v for k, v in tb.query_origin.items()},
        "m_q": cs.m_q.tolist(),
        "m_a": cs.m_a.tolist(),
        "m_map": cs.m_map.tolist(),
        "gt_boxes": [list(b.as_tuple()) for b in cs.gt_boxes],
    }


def dump_batch_debug(path: str | Path, tb: TextBatch, cs: CorrespondenceSet) -> None:
    with open(path, "w", encoding="utf-8") as fp:
        json.dump(batch_debug_dict(tb, cs), fp, ensure_ascii=False)
