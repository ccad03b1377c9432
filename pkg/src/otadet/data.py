"""Dataset records and the two task reformulations.

Sentence-level grounding triplets (one expression, one box) and
category-annotated detection data both convert into per-image aggregated
samples: an ordered query set plus ground-truth boxes indexed by query.
Samples round-trip through JSONL.
"""

from __future__ import annotations

import json
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .decomp import Attribute
from .geometry import PIXEL, BoxXYXY

KIND_CATEGORY = "category"
KIND_EXPRESSION = "expression"
_KINDS = (KIND_CATEGORY, KIND_EXPRESSION)


class JsonlError(ValueError):
    """A malformed line in a JSONL file; carries the 1-based line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


def normalize_text(text: str) -> str:
    """NFC-normalize, trim, and collapse internal whitespace. Case preserved."""
    return " ".join(unicodedata.normalize("NFC", text).split())


@dataclass(frozen=True)
class GroundingTriplet:
    """One (image, expression, box) annotation in pixel coordinates."""

    image_id: str
    image_size: tuple[int, int]
    expression: str
    box: BoxXYXY

    def __post_init__(self) -> None:
        w, h = self.image_size
        if not (isinstance(w, int) and isinstance(h, int)) or w <= 0 or h <= 0:
            raise ValueError(f"image_size must be positive integers, got {self.image_size}")
        if not normalize_text(self.expression):
            raise ValueError("expression is empty after trimming")
        if self.box.frame != PIXEL:
            raise ValueError("triplet boxes must be in the pixel frame")
        b = self.box
        if b.x1 < 0 or b.y1 < 0 or b.x2 > w or b.y2 > h:
            raise ValueError(
                f"box {b.as_tuple()} lies outside image bounds {self.image_size}"
            )


@dataclass(frozen=True)
class QueryEntry:
    """One query text, either a category name or a referring expression."""

    text: str
    kind: str
    attributes: tuple[Attribute, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in _KINDS:
            raise ValueError(f"unknown query kind {self.kind!r}")
        if not normalize_text(self.text):
            raise ValueError("query text is empty after trimming")
        object.__setattr__(self, "attributes", tuple(self.attributes))
        if self.kind == KIND_CATEGORY:
            # a category acts as its own single attribute
            if len(self.attributes) != 1 or self.attributes[0].description != self.text:
                raise ValueError(
                    f"category query {self.text!r} must carry exactly its self-attribute"
                )

    def with_attributes(self, attributes: Sequence[Attribute]) -> "QueryEntry":
        return QueryEntry(self.text, self.kind, tuple(attributes))


def category_query(text: str) -> QueryEntry:
    """Build a category query carrying its self-attribute."""
    norm = normalize_text(text)
    if not norm:
        raise ValueError("category text is empty after trimming")
    attr = Attribute(aspect="category", description=norm, evidence=(norm,), confidence=1.0)
    return QueryEntry(text=norm, kind=KIND_CATEGORY, attributes=(attr,))


@dataclass(frozen=True)
class GroundTruth:
    """One labeled box pointing at its query by index."""

    box: BoxXYXY
    query_index: int


@dataclass(frozen=True)
class AggregatedSample:
    """Per-image query set with indexed ground truth.

    A sample with no queries is representable (``usable`` is False) so that
    empty annotation records survive a round trip; loaders skip them.
    """

    image_id: str
    image_size: tuple[int, int]
    queries: tuple[QueryEntry, ...]
    ground_truth: tuple[GroundTruth, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "queries", tuple(self.queries))
        object.__setattr__(self, "ground_truth", tuple(self.ground_truth))
        w, h = self.image_size
        if w <= 0 or h <= 0:
            raise ValueError(f"image_size must be positive, got {self.image_size}")
        seen: set[str] = set()
        for q in self.queries:
            key = normalize_text(q.text)
            if key in seen:
                raise ValueError(f"duplicate query text {q.text!r} in {self.image_id}")
            seen.add(key)
        referenced: set[int] = set()
        for g in self.ground_truth:
            if not (0 <= g.query_index < len(self.queries)):
                raise ValueError(
                    f"ground-truth query_index {g.query_index} out of range "
                    f"for K={len(self.queries)} in {self.image_id}"
                )
            referenced.add(g.query_index)
        if self.queries and referenced != set(range(len(self.queries))):
            missing = sorted(set(range(len(self.queries))) - referenced)
            raise ValueError(
                f"queries {missing} in {self.image_id} have no ground-truth box"
            )

    @property
    def usable(self) -> bool:
        return len(self.queries) >= 1


@dataclass(frozen=True)
class DatasetManifest:
    """Dataset-level description; carries the category vocabulary for OVAD."""

    name: str
    task_kind: str  # "ovad" | "rsvg"
    sample_count: int
    category_vocabulary: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if self.task_kind not in ("ovad", "rsvg"):
            raise ValueError(f"unknown task kind {self.task_kind!r}")
        if (self.category_vocabulary is not None) != (self.task_kind == "ovad"):
            raise ValueError("category_vocabulary is present iff task_kind is 'ovad'")
        if self.category_vocabulary is not None:
            object.__setattr__(self, "category_vocabulary", tuple(self.category_vocabulary))
            if len(set(self.category_vocabulary)) != len(self.category_vocabulary):
                raise ValueError("category_vocabulary entries must be unique")


# ---------------------------------------------------------------------------
# Reformulations

def aggregate_image_level(triplets: Sequence[GroundingTriplet]) -> list[AggregatedSample]:
    """Group triplets by image into aggregated samples.

    Triplets with identical normalized expression within one image merge into
    a single query referenced by several ground-truth boxes. Query order and
    box order follow first appearance, so the output is deterministic.
    """
    by_image: dict[str, dict] = {}
    for t in triplets:
        rec = by_image.get(t.image_id)
        if rec is None:
            rec = {"size": t.image_size, "texts": [], "index": {}, "gt": []}
            by_image[t.image_id] = rec
        elif rec["size"] != t.image_size:
            raise ValueError(
                f"inconsistent image_size for image {t.image_id!r}: "
                f"{rec['size']} vs {t.image_size}"
            )
        key = normalize_text(t.expression)
        if key not in rec["index"]:
            rec["index"][key] = len(rec["texts"])
            rec["texts"].append(key)
        rec["gt"].append(GroundTruth(box=t.box, query_index=rec["index"][key]))

    samples = []
    for image_id, rec in by_image.items():
        queries = tuple(QueryEntry(text=txt, kind=KIND_EXPRESSION) for txt in rec["texts"])
        samples.append(AggregatedSample(
            image_id=image_id,
            image_size=rec["size"],
            queries=queries,
            ground_truth=tuple(rec["gt"]),
        ))
    return samples


def naive_reformulate(triplet: GroundingTriplet) -> AggregatedSample:
    """One triplet becomes a single-query sample; no cross-triplet merging."""
    query = QueryEntry(text=normalize_text(triplet.expression), kind=KIND_EXPRESSION)
    return AggregatedSample(
        image_id=triplet.image_id,
        image_size=triplet.image_size,
        queries=(query,),
        ground_truth=(GroundTruth(box=triplet.box, query_index=0),),
    )


def flatten_to_triplets(sample: AggregatedSample) -> list[GroundingTriplet]:
    """Inverse view of aggregation: one triplet per ground-truth entry."""
    return [
        GroundingTriplet(
            image_id=sample.image_id,
            image_size=sample.image_size,
            expression=sample.queries[g.query_index].text,
            box=g.box,
        )
        for g in sample.ground_truth
    ]


def from_detection_annotations(
    image_id: str,
    image_size: tuple[int, int],
    boxes_with_categories: Sequence[tuple[BoxXYXY, str]],
) -> AggregatedSample:
    """Category-annotated boxes to a sample whose queries are the categories.

    Zero boxes yield a K=0 sample flagged unusable rather than an error.
    """
    texts: list[str] = []
    index: dict[str, int] = {}
    gt: list[GroundTruth] = []
    for box, category in boxes_with_categories:
        norm = normalize_text(category)
        if not norm:
            raise ValueError(f"empty category text in image {image_id!r}")
        if norm not in index:
            index[norm] = len(texts)
            texts.append(norm)
        gt.append(GroundTruth(box=box, query_index=index[norm]))
    return AggregatedSample(
        image_id=image_id,
        image_size=image_size,
        queries=tuple(category_query(t) for t in texts),
        ground_truth=tuple(gt),
    )


# ---------------------------------------------------------------------------
# JSONL (one sample or triplet per line)

def sample_to_dict(sample: AggregatedSample) -> dict:
    return {
        "image_id": sample.image_id,
        "image_size": list(sample.image_size),
        "queries": [
            {
                "text": q.text,
                "kind": q.kind,
                "attributes": [
                    {
                        "aspect": a.aspect,
                        "description": a.description,
                        "confidence": a.confidence,
                        "evidence": list(a.evidence),
                    }
                    for a in q.attributes
                ],
            }
            for q in sample.queries
        ],
        "gt": [
            {"box": list(g.box.as_tuple()), "query_index": g.query_index}
            for g in sample.ground_truth
        ],
    }


def sample_from_dict(d: dict) -> AggregatedSample:
    queries = tuple(
        QueryEntry(
            text=q["text"],
            kind=q["kind"],
            attributes=tuple(
                Attribute(
                    aspect=a["aspect"],
                    description=a["description"],
                    evidence=tuple(a.get("evidence", [])),
                    confidence=float(a.get("confidence", 1.0)),
                )
                for a in q.get("attributes", [])
            ),
        )
        for q in d["queries"]
    )
    gt = tuple(
        GroundTruth(
            box=BoxXYXY(*[float(v) for v in g["box"]], frame=PIXEL),
            query_index=int(g["query_index"]),
        )
        for g in d["gt"]
    )
    return AggregatedSample(
        image_id=d["image_id"],
        image_size=(int(d["image_size"][0]), int(d["image_size"][1])),
        queries=queries,
        ground_truth=gt,
    )


def triplet_to_dict(t: GroundingTriplet) -> dict:
    return {
        "image_id": t.image_id,
        "image_size": list(t.image_size),
        "expression": t.expression,
        "box": list(t.box.as_tuple()),
    }


def triplet_from_dict(d: dict) -> GroundingTriplet:
    return GroundingTriplet(
        image_id=d["image_id"],
        image_size=(int(d["image_size"][0]), int(d["image_size"][1])),
        expression=d["expression"],
        box=BoxXYXY(*[float(v) for v in d["box"]], frame=PIXEL),
    )


@dataclass
class LoadResult:
    """Loaded records plus any lines skipped in lenient mode."""

    samples: list = field(default_factory=list)
    skipped: list[tuple[int, str]] = field(default_factory=list)


def _load_jsonl(path: str | Path, parse_line, strict: bool) -> LoadResult:
    result = LoadResult()
    with open(path, "r", encoding="utf-8") as fp:
        for line_no, line in enumerate(fp, start=1):
            if not line.strip():
                continue
            try:
                result.samples.append(parse_line(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                if strict:
                    raise JsonlError(line_no, str(exc)) from exc
                result.skipped.append((line_no, str(exc)))
    return result


def load_jsonl(path: str | Path, strict: bool = True) -> LoadResult:
    """Load aggregated samples; strict mode aborts on the first bad line."""
    return _load_jsonl(path, sample_from_dict, strict)


def save_jsonl(samples: Iterable[AggregatedSample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fp:
        for s in samples:
            fp.write(json.dumps(sample_to_dict(s), ensure_ascii=False) + "\n")


def load_triplets_jsonl(path: str | Path, strict: bool = True) -> LoadResult:
    return _load_jsonl(path, triplet_from_dict, strict)


def save_triplets_jsonl(triplets: Iterable[GroundingTriplet], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fp:
        for t in triplets:
            fp.write(json.dumps(triplet_to_dict(t), ensure_ascii=False) + "\n")


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    payload = {
        "name": manifest.name,
        "task_kind": manifest.task_kind,
        "sample_count": manifest.sample_count,
    }
    if manifest.category_vocabulary is not None:
        payload["category_vocabulary"] = list(manifest.category_vocabulary)
    with open(path, "w", encoding="utf-8") as fp:
        json.dump(payload, fp, ensure_ascii=False, indent=2)


def load_manifest(path: str | Path) -> DatasetManifest:
    with open(path, "r", encoding="utf-8") as fp:
        d = json.load(fp)
    vocab = d.get("category_vocabulary")
    return DatasetManifest(
        name=d["name"],
        task_kind=d["task_kind"],
        sample_count=int(d["sample_count"]),
        category_vocabulary=tuple(vocab) if vocab is not None else None,
    )
