"""Attribute-level decomposition of referring expressions.

A caption is sent to a chat-completion service (or a deterministic offline
mock) with a structured extraction prompt; the JSON reply is parsed into
attributes and checked against the verbatim-extraction rules. Every accepted
attribute description is an exact substring of its source caption.
"""

from __future__ import annotations

import json
import re
import time
import unicodedata
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

ASPECTS: tuple[str, ...] = (
    "category", "color", "size", "shape", "material", "texture", "number",
    "state", "part", "text", "brand", "activity", "pose", "status",
    "position", "orientation", "spatial_relation", "distance", "environment",
    "weather", "time", "context", "purpose", "other",
)

DEFAULT_A_MAX = 10

PROMPT_VERSION = "v1"

# Versioned extraction-prompt asset. `{caption}` is the single interpolation
# point; the caption is escaped for the surrounding double quotes.
PROMPT_TEMPLATE = """\
Role: You are a grounding-caption analyzer designed to extract target-centric attributes from visual grounding captions.

Task: Given a referring expression, identify the PRIMARY TARGET object and extract ALL its attributes as verbatim phrases directly from the caption.

Critical Understanding:

Before extracting attributes, understand that:
- The ENTIRE caption describes ONE single target object for visual grounding, not multiple separate targets.
- ALL words in the caption must be parsed; the entire expression serves to uniquely identify this one target.
- Other objects mentioned (e.g., cars, buildings, people) are REFERENCE OBJECTS that help locate the primary target through spatial relationships.
- These reference objects are NOT separate targets; they exist solely to describe WHERE or IN RELATION TO WHAT the target is located.

Extraction Rules:

Follow these rules strictly when extracting attributes:
1. Parse completely: Process EVERY word in the caption. Do not stop early; the full sentence contributes to grounding the target.
2. Target-centric only: Every extracted attribute must describe the target itself. Reference objects should appear only within spatial_relation attributes.
3. Verbatim extraction: The "description" field must be an exact substring from the caption. No paraphrasing, no added words, no synonyms.
4. Complete spatial relations: When a clause mentions other objects (e.g., "a white sedan in front of it"), extract it COMPLETELY as a spatial_relation attribute; do not break it apart.
5. Maintain semantic coherence: Keep semantically connected phrases together as single attributes. For example, "driving the left side onto the road" is ONE state attribute, not separate position and environment attributes.
6. No hallucination: Only extract what is explicitly stated. If uncertain about any aspect, omit it rather than inferring or adding information.
7. Output format: Return a single valid JSON object without markdown code fences. The object has fields "primary_target" (string), "attributes" (array of objects with "aspect", "description", "caption_evidence", "confidence") and "analysis" (string).

Attribute Aspects:

The following aspects may be present in captions:
category, color, size, shape, material, texture, number, state, part, text, brand, activity, pose, status, position, orientation, spatial_relation, distance, environment, weather, time, context, purpose, or any other observable property.

Input Caption:
"{caption}"
"""


class ResponseParseError(ValueError):
    """Raised when a completion reply cannot be parsed into a result."""


class TransportError(RuntimeError):
    """Raised when the completion endpoint cannot be reached or replies malformed."""


@dataclass(frozen=True)
class Attribute:
    """One extracted (value text, aspect) pair with evidence spans.

    ``description`` must be an exact substring of the source caption; this is
    enforced by :func:`validate`, not at construction time, so that malformed
    replies can be represented and then rejected.
    """

    aspect: str
    description: str
    evidence: tuple[str, ...] = ()
    confidence: float = 1.0

    def __post_init__(self) -> None:
        if not isinstance(self.aspect, str) or not self.aspect:
            raise ValueError("attribute aspect must be a non-empty string")
        if not isinstance(self.description, str):
            raise ValueError("attribute description must be a string")
        object.__setattr__(self, "evidence", tuple(self.evidence))
        object.__setattr__(self, "confidence", float(self.confidence))

    def to_dict(self) -> dict:
        return {
            "aspect": self.aspect,
            "description": self.description,
            "evidence": list(self.evidence),
            "confidence": self.confidence,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Attribute":
        return cls(
            aspect=d["aspect"],
            description=d["description"],
            evidence=tuple(d.get("evidence", [])),
            confidence=float(d.get("confidence", 1.0)),
        )


@dataclass(frozen=True)
class DecompositionResult:
    """Parsed reply: primary target plus the ordered attribute list."""

    primary_target: str
    attributes: tuple[Attribute, ...]
    analysis: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "attributes", tuple(self.attributes))


@dataclass(frozen=True)
class Violation:
    """One broken extraction rule; hard violations reject the result."""

    rule_id: str
    message: str
    hard: bool


@dataclass
class ValidationReport:
    """Outcome of checking a decomposition against its source caption."""

    verdict: str  # "accept" | "reject"
    violations: list[Violation] = field(default_factory=list)
    attribute_flags: list[list[str]] = field(default_factory=list)
    attempt_count: int = 1
    transcript: list[dict] = field(default_factory=list)

    @property
    def accepted(self) -> bool:
        return self.verdict == "accept"


def _nfc(text: str) -> str:
    return unicodedata.normalize("NFC", text)


def _escape_caption(caption: str) -> str:
    return caption.replace("\\", "\\\\").replace('"', '\\"')


def build_prompt(caption: str) -> str:
    """Interpolate the caption into the versioned extraction prompt."""
    if not caption or not caption.strip():
        raise ValueError("caption must be non-empty")
    return PROMPT_TEMPLATE.replace("{caption}", _escape_caption(caption))


def extract_caption_from_prompt(prompt: str) -> str:
    """Inverse of :func:`build_prompt`; used by offline clients."""
    marker = 'Input Caption:\n"'
    pos = prompt.rfind(marker)
    if pos < 0:
        raise ValueError("prompt does not contain an input caption section")
    body = prompt[pos + len(marker):]
    end = body.rfind('"')
    if end < 0:
        raise ValueError("unterminated caption quote in prompt")
    return body[:end].replace('\\"', '"').replace("\\\\", "\\")


def _strip_fences(raw: str) -> str:
    s = raw.strip()
    if s.startswith("```"):
        first_newline = s.find("\n")
        s = s[first_newline + 1:] if first_newline >= 0 else ""
        if s.rstrip().endswith("```"):
            s = s.rstrip()[:-3]
    return s.strip()


def parse_response(raw: str) -> DecompositionResult:
    """Parse a completion reply, tolerating surrounding markdown fences."""
    body = _strip_fences(raw)
    try:
        obj = json.loads(body)
    except json.JSONDecodeError as exc:
        raise ResponseParseError(f"malformed JSON reply: {exc}") from exc
    if not isinstance(obj, dict):
        raise ResponseParseError("reply is not a JSON object")
    if "primary_target" not in obj:
        raise ResponseParseError("reply missing field 'primary_target'")
    if "attributes" not in obj:
        raise ResponseParseError("reply missing field 'attributes'")
    if not isinstance(obj["attributes"], list):
        raise ResponseParseError("'attributes' must be a list")
    attrs: list[Attribute] = []
    for k, item in enumerate(obj["attributes"]):
        if not isinstance(item, dict):
            raise ResponseParseError(f"attribute {k} is not an object")
        aspect = item.get("aspect")
        description = item.get("description")
        if not isinstance(aspect, str) or not aspect:
            raise ResponseParseError(f"attribute {k} missing 'aspect'")
        if not isinstance(description, str):
            raise ResponseParseError(f"attribute {k} missing 'description'")
        confidence = item.get("confidence", 1.0)
        if isinstance(confidence, bool) or not isinstance(confidence, (int, float)):
            raise ResponseParseError(f"attribute {k} has non-numeric confidence")
        evidence = item.get("caption_evidence", item.get("evidence", []))
        if not isinstance(evidence, list) or not all(isinstance(e, str) for e in evidence):
            raise ResponseParseError(f"attribute {k} has malformed evidence list")
        attrs.append(Attribute(aspect, description, tuple(evidence), float(confidence)))
    return DecompositionResult(
        primary_target=str(obj["primary_target"]),
        attributes=tuple(attrs),
        analysis=str(obj.get("analysis", "")),
    )


def serialize_result(result: DecompositionResult) -> str:
    """JSON form accepted back by :func:`parse_response` (round-trip identity)."""
    return json.dumps(
        {
            "primary_target": result.primary_target,
            "attributes": [
                {
                    "aspect": a.aspect,
                    "description": a.description,
                    "caption_evidence": list(a.evidence),
                    "confidence": a.confidence,
                }
                for a in result.attributes
            ],
            "analysis": result.analysis,
        },
        ensure_ascii=False,
    )


def validate(caption: str, result: DecompositionResult,
             a_max: int = DEFAULT_A_MAX) -> ValidationReport:
    """Check a parsed result against the extraction rules.

    Hard rules (any failure rejects): every description and evidence string is
    an exact substring of the caption after NFC normalization; confidence lies
    in [0, 1]; the attribute list is non-empty. Soft rules only flag: missing
    category aspect, more than ``a_max`` attributes, unknown aspect strings.
    """
    caption_n = _nfc(caption)
    violations: list[Violation] = []
    flags: list[list[str]] = []

    if not result.attributes:
        violations.append(Violation("empty-attributes", "result has no attributes", hard=True))

    for k, attr in enumerate(result.attributes):
        attr_flags: list[str] = []
        if _nfc(attr.description) not in caption_n:
            violations.append(Violation(
                "verbatim-description",
                f"attribute {k} description {attr.description!r} is not a caption substring",
                hard=True,
            ))
            attr_flags.append("verbatim-description")
        for e in attr.evidence:
            # a trailing "..." marks deliberate truncation of a long span;
            # the remainder must still match byte-exactly
            probe = _nfc(e[:-3] if e.endswith("...") else e)
            if probe not in caption_n:
                violations.append(Violation(
                    "verbatim-evidence",
                    f"attribute {k} evidence {e!r} is not a caption substring",
                    hard=True,
                ))
                attr_flags.append("verbatim-evidence")
        if not (0.0 <= attr.confidence <= 1.0):
            violations.append(Violation(
                "confidence-range",
                f"attribute {k} confidence {attr.confidence} outside [0, 1]",
                hard=True,
            ))
            attr_flags.append("confidence-range")
        if attr.aspect not in ASPECTS:
            violations.append(Violation(
                "unknown-aspect",
                f"attribute {k} aspect {attr.aspect!r} is outside the known taxonomy",
                hard=False,
            ))
            attr_flags.append("unknown-aspect")
        flags.append(attr_flags)

    if result.attributes and not any(a.aspect == "category" for a in result.attributes):
        violations.append(Violation("missing-category", "no category aspect extracted", hard=False))
    if len(result.attributes) > a_max:
        violations.append(Violation(
            "over-limit",
            f"{len(result.attributes)} attributes exceed the cap of {a_max}",
            hard=False,
        ))

    verdict = "reject" if any(v.hard for v in violations) else "accept"
    return ValidationReport(verdict=verdict, violations=violations, attribute_flags=flags)


def truncate_attributes(result: DecompositionResult, a_max: int) -> DecompositionResult:
    """Keep at most ``a_max`` attributes, category aspect first if present."""
    if a_max < 0:
        raise ValueError("a_max must be non-negative")
    attrs = list(result.attributes)
    if len(attrs) <= a_max:
        return result
    cat_idx = next((i for i, a in enumerate(attrs) if a.aspect == "category"), None)
    if cat_idx is not None:
        ordered = [attrs[cat_idx]] + attrs[:cat_idx] + attrs[cat_idx + 1:]
    else:
        ordered = attrs
    return DecompositionResult(
        primary_target=result.primary_target,
        attributes=tuple(ordered[:a_max]),
        analysis=result.analysis,
    )


# ---------------------------------------------------------------------------
# Offline mock decomposition

_ARTICLES = {"a", "an", "the"}
_COLORS = (
    "black", "white", "red", "green", "blue", "yellow", "orange", "purple",
    "brown", "gray", "grey", "pink", "silver", "golden", "beige", "cyan",
)
_STOPWORDS = {
    "on", "in", "at", "near", "by", "with", "to", "of", "under", "over",
    "behind", "beside", "between", "from", "above", "below", "along",
    "across", "against", "toward", "towards", "next", "that", "which",
    "is", "are", "was", "were", "and",
}
_TRAILING_PUNCT = ",.;:!?"


def _stable_seed(*parts) -> int:
    import hashlib

    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:16], "big")


def derive_rng(*parts) -> np.random.Generator:
    """Seedable, platform-stable PRNG stream keyed by the given parts."""
    return np.random.Generator(np.random.PCG64(_stable_seed(*parts)))


def _trim_span(text: str, start: int, end: int) -> tuple[int, int]:
    while end > start and (text[end - 1] in _TRAILING_PUNCT or text[end - 1].isspace()):
        end -= 1
    while start < end and text[start].isspace():
        start += 1
    return start, end


def mock_decompose(caption: str, seed: int = 0) -> DecompositionResult:
    """Deterministic rule-based decomposition for offline pipelines.

    Every emitted description is a literal span of the NFC-normalized
    caption, so the output always passes :func:`validate`. Rules: the first
    token run that is not an article, color, or stopword becomes the category;
    color-lexicon hits become color attributes; clauses after commas become
    spatial relations. The seed only perturbs confidences.
    """
    if not caption or not caption.strip():
        raise ValueError("caption must be non-empty")
    text = _nfc(caption)
    rng = derive_rng("mock-decompose", seed, text)
    tokens = [(m.group(0), m.start(), m.end()) for m in re.finditer(r"\S+", text)]

    attrs: list[Attribute] = []

    def conf() -> float:
        return round(0.7 + 0.3 * float(rng.random()), 3)

    # category: first run of content tokens, stopping at stopwords or commas
    cat_span: tuple[int, int] | None = None
    run_start = None
    run_end = None
    for idx, (tok, s, e) in enumerate(tokens):
        word = tok.strip(_TRAILING_PUNCT).lower()
        is_break = word in _STOPWORDS or word in _ARTICLES or word in _COLORS or not word
        if run_start is None:
            if not is_break:
                run_start, run_end = s, e
                if "," in tok:
                    break
        else:
            if is_break or "," in tokens[idx - 1][0]:
                break
            run_end = e
            if "," in tok:
                break
    if run_start is not None:
        cs, ce = _trim_span(text, run_start, run_end)
        if ce > cs:
            cat_span = (cs, ce)
    if cat_span is None and tokens:
        cs, ce = _trim_span(text, tokens[0][1], tokens[0][2])
        cat_span = (cs, ce) if ce > cs else (tokens[0][1], tokens[0][2])
    category_text = text[cat_span[0]:cat_span[1]]
    attrs.append(Attribute("category", category_text, (category_text,), conf()))

    seen_colors: set[str] = set()
    for m in re.finditer(r"[^\W\d_]+", text, flags=re.UNICODE):
        word = m.group(0).lower()
        if word in _COLORS and word not in seen_colors:
            seen_colors.add(word)
            span = text[m.start():m.end()]
            attrs.append(Attribute("color", span, (span,), conf()))

    # clauses after the first comma become spatial relations
    comma_positions = [i for i, ch in enumerate(text) if ch == ","]
    if comma_positions:
        bounds = comma_positions + [len(text)]
        for i in range(len(comma_positions)):
            s, e = bounds[i] + 1, bounds[i + 1]
            s, e = _trim_span(text, s, e)
            if e > s:
                span = text[s:e]
                attrs.append(Attribute("spatial_relation", span, (span,), conf()))

    return DecompositionResult(primary_target=category_text, attributes=tuple(attrs))


# ---------------------------------------------------------------------------
# Completion clients and the retry loop

class ChatClient(Protocol):
    def complete(self, prompt: str) -> str:
        """Return the raw completion text for a prompt."""
        ...


class MockChatClient:
    """Offline client: replies with the serialized mock decomposition."""

    def __init__(self, seed: int = 0):
        self.seed = seed

    def complete(self, prompt: str) -> str:
        caption = extract_caption_from_prompt(prompt)
        return serialize_result(mock_decompose(caption, self.seed))


class HttpChatClient:
    """Client for a chat-completions-style HTTP endpoint.

    Requests are sent with temperature 0 so repeated decompositions of the
    same caption are as deterministic as the service allows.
    """

    def __init__(self, endpoint: str, model: str, api_key: str | None = None,
                 timeout: float = 30.0, session=None):
        import requests

        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key
        self.timeout = timeout
        self._session = session if session is not None else requests.Session()

    def complete(self, prompt: str) -> str:
        import requests

        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = {
            "model": self.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": prompt}],
        }
        try:
            resp = self._session.post(
                self.endpoint, json=payload, headers=headers, timeout=self.timeout
            )
            resp.raise_for_status()
            body = resp.json()
        except requests.RequestException as exc:
            raise TransportError(f"completion request failed: {exc}") from exc
        except ValueError as exc:
            raise TransportError(f"completion reply is not JSON: {exc}") from exc
        try:
            content = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError("completion reply missing first choice content") from exc
        if not isinstance(content, str):
            raise TransportError("completion content is not a string")
        return content


def decompose(
    client: ChatClient,
    caption: str,
    retries: int = 2,
    seed: int = 0,
    a_max: int = DEFAULT_A_MAX,
    backoff_base: float = 0.5,
    sleep: Callable[[float], None] = time.sleep,
) -> tuple[DecompositionResult | None, ValidationReport]:
    """Decompose one caption with retry on transport failure or rejection.

    Retries use exponential backoff with deterministic jitter from ``seed``.
    The final report carries the attempt count and a per-attempt transcript;
    when every attempt fails the report is rejected and the last parsed
    result (possibly None) is returned alongside it.
    """
    prompt = build_prompt(caption)
    rng = derive_rng("decompose-backoff", seed, caption)
    transcript: list[dict] = []
    last_result: DecompositionResult | None = None
    last_report: ValidationReport | None = None
    attempts = retries + 1

    for attempt in range(attempts):
        entry: dict = {"attempt": attempt + 1, "prompt_version": PROMPT_VERSION}
        try:
            raw = client.complete(prompt)
            entry["response"] = raw
        except TransportError as exc:
            entry["error"] = str(exc)
            entry["outcome"] = "transport-error"
            transcript.append(entry)
            if attempt < attempts - 1:
                sleep(backoff_base * (2 ** attempt) * (1.0 + 0.1 * float(rng.random())))
            continue
        try:
            result = parse_response(raw)
        except ResponseParseError as exc:
            entry["error"] = str(exc)
            entry["outcome"] = "parse-error"
            transcript.append(entry)
            if attempt < attempts - 1:
                sleep(backoff_base * (2 ** attempt) * (1.0 + 0.1 * float(rng.random())))
            continue
        report = validate(caption, result, a_max=a_max)
        entry["outcome"] = report.verdict
        entry["violations"] = [(v.rule_id, v.message) for v in report.violations]
        transcript.append(entry)
        last_result, last_report = result, report
        if report.accepted:
            report.attempt_count = attempt + 1
            report.transcript = transcript
            return result, report
        if attempt < attempts - 1:
            sleep(backoff_base * (2 ** attempt) * (1.0 + 0.1 * float(rng.random())))

    if last_report is not None:
        report = last_report
    else:
        report = ValidationReport(
            verdict="reject",
            violations=[Violation("no-usable-reply", "all attempts failed before validation", hard=True)],
        )
    report.verdict = "reject"
    report.attempt_count = attempts
    report.transcript = transcript
    return last_result, report


def decompose_many(
    client: ChatClient,
    captions: dict[str, str],
    retries: int = 2,
    seed: int = 0,
    a_max: int = DEFAULT_A_MAX,
    concurrency: int = 4,
    backoff_base: float = 0.5,
) -> dict[str, tuple[DecompositionResult | None, ValidationReport]]:
    """Decompose a keyed batch with bounded concurrent in-flight requests.

    Results are keyed by caption id, so completion order is irrelevant.
    """
    if concurrency < 1:
        raise ValueError("concurrency must be >= 1")
    out: dict[str, tuple[DecompositionResult | None, ValidationReport]] = {}
    with ThreadPoolExecutor(max_workers=concurrency) as pool:
        futures = {
            key: pool.submit(
                decompose, client, caption,
                retries=retries, seed=seed, a_max=a_max, backoff_base=backoff_base,
            )
            for key, caption in captions.items()
        }
        for key, fut in futures.items():
            out[key] = fut.result()
    return out
