"""Domain types shared across the engine, plus the text canonicalization
used by evidence validation and name matching.

All types are immutable value objects validated at construction time.
Mutation of session state is owned by :mod:`schematiq.store`.
"""

from __future__ import annotations

import re
import unicodedata
from dataclasses import dataclass, field, replace
from typing import Any, Mapping, Optional, Union


class ModelValidationError(ValueError):
    """A domain type invariant was violated at construction time."""


# ---------------------------------------------------------------------------
# Text canonicalization
# ---------------------------------------------------------------------------

# Curly/typographic quote variants mapped to straight quotes; dash variants
# mapped to "-". NFKC catches the fullwidth forms before this table applies.
_CHAR_MAP = str.maketrans(
    {
        "‘": "'",  # left single
        "’": "'",  # right single / apostrophe
        "‚": "'",
        "‛": "'",
        "ʼ": "'",  # modifier letter apostrophe (NFKC output of U+0149)
        "“": '"',
        "”": '"',
        "„": '"',
        "‟": '"',
        "‐": "-",  # hyphen
        "‑": "-",  # non-breaking hyphen
        "‒": "-",  # figure dash
        "–": "-",  # en dash
        "—": "-",  # em dash
        "―": "-",  # horizontal bar
        "−": "-",  # minus sign
    }
)

_WS_RE = re.compile(r"\s+")


def _normalize_once(text: str) -> str:
    out = unicodedata.normalize("NFKC", text)
    out = out.translate(_CHAR_MAP)
    out = _WS_RE.sub(" ", out)
    return out.strip().lower()


def normalize(text: str) -> str:
    """Canonicalize text for comparison: NFKC, straight quotes, plain
    dashes, collapsed whitespace, stripped, lowercased.

    Lowercasing can destabilize NFKC for a handful of codepoints, so the
    transform is iterated to a fixed point to guarantee idempotence.
    """
    prev = text
    for _ in range(8):
        cur = _normalize_once(prev)
        if cur == prev:
            return cur
        prev = cur
    return prev


_PUNCT_RE = re.compile(r"[^\w\s]|_", re.UNICODE)


def normalize_name(name: str) -> str:
    """normalize() with all punctuation removed; the canonical key used for
    instance dedup and field-name matching.

    Raises ModelValidationError when nothing usable remains.
    """
    out = _PUNCT_RE.sub("", normalize(name))
    out = _WS_RE.sub(" ", out).strip()
    if not out:
        raise ModelValidationError(f"name {name!r} is empty after normalization")
    return out


def _starter_segments(text: str) -> list[tuple[int, int]]:
    """Split text into [start, end) segments beginning at each combining-class-0
    character, so combining sequences are never split."""
    segs: list[tuple[int, int]] = []
    start = None
    for i, ch in enumerate(text):
        if start is None:
            start = i
        elif unicodedata.combining(ch) == 0:
            segs.append((start, i))
            start = i
    if start is not None:
        segs.append((start, len(text)))
    return segs


def _normalized_view(text: str) -> Optional[tuple[str, list[tuple[int, int]]]]:
    """Build the normalized form of text together with, per normalized char,
    the [start, end) span of the original text it came from.

    Returns None when the offset-tracking path does not reproduce
    normalize(text) exactly (rare recomposition cases, e.g. Hangul jamo runs);
    callers then skip span back-fill.
    """
    tagged: list[tuple[str, int, int]] = []
    for s, e in _starter_segments(text):
        for ch in unicodedata.normalize("NFKC", text[s:e]).translate(_CHAR_MAP):
            tagged.append((ch, s, e))

    lowered: list[tuple[str, int, int]] = []
    for ch, s, e in tagged:
        for lch in ch.lower():
            lowered.append((lch, s, e))

    collapsed: list[tuple[str, int, int]] = []
    i = 0
    while i < len(lowered):
        ch, s, e = lowered[i]
        if ch.isspace():
            j = i
            while j < len(lowered) and lowered[j][0].isspace():
                j += 1
            collapsed.append((" ", s, lowered[j - 1][2]))
            i = j
        else:
            collapsed.append((ch, s, e))
            i += 1
    while collapsed and collapsed[0][0] == " ":
        collapsed.pop(0)
    while collapsed and collapsed[-1][0] == " ":
        collapsed.pop()

    view = "".join(ch for ch, _, _ in collapsed)
    if view != normalize(text):
        return None
    return view, [(s, e) for _, s, e in collapsed]


def locate_quote(document_text: str, quote: str) -> Optional[tuple[int, int]]:
    """Find the first span of document_text whose normalized form equals
    normalize(quote). Every returned span re-normalizes to the quote, so it
    is safe to store as Evidence.char_span. Returns None when no verifiable
    span exists.
    """
    needle = normalize(quote)
    if not needle:
        return None
    built = _normalized_view(document_text)
    if built is None:
        return None
    view, spans = built
    at = view.find(needle)
    while at != -1:
        start = spans[at][0]
        end = spans[at + len(needle) - 1][1]
        if normalize(document_text[start:end]) == needle:
            return start, end
        at = view.find(needle, at + 1)
    return None


# ---------------------------------------------------------------------------
# Enumerations (plain string constants; values appear verbatim on the wire)
# ---------------------------------------------------------------------------

VALUE_KINDS = ("text", "number", "date", "enum", "list_of_text")
FIELD_ORIGINS = ("model", "human")
UNIT_ORIGINS = ("discovered", "human")
EXAMPLE_PROVENANCES = ("from_documents", "model_knowledge")
CELL_STATUSES = ("filled", "missing", "conflict", "rejected")
CELL_ORIGINS = ("extracted", "followup", "human")
PHASES = ("created", "unit_discovered", "schema_discovered", "extracted")
EDIT_KINDS = (
    "unit_edit",
    "field_add",
    "field_edit",
    "field_remove",
    "field_merge",
    "cell_edit",
    "docs_added",
)

_PHASE_ORDER = {p: i for i, p in enumerate(PHASES)}


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ModelValidationError(msg)


def _require_in(value: str, allowed: tuple[str, ...], what: str) -> None:
    _require(value in allowed, f"{what} must be one of {allowed}, got {value!r}")


# ---------------------------------------------------------------------------
# Documents and queries
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Document:
    doc_id: str
    text: str
    title: Optional[str] = None
    source_name: str = ""
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        _require(bool(self.doc_id), "doc_id must be non-empty")
        _require(bool(self.text.strip()), f"document {self.doc_id!r} has empty text")


@dataclass(frozen=True)
class ResearchQuery:
    text: str

    def __post_init__(self) -> None:
        _require(bool(self.text.strip()), "query text must be non-empty")


@dataclass(frozen=True)
class ExampleInstance:
    name: str
    provenance: str

    def __post_init__(self) -> None:
        _require(bool(self.name), "example instance name must be non-empty")
        _require_in(self.provenance, EXAMPLE_PROVENANCES, "example provenance")


@dataclass(frozen=True)
class ObservationUnitSpec:
    type_name: str
    description: str
    example_instances: tuple[ExampleInstance, ...] = ()
    origin: str = "discovered"

    def __post_init__(self) -> None:
        _require(bool(self.type_name.strip()), "observation unit type_name must be non-empty")
        _require_in(self.origin, UNIT_ORIGINS, "observation unit origin")


# ---------------------------------------------------------------------------
# Schema
# ---------------------------------------------------------------------------

_FIELD_NAME_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9 ]*$")


def canonical_field_name(raw: str) -> str:
    """Coerce a raw field name into canonical Title Case, alphanumeric plus
    spaces. Underscores/hyphens become word breaks; other punctuation is
    dropped; all-caps words (acronyms) are kept as-is.
    """
    cleaned = re.sub(r"[_\-/]+", " ", raw)
    cleaned = re.sub(r"[^A-Za-z0-9 ]+", "", cleaned)
    words = cleaned.split()
    if not words:
        raise ModelValidationError(f"field name {raw!r} has no usable characters")
    return " ".join(w if w.isupper() and len(w) > 1 else w[0].upper() + w[1:] for w in words)


@dataclass(frozen=True)
class SchemaField:
    canonical_name: str
    definition: str
    rationale: str
    value_kind: str
    allowed_values: Optional[tuple[str, ...]] = None
    origin: str = "model"
    locked: bool = False

    def __post_init__(self) -> None:
        _require(
            bool(_FIELD_NAME_RE.match(self.canonical_name)),
            f"field name {self.canonical_name!r} must be alphanumeric words",
        )
        _require_in(self.value_kind, VALUE_KINDS, "value_kind")
        _require_in(self.origin, FIELD_ORIGINS, "field origin")
        if self.value_kind == "enum":
            _require(
                bool(self.allowed_values),
                f"enum field {self.canonical_name!r} requires allowed_values",
            )
        else:
            _require(
                self.allowed_values is None,
                f"field {self.canonical_name!r} of kind {self.value_kind} cannot carry allowed_values",
            )
        if self.allowed_values is not None:
            _require(
                len(set(self.allowed_values)) == len(self.allowed_values),
                f"field {self.canonical_name!r} has duplicate allowed_values",
            )

    @property
    def key(self) -> str:
        return normalize_name(self.canonical_name)


@dataclass(frozen=True)
class Schema:
    fields: tuple[SchemaField, ...] = ()
    version: int = 0

    def __post_init__(self) -> None:
        keys = [f.key for f in self.fields]
        _require(len(set(keys)) == len(keys), "schema fields must have distinct canonical names")
        _require(self.version >= 0, "schema version must be non-negative")

    def field_by_key(self, key: str) -> Optional[SchemaField]:
        for f in self.fields:
            if f.key == key:
                return f
        return None

    def field_by_name(self, name: str) -> Optional[SchemaField]:
        return self.field_by_key(normalize_name(name))

    @property
    def field_names(self) -> tuple[str, ...]:
        return tuple(f.canonical_name for f in self.fields)


# ---------------------------------------------------------------------------
# Evidence, cells, rows, table
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Evidence:
    doc_id: str
    quote: str
    char_span: Optional[tuple[int, int]] = None

    def __post_init__(self) -> None:
        _require(bool(self.doc_id), "evidence doc_id must be non-empty")
        _require(bool(self.quote.strip()), "evidence quote must be non-empty")
        if self.char_span is not None:
            start, end = self.char_span
            _require(0 <= start < end, f"invalid char_span {self.char_span}")


CellScalar = Union[str, int, float]
CellContent = Union[CellScalar, tuple[str, ...]]


@dataclass(frozen=True)
class CandidateValue:
    """One of several disagreeing values for a conflict cell, or the prior
    machine value retained for audit after a human edit."""

    value: CellContent
    evidence: tuple[Evidence, ...] = ()


@dataclass(frozen=True)
class CellValue:
    field_name: str
    value: Optional[CellContent] = None
    evidence: tuple[Evidence, ...] = ()
    status: str = "missing"
    origin: str = "extracted"
    candidates: tuple[CandidateValue, ...] = ()
    note: Optional[str] = None

    def __post_init__(self) -> None:
        _require(bool(self.field_name), "cell field_name must be non-empty")
        _require_in(self.status, CELL_STATUSES, "cell status")
        _require_in(self.origin, CELL_ORIGINS, "cell origin")
        if self.status == "filled":
            _require(self.value is not None, f"filled cell {self.field_name!r} must carry a value")
            if self.origin != "human":
                _require(
                    len(self.evidence) > 0,
                    f"machine-filled cell {self.field_name!r} must carry evidence",
                )
        if self.status == "missing":
            _require(self.value is None, f"missing cell {self.field_name!r} cannot carry a value")


@dataclass(frozen=True)
class InstanceRecord:
    display_name: str
    aliases: tuple[str, ...] = ()
    source_doc_ids: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        _require(bool(self.display_name.strip()), "instance display_name must be non-empty")
        _require(len(self.source_doc_ids) > 0, "instance must reference at least one document")
        _require(
            len(set(self.source_doc_ids)) == len(self.source_doc_ids),
            "instance source_doc_ids must be distinct",
        )

    @property
    def canonical_key(self) -> str:
        return normalize_name(self.display_name)


@dataclass(frozen=True)
class Row:
    instance: InstanceRecord
    cells: Mapping[str, CellValue]

    def cell(self, field_name: str) -> CellValue:
        return self.cells[field_name]


@dataclass(frozen=True)
class Table:
    schema_version: int
    rows: tuple[Row, ...] = ()

    def __post_init__(self) -> None:
        keys = [r.instance.canonical_key for r in self.rows]
        _require(len(set(keys)) == len(keys), "table rows must have distinct canonical keys")

    def row_by_key(self, key: str) -> Optional[Row]:
        for r in self.rows:
            if r.instance.canonical_key == key:
                return r
        return None


def check_row_matches_schema(row: Row, schema: Schema) -> None:
    """Each row carries exactly one cell per schema field."""
    expected = set(schema.field_names)
    got = set(row.cells.keys())
    if expected != got:
        missing = sorted(expected - got)
        extra = sorted(got - expected)
        raise ModelValidationError(
            f"row {row.instance.display_name!r} cells do not match schema "
            f"(missing={missing}, extra={extra})"
        )


# ---------------------------------------------------------------------------
# Edit log and session state
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EditEvent:
    seq: int
    timestamp: str
    kind: str
    payload: Mapping[str, Any]

    def __post_init__(self) -> None:
        _require(self.seq >= 1, "edit seq starts at 1")
        _require_in(self.kind, EDIT_KINDS, "edit kind")


@dataclass(frozen=True)
class SessionState:
    session_id: str
    query: ResearchQuery
    documents: tuple[Document, ...]
    ou_spec: Optional[ObservationUnitSpec] = None
    schema: Optional[Schema] = None
    table: Optional[Table] = None
    edit_log: tuple[EditEvent, ...] = ()
    phase: str = "created"

    def __post_init__(self) -> None:
        _require_in(self.phase, PHASES, "phase")
        ids = [d.doc_id for d in self.documents]
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        _require(not dupes, f"duplicate doc_id(s): {dupes}")
        if self.ou_spec is not None:
            _require(
                _PHASE_ORDER[self.phase] >= _PHASE_ORDER["unit_discovered"],
                "ou_spec present requires phase >= unit_discovered",
            )
        if self.schema is not None:
            _require(
                _PHASE_ORDER[self.phase] >= _PHASE_ORDER["schema_discovered"],
                "schema present requires phase >= schema_discovered",
            )
        if self.table is not None:
            _require(self.phase == "extracted", "table present requires phase extracted")
            if self.schema is not None:
                _require(
                    self.table.schema_version == self.schema.version,
                    "table schema_version must match current schema version",
                )
        seqs = [e.seq for e in self.edit_log]
        _require(seqs == list(range(1, len(seqs) + 1)), "edit log must be gapless from 1")

    def document(self, doc_id: str) -> Document:
        for d in self.documents:
            if d.doc_id == doc_id:
                return d
        raise KeyError(doc_id)

    def next_seq(self) -> int:
        return len(self.edit_log) + 1


def phase_at_least(phase: str, floor: str) -> bool:
    return _PHASE_ORDER[phase] >= _PHASE_ORDER[floor]


__all__ = [
    "CandidateValue",
    "CellValue",
    "Document",
    "EditEvent",
    "Evidence",
    "ExampleInstance",
    "InstanceRecord",
    "ModelValidationError",
    "ObservationUnitSpec",
    "ResearchQuery",
    "Row",
    "Schema",
    "SchemaField",
    "SessionState",
    "Table",
    "canonical_field_name",
    "check_row_matches_schema",
    "locate_quote",
    "normalize",
    "normalize_name",
    "phase_at_least",
    "replace",
]
