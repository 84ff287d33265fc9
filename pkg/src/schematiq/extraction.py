"""Pipeline step 3: per-document instance identification, single-pass field
filling, targeted follow-up for unfilled fields, strict evidence validation,
and cross-document instance resolution into a Table.

The strict evidence rule is enforced here: a machine-origin cell is filled
only when its value parses under the field's kind AND every supporting quote
is found verbatim (after normalization) in the source document.
"""

from __future__ import annotations

import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional, Sequence

from .gateway import GatewayError, LlmGateway
from .model import (
    CandidateValue,
    CellValue,
    Document,
    Evidence,
    InstanceRecord,
    ModelValidationError,
    ObservationUnitSpec,
    Row,
    Schema,
    SchemaField,
    Table,
    locate_quote,
    normalize,
    normalize_name,
)
from .values import parse_cell_value, values_equivalent

logger = logging.getLogger(__name__)

ProgressFn = Callable[[str, dict], None]


@dataclass(frozen=True)
class InstanceMention:
    doc_id: str
    surface_name: str
    context_quote: Evidence


@dataclass(frozen=True)
class ExtractionConfig:
    max_followups_per_field: int = 1
    evidence_required: bool = True
    conflict_policy: str = "keep_all_mark_conflict"  # or "first_wins"
    max_parallel_docs: int = 4
    max_chars_per_doc: int = 20000

    def __post_init__(self) -> None:
        if self.conflict_policy not in ("keep_all_mark_conflict", "first_wins"):
            raise ValueError(f"unknown conflict_policy {self.conflict_policy!r}")
        if self.max_parallel_docs <= 0 or self.max_chars_per_doc <= 0:
            raise ValueError("parallelism and size bounds must be positive")
        if self.max_followups_per_field < 0:
            raise ValueError("max_followups_per_field must be >= 0")


@dataclass
class ExtractionStats:
    """Mutable tally shared across worker threads."""

    rejected_evidence: int = 0
    failed_doc_ids: list = dc_field(default_factory=list)
    docs_without_instances: list = dc_field(default_factory=list)
    followup_calls: int = 0
    _lock: threading.Lock = dc_field(default_factory=threading.Lock, repr=False)

    def add_rejection(self, n: int = 1) -> None:
        with self._lock:
            self.rejected_evidence += n

    def add_failed_doc(self, doc_id: str) -> None:
        with self._lock:
            self.failed_doc_ids.append(doc_id)

    def add_empty_doc(self, doc_id: str) -> None:
        with self._lock:
            self.docs_without_instances.append(doc_id)

    def add_followup(self) -> None:
        with self._lock:
            self.followup_calls += 1


def validate_evidence(ev: Evidence, doc: Document) -> bool:
    """True iff the normalized quote is a non-empty substring of the
    normalized document text. Purely lexical; decidable without any model."""
    if ev.doc_id != doc.doc_id:
        raise ValueError(f"evidence doc_id {ev.doc_id!r} does not match document {doc.doc_id!r}")
    needle = normalize(ev.quote)
    return bool(needle) and needle in normalize(doc.text)


def ground_evidence(ev: Evidence, doc: Document) -> Evidence:
    """Back-fill char_span with the first normalized match in the original
    text. Leaves the span absent when no verifiable span exists."""
    if ev.char_span is not None:
        return ev
    span = locate_quote(doc.text, ev.quote)
    if span is None:
        return ev
    return Evidence(doc_id=ev.doc_id, quote=ev.quote, char_span=span)


# ---------------------------------------------------------------------------
# Stage 1: instance identification
# ---------------------------------------------------------------------------


def identify_instances(
    doc: Document,
    ou_spec: ObservationUnitSpec,
    cfg: ExtractionConfig,
    gateway: LlmGateway,
    stats: Optional[ExtractionStats] = None,
    progress: Optional[ProgressFn] = None,
) -> list[InstanceMention]:
    exchange = gateway.complete(
        "instance_identification",
        {
            "unit_type": ou_spec.type_name,
            "unit_description": ou_spec.description,
            "doc_id": doc.doc_id,
            "document": doc.text[: cfg.max_chars_per_doc],
        },
    )
    mentions: list[InstanceMention] = []
    for item in (exchange.parsed or {})["instances"]:
        name = item["name"].strip()
        try:
            normalize_name(name)
        except ModelValidationError:
            logger.warning("dropping mention with unusable name %r in %s", name, doc.doc_id)
            continue
        ev = Evidence(doc_id=doc.doc_id, quote=item["quote"])
        if not validate_evidence(ev, doc):
            if stats:
                stats.add_rejection()
            if progress:
                progress(
                    "cell_rejected",
                    {"doc_id": doc.doc_id, "reason": "mention quote not found", "name": name},
                )
            continue
        mention = InstanceMention(
            doc_id=doc.doc_id, surface_name=name, context_quote=ground_evidence(ev, doc)
        )
        mentions.append(mention)
        if progress:
            progress("instance_found", {"doc_id": doc.doc_id, "name": name})
    return mentions


# ---------------------------------------------------------------------------
# Stage 2: field filling and follow-up
# ---------------------------------------------------------------------------


def _render_fields(schema: Schema) -> str:
    lines = []
    for f in schema.fields:
        allowed = f" allowed={list(f.allowed_values)}" if f.allowed_values else ""
        lines.append(f"- {f.canonical_name} [{f.value_kind}]{allowed}: {f.definition}")
    return "\n".join(lines)


def _gate_cell(
    field: SchemaField,
    raw_value,
    quotes: Sequence[str],
    doc: Document,
    cfg: ExtractionConfig,
    origin: str,
    stats: Optional[ExtractionStats],
    progress: Optional[ProgressFn],
    instance_name: str,
) -> CellValue:
    """Apply the type gate and the strict evidence rule to one candidate value."""
    name = field.canonical_name
    if raw_value is None or (isinstance(raw_value, str) and not raw_value.strip()):
        return CellValue(field_name=name, status="missing")
    try:
        value, note = parse_cell_value(raw_value, field)
    except ValueError as exc:
        logger.info("type gate rejected %r for %s/%s: %s", raw_value, doc.doc_id, name, exc)
        if progress:
            progress(
                "cell_rejected",
                {"doc_id": doc.doc_id, "field": name, "instance": instance_name,
                 "reason": f"type gate: {exc}"},
            )
        return CellValue(field_name=name, status="missing", note=f"type gate: {exc}")

    evidence = [Evidence(doc_id=doc.doc_id, quote=q) for q in quotes if q.strip()]
    if not evidence:
        if progress:
            progress(
                "cell_rejected",
                {"doc_id": doc.doc_id, "field": name, "instance": instance_name,
                 "reason": "no supporting quote"},
            )
        return CellValue(field_name=name, status="missing", note="no supporting quote")
    if cfg.evidence_required:
        bad = [ev for ev in evidence if not validate_evidence(ev, doc)]
        if bad:
            if stats:
                stats.add_rejection(len(bad))
            if progress:
                progress(
                    "cell_rejected",
                    {"doc_id": doc.doc_id, "field": name, "instance": instance_name,
                     "reason": "quote not found in document"},
                )
            return CellValue(field_name=name, status="missing", note="evidence rejected")
    grounded = tuple(ground_evidence(ev, doc) for ev in evidence)
    cell = CellValue(
        field_name=name, value=value, evidence=grounded, status="filled", origin=origin, note=note
    )
    if progress:
        progress(
            "cell_filled",
            {"doc_id": doc.doc_id, "field": name, "instance": instance_name, "origin": origin},
        )
    return cell


def fill_fields(
    doc: Document,
    mention: InstanceMention,
    schema: Schema,
    cfg: ExtractionConfig,
    gateway: LlmGateway,
    stats: Optional[ExtractionStats] = None,
    progress: Optional[ProgressFn] = None,
    unit_name: str = "entity",
) -> list[CellValue]:
    """Single-pass fill: one CellValue per schema field, in schema order."""
    if not schema.fields:
        raise ValueError("fill_fields requires a non-empty schema")
    try:
        exchange = gateway.complete(
            "field_fill",
            {
                "unit_type": unit_name,
                "instance_name": mention.surface_name,
                "doc_id": doc.doc_id,
                "document": doc.text[: cfg.max_chars_per_doc],
                "fields": _render_fields(schema),
            },
        )
    except GatewayError as exc:
        logger.warning("fill failed for %s/%s: %s", doc.doc_id, mention.surface_name, exc)
        return [
            CellValue(field_name=f.canonical_name, status="missing", note=f"fill error: {exc}")
            for f in schema.fields
        ]

    by_key: dict[str, dict] = {}
    for item in (exchange.parsed or {})["cells"]:
        try:
            key = normalize_name(item["field"])
        except ModelValidationError:
            continue
        by_key.setdefault(key, item)

    cells: list[CellValue] = []
    for field in schema.fields:
        item = by_key.get(field.key)
        if item is None:
            cells.append(CellValue(field_name=field.canonical_name, status="missing"))
            continue
        cells.append(
            _gate_cell(
                field,
                item.get("value"),
                item.get("quotes") or [],
                doc,
                cfg,
                "extracted",
                stats,
                progress,
                mention.surface_name,
            )
        )
    return cells


def followup_extract(
    doc: Document,
    mention: InstanceMention,
    field: SchemaField,
    cfg: ExtractionConfig,
    gateway: LlmGateway,
    stats: Optional[ExtractionStats] = None,
    progress: Optional[ProgressFn] = None,
    unit_name: str = "entity",
) -> CellValue:
    """Targeted second attempt for one unfilled field; same gates as the
    single-pass fill, origin=followup when filled."""
    if stats:
        stats.add_followup()
    try:
        exchange = gateway.complete(
            "field_followup",
            {
                "unit_type": unit_name,
                "instance_name": mention.surface_name,
                "doc_id": doc.doc_id,
                "document": doc.text[: cfg.max_chars_per_doc],
                "field_name": field.canonical_name,
                "field_definition": field.definition,
                "field_kind": field.value_kind,
            },
        )
    except GatewayError as exc:
        logger.warning(
            "followup failed for %s/%s/%s: %s",
            doc.doc_id, mention.surface_name, field.canonical_name, exc,
        )
        return CellValue(
            field_name=field.canonical_name, status="missing", note=f"followup error: {exc}"
        )
    parsed = exchange.parsed or {}
    if not parsed.get("found"):
        return CellValue(field_name=field.canonical_name, status="missing")
    return _gate_cell(
        field,
        parsed.get("value"),
        parsed.get("quotes") or [],
        doc,
        cfg,
        "followup",
        stats,
        progress,
        mention.surface_name,
    )


# ---------------------------------------------------------------------------
# Cross-document instance resolution
# ---------------------------------------------------------------------------


def resolve_instances(mentions: Sequence[InstanceMention]) -> list[InstanceRecord]:
    """Group mentions by normalized surface name. Each group yields one
    record: display_name is the longest surface form (first seen wins ties),
    aliases the other distinct forms, source_doc_ids the ordered union."""
    groups: dict[str, list[InstanceMention]] = {}
    order: list[str] = []
    for m in mentions:
        key = normalize_name(m.surface_name)
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(m)

    records: list[InstanceRecord] = []
    for key in order:
        group = groups[key]
        display = group[0].surface_name
        for m in group[1:]:
            if len(m.surface_name) > len(display):
                display = m.surface_name
        aliases: list[str] = []
        doc_ids: list[str] = []
        for m in group:
            if m.surface_name != display and m.surface_name not in aliases:
                aliases.append(m.surface_name)
            if m.doc_id not in doc_ids:
                doc_ids.append(m.doc_id)
        records.append(
            InstanceRecord(
                display_name=display, aliases=tuple(aliases), source_doc_ids=tuple(doc_ids)
            )
        )
    return records


# ---------------------------------------------------------------------------
# Full table extraction
# ---------------------------------------------------------------------------


def _reconcile_field(
    field: SchemaField,
    per_doc_cells: Sequence[CellValue],
    policy: str,
    progress: Optional[ProgressFn],
    instance_name: str,
) -> CellValue:
    """Merge one field's per-document cells into a single table cell."""
    name = field.canonical_name
    filled = [c for c in per_doc_cells if c.status == "filled"]
    if not filled:
        note = next((c.note for c in per_doc_cells if c.note), None)
        return CellValue(field_name=name, status="missing", note=note)

    first = filled[0]
    agreeing = all(values_equivalent(first.value, c.value, field.value_kind) for c in filled[1:])
    if agreeing:
        evidence: list[Evidence] = []
        for c in filled:
            evidence.extend(c.evidence)
        return CellValue(
            field_name=name,
            value=first.value,
            evidence=tuple(evidence),
            status="filled",
            origin=first.origin,
            note=first.note,
        )

    candidates = tuple(CandidateValue(value=c.value, evidence=c.evidence) for c in filled)
    if policy == "first_wins":
        return CellValue(
            field_name=name,
            value=first.value,
            evidence=first.evidence,
            status="filled",
            origin=first.origin,
            candidates=candidates[1:],
            note="conflicting values in other documents",
        )
    if progress:
        progress(
            "conflict_detected",
            {"field": name, "instance": instance_name, "candidates": len(candidates)},
        )
    all_evidence: list[Evidence] = []
    for c in filled:
        all_evidence.extend(c.evidence)
    return CellValue(
        field_name=name,
        evidence=tuple(all_evidence),
        status="conflict",
        origin=first.origin,
        candidates=candidates,
    )


def extract_table(
    docs: Sequence[Document],
    ou_spec: ObservationUnitSpec,
    schema: Schema,
    cfg: ExtractionConfig,
    gateway: LlmGateway,
    progress_sink: Optional[ProgressFn] = None,
    stats: Optional[ExtractionStats] = None,
) -> Table:
    """Identify instances per document, resolve across documents, fill fields
    per (instance, contributing doc) with follow-ups, then reconcile.

    Per-document failures are isolated: the table always covers the
    succeeding subset. Assembly is a single-threaded reduction in stable
    (doc order, instance order), so output is order-deterministic regardless
    of worker completion timing.
    """
    if not schema.fields:
        raise ValueError("extraction requires a schema with at least one field")
    stats = stats if stats is not None else ExtractionStats()
    progress = progress_sink
    if progress:
        progress("phase_started", {"phase": "extraction", "docs": len(docs)})

    doc_by_id = {d.doc_id: d for d in docs}

    def _identify(doc: Document):
        return identify_instances(doc, ou_spec, cfg, gateway, stats=stats, progress=progress)

    mention_lists: dict[str, list[InstanceMention]] = {}
    with ThreadPoolExecutor(max_workers=cfg.max_parallel_docs) as pool:
        futures = {d.doc_id: pool.submit(_identify, d) for d in docs}
        for d in docs:
            try:
                mention_lists[d.doc_id] = futures[d.doc_id].result()
            except GatewayError as exc:
                logger.warning("identification failed for %s: %s", d.doc_id, exc)
                stats.add_failed_doc(d.doc_id)
                if progress:
                    progress("pipeline_error", {"doc_id": d.doc_id, "error": str(exc)})

    all_mentions: list[InstanceMention] = []
    for d in docs:
        doc_mentions = mention_lists.get(d.doc_id)
        if doc_mentions is None:
            continue
        if not doc_mentions:
            stats.add_empty_doc(d.doc_id)
        all_mentions.extend(doc_mentions)

    records = resolve_instances(all_mentions)

    # first mention per (instance, doc) drives the fill prompt for that pair
    mention_for: dict[tuple[str, str], InstanceMention] = {}
    for m in all_mentions:
        key = (normalize_name(m.surface_name), m.doc_id)
        mention_for.setdefault(key, m)

    def _fill_one(record_key: str, doc_id: str) -> tuple[tuple[str, str], list[CellValue]]:
        doc = doc_by_id[doc_id]
        mention = mention_for[(record_key, doc_id)]
        cells = fill_fields(
            doc, mention, schema, cfg, gateway,
            stats=stats, progress=progress, unit_name=ou_spec.type_name,
        )
        budget = cfg.max_followups_per_field
        if budget > 0:
            for i, cell in enumerate(cells):
                if cell.status != "missing" or (cell.note or "").startswith("fill error"):
                    continue
                field = schema.fields[i]
                for _ in range(budget):
                    retry = followup_extract(
                        doc, mention, field, cfg, gateway,
                        stats=stats, progress=progress, unit_name=ou_spec.type_name,
                    )
                    if retry.status == "filled":
                        cells[i] = retry
                        break
        return (record_key, doc_id), cells

    tasks = [
        (r.canonical_key, doc_id) for r in records for doc_id in r.source_doc_ids
    ]
    fill_results: dict[tuple[str, str], list[CellValue]] = {}
    with ThreadPoolExecutor(max_workers=cfg.max_parallel_docs) as pool:
        futures2 = [pool.submit(_fill_one, rk, did) for rk, did in tasks]
        for fut in futures2:
            key, cells = fut.result()
            fill_results[key] = cells

    rows: list[Row] = []
    for record in records:
        cells: dict[str, CellValue] = {}
        for i, field in enumerate(schema.fields):
            per_doc = [
                fill_results[(record.canonical_key, doc_id)][i]
                for doc_id in record.source_doc_ids
                if (record.canonical_key, doc_id) in fill_results
            ]
            cells[field.canonical_name] = _reconcile_field(
                field, per_doc, cfg.conflict_policy, progress, record.display_name
            )
        rows.append(Row(instance=record, cells=cells))

    table = Table(schema_version=schema.version, rows=tuple(rows))
    if progress:
        progress(
            "phase_completed",
            {
                "phase": "extraction",
                "rows": len(rows),
                "docs_failed": len(stats.failed_doc_ids),
            },
        )
    return table


def audit_table(table: Table, documents: Sequence[Document]) -> list[str]:
    """Post-hoc evidence soundness check: every machine-origin filled cell
    must carry at least one quote, and every quote must validate against its
    document. Returns human-readable violations (empty list = sound)."""
    docs = {d.doc_id: d for d in documents}
    problems: list[str] = []
    for row in table.rows:
        for name, cell in row.cells.items():
            if cell.status != "filled" or cell.origin == "human":
                continue
            if not cell.evidence:
                problems.append(f"{row.instance.display_name}/{name}: filled without evidence")
                continue
            for ev in cell.evidence:
                doc = docs.get(ev.doc_id)
                if doc is None:
                    problems.append(f"{row.instance.display_name}/{name}: unknown doc {ev.doc_id}")
                elif not validate_evidence(ev, doc):
                    problems.append(
                        f"{row.instance.display_name}/{name}: quote not found in {ev.doc_id}"
                    )
    return problems


def fill_rate(table: Table) -> float:
    total = sum(len(r.cells) for r in table.rows)
    if total == 0:
        return 0.0
    filled = sum(1 for r in table.rows for c in r.cells.values() if c.status == "filled")
    return filled / total
