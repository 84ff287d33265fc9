"""Persistence and mutation authority for session state.

One directory per session holding human-inspectable JSON:

    <root>/<session_id>/
        session.json     query, documents, observation unit, phase
        schema.json      current schema (null before discovery)
        table.json       current table (null before extraction)
        edits.ndjson     one EditEvent per line, append-only
        exchanges.ndjson raw LLM exchanges (omitted when retention is off)

Edits are events, never in-place mutations: state is a pure fold over
(initial inputs, LLM transcript, edit log). Human-origin data is never
overwritten by machine-origin data under any re-run; `replay` restores the
logged human cell edits onto a regenerated table.

Single-writer per session is enforced with an advisory lock file.
"""

from __future__ import annotations

import json
import uuid
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

from filelock import FileLock

from . import serialize
from .extraction import ground_evidence, validate_evidence
from .model import (
    CandidateValue,
    CellValue,
    Document,
    EditEvent,
    Evidence,
    ModelValidationError,
    ResearchQuery,
    Row,
    Schema,
    SchemaField,
    SessionState,
    Table,
    canonical_field_name,
    normalize_name,
)
from .values import parse_cell_value, values_equivalent


class SessionNotFoundError(KeyError):
    pass


class EditError(ValueError):
    """Edit payload invalid for its kind, out-of-sequence, or referencing
    unknown fields/instances."""


@dataclass(frozen=True)
class StoreConfig:
    root_dir: Path
    retain_raw_exchanges: bool = True


@dataclass(frozen=True)
class ReplayResult:
    state: SessionState
    parked: tuple[dict, ...] = ()


def _now_iso() -> str:
    return datetime.now(timezone.utc).isoformat()


def validate_documents(docs: Sequence[Document]) -> None:
    seen: set[str] = set()
    for d in docs:
        if d.doc_id in seen:
            raise ModelValidationError(f"duplicate doc_id {d.doc_id!r}")
        seen.add(d.doc_id)


class SessionStore:
    def __init__(self, config: StoreConfig):
        self.config = config
        self.root = Path(config.root_dir)
        self.root.mkdir(parents=True, exist_ok=True)

    # -- paths ---------------------------------------------------------------

    def _dir(self, session_id: str) -> Path:
        return self.root / session_id

    def _lock(self, session_id: str) -> FileLock:
        return FileLock(str(self._dir(session_id) / ".lock"), timeout=30)

    # -- lifecycle -------------------------------------------------------------

    def create_session(self, query: ResearchQuery, docs: Sequence[Document]) -> SessionState:
        if not docs:
            raise ModelValidationError("a session needs at least one document")
        validate_documents(docs)
        state = SessionState(
            session_id=uuid.uuid4().hex[:12],
            query=query,
            documents=tuple(docs),
        )
        self._dir(state.session_id).mkdir(parents=True, exist_ok=True)
        self.save_session(state)
        return state

    def save_session(self, state: SessionState) -> None:
        d = self._dir(state.session_id)
        d.mkdir(parents=True, exist_ok=True)
        with self._lock(state.session_id):
            head = serialize.session_to_dict(state, include_table=False)
            head.pop("schema", None)
            head.pop("table", None)
            head.pop("edit_log", None)
            (d / "session.json").write_text(serialize.dumps_canonical(head), encoding="utf-8")
            schema = serialize.schema_to_dict(state.schema) if state.schema else None
            (d / "schema.json").write_text(serialize.dumps_canonical(schema), encoding="utf-8")
            table = serialize.table_to_dict(state.table) if state.table else None
            (d / "table.json").write_text(serialize.dumps_canonical(table), encoding="utf-8")
            lines = [
                json.dumps(serialize.edit_to_dict(e), sort_keys=True, ensure_ascii=False)
                for e in state.edit_log
            ]
            (d / "edits.ndjson").write_text(
                "".join(line + "\n" for line in lines), encoding="utf-8"
            )

    def load_session(self, session_id: str) -> SessionState:
        d = self._dir(session_id)
        if not (d / "session.json").exists():
            raise SessionNotFoundError(session_id)
        head = json.loads((d / "session.json").read_text(encoding="utf-8"))
        schema_raw = json.loads((d / "schema.json").read_text(encoding="utf-8"))
        table_raw = json.loads((d / "table.json").read_text(encoding="utf-8"))
        edits = []
        edits_path = d / "edits.ndjson"
        if edits_path.exists():
            for line in edits_path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    edits.append(json.loads(line))
        head["schema"] = schema_raw
        head["table"] = table_raw
        head["edit_log"] = edits
        return serialize.session_from_dict(head)

    def list_sessions(self) -> list[str]:
        return sorted(
            p.name for p in self.root.iterdir() if (p / "session.json").exists()
        )

    def record_exchanges(self, session_id: str, exchanges: Sequence[Any]) -> None:
        """Append raw LLM exchanges for audit. A no-op when raw retention is
        disabled; in that mode no persisted artifact carries model text."""
        if not self.config.retain_raw_exchanges:
            return
        d = self._dir(session_id)
        d.mkdir(parents=True, exist_ok=True)
        with (d / "exchanges.ndjson").open("a", encoding="utf-8") as fh:
            for ex in exchanges:
                fh.write(
                    json.dumps(
                        {
                            "template_id": ex.template_id,
                            "attempt": ex.attempt,
                            "rendered_prompt": ex.rendered_prompt,
                            "raw_response": ex.raw_response,
                            "usage": dict(ex.usage),
                        },
                        sort_keys=True,
                        ensure_ascii=False,
                    )
                    + "\n"
                )

    # -- edits -------------------------------------------------------------------

    def append_edit(self, state: SessionState, kind: str, payload: Mapping[str, Any]) -> SessionState:
        """Build the next EditEvent, apply it, and persist."""
        event = EditEvent(
            seq=state.next_seq(), timestamp=_now_iso(), kind=kind, payload=dict(payload)
        )
        new_state = apply_edit(state, event)
        self.save_session(new_state)
        return new_state

    def replay(self, state: SessionState) -> ReplayResult:
        result = replay(state)
        self.save_session(result.state)
        return result


# ---------------------------------------------------------------------------
# Edit application (pure functions over SessionState)
# ---------------------------------------------------------------------------


def apply_edit(state: SessionState, event: EditEvent) -> SessionState:
    if event.seq != state.next_seq():
        raise EditError(
            f"edit seq {event.seq} out of order; expected {state.next_seq()}"
        )
    handler = _EDIT_HANDLERS.get(event.kind)
    if handler is None:
        raise EditError(f"unknown edit kind {event.kind!r}")
    try:
        new_state = handler(state, dict(event.payload))
    except ModelValidationError as exc:
        raise EditError(str(exc)) from exc
    return replace(new_state, edit_log=state.edit_log + (event,))


def _require_payload(payload: Mapping[str, Any], *keys: str) -> None:
    missing = [k for k in keys if k not in payload]
    if missing:
        raise EditError(f"edit payload missing keys: {missing}")


def _apply_unit_edit(state: SessionState, payload: dict) -> SessionState:
    _require_payload(payload, "type_name")
    if not str(payload["type_name"]).strip():
        raise EditError("unit type_name must be non-empty")
    unit_dict = {
        "type_name": payload["type_name"],
        "description": payload.get("description", ""),
        "example_instances": payload.get("example_instances", []),
        "origin": "human",
    }
    unit = serialize.unit_from_dict(unit_dict)
    phase = state.phase if state.phase != "created" else "unit_discovered"
    return replace(state, ou_spec=unit, phase=phase)


def _field_from_payload(payload: dict) -> SchemaField:
    allowed = payload.get("allowed_values")
    return SchemaField(
        canonical_name=canonical_field_name(payload["name"]),
        definition=payload.get("definition", ""),
        rationale=payload.get("rationale", ""),
        value_kind=payload.get("value_kind", "text"),
        allowed_values=tuple(allowed) if allowed else None,
        origin="human",
        locked=True,
    )


def _realign_table(table: Optional[Table], schema: Schema) -> Optional[Table]:
    """Drop cells for removed fields, initialize missing cells for new ones,
    and stamp the new schema version."""
    if table is None:
        return None
    names = schema.field_names
    rows = []
    for row in table.rows:
        cells = {}
        for name in names:
            cells[name] = row.cells.get(name) or CellValue(field_name=name, status="missing")
        rows.append(Row(instance=row.instance, cells=cells))
    return Table(schema_version=schema.version, rows=tuple(rows))


def _with_schema(state: SessionState, fields: Sequence[SchemaField]) -> SessionState:
    old_version = state.schema.version if state.schema else 0
    schema = Schema(fields=tuple(fields), version=old_version + 1)
    table = _realign_table(state.table, schema)
    phase = state.phase
    if phase in ("created", "unit_discovered"):
        phase = "schema_discovered"
    return replace(state, schema=schema, table=table, phase=phase)


def _apply_field_add(state: SessionState, payload: dict) -> SessionState:
    _require_payload(payload, "name")
    new_field = _field_from_payload(payload)
    fields = list(state.schema.fields) if state.schema else []
    if any(f.key == new_field.key for f in fields):
        raise EditError(f"field {new_field.canonical_name!r} already exists")
    fields.append(new_field)
    return _with_schema(state, fields)


def _find_field(state: SessionState, name: str) -> tuple[list[SchemaField], int]:
    if state.schema is None:
        raise EditError("no schema to edit")
    fields = list(state.schema.fields)
    key = normalize_name(name)
    for i, f in enumerate(fields):
        if f.key == key:
            return fields, i
    raise EditError(f"unknown field {name!r}")


def _apply_field_edit(state: SessionState, payload: dict) -> SessionState:
    _require_payload(payload, "name")
    fields, i = _find_field(state, payload["name"])
    f = fields[i]
    value_kind = payload.get("value_kind", f.value_kind)
    if "allowed_values" in payload:
        allowed = tuple(payload["allowed_values"]) if payload["allowed_values"] else None
    else:
        allowed = f.allowed_values if value_kind == f.value_kind else None
    if value_kind != "enum":
        allowed = None
    fields[i] = SchemaField(
        canonical_name=f.canonical_name,
        definition=payload.get("definition", f.definition),
        rationale=payload.get("rationale", f.rationale),
        value_kind=value_kind,
        allowed_values=allowed,
        origin="human",
        locked=True,
    )
    return _with_schema(state, fields)


def _apply_field_remove(state: SessionState, payload: dict) -> SessionState:
    _require_payload(payload, "name")
    fields, i = _find_field(state, payload["name"])
    fields.pop(i)
    return _with_schema(state, fields)


def _map_value(value, mapping: Mapping[str, str]):
    if isinstance(value, (str, int, float)) and str(value) in mapping:
        return mapping[str(value)]
    return value


def _apply_field_merge(state: SessionState, payload: dict) -> SessionState:
    _require_payload(payload, "source", "target")
    fields, si = _find_field(state, payload["source"])
    _, ti = _find_field(state, payload["target"])
    if si == ti:
        raise EditError("cannot merge a field into itself")
    source, target = fields[si], fields[ti]
    mapping: Mapping[str, str] = payload.get("value_mapping") or {}

    # validate up front: every filled source value must land in the target's
    # value space, else the merge is rejected as incomplete
    merged_cells: dict[str, CellValue] = {}
    if state.table is not None:
        for row in state.table.rows:
            s_cell = row.cells.get(source.canonical_name)
            t_cell = row.cells.get(target.canonical_name)
            merged_cells[row.instance.canonical_key] = _merge_cell_pair(
                s_cell, t_cell, target, mapping
            )

    locked_target = replace(target, origin="human", locked=True)
    fields[ti] = locked_target
    fields.pop(si)
    new_state = _with_schema(state, fields)

    if new_state.table is not None:
        rows = []
        for row in new_state.table.rows:
            cells = dict(row.cells)
            cells[target.canonical_name] = merged_cells[row.instance.canonical_key]
            rows.append(Row(instance=row.instance, cells=cells))
        new_state = replace(
            new_state,
            table=Table(schema_version=new_state.table.schema_version, rows=tuple(rows)),
        )
    return new_state


def _merge_cell_pair(
    s_cell: Optional[CellValue],
    t_cell: Optional[CellValue],
    target: SchemaField,
    mapping: Mapping[str, str],
) -> CellValue:
    name = target.canonical_name
    s_filled = s_cell is not None and s_cell.status == "filled"
    t_filled = t_cell is not None and t_cell.status == "filled"

    s_value = None
    if s_filled:
        raw = _map_value(s_cell.value, mapping)
        try:
            s_value, _ = parse_cell_value(
                list(raw) if isinstance(raw, tuple) else raw, target
            )
        except ValueError as exc:
            raise EditError(
                f"merge value-mapping incomplete: source value {s_cell.value!r} "
                f"does not fit target field {name!r} ({exc})"
            ) from None

    if not s_filled and not t_filled:
        base = t_cell or s_cell or CellValue(field_name=name, status="missing")
        return replace(base, field_name=name)
    if t_filled and not s_filled:
        evidence = t_cell.evidence + (s_cell.evidence if s_cell else ())
        return replace(t_cell, evidence=evidence)
    if s_filled and not t_filled:
        evidence = (t_cell.evidence if t_cell else ()) + s_cell.evidence
        return CellValue(
            field_name=name,
            value=s_value,
            evidence=evidence,
            status="filled",
            origin=s_cell.origin,
            note=s_cell.note,
        )
    # both filled
    evidence = t_cell.evidence + s_cell.evidence
    if values_equivalent(t_cell.value, s_value, target.value_kind):
        return replace(t_cell, evidence=evidence)
    return CellValue(
        field_name=name,
        evidence=evidence,
        status="conflict",
        origin=t_cell.origin,
        candidates=(
            CandidateValue(value=t_cell.value, evidence=t_cell.evidence),
            CandidateValue(value=s_value, evidence=s_cell.evidence),
        ),
    )


def _edited_cell(
    row: Row, field: SchemaField, payload: dict, documents: Sequence[Document]
) -> CellValue:
    raw_value = payload.get("value")
    if raw_value is None:
        raise EditError("cell_edit requires a value")
    try:
        value, note = parse_cell_value(raw_value, field)
    except ValueError as exc:
        raise EditError(f"cell value invalid for {field.canonical_name!r}: {exc}") from None

    evidence: list[Evidence] = []
    docs = {d.doc_id: d for d in documents}
    for item in payload.get("evidence") or []:
        ev = serialize.evidence_from_dict(item)
        doc = docs.get(ev.doc_id)
        if doc is None:
            raise EditError(f"evidence references unknown document {ev.doc_id!r}")
        if not validate_evidence(ev, doc):
            raise EditError(f"evidence quote not found in document {ev.doc_id!r}")
        evidence.append(ground_evidence(ev, doc))

    prior = row.cells.get(field.canonical_name)
    audit: tuple[CandidateValue, ...] = ()
    if prior is not None:
        audit = prior.candidates
        if prior.status == "filled" and prior.origin != "human":
            audit = audit + (CandidateValue(value=prior.value, evidence=prior.evidence),)
    return CellValue(
        field_name=field.canonical_name,
        value=value,
        evidence=tuple(evidence),
        status="filled",
        origin="human",
        candidates=audit,
        note=note,
    )


def _apply_cell_edit(state: SessionState, payload: dict) -> SessionState:
    _require_payload(payload, "instance_key", "field", "value")
    if state.table is None:
        raise EditError("no table to edit")
    if state.schema is None:
        raise EditError("no schema present")
    key = normalize_name(str(payload["instance_key"]))
    row = state.table.row_by_key(key)
    if row is None:
        raise EditError(f"unknown instance {payload['instance_key']!r}")
    field = state.schema.field_by_name(str(payload["field"]))
    if field is None:
        raise EditError(f"unknown field {payload['field']!r}")

    new_cell = _edited_cell(row, field, payload, state.documents)
    rows = []
    for r in state.table.rows:
        if r.instance.canonical_key == key:
            cells = dict(r.cells)
            cells[field.canonical_name] = new_cell
            rows.append(Row(instance=r.instance, cells=cells))
        else:
            rows.append(r)
    return replace(
        state, table=Table(schema_version=state.table.schema_version, rows=tuple(rows))
    )


def _apply_docs_added(state: SessionState, payload: dict) -> SessionState:
    _require_payload(payload, "documents")
    raw_docs = payload["documents"]
    if not raw_docs:
        raise EditError("docs_added requires at least one document")
    new_docs = tuple(serialize.document_from_dict(d) for d in raw_docs)
    combined = state.documents + new_docs
    validate_documents(combined)
    phase = state.phase
    table = state.table
    if phase == "extracted":
        # the table is stale the moment new documents arrive; extraction
        # re-runs and replay restores human cell edits
        phase = "schema_discovered"
        table = None
    return replace(state, documents=combined, phase=phase, table=table)


_EDIT_HANDLERS = {
    "unit_edit": _apply_unit_edit,
    "field_add": _apply_field_add,
    "field_edit": _apply_field_edit,
    "field_remove": _apply_field_remove,
    "field_merge": _apply_field_merge,
    "cell_edit": _apply_cell_edit,
    "docs_added": _apply_docs_added,
}


def replay(state: SessionState) -> ReplayResult:
    """Re-apply the logged human cell edits onto the current table.

    Called after a re-run regenerates the table so human-edited cells
    survive byte-identically. Schema-level edits need no replay: discovery
    re-runs are seeded with the existing schema and locked fields are never
    altered by merges. Edits referencing now-missing instances or fields
    are parked with a warning, never dropped from the log.
    """
    parked: list[dict] = []
    current = state
    for event in state.edit_log:
        if event.kind != "cell_edit":
            continue
        payload = dict(event.payload)
        try:
            key = normalize_name(str(payload.get("instance_key", "")))
            row = current.table.row_by_key(key) if current.table else None
            field = (
                current.schema.field_by_name(str(payload.get("field", "")))
                if current.schema
                else None
            )
            if row is None or field is None:
                what = "instance" if row is None else "field"
                parked.append(
                    {"seq": event.seq, "kind": event.kind,
                     "warning": f"references missing {what}", "payload": payload}
                )
                continue
            new_cell = _edited_cell(row, field, payload, current.documents)
            rows = []
            for r in current.table.rows:
                if r.instance.canonical_key == key:
                    cells = dict(r.cells)
                    cells[field.canonical_name] = new_cell
                    rows.append(Row(instance=r.instance, cells=cells))
                else:
                    rows.append(r)
            current = replace(
                current,
                table=Table(schema_version=current.table.schema_version, rows=tuple(rows)),
            )
        except (EditError, ModelValidationError) as exc:
            parked.append(
                {"seq": event.seq, "kind": event.kind, "warning": str(exc), "payload": payload}
            )
    return ReplayResult(state=current, parked=tuple(parked))
