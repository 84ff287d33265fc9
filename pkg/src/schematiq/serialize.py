"""Canonical JSON (de)serialization for the domain types.

Canonical form: UTF-8, sorted keys, 2-space indent, trailing newline.
Round trips are exact: from_*(to_*(x)) == x, and dumps(loads(s)) == s for
anything this module produced.
"""

from __future__ import annotations

import json
from typing import Any, Optional

from .model import (
    CandidateValue,
    CellValue,
    Document,
    EditEvent,
    Evidence,
    ExampleInstance,
    InstanceRecord,
    ObservationUnitSpec,
    ResearchQuery,
    Row,
    Schema,
    SchemaField,
    SessionState,
    Table,
)


def dumps_canonical(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, indent=2) + "\n"


# --- documents -------------------------------------------------------------


def document_to_dict(doc: Document) -> dict:
    return {
        "doc_id": doc.doc_id,
        "title": doc.title,
        "text": doc.text,
        "source_name": doc.source_name,
        "metadata": dict(doc.metadata),
    }


def document_from_dict(d: dict) -> Document:
    return Document(
        doc_id=d["doc_id"],
        text=d["text"],
        title=d.get("title"),
        source_name=d.get("source_name", ""),
        metadata=dict(d.get("metadata", {})),
    )


# --- observation unit ------------------------------------------------------


def unit_to_dict(unit: ObservationUnitSpec) -> dict:
    return {
        "type_name": unit.type_name,
        "description": unit.description,
        "example_instances": [
            {"name": e.name, "provenance": e.provenance} for e in unit.example_instances
        ],
        "origin": unit.origin,
    }


def unit_from_dict(d: dict) -> ObservationUnitSpec:
    return ObservationUnitSpec(
        type_name=d["type_name"],
        description=d.get("description", ""),
        example_instances=tuple(
            ExampleInstance(name=e["name"], provenance=e["provenance"])
            for e in d.get("example_instances", [])
        ),
        origin=d.get("origin", "discovered"),
    )


# --- schema -----------------------------------------------------------------


def field_to_dict(f: SchemaField) -> dict:
    return {
        "canonical_name": f.canonical_name,
        "definition": f.definition,
        "rationale": f.rationale,
        "value_kind": f.value_kind,
        "allowed_values": list(f.allowed_values) if f.allowed_values is not None else None,
        "origin": f.origin,
        "locked": f.locked,
    }


def field_from_dict(d: dict) -> SchemaField:
    allowed = d.get("allowed_values")
    return SchemaField(
        canonical_name=d["canonical_name"],
        definition=d.get("definition", ""),
        rationale=d.get("rationale", ""),
        value_kind=d["value_kind"],
        allowed_values=tuple(allowed) if allowed is not None else None,
        origin=d.get("origin", "model"),
        locked=bool(d.get("locked", False)),
    )


def schema_to_dict(schema: Schema) -> dict:
    return {
        "version": schema.version,
        "fields": [field_to_dict(f) for f in schema.fields],
    }


def schema_from_dict(d: dict) -> Schema:
    return Schema(
        fields=tuple(field_from_dict(f) for f in d.get("fields", [])),
        version=int(d.get("version", 0)),
    )


# --- evidence / cells / table ----------------------------------------------


def evidence_to_dict(ev: Evidence) -> dict:
    return {
        "doc_id": ev.doc_id,
        "quote": ev.quote,
        "char_span": list(ev.char_span) if ev.char_span is not None else None,
    }


def evidence_from_dict(d: dict) -> Evidence:
    span = d.get("char_span")
    return Evidence(
        doc_id=d["doc_id"],
        quote=d["quote"],
        char_span=(span[0], span[1]) if span is not None else None,
    )


def _value_to_json(value) -> Any:
    if isinstance(value, tuple):
        return list(value)
    return value


def _value_from_json(value) -> Any:
    if isinstance(value, list):
        return tuple(value)
    return value


def candidate_to_dict(c: CandidateValue) -> dict:
    return {
        "value": _value_to_json(c.value),
        "evidence": [evidence_to_dict(e) for e in c.evidence],
    }


def candidate_from_dict(d: dict) -> CandidateValue:
    return CandidateValue(
        value=_value_from_json(d["value"]),
        evidence=tuple(evidence_from_dict(e) for e in d.get("evidence", [])),
    )


def cell_to_dict(cell: CellValue) -> dict:
    return {
        "field_name": cell.field_name,
        "value": _value_to_json(cell.value),
        "evidence": [evidence_to_dict(e) for e in cell.evidence],
        "status": cell.status,
        "origin": cell.origin,
        "candidates": [candidate_to_dict(c) for c in cell.candidates],
        "note": cell.note,
    }


def cell_from_dict(d: dict) -> CellValue:
    return CellValue(
        field_name=d["field_name"],
        value=_value_from_json(d.get("value")),
        evidence=tuple(evidence_from_dict(e) for e in d.get("evidence", [])),
        status=d.get("status", "missing"),
        origin=d.get("origin", "extracted"),
        candidates=tuple(candidate_from_dict(c) for c in d.get("candidates", [])),
        note=d.get("note"),
    )


def instance_to_dict(rec: InstanceRecord) -> dict:
    return {
        "canonical_key": rec.canonical_key,
        "display_name": rec.display_name,
        "aliases": list(rec.aliases),
        "source_doc_ids": list(rec.source_doc_ids),
    }


def instance_from_dict(d: dict) -> InstanceRecord:
    return InstanceRecord(
        display_name=d["display_name"],
        aliases=tuple(d.get("aliases", [])),
        source_doc_ids=tuple(d.get("source_doc_ids", [])),
    )


def row_to_dict(row: Row) -> dict:
    return {
        "instance": instance_to_dict(row.instance),
        "cells": {name: cell_to_dict(c) for name, c in row.cells.items()},
    }


def row_from_dict(d: dict) -> Row:
    return Row(
        instance=instance_from_dict(d["instance"]),
        cells={name: cell_from_dict(c) for name, c in d.get("cells", {}).items()},
    )


def table_to_dict(table: Table) -> dict:
    return {
        "schema_version": table.schema_version,
        "rows": [row_to_dict(r) for r in table.rows],
    }


def table_from_dict(d: dict) -> Table:
    return Table(
        schema_version=int(d["schema_version"]),
        rows=tuple(row_from_dict(r) for r in d.get("rows", [])),
    )


def table_to_json(table: Table) -> str:
    return dumps_canonical(table_to_dict(table))


def table_from_json(text: str) -> Table:
    return table_from_dict(json.loads(text))


# --- edit log / session ------------------------------------------------------


def edit_to_dict(ev: EditEvent) -> dict:
    return {
        "seq": ev.seq,
        "timestamp": ev.timestamp,
        "kind": ev.kind,
        "payload": dict(ev.payload),
    }


def edit_from_dict(d: dict) -> EditEvent:
    return EditEvent(
        seq=int(d["seq"]),
        timestamp=d["timestamp"],
        kind=d["kind"],
        payload=dict(d.get("payload", {})),
    )


def session_to_dict(state: SessionState, *, include_table: bool = True) -> dict:
    return {
        "session_id": state.session_id,
        "query": state.query.text,
        "documents": [document_to_dict(d) for d in state.documents],
        "ou_spec": unit_to_dict(state.ou_spec) if state.ou_spec else None,
        "schema": schema_to_dict(state.schema) if state.schema else None,
        "table": table_to_dict(state.table) if (include_table and state.table) else None,
        "edit_log": [edit_to_dict(e) for e in state.edit_log],
        "phase": state.phase,
    }


def session_from_dict(d: dict) -> SessionState:
    return SessionState(
        session_id=d["session_id"],
        query=ResearchQuery(d["query"]),
        documents=tuple(document_from_dict(x) for x in d.get("documents", [])),
        ou_spec=unit_from_dict(d["ou_spec"]) if d.get("ou_spec") else None,
        schema=schema_from_dict(d["schema"]) if d.get("schema") else None,
        table=table_from_dict(d["table"]) if d.get("table") else None,
        edit_log=tuple(edit_from_dict(e) for e in d.get("edit_log", [])),
        phase=d.get("phase", "created"),
    )


def fields_equal(a: SchemaField, b: SchemaField) -> bool:
    """Byte-level equality on the serialized form."""
    return dumps_canonical(field_to_dict(a)) == dumps_canonical(field_to_dict(b))


def cells_equal(a: CellValue, b: CellValue) -> bool:
    return dumps_canonical(cell_to_dict(a)) == dumps_canonical(cell_to_dict(b))


def load_schema_file(path) -> Optional[Schema]:
    import pathlib

    p = pathlib.Path(path)
    if not p.exists():
        return None
    return schema_from_dict(json.loads(p.read_text(encoding="utf-8")))
