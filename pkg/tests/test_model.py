from __future__ import annotations

import pytest

from schematiq.model import (
    CellValue,
    Document,
    EditEvent,
    Evidence,
    InstanceRecord,
    ModelValidationError,
    ObservationUnitSpec,
    ResearchQuery,
    Row,
    Schema,
    SchemaField,
    SessionState,
    Table,
    canonical_field_name,
    check_row_matches_schema,
)


def make_field(name="Judge Names", kind="text", **kw):
    defaults = dict(definition="who ruled", rationale="needed", value_kind=kind)
    defaults.update(kw)
    return SchemaField(canonical_name=name, **defaults)


def test_document_requires_text():
    with pytest.raises(ModelValidationError):
        Document(doc_id="d1", text="   \n ")


def test_query_requires_text():
    with pytest.raises(ModelValidationError):
        ResearchQuery("   ")


def test_unit_requires_type_name():
    with pytest.raises(ModelValidationError):
        ObservationUnitSpec(type_name=" ", description="x")


def test_canonical_field_name_title_cases():
    assert canonical_field_name("judge names") == "Judge Names"
    assert canonical_field_name("judge_decision_outcome") == "Judge Decision Outcome"
    assert canonical_field_name("NES motif count") == "NES Motif Count"
    with pytest.raises(ModelValidationError):
        canonical_field_name("!!!")


def test_enum_field_requires_allowed_values():
    with pytest.raises(ModelValidationError):
        make_field(kind="enum")
    f = make_field(kind="enum", allowed_values=("granted", "denied"))
    assert f.allowed_values == ("granted", "denied")


def test_non_enum_field_rejects_allowed_values():
    with pytest.raises(ModelValidationError):
        make_field(kind="text", allowed_values=("a",))


def test_allowed_values_must_be_unique():
    with pytest.raises(ModelValidationError):
        make_field(kind="enum", allowed_values=("a", "a"))


def test_schema_rejects_duplicate_names_case_insensitive():
    with pytest.raises(ModelValidationError):
        Schema(fields=(make_field("Judge Names"), make_field("judge names")))


def test_filled_cell_requires_value_and_evidence():
    ev = Evidence(doc_id="d1", quote="some quote")
    CellValue(field_name="F", value="x", evidence=(ev,), status="filled")
    with pytest.raises(ModelValidationError):
        CellValue(field_name="F", status="filled")  # no value
    with pytest.raises(ModelValidationError):
        CellValue(field_name="F", value="x", status="filled")  # no evidence


def test_human_filled_cell_may_lack_evidence():
    CellValue(field_name="F", value="x", status="filled", origin="human")


def test_missing_cell_rejects_value():
    with pytest.raises(ModelValidationError):
        CellValue(field_name="F", value="x", status="missing")


def test_instance_record_canonical_key():
    rec = InstanceRecord(display_name="Ruth Bader Ginsburg", source_doc_ids=("d1",))
    assert rec.canonical_key == "ruth bader ginsburg"
    with pytest.raises(ModelValidationError):
        InstanceRecord(display_name="X", source_doc_ids=())


def test_table_rejects_duplicate_keys():
    rec1 = InstanceRecord(display_name="A B", source_doc_ids=("d1",))
    rec2 = InstanceRecord(display_name="a b", source_doc_ids=("d2",))
    with pytest.raises(ModelValidationError):
        Table(schema_version=1, rows=(Row(rec1, {}), Row(rec2, {})))


def test_row_schema_alignment_check():
    schema = Schema(fields=(make_field("F One"), make_field("F Two")), version=1)
    rec = InstanceRecord(display_name="A", source_doc_ids=("d1",))
    good = Row(rec, {"F One": CellValue("F One"), "F Two": CellValue("F Two")})
    check_row_matches_schema(good, schema)
    bad = Row(rec, {"F One": CellValue("F One")})
    with pytest.raises(ModelValidationError):
        check_row_matches_schema(bad, schema)


def test_session_phase_invariants():
    doc = Document(doc_id="d1", text="hello")
    q = ResearchQuery("why?")
    with pytest.raises(ModelValidationError):
        SessionState(
            session_id="s",
            query=q,
            documents=(doc,),
            ou_spec=ObservationUnitSpec(type_name="Judge", description=""),
            phase="created",
        )
    with pytest.raises(ModelValidationError):
        SessionState(session_id="s", query=q, documents=(doc, doc))


def test_edit_log_must_be_gapless():
    doc = Document(doc_id="d1", text="hello")
    ev = EditEvent(seq=2, timestamp="2026-01-01T00:00:00Z", kind="cell_edit", payload={})
    with pytest.raises(ModelValidationError):
        SessionState(
            session_id="s", query=ResearchQuery("q"), documents=(doc,), edit_log=(ev,)
        )


def test_table_version_must_match_schema():
    doc = Document(doc_id="d1", text="hello")
    schema = Schema(fields=(make_field(),), version=3)
    table = Table(schema_version=2, rows=())
    with pytest.raises(ModelValidationError):
        SessionState(
            session_id="s",
            query=ResearchQuery("q"),
            documents=(doc,),
            ou_spec=ObservationUnitSpec(type_name="Judge", description=""),
            schema=schema,
            table=table,
            phase="extracted",
        )
