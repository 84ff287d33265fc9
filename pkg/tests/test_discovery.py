from __future__ import annotations

import json
import math

import pytest

from schematiq.discovery import (
    DiscoveryAborted,
    DiscoveryConfig,
    FieldProposal,
    discover_observation_unit,
    merge_proposals,
    propose_schema_updates,
    run_schema_discovery,
)
from schematiq.gateway import ContractViolationError, LlmGateway, ProviderConfig, ScriptedTranscript
from schematiq.model import Document, ObservationUnitSpec, ResearchQuery, Schema, SchemaField
from schematiq.serialize import field_to_dict

LEGAL_QUERY = ResearchQuery(
    "Do judges appointed by different U.S. presidents differ in how they rule "
    "on immigration injunction cases?"
)
NES_QUERY = ResearchQuery(
    "Can it be determined whether a protein contains a nuclear export signal?"
)

JUDGE_UNIT = ObservationUnitSpec(
    type_name="Judge",
    description="A single judge participating in a case; one row per judge.",
)


def docs(n, prefix="doc"):
    return [
        Document(doc_id=f"{prefix}-{i}", text=f"Decision text number {i} naming Judge {i}.")
        for i in range(1, n + 1)
    ]


def gw(entries, max_retries=0):
    return LlmGateway(
        ProviderConfig(provider_id="scripted", max_retries=max_retries),
        transcript=ScriptedTranscript(entries),
    )


def unit_entry(type_name, description="rows are individual judges", examples=None):
    return {
        "template_id": "unit_discovery",
        "response": json.dumps(
            {
                "type_name": type_name,
                "description": description,
                "example_instances": examples
                or [{"name": "Ruth Bader Ginsburg", "provenance": "from_documents"}],
            }
        ),
    }


def proposal_entry(proposals, binding_contains=None):
    entry = {
        "template_id": "schema_discovery",
        "response": json.dumps({"proposals": proposals}),
    }
    if binding_contains:
        entry["binding_contains"] = binding_contains
    return entry


def add(name, definition="def", rationale="why", value_kind="text", allowed=None):
    p = {
        "action": "add",
        "name": name,
        "definition": definition,
        "rationale": rationale,
        "value_kind": value_kind,
    }
    if allowed:
        p["allowed_values"] = allowed
    return p


CFG = DiscoveryConfig()


def test_unit_discovery_legal():
    gateway = gw([unit_entry("Judge")])
    spec = discover_observation_unit(LEGAL_QUERY, docs(5), CFG, gateway)
    assert spec.type_name == "Judge"
    assert spec.origin == "discovered"
    assert spec.description
    assert spec.example_instances[0].name == "Ruth Bader Ginsburg"
    assert spec.example_instances[0].provenance == "from_documents"


def test_unit_discovery_bio():
    gateway = gw(
        [
            unit_entry(
                "Protein",
                "a single protein evaluated for an export signal",
                examples=[{"name": "PKI", "provenance": "model_knowledge"}],
            )
        ]
    )
    spec = discover_observation_unit(NES_QUERY, docs(3), CFG, gateway)
    assert spec.type_name == "Protein"
    assert spec.example_instances[0].provenance == "model_knowledge"


def test_unit_discovery_empty_type_name_is_contract_violation():
    gateway = gw([unit_entry("   ")])
    with pytest.raises(ContractViolationError):
        discover_observation_unit(LEGAL_QUERY, docs(2), CFG, gateway)


def test_propose_includes_gold_style_fields():
    gateway = gw(
        [proposal_entry([add("Judge Names"), add("Judge Decision Outcome")])]
    )
    out = propose_schema_updates(LEGAL_QUERY, JUDGE_UNIT, Schema(), docs(5), CFG, gateway)
    assert [p.target_name for p in out] == ["Judge Names", "Judge Decision Outcome"]
    assert all(p.definition and p.rationale for p in out)


def test_propose_empty_list():
    gateway = gw([proposal_entry([])])
    assert propose_schema_updates(LEGAL_QUERY, JUDGE_UNIT, Schema(), docs(2), CFG, gateway) == []


def test_refine_unknown_target_dropped():
    proposals = [
        {
            "action": "refine",
            "name": "Foo Bar",
            "definition": "x",
            "rationale": "y",
            "value_kind": "text",
        },
        add("Judge Names"),
    ]
    gateway = gw([proposal_entry(proposals)])
    out = propose_schema_updates(LEGAL_QUERY, JUDGE_UNIT, Schema(), docs(2), CFG, gateway)
    assert [p.target_name for p in out] == ["Judge Names"]


def test_merge_empty_is_identity():
    schema = Schema(
        fields=(SchemaField("Judge Names", "d", "r", "text"),), version=4
    )
    merged, accepted = merge_proposals(schema, [])
    assert merged is schema
    assert accepted == 0


def test_merge_add_collision_collapses_to_refine():
    p1 = FieldProposal("add", "Judge Names", "who ruled", "needed", "text")
    p2 = FieldProposal("add", "judge names", "who ruled", "needed", "text")
    merged, accepted = merge_proposals(Schema(), [p1, p2])
    assert [f.canonical_name for f in merged.fields] == ["Judge Names"]
    assert accepted == 1
    assert merged.version == 1


def test_merge_refine_changes_definition():
    schema, _ = merge_proposals(
        Schema(), [FieldProposal("add", "Judge Names", "old", "r", "text")]
    )
    refined, accepted = merge_proposals(
        schema, [FieldProposal("refine", "Judge Names", "new", "r", "text")]
    )
    assert accepted == 1
    assert refined.fields[0].definition == "new"
    assert refined.version == schema.version + 1


def test_merge_locked_field_unchanged():
    locked = SchemaField("Judge Names", "human def", "r", "text", origin="human", locked=True)
    schema = Schema(fields=(locked,), version=2)
    before = field_to_dict(schema.fields[0])
    merged, accepted = merge_proposals(
        schema, [FieldProposal("refine", "Judge Names", "model def", "r", "text")]
    )
    assert accepted == 0
    assert merged.version == 2
    assert field_to_dict(merged.fields[0]) == before


def test_merge_enum_without_allowed_values_dropped():
    merged, accepted = merge_proposals(
        Schema(), [FieldProposal("add", "Outcome", "d", "r", "enum", None)]
    )
    assert accepted == 0
    assert merged.fields == ()


def test_loop_two_batches():
    gateway = gw(
        [
            proposal_entry([add("Judge Names"), add("Appointing President"), add("Outcome Drift")]),
            proposal_entry([]),
        ]
    )
    schema = run_schema_discovery(LEGAL_QUERY, JUDGE_UNIT, docs(6), CFG, gateway)
    assert len(schema.fields) == 3
    assert gateway.usage.calls == 2


def test_loop_locked_seed_field_byte_identical():
    locked = SchemaField(
        "Judge Names", "human definition", "human rationale", "text",
        origin="human", locked=True,
    )
    seed = Schema(fields=(locked,), version=7)
    before = field_to_dict(locked)
    gateway = gw(
        [
            proposal_entry(
                [{"action": "refine", "name": "Judge Names", "definition": "model override",
                  "rationale": "r", "value_kind": "text"}]
            )
        ]
    )
    out = run_schema_discovery(
        LEGAL_QUERY, JUDGE_UNIT, docs(3), CFG, gateway, seed_schema=seed
    )
    assert field_to_dict(out.field_by_name("Judge Names")) == before


def test_loop_single_doc_corpus():
    gateway = gw([proposal_entry([add("Judge Names")])])
    schema = run_schema_discovery(LEGAL_QUERY, JUDGE_UNIT, docs(1), CFG, gateway)
    assert gateway.usage.calls == 1
    assert len(schema.fields) == 1


@pytest.mark.parametrize("n_docs", [1, 3, 7, 12, 20])
@pytest.mark.parametrize("batch_size", [1, 2, 5])
def test_loop_call_bound(n_docs, batch_size):
    n_batches = math.ceil(n_docs / batch_size)
    entries = [proposal_entry([add(f"Field {i}")]) for i in range(n_batches)]
    cfg = DiscoveryConfig(batch_size=batch_size)
    gateway = gw(entries)
    run_schema_discovery(LEGAL_QUERY, JUDGE_UNIT, docs(n_docs), cfg, gateway)
    assert gateway.usage.calls <= n_batches


def test_quiescence_stops_after_exactly_three_zero_batches():
    entries = [proposal_entry([add("Field A")])] + [proposal_entry([]) for _ in range(10)]
    cfg = DiscoveryConfig(batch_size=1, quiescence_batches=3)
    gateway = gw(entries)
    schema = run_schema_discovery(LEGAL_QUERY, JUDGE_UNIT, docs(12), cfg, gateway)
    # 1 productive batch + exactly 3 quiescent ones
    assert gateway.usage.calls == 4
    assert len(schema.fields) == 1


def test_quiescence_disabled_processes_whole_corpus():
    entries = [proposal_entry([add("Field A")])] + [proposal_entry([]) for _ in range(11)]
    cfg = DiscoveryConfig(batch_size=1, early_stop=False)
    gateway = gw(entries)
    run_schema_discovery(LEGAL_QUERY, JUDGE_UNIT, docs(12), cfg, gateway)
    assert gateway.usage.calls == 12


def test_rediscovery_fixed_point():
    gateway = gw([proposal_entry([add("Judge Names"), add("Court Name")]), proposal_entry([])])
    schema = run_schema_discovery(LEGAL_QUERY, JUDGE_UNIT, docs(6), CFG, gateway)

    empty_gateway = gw([proposal_entry([]), proposal_entry([])])
    again = run_schema_discovery(
        LEGAL_QUERY, JUDGE_UNIT, docs(6), CFG, empty_gateway, seed_schema=schema
    )
    assert again == schema


def test_max_fields_cap():
    entries = [proposal_entry([add(f"Field {i}") for i in range(10)])]
    cfg = DiscoveryConfig(max_fields=4)
    gateway = gw(entries)
    schema = run_schema_discovery(LEGAL_QUERY, JUDGE_UNIT, docs(2), cfg, gateway)
    assert len(schema.fields) == 4


def test_gateway_error_aborts_with_partial_schema():
    entries = [proposal_entry([add("Judge Names")])]  # second batch has no entry
    cfg = DiscoveryConfig(batch_size=1)
    gateway = gw(entries)
    with pytest.raises(DiscoveryAborted) as err:
        run_schema_discovery(LEGAL_QUERY, JUDGE_UNIT, docs(2), cfg, gateway)
    assert [f.canonical_name for f in err.value.partial_schema.fields] == ["Judge Names"]


def test_seed_fields_all_survive():
    seed_fields = tuple(
        SchemaField(f"Seed Field {i}", "d", "r", "text") for i in range(1, 4)
    )
    seed = Schema(fields=seed_fields, version=3)
    gateway = gw([proposal_entry([add("Extra Field")]), proposal_entry([])])
    out = run_schema_discovery(
        LEGAL_QUERY, JUDGE_UNIT, docs(6), CFG, gateway, seed_schema=seed
    )
    names = [f.canonical_name for f in out.fields]
    for f in seed_fields:
        assert f.canonical_name in names
