from __future__ import annotations

import json

import pytest

from schematiq.gateway import (
    ContractViolationError,
    LlmGateway,
    MissingBindingError,
    ProviderConfig,
    ProviderConfigError,
    ScriptedTranscript,
    TranscriptExhaustedError,
    render_prompt,
)
from schematiq.templates import (
    DEFAULT_TEMPLATES,
    ContractField,
    PromptTemplate,
    ResponseContract,
)


def scripted_gateway(entries, max_retries=2):
    config = ProviderConfig(provider_id="scripted", max_retries=max_retries)
    return LlmGateway(config, transcript=ScriptedTranscript(entries))


def unit_response(type_name="Judge", description="per-judge rows"):
    return json.dumps(
        {
            "type_name": type_name,
            "description": description,
            "example_instances": [
                {"name": "Ruth Bader Ginsburg", "provenance": "from_documents"}
            ],
        }
    )


def test_render_no_placeholders_identity():
    tpl = PromptTemplate(
        template_id="t",
        body="fixed body",
        required_bindings=frozenset(),
        response_contract=ResponseContract(fields=(ContractField("x", "string"),)),
    )
    assert render_prompt(tpl, {}) == "fixed body"


def test_render_substitutes_bindings():
    tpl = DEFAULT_TEMPLATES["unit_discovery"]
    out = render_prompt(tpl, {"query": "QSTRING", "documents": "DOCSTRING"})
    assert "QSTRING" in out and "DOCSTRING" in out
    assert "{query}" not in out and "{documents}" not in out


def test_render_missing_binding_names_it():
    tpl = DEFAULT_TEMPLATES["unit_discovery"]
    with pytest.raises(MissingBindingError) as err:
        render_prompt(tpl, {"query": "q"})
    assert "documents" in str(err.value)


def test_scripted_valid_first_try():
    gw = scripted_gateway(
        [{"template_id": "unit_discovery", "response": unit_response()}]
    )
    ex = gw.complete("unit_discovery", {"query": "q", "documents": "d"})
    assert ex.parsed is not None
    assert ex.parsed["type_name"] == "Judge"
    assert ex.attempt == 1


def test_scripted_retry_after_malformed():
    gw = scripted_gateway(
        [
            {"template_id": "unit_discovery", "response": "not json at all"},
            {"template_id": "unit_discovery", "response": unit_response()},
        ],
        max_retries=1,
    )
    ex = gw.complete("unit_discovery", {"query": "q", "documents": "d"})
    assert ex.parsed is not None
    assert ex.attempt == 2


def test_scripted_terminal_after_retries():
    gw = scripted_gateway(
        [{"template_id": "unit_discovery", "response": "junk"}] * 3,
        max_retries=2,
    )
    with pytest.raises(ContractViolationError) as err:
        gw.complete("unit_discovery", {"query": "q", "documents": "d"})
    assert err.value.attempts == 3
    assert err.value.raw_response == "junk"


def test_empty_type_name_violates_contract():
    gw = scripted_gateway(
        [{"template_id": "unit_discovery", "response": unit_response(type_name="  ")}],
        max_retries=0,
    )
    with pytest.raises(ContractViolationError):
        gw.complete("unit_discovery", {"query": "q", "documents": "d"})


def test_binding_contains_routes_entries():
    gw = scripted_gateway(
        [
            {
                "template_id": "instance_identification",
                "binding_contains": "doc-2",
                "response": json.dumps({"instances": [{"name": "B", "quote": "q2"}]}),
            },
            {
                "template_id": "instance_identification",
                "binding_contains": "doc-1",
                "response": json.dumps({"instances": [{"name": "A", "quote": "q1"}]}),
            },
        ]
    )
    ex = gw.complete(
        "instance_identification",
        {"unit_type": "J", "unit_description": "", "doc_id": "doc-1", "document": "x"},
    )
    assert ex.parsed["instances"][0]["name"] == "A"


def test_transcript_exhaustion_is_terminal():
    gw = scripted_gateway([], max_retries=2)
    with pytest.raises(TranscriptExhaustedError):
        gw.complete("unit_discovery", {"query": "q", "documents": "d"})


def test_replay_determinism():
    entries = [
        {"template_id": "unit_discovery", "response": unit_response("Judge")},
        {"template_id": "unit_discovery", "response": unit_response("Protein")},
    ]
    results = []
    for _ in range(2):
        gw = scripted_gateway(list(entries))
        a = gw.complete("unit_discovery", {"query": "q", "documents": "d"})
        b = gw.complete("unit_discovery", {"query": "q", "documents": "d"})
        results.append((a.parsed["type_name"], b.parsed["type_name"]))
    assert results[0] == results[1] == ("Judge", "Protein")


def test_markdown_fenced_json_is_accepted():
    fenced = "```json\n" + unit_response() + "\n```"
    gw = scripted_gateway([{"template_id": "unit_discovery", "response": fenced}])
    ex = gw.complete("unit_discovery", {"query": "q", "documents": "d"})
    assert ex.parsed["type_name"] == "Judge"


def test_scripted_requires_transcript():
    with pytest.raises(ProviderConfigError):
        LlmGateway(ProviderConfig(provider_id="scripted"))


def test_hosted_requires_api_key(monkeypatch):
    monkeypatch.delenv("SCHEMATIQ_API_KEY", raising=False)
    with pytest.raises(ProviderConfigError) as err:
        LlmGateway(ProviderConfig(provider_id="hosted_api", model_id="m"))
    assert "SCHEMATIQ_API_KEY" in str(err.value)


def test_provider_config_bounds():
    with pytest.raises(ProviderConfigError):
        ProviderConfig(temperature=1.5)
    with pytest.raises(ProviderConfigError):
        ProviderConfig(max_retries=-1)


def test_usage_counters_accumulate():
    gw = scripted_gateway(
        [{"template_id": "unit_discovery", "response": unit_response()}] * 2
    )
    gw.complete("unit_discovery", {"query": "q", "documents": "d"})
    gw.complete("unit_discovery", {"query": "q", "documents": "d"})
    assert gw.usage.calls == 2
    assert gw.usage.output_tokens > 0
