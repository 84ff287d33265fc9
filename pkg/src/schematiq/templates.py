"""Prompt template registry.

Each template couples a prompt body (named placeholders) with a declarative
contract for the structured response. Contracts are enforced structurally
(field presence and kinds) before any domain validation happens downstream.

Template bodies are configuration: callers may override any entry per
session or per run, as the ablation harness does.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Any, Optional

_PLACEHOLDER_RE = re.compile(r"\{([a-z_][a-z0-9_]*)\}")

CONTRACT_KINDS = ("string", "number", "boolean", "string_list", "object_list", "value")


@dataclass(frozen=True)
class ContractField:
    name: str
    kind: str
    required: bool = True
    non_empty: bool = False
    allowed: Optional[tuple[str, ...]] = None
    item_contract: Optional["ResponseContract"] = None

    def __post_init__(self) -> None:
        if self.kind not in CONTRACT_KINDS:
            raise ValueError(f"unknown contract kind {self.kind!r}")
        if self.kind == "object_list" and self.item_contract is None:
            raise ValueError(f"object_list field {self.name!r} needs an item_contract")


@dataclass(frozen=True)
class ResponseContract:
    fields: tuple[ContractField, ...]

    def __post_init__(self) -> None:
        if not self.fields:
            raise ValueError("response contract must declare at least one field")

    def check(self, payload: Any, path: str = "") -> list[str]:
        errors: list[str] = []
        if not isinstance(payload, dict):
            return [f"{path or 'response'} must be an object"]
        for f in self.fields:
            where = f"{path}{f.name}"
            if f.name not in payload or payload[f.name] is None:
                if f.required:
                    errors.append(f"missing required field {where!r}")
                continue
            value = payload[f.name]
            errors.extend(self._check_value(f, value, where))
        return errors

    def _check_value(self, f: ContractField, value: Any, where: str) -> list[str]:
        errors: list[str] = []
        if f.kind == "string":
            if not isinstance(value, str):
                errors.append(f"{where} must be a string")
            elif f.non_empty and not value.strip():
                errors.append(f"{where} must be non-empty")
            elif f.allowed is not None and value not in f.allowed:
                errors.append(f"{where} must be one of {list(f.allowed)}")
        elif f.kind == "number":
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                errors.append(f"{where} must be a number")
        elif f.kind == "boolean":
            if not isinstance(value, bool):
                errors.append(f"{where} must be a boolean")
        elif f.kind == "string_list":
            if not isinstance(value, list) or any(not isinstance(x, str) for x in value):
                errors.append(f"{where} must be a list of strings")
        elif f.kind == "object_list":
            if not isinstance(value, list):
                errors.append(f"{where} must be a list of objects")
            else:
                assert f.item_contract is not None
                for i, item in enumerate(value):
                    errors.extend(f.item_contract.check(item, path=f"{where}[{i}]."))
        elif f.kind == "value":
            ok = isinstance(value, (str, int, float)) or (
                isinstance(value, list) and all(isinstance(x, str) for x in value)
            )
            if isinstance(value, bool) or not ok:
                errors.append(f"{where} must be a scalar or a list of strings")
        return errors


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    body: str
    required_bindings: frozenset[str]
    response_contract: ResponseContract

    def __post_init__(self) -> None:
        found = set(_PLACEHOLDER_RE.findall(self.body))
        unknown = found - set(self.required_bindings)
        if unknown:
            raise ValueError(
                f"template {self.template_id!r} has placeholders outside "
                f"required_bindings: {sorted(unknown)}"
            )


def _tpl(template_id: str, body: str, bindings: set[str], contract: ResponseContract) -> PromptTemplate:
    return PromptTemplate(
        template_id=template_id,
        body=body,
        required_bindings=frozenset(bindings),
        response_contract=contract,
    )


_EXAMPLE_ITEM = ResponseContract(
    fields=(
        ContractField("name", "string", non_empty=True),
        ContractField("provenance", "string", allowed=("from_documents", "model_knowledge")),
    )
)

UNIT_DISCOVERY_CONTRACT = ResponseContract(
    fields=(
        ContractField("type_name", "string", non_empty=True),
        ContractField("description", "string"),
        ContractField("example_instances", "object_list", required=False, item_contract=_EXAMPLE_ITEM),
    )
)

_PROPOSAL_ITEM = ResponseContract(
    fields=(
        ContractField("action", "string", allowed=("add", "refine")),
        ContractField("name", "string", non_empty=True),
        ContractField("definition", "string"),
        ContractField("rationale", "string"),
        ContractField(
            "value_kind",
            "string",
            allowed=("text", "number", "date", "enum", "list_of_text"),
        ),
        ContractField("allowed_values", "string_list", required=False),
    )
)

SCHEMA_DISCOVERY_CONTRACT = ResponseContract(
    fields=(ContractField("proposals", "object_list", item_contract=_PROPOSAL_ITEM),)
)

_INSTANCE_ITEM = ResponseContract(
    fields=(
        ContractField("name", "string", non_empty=True),
        ContractField("quote", "string", non_empty=True),
    )
)

INSTANCE_IDENTIFICATION_CONTRACT = ResponseContract(
    fields=(ContractField("instances", "object_list", item_contract=_INSTANCE_ITEM),)
)

_CELL_ITEM = ResponseContract(
    fields=(
        ContractField("field", "string", non_empty=True),
        ContractField("value", "value", required=False),
        ContractField("quotes", "string_list", required=False),
    )
)

FIELD_FILL_CONTRACT = ResponseContract(
    fields=(ContractField("cells", "object_list", item_contract=_CELL_ITEM),)
)

FIELD_FOLLOWUP_CONTRACT = ResponseContract(
    fields=(
        ContractField("found", "boolean"),
        ContractField("value", "value", required=False),
        ContractField("quotes", "string_list", required=False),
    )
)


DEFAULT_TEMPLATES: dict[str, PromptTemplate] = {
    "unit_discovery": _tpl(
        "unit_discovery",
        (
            "You are helping a researcher turn a document collection into a structured dataset.\n"
            "\n"
            "Research question:\n{query}\n"
            "\n"
            "Documents:\n{documents}\n"
            "\n"
            "Identify what type of entity the question is asking about: the observation unit\n"
            "that each row of the dataset should represent. Describe how that unit appears in\n"
            "these documents, and list a few example instances, marking each as coming from\n"
            "the documents or from your background knowledge.\n"
            "\n"
            "Respond with only a JSON object:\n"
            '{"type_name": "...", "description": "...",\n'
            ' "example_instances": [{"name": "...", "provenance": "from_documents" | "model_knowledge"}]}\n'
        ),
        {"query", "documents"},
        UNIT_DISCOVERY_CONTRACT,
    ),
    "schema_discovery": _tpl(
        "schema_discovery",
        (
            "You are designing an annotation schema for a research dataset.\n"
            "\n"
            "Research question:\n{query}\n"
            "\n"
            "Observation unit: {unit_type} - {unit_description}\n"
            "\n"
            "Current schema fields:\n{current_schema}\n"
            "\n"
            "Documents:\n{documents}\n"
            "\n"
            "Do these documents suggest adding new fields or refining existing ones?\n"
            "Propose only fields that help answer the research question. For each proposal\n"
            "give a definition, a rationale tying it to the question, and a value kind\n"
            "(text, number, date, enum, list_of_text); enum proposals must list allowed values.\n"
            "Return an empty list when nothing should change.\n"
            "\n"
            "Respond with only a JSON object:\n"
            '{"proposals": [{"action": "add" | "refine", "name": "...", "definition": "...",\n'
            '  "rationale": "...", "value_kind": "...", "allowed_values": ["..."]}]}\n'
        ),
        {"query", "unit_type", "unit_description", "current_schema", "documents"},
        SCHEMA_DISCOVERY_CONTRACT,
    ),
    "instance_identification": _tpl(
        "instance_identification",
        (
            "Observation unit: {unit_type} - {unit_description}\n"
            "\n"
            "Document {doc_id}:\n{document}\n"
            "\n"
            "List every distinct instance of the observation unit this document discusses.\n"
            "For each instance include one verbatim quote from the document that mentions it.\n"
            "Quotes must be copied exactly; do not paraphrase.\n"
            "\n"
            "Respond with only a JSON object:\n"
            '{"instances": [{"name": "...", "quote": "..."}]}\n'
        ),
        {"unit_type", "unit_description", "doc_id", "document"},
        INSTANCE_IDENTIFICATION_CONTRACT,
    ),
    "field_fill": _tpl(
        "field_fill",
        (
            "You are extracting structured values about {instance_name} "
            "(a {unit_type}) from one document.\n"
            "\n"
            "Document {doc_id}:\n{document}\n"
            "\n"
            "Schema fields:\n{fields}\n"
            "\n"
            "Fill every field you can. A value may be given only when it is clearly supported\n"
            "by text in this document; include the supporting verbatim quote(s) for each value.\n"
            "Leave a field's value null when the document does not support one.\n"
            "\n"
            "Respond with only a JSON object:\n"
            '{"cells": [{"field": "...", "value": ..., "quotes": ["..."]}]}\n'
        ),
        {"unit_type", "instance_name", "doc_id", "document", "fields"},
        FIELD_FILL_CONTRACT,
    ),
    "field_followup": _tpl(
        "field_followup",
        (
            "Earlier extraction left one field unfilled for {instance_name} "
            "(a {unit_type}).\n"
            "\n"
            "Document {doc_id}:\n{document}\n"
            "\n"
            "Field: {field_name} ({field_kind})\nDefinition: {field_definition}\n"
            "\n"
            "Search the document again for this specific field. A value may be given only\n"
            "when it is clearly supported by text in this document; include the supporting\n"
            "verbatim quote(s). If the document truly does not state it, report found=false.\n"
            "\n"
            "Respond with only a JSON object:\n"
            '{"found": true | false, "value": ..., "quotes": ["..."]}\n'
        ),
        {
            "unit_type",
            "instance_name",
            "doc_id",
            "document",
            "field_name",
            "field_definition",
            "field_kind",
        },
        FIELD_FOLLOWUP_CONTRACT,
    ),
}

TEMPLATE_IDS = tuple(DEFAULT_TEMPLATES)
