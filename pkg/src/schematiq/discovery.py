"""Pipeline steps 1 and 2: observation-unit discovery and the iterative
batch-wise schema discovery loop with proposal merging and convergence
detection.

The loop is inherently sequential: each batch conditions on the schema
accumulated so far.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

from .gateway import GatewayError, LlmGateway
from .model import (
    Document,
    ExampleInstance,
    ModelValidationError,
    ObservationUnitSpec,
    ResearchQuery,
    Schema,
    SchemaField,
    canonical_field_name,
    normalize_name,
)

logger = logging.getLogger(__name__)

# Progress callback: (event_kind, payload). The service wraps these into its
# stream events; library callers may pass None.
ProgressFn = Callable[[str, dict], None]


@dataclass(frozen=True)
class FieldProposal:
    action: str  # "add" | "refine"
    target_name: str
    definition: str
    rationale: str
    value_kind: str
    allowed_values: Optional[tuple[str, ...]] = None


@dataclass(frozen=True)
class DiscoveryConfig:
    batch_size: int = 5
    max_chars_per_doc: int = 20000
    quiescence_batches: int = 3
    max_fields: int = 40
    early_stop: bool = True
    unit_batch_index: int = 0

    def __post_init__(self) -> None:
        if min(self.batch_size, self.max_chars_per_doc, self.quiescence_batches, self.max_fields) <= 0:
            raise ValueError("discovery config bounds must be positive")


class DiscoveryAborted(GatewayError):
    """Terminal gateway failure mid-loop; carries the partial schema so the
    session can preserve it for inspection."""

    def __init__(self, message: str, partial_schema: Schema):
        super().__init__(message)
        self.partial_schema = partial_schema


def _clip(text: str, limit: int) -> str:
    return text if len(text) <= limit else text[:limit]


def render_document_batch(batch: Sequence[Document], max_chars: int) -> str:
    parts = []
    for doc in batch:
        title = f" ({doc.title})" if doc.title else ""
        parts.append(f"[{doc.doc_id}]{title}\n{_clip(doc.text, max_chars)}")
    return "\n\n".join(parts)


def render_schema_summary(schema: Schema) -> str:
    if not schema.fields:
        return "(no fields yet)"
    lines = []
    for f in schema.fields:
        allowed = f" allowed={list(f.allowed_values)}" if f.allowed_values else ""
        lines.append(f"- {f.canonical_name} [{f.value_kind}]{allowed}: {f.definition}")
    return "\n".join(lines)


def discover_observation_unit(
    query: ResearchQuery,
    batch: Sequence[Document],
    cfg: DiscoveryConfig,
    gateway: LlmGateway,
) -> ObservationUnitSpec:
    if not batch:
        raise ValueError("observation unit discovery needs a non-empty batch")
    exchange = gateway.complete(
        "unit_discovery",
        {
            "query": query.text,
            "documents": render_document_batch(batch, cfg.max_chars_per_doc),
        },
    )
    parsed = exchange.parsed or {}
    examples = tuple(
        ExampleInstance(name=e["name"], provenance=e["provenance"])
        for e in parsed.get("example_instances") or []
    )
    return ObservationUnitSpec(
        type_name=parsed["type_name"].strip(),
        description=parsed.get("description", "").strip(),
        example_instances=examples,
        origin="discovered",
    )


def propose_schema_updates(
    query: ResearchQuery,
    ou_spec: ObservationUnitSpec,
    current: Schema,
    batch: Sequence[Document],
    cfg: DiscoveryConfig,
    gateway: LlmGateway,
) -> list[FieldProposal]:
    if not batch:
        raise ValueError("schema proposal needs a non-empty batch")
    exchange = gateway.complete(
        "schema_discovery",
        {
            "query": query.text,
            "unit_type": ou_spec.type_name,
            "unit_description": ou_spec.description,
            "current_schema": render_schema_summary(current),
            "documents": render_document_batch(batch, cfg.max_chars_per_doc),
        },
    )
    proposals: list[FieldProposal] = []
    for item in (exchange.parsed or {})["proposals"]:
        allowed = item.get("allowed_values")
        proposal = FieldProposal(
            action=item["action"],
            target_name=item["name"],
            definition=item.get("definition", ""),
            rationale=item.get("rationale", ""),
            value_kind=item["value_kind"],
            allowed_values=tuple(allowed) if allowed else None,
        )
        if proposal.action == "refine":
            try:
                known = current.field_by_name(proposal.target_name) is not None
            except ModelValidationError:
                known = False
            if not known:
                logger.warning(
                    "dropping refine proposal for unknown field %r", proposal.target_name
                )
                continue
        proposals.append(proposal)
    return proposals


def _field_content_equal(f: SchemaField, definition: str, rationale: str, value_kind: str, allowed) -> bool:
    return (
        f.definition == definition
        and f.rationale == rationale
        and f.value_kind == value_kind
        and f.allowed_values == allowed
    )


def merge_proposals(schema: Schema, proposals: Sequence[FieldProposal]) -> tuple[Schema, int]:
    """Fold proposals into the schema.

    Adds that collide with an existing field (by normalized name) become
    refines; refines never touch locked fields; adds beyond max_fields are
    rejected by the caller passing a bounded proposal list (the loop enforces
    the bound). A refine counts as accepted only when it changes the field.
    Version bumps by exactly 1 iff anything was accepted.
    """
    fields = list(schema.fields)
    index = {f.key: i for i, f in enumerate(fields)}
    accepted = 0

    for p in proposals:
        try:
            name = canonical_field_name(p.target_name)
            key = normalize_name(name)
        except ModelValidationError:
            logger.warning("dropping proposal with unusable name %r", p.target_name)
            continue
        allowed = p.allowed_values if p.value_kind == "enum" else None
        if p.value_kind == "enum" and not allowed:
            logger.warning("dropping enum proposal %r without allowed_values", p.target_name)
            continue

        if key in index:
            i = index[key]
            existing = fields[i]
            if existing.locked:
                continue
            if _field_content_equal(existing, p.definition, p.rationale, p.value_kind, allowed):
                continue
            fields[i] = replace(
                existing,
                definition=p.definition,
                rationale=p.rationale,
                value_kind=p.value_kind,
                allowed_values=allowed,
            )
            accepted += 1
        else:
            if p.action == "refine":
                # unknown targets were already dropped upstream; guard anyway
                continue
            fields.append(
                SchemaField(
                    canonical_name=name,
                    definition=p.definition,
                    rationale=p.rationale,
                    value_kind=p.value_kind,
                    allowed_values=allowed,
                    origin="model",
                    locked=False,
                )
            )
            index[key] = len(fields) - 1
            accepted += 1

    if accepted == 0:
        return schema, 0
    return Schema(fields=tuple(fields), version=schema.version + 1), accepted


def run_schema_discovery(
    query: ResearchQuery,
    ou_spec: ObservationUnitSpec,
    docs: Sequence[Document],
    cfg: DiscoveryConfig,
    gateway: LlmGateway,
    seed_schema: Optional[Schema] = None,
    progress: Optional[ProgressFn] = None,
) -> Schema:
    """Process docs in stable order, batch_size at a time, merging proposals
    after each batch. Terminates on corpus exhaustion or, when early_stop is
    enabled, after quiescence_batches consecutive zero-accept batches.
    Seed fields are never removed and locked fields never altered.
    """
    if not docs:
        raise ValueError("schema discovery needs at least one document")
    schema = seed_schema if seed_schema is not None else Schema()
    zero_streak = 0

    for start in range(0, len(docs), cfg.batch_size):
        batch = docs[start : start + cfg.batch_size]
        try:
            proposals = propose_schema_updates(query, ou_spec, schema, batch, cfg, gateway)
        except GatewayError as exc:
            raise DiscoveryAborted(
                f"schema discovery aborted on batch starting at doc {start}: {exc}",
                partial_schema=schema,
            ) from exc

        room = cfg.max_fields - len(schema.fields)
        bounded: list[FieldProposal] = []
        new_names: set[str] = set()
        existing = {f.key for f in schema.fields}
        for p in proposals:
            try:
                key = normalize_name(canonical_field_name(p.target_name))
            except ModelValidationError:
                bounded.append(p)  # merge_proposals logs and drops it
                continue
            is_new = key not in existing and key not in new_names
            if is_new and len(new_names) >= room:
                logger.warning("rejecting add %r: schema at max_fields", p.target_name)
                continue
            if is_new:
                new_names.add(key)
            bounded.append(p)

        schema, accepted = merge_proposals(schema, bounded)
        if progress:
            for p in proposals:
                progress("field_proposed", {"name": p.target_name, "action": p.action})
            progress(
                "batch_processed",
                {
                    "batch_start": start,
                    "batch_size": len(batch),
                    "accepted": accepted,
                    "schema_fields": len(schema.fields),
                },
            )

        zero_streak = 0 if accepted > 0 else zero_streak + 1
        if cfg.early_stop and zero_streak >= cfg.quiescence_batches:
            break

    return schema
