"""High-level pipeline orchestration over a session store.

Both the CLI and the HTTP service drive sessions exclusively through this
module, so a headless run and the equivalent endpoint sequence produce
identical state.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Optional, Sequence

from .discovery import (
    DiscoveryAborted,
    DiscoveryConfig,
    discover_observation_unit,
    run_schema_discovery,
)
from .extraction import ExtractionConfig, ExtractionStats, extract_table, fill_rate
from .gateway import LlmGateway, ProviderConfig, ScriptedTranscript
from .model import Document, ResearchQuery, SessionState
from .store import SessionStore
from .templates import PromptTemplate

logger = logging.getLogger(__name__)

ProgressFn = Callable[[str, dict], None]


@dataclass(frozen=True)
class EngineConfig:
    """One configured model for discovery phases and an optionally cheaper
    one for extraction."""

    discovery_provider: ProviderConfig = ProviderConfig()
    extraction_provider: ProviderConfig = ProviderConfig()
    discovery: DiscoveryConfig = DiscoveryConfig()
    extraction: ExtractionConfig = ExtractionConfig()


@dataclass
class RunReport:
    docs_total: int = 0
    docs_failed: int = 0
    instances_found: int = 0
    fill_rate: float = 0.0
    rejected_evidence_count: int = 0
    llm_calls: int = 0
    token_usage: dict = field(default_factory=lambda: {"input_tokens": 0, "output_tokens": 0})
    docs_without_instances: list = field(default_factory=list)
    failed_doc_ids: list = field(default_factory=list)
    parked_edits: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "docs_total": self.docs_total,
            "docs_failed": self.docs_failed,
            "instances_found": self.instances_found,
            "fill_rate": self.fill_rate,
            "rejected_evidence_count": self.rejected_evidence_count,
            "llm_calls": self.llm_calls,
            "token_usage": dict(self.token_usage),
            "docs_without_instances": list(self.docs_without_instances),
            "failed_doc_ids": list(self.failed_doc_ids),
            "parked_edits": list(self.parked_edits),
        }


class Engine:
    def __init__(
        self,
        store: SessionStore,
        config: EngineConfig,
        transcript: Optional[ScriptedTranscript] = None,
        templates: Optional[Mapping[str, PromptTemplate]] = None,
    ):
        self.store = store
        self.config = config
        self.discovery_gateway = LlmGateway(
            config.discovery_provider, transcript=transcript, templates=templates
        )
        if (
            config.extraction_provider == config.discovery_provider
        ):
            self.extraction_gateway = self.discovery_gateway
        else:
            self.extraction_gateway = LlmGateway(
                config.extraction_provider,
                transcript=transcript,
                templates=templates,
                max_in_flight=max(4, config.extraction.max_parallel_docs),
            )

    # -- pipeline steps -------------------------------------------------------

    def create_session(self, query_text: str, documents: Sequence[Document]) -> SessionState:
        return self.store.create_session(ResearchQuery(query_text), documents)

    def discover_unit(
        self, state: SessionState, progress: Optional[ProgressFn] = None
    ) -> SessionState:
        cfg = self.config.discovery
        docs = state.documents
        start = cfg.unit_batch_index * cfg.batch_size
        if start >= len(docs):
            start = 0
        batch = docs[start : start + cfg.batch_size]
        if progress:
            progress("phase_started", {"phase": "unit_discovery"})
        if state.ou_spec is not None:
            logger.warning(
                "session %s: re-running unit discovery overwrites the previous unit",
                state.session_id,
            )
        unit = discover_observation_unit(state.query, batch, cfg, self.discovery_gateway)
        state = replace(state, ou_spec=unit, phase=_max_phase(state.phase, "unit_discovered"))
        self._persist(state)
        if progress:
            progress("phase_completed", {"phase": "unit_discovery", "type_name": unit.type_name})
        return state

    def set_unit_manual(
        self,
        state: SessionState,
        type_name: str,
        description: str = "",
        example_instances: Optional[Sequence[dict]] = None,
    ) -> SessionState:
        return self.store.append_edit(
            state,
            "unit_edit",
            {
                "type_name": type_name,
                "description": description,
                "example_instances": list(example_instances or []),
            },
        )

    def discover_schema(
        self,
        state: SessionState,
        incremental: bool = False,
        progress: Optional[ProgressFn] = None,
    ) -> SessionState:
        if state.ou_spec is None:
            raise ValueError("schema discovery requires an observation unit")
        seed = state.schema if (incremental and state.schema is not None) else None
        if progress:
            progress("phase_started", {"phase": "schema_discovery", "incremental": incremental})
        try:
            schema = run_schema_discovery(
                state.query,
                state.ou_spec,
                state.documents,
                self.config.discovery,
                self.discovery_gateway,
                seed_schema=seed,
                progress=progress,
            )
        except DiscoveryAborted as exc:
            partial = exc.partial_schema
            if partial.fields:
                state = replace(
                    state, schema=partial, phase=_max_phase(state.phase, "schema_discovered")
                )
                self._persist(state)
            raise
        # any schema change invalidates the table; extraction re-runs afterwards
        state = replace(state, schema=schema, phase="schema_discovered", table=None)
        self._persist(state)
        if progress:
            progress(
                "phase_completed",
                {"phase": "schema_discovery", "fields": len(schema.fields)},
            )
        return state

    def extract(
        self, state: SessionState, progress: Optional[ProgressFn] = None
    ) -> tuple[SessionState, RunReport]:
        if state.ou_spec is None:
            raise ValueError("extraction requires an observation unit")
        if state.schema is None or not state.schema.fields:
            raise ValueError("extraction requires a schema with at least one field")
        stats = ExtractionStats()
        table = extract_table(
            state.documents,
            state.ou_spec,
            state.schema,
            self.config.extraction,
            self.extraction_gateway,
            progress_sink=progress,
            stats=stats,
        )
        state = replace(state, table=table, phase="extracted")
        replayed = self.store.replay(state)
        state = replayed.state
        self._persist(state)

        calls, tokens_in, tokens_out = self._usage_totals()
        report = RunReport(
            docs_total=len(state.documents),
            docs_failed=len(stats.failed_doc_ids),
            instances_found=len(table.rows),
            fill_rate=fill_rate(state.table),
            rejected_evidence_count=stats.rejected_evidence,
            llm_calls=calls,
            token_usage={"input_tokens": tokens_in, "output_tokens": tokens_out},
            docs_without_instances=list(stats.docs_without_instances),
            failed_doc_ids=list(stats.failed_doc_ids),
            parked_edits=list(replayed.parked),
        )
        return state, report

    def _usage_totals(self) -> tuple[int, int, int]:
        gateways = [self.discovery_gateway]
        if self.extraction_gateway is not self.discovery_gateway:
            gateways.append(self.extraction_gateway)
        calls = sum(g.usage.calls for g in gateways)
        tokens_in = sum(g.usage.input_tokens for g in gateways)
        tokens_out = sum(g.usage.output_tokens for g in gateways)
        return calls, tokens_in, tokens_out

    def _persist(self, state: SessionState) -> None:
        self.store.save_session(state)
        exchanges = list(self.discovery_gateway.exchanges)
        self.discovery_gateway.exchanges.clear()
        if self.extraction_gateway is not self.discovery_gateway:
            exchanges += list(self.extraction_gateway.exchanges)
            self.extraction_gateway.exchanges.clear()
        if exchanges:
            self.store.record_exchanges(state.session_id, exchanges)


def _max_phase(current: str, floor: str) -> str:
    order = ("created", "unit_discovered", "schema_discovered", "extracted")
    return floor if order.index(current) < order.index(floor) else current
