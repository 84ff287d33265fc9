"""HTTP surface: REST endpoints for every pipeline operation and edit, a
WebSocket progress stream with resumable sequence numbers, and table export.

The REST layer holds no pipeline state of its own: every mutating endpoint
is an edit event or pipeline run against the session store. The only
in-process state is stream plumbing (per-session event buffers and job
handles).

Environment:
    SCHEMATIQ_DATA_DIR   session store root (default ./schematiq_data)
    SCHEMATIQ_BIND_ADDR  host:port for `python -m schematiq.service`
    SCHEMATIQ_TRANSCRIPT scripted transcript path (scripted mode)
"""

from __future__ import annotations

import logging
import threading
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional

from fastapi import FastAPI, Query, Request, WebSocket, WebSocketDisconnect
from fastapi.concurrency import run_in_threadpool
from fastapi.responses import JSONResponse, Response
from pydantic import BaseModel

from . import serialize
from .engine import Engine, EngineConfig
from .export import table_to_csv, table_to_json
from .gateway import GatewayError, ProviderConfig, ScriptedTranscript
from .model import Document, ModelValidationError, ResearchQuery, SessionState
from .store import EditError, SessionNotFoundError, SessionStore, StoreConfig

logger = logging.getLogger(__name__)

EVENT_KINDS = (
    "phase_started",
    "batch_processed",
    "field_proposed",
    "instance_found",
    "cell_filled",
    "cell_rejected",
    "conflict_detected",
    "phase_completed",
    "pipeline_error",
)


@dataclass(frozen=True)
class ProgressEvent:
    session_id: str
    seq: int
    kind: str
    payload: dict
    timestamp: str

    def to_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "seq": self.seq,
            "kind": self.kind,
            "payload": dict(self.payload),
            "timestamp": self.timestamp,
        }


class EventBroker:
    """Per-session buffer of progress events with strictly increasing,
    gapless seq. Subscribers resume from any last_seq without gaps or
    duplicates because delivery always reads from the buffer."""

    def __init__(self, session_id: str):
        self.session_id = session_id
        self._events: list[ProgressEvent] = []
        self._cond = threading.Condition()

    def publish(self, kind: str, payload: dict) -> ProgressEvent:
        if kind not in EVENT_KINDS:
            raise ValueError(f"unknown progress event kind {kind!r}")
        with self._cond:
            event = ProgressEvent(
                session_id=self.session_id,
                seq=len(self._events) + 1,
                kind=kind,
                payload=dict(payload),
                timestamp=datetime.now(timezone.utc).isoformat(),
            )
            self._events.append(event)
            self._cond.notify_all()
        return event

    def wait_next(self, last_seq: int, timeout: float) -> Optional[ProgressEvent]:
        with self._cond:
            if len(self._events) > last_seq:
                return self._events[last_seq]
            self._cond.wait(timeout=timeout)
            if len(self._events) > last_seq:
                return self._events[last_seq]
            return None


@dataclass
class JobHandle:
    job_id: str
    session_id: str
    status: str = "running"  # running | done | partial | error
    error: Optional[str] = None
    report: Optional[dict] = None


@dataclass
class ServiceConfig:
    data_dir: Path = Path("schematiq_data")
    engine: EngineConfig = field(default_factory=EngineConfig)
    transcript_path: Optional[Path] = None
    retain_raw_exchanges: bool = True


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str, detail: Any = None):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message
        self.detail = detail


def _problem(status: int, code: str, message: str, detail: Any = None) -> JSONResponse:
    return JSONResponse(
        status_code=status,
        content={"status": status, "code": code, "message": message, "detail": detail},
    )


# -- request bodies ---------------------------------------------------------------


class DocumentIn(BaseModel):
    doc_id: str
    text: str
    title: Optional[str] = None
    source_name: str = ""
    metadata: dict[str, str] = {}


class SessionIn(BaseModel):
    query: str
    documents: list[DocumentIn]


class UnitIn(BaseModel):
    type_name: str
    description: str = ""
    example_instances: list[dict] = []


class SchemaDiscoverIn(BaseModel):
    incremental: bool = False


class SchemaEditIn(BaseModel):
    kind: str
    payload: dict


class SchemaPatchIn(BaseModel):
    edits: list[SchemaEditIn]


class CellEditIn(BaseModel):
    instance_key: str
    field: str
    value: Any
    evidence: list[dict] = []


class CellsPatchIn(BaseModel):
    edits: list[CellEditIn]


class DocsIn(BaseModel):
    documents: list[DocumentIn]


# -- app factory --------------------------------------------------------------------


class ServiceRuntime:
    """Shared mutable service state: store, per-session engines/brokers/jobs."""

    def __init__(self, config: ServiceConfig):
        self.config = config
        self.store = SessionStore(
            StoreConfig(
                root_dir=Path(config.data_dir),
                retain_raw_exchanges=config.retain_raw_exchanges,
            )
        )
        self._engines: dict[str, Engine] = {}
        self._brokers: dict[str, EventBroker] = {}
        self._transcripts: dict[str, ScriptedTranscript] = {}
        self.jobs: dict[str, JobHandle] = {}
        self._lock = threading.Lock()

    def engine(self, session_id: str) -> Engine:
        with self._lock:
            if session_id not in self._engines:
                transcript = None
                if self.config.transcript_path is not None:
                    transcript = ScriptedTranscript.load(self.config.transcript_path)
                    self._transcripts[session_id] = transcript
                self._engines[session_id] = Engine(
                    self.store, self.config.engine, transcript=transcript
                )
            return self._engines[session_id]

    def reset_transcript(self, session_id: str) -> None:
        transcript = self._transcripts.get(session_id)
        if transcript is not None:
            transcript.reset()

    def broker(self, session_id: str) -> EventBroker:
        with self._lock:
            if session_id not in self._brokers:
                self._brokers[session_id] = EventBroker(session_id)
            return self._brokers[session_id]


def create_app(config: Optional[ServiceConfig] = None) -> FastAPI:
    config = config or ServiceConfig()
    runtime = ServiceRuntime(config)
    app = FastAPI(title="schematiq", version="0.1.0")
    app.state.runtime = runtime

    @app.exception_handler(ApiError)
    async def handle_api_error(_req: Request, exc: ApiError):
        return _problem(exc.status, exc.code, exc.message, exc.detail)

    @app.exception_handler(EditError)
    async def handle_edit_error(_req: Request, exc: EditError):
        return _problem(422, "invalid_edit", str(exc))

    @app.exception_handler(ModelValidationError)
    async def handle_validation_error(_req: Request, exc: ModelValidationError):
        return _problem(422, "invalid_input", str(exc))

    def load_state(session_id: str) -> SessionState:
        try:
            return runtime.store.load_session(session_id)
        except SessionNotFoundError:
            raise ApiError(404, "session_not_found", f"no session {session_id!r}")

    # -- sessions -------------------------------------------------------------

    @app.post("/v1/sessions", status_code=201)
    def create_session(body: SessionIn):
        if not body.query.strip():
            raise ApiError(422, "empty_query", "query must be non-empty")
        if not body.documents:
            raise ApiError(422, "empty_corpus", "at least one document is required")
        seen: set[str] = set()
        for d in body.documents:
            if d.doc_id in seen:
                raise ApiError(
                    422, "duplicate_doc_id", f"duplicate doc_id {d.doc_id!r}", d.doc_id
                )
            seen.add(d.doc_id)
        docs = [
            Document(
                doc_id=d.doc_id,
                text=d.text,
                title=d.title,
                source_name=d.source_name,
                metadata=d.metadata,
            )
            for d in body.documents
        ]
        state = runtime.store.create_session(ResearchQuery(body.query), docs)
        return {"session_id": state.session_id}

    @app.get("/v1/sessions/{session_id}")
    def get_session(session_id: str):
        state = load_state(session_id)
        return {
            "session_id": state.session_id,
            "query": state.query.text,
            "phase": state.phase,
            "document_count": len(state.documents),
            "document_ids": [d.doc_id for d in state.documents],
            "ou_spec": serialize.unit_to_dict(state.ou_spec) if state.ou_spec else None,
            "schema": serialize.schema_to_dict(state.schema) if state.schema else None,
            "has_table": state.table is not None,
            "edit_count": len(state.edit_log),
        }

    @app.get("/v1/sessions/{session_id}/documents/{doc_id}")
    def get_document(session_id: str, doc_id: str):
        state = load_state(session_id)
        try:
            return serialize.document_to_dict(state.document(doc_id))
        except KeyError:
            raise ApiError(404, "document_not_found", f"no document {doc_id!r}")

    @app.post("/v1/sessions/{session_id}/documents")
    def add_documents(session_id: str, body: DocsIn):
        state = load_state(session_id)
        engine = runtime.engine(session_id)
        state = engine.store.append_edit(
            state, "docs_added", {"documents": [d.model_dump() for d in body.documents]}
        )
        return {"document_count": len(state.documents), "phase": state.phase}

    # -- unit -------------------------------------------------------------------

    @app.post("/v1/sessions/{session_id}/unit:discover")
    def discover_unit(session_id: str):
        state = load_state(session_id)
        if state.phase == "extracted":
            raise ApiError(
                409,
                "already_extracted",
                "extraction already ran; re-run downstream phases after changing the unit",
            )
        engine = runtime.engine(session_id)
        broker = runtime.broker(session_id)
        try:
            state = engine.discover_unit(state, progress=broker.publish)
        except GatewayError as exc:
            raise ApiError(502, "gateway_error", str(exc))
        return serialize.unit_to_dict(state.ou_spec)

    @app.put("/v1/sessions/{session_id}/unit")
    def put_unit(session_id: str, body: UnitIn):
        state = load_state(session_id)
        if state.phase == "extracted":
            raise ApiError(
                409,
                "already_extracted",
                "extraction already ran; re-run downstream phases after changing the unit",
            )
        if not body.type_name.strip():
            raise ApiError(422, "empty_type_name", "type_name must be non-empty")
        engine = runtime.engine(session_id)
        state = engine.set_unit_manual(
            state, body.type_name, body.description, body.example_instances
        )
        return serialize.unit_to_dict(state.ou_spec)

    # -- schema ------------------------------------------------------------------

    @app.post("/v1/sessions/{session_id}/schema:discover")
    def discover_schema(session_id: str, body: Optional[SchemaDiscoverIn] = None):
        state = load_state(session_id)
        if state.ou_spec is None:
            raise ApiError(409, "unit_missing", "observation unit not set")
        incremental = bool(body and body.incremental)
        engine = runtime.engine(session_id)
        broker = runtime.broker(session_id)
        try:
            state = engine.discover_schema(
                state, incremental=incremental, progress=broker.publish
            )
        except GatewayError as exc:
            raise ApiError(502, "gateway_error", str(exc))
        return serialize.schema_to_dict(state.schema)

    @app.patch("/v1/sessions/{session_id}/schema")
    def patch_schema(session_id: str, body: SchemaPatchIn):
        state = load_state(session_id)
        allowed = {"field_add", "field_edit", "field_remove", "field_merge"}
        engine = runtime.engine(session_id)
        for edit in body.edits:
            if edit.kind not in allowed:
                raise ApiError(
                    422, "invalid_edit_kind", f"kind must be one of {sorted(allowed)}"
                )
            state = engine.store.append_edit(state, edit.kind, edit.payload)
        if state.schema is None:
            raise ApiError(409, "schema_missing", "no schema present")
        return serialize.schema_to_dict(state.schema)

    # -- table ---------------------------------------------------------------------

    @app.post("/v1/sessions/{session_id}/table:extract", status_code=202)
    def start_extract(session_id: str):
        state = load_state(session_id)
        if state.schema is None or not state.schema.fields:
            raise ApiError(409, "schema_missing", "schema discovery has not produced fields")
        if state.ou_spec is None:
            raise ApiError(409, "unit_missing", "observation unit not set")
        engine = runtime.engine(session_id)
        broker = runtime.broker(session_id)
        runtime.reset_transcript(session_id)
        job = JobHandle(job_id=uuid.uuid4().hex[:12], session_id=session_id)
        runtime.jobs[job.job_id] = job

        def _run() -> None:
            try:
                _state, report = engine.extract(
                    runtime.store.load_session(session_id), progress=broker.publish
                )
                job.report = report.to_dict()
                job.status = "partial" if report.docs_failed else "done"
            except Exception as exc:  # job boundary: surface, never crash the app
                logger.exception("extraction job failed for %s", session_id)
                job.status = "error"
                job.error = str(exc)
                broker.publish(
                    "pipeline_error", {"fatal": True, "error": str(exc)}
                )
                broker.publish("phase_completed", {"phase": "extraction", "failed": True})

        threading.Thread(target=_run, name=f"extract-{session_id}", daemon=True).start()
        return {"job_id": job.job_id, "status": job.status}

    @app.get("/v1/jobs/{job_id}")
    def get_job(job_id: str):
        job = runtime.jobs.get(job_id)
        if job is None:
            raise ApiError(404, "job_not_found", f"no job {job_id!r}")
        return {
            "job_id": job.job_id,
            "session_id": job.session_id,
            "status": job.status,
            "error": job.error,
            "report": job.report,
        }

    @app.get("/v1/sessions/{session_id}/table")
    def get_table(session_id: str):
        state = load_state(session_id)
        if state.table is None:
            raise ApiError(409, "table_missing", "extraction has not produced a table")
        return serialize.table_to_dict(state.table)

    @app.patch("/v1/sessions/{session_id}/table/cells")
    def patch_cells(session_id: str, body: CellsPatchIn):
        state = load_state(session_id)
        if state.table is None:
            raise ApiError(409, "table_missing", "extraction has not produced a table")
        engine = runtime.engine(session_id)
        for edit in body.edits:
            state = engine.store.append_edit(
                state,
                "cell_edit",
                {
                    "instance_key": edit.instance_key,
                    "field": edit.field,
                    "value": edit.value,
                    "evidence": edit.evidence,
                },
            )
        return serialize.table_to_dict(state.table)

    # -- export ------------------------------------------------------------------------

    @app.get("/v1/sessions/{session_id}/export")
    def export_table(
        session_id: str,
        format: str = Query("csv"),
        include_conflicts: bool = Query(False),
    ):
        state = load_state(session_id)
        if state.table is None:
            raise ApiError(409, "table_missing", "extraction has not produced a table")
        if format == "json":
            return Response(
                content=table_to_json(state.table),
                media_type="application/json",
                headers={"Content-Disposition": 'attachment; filename="table.json"'},
            )
        if format == "csv":
            unit_name = state.ou_spec.type_name if state.ou_spec else "Instance"
            csv_text = table_to_csv(
                state.table,
                state.schema,
                instance_column=unit_name,
                include_conflicts=include_conflicts,
            )
            return Response(
                content=csv_text,
                media_type="text/csv",
                headers={"Content-Disposition": 'attachment; filename="table.csv"'},
            )
        raise ApiError(422, "bad_format", "format must be csv or json")

    # -- progress stream ------------------------------------------------------------------

    @app.websocket("/v1/sessions/{session_id}/events")
    async def events_stream(websocket: WebSocket, session_id: str, last_seq: int = 0):
        try:
            runtime.store.load_session(session_id)
        except SessionNotFoundError:
            await websocket.close(code=4404)
            return
        await websocket.accept()
        broker = runtime.broker(session_id)
        cursor = last_seq
        try:
            while True:
                event = await run_in_threadpool(broker.wait_next, cursor, 0.5)
                if event is None:
                    continue
                await websocket.send_json(event.to_dict())
                cursor = event.seq
                if event.kind == "phase_completed" and event.payload.get("phase") == "extraction":
                    break
            await websocket.close()
        except WebSocketDisconnect:
            pass

    return app


def main() -> None:
    import os

    import uvicorn

    data_dir = Path(os.environ.get("SCHEMATIQ_DATA_DIR", "schematiq_data"))
    bind = os.environ.get("SCHEMATIQ_BIND_ADDR", "127.0.0.1:8240")
    host, _, port = bind.partition(":")
    transcript = os.environ.get("SCHEMATIQ_TRANSCRIPT")
    if transcript:
        engine_config = EngineConfig(
            discovery_provider=ProviderConfig(provider_id="scripted"),
            extraction_provider=ProviderConfig(provider_id="scripted"),
        )
        config = ServiceConfig(
            data_dir=data_dir,
            engine=engine_config,
            transcript_path=Path(transcript),
        )
    else:
        engine_config = EngineConfig(
            discovery_provider=ProviderConfig(provider_id="hosted_api", model_id="gemini-2.5-flash"),
            extraction_provider=ProviderConfig(
                provider_id="hosted_api", model_id="gemini-2.5-flash-lite"
            ),
        )
        config = ServiceConfig(data_dir=data_dir, engine=engine_config)
    uvicorn.run(create_app(config), host=host or "127.0.0.1", port=int(port or 8240))


if __name__ == "__main__":
    main()
