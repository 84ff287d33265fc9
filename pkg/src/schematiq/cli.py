"""Headless end-to-end runner: ingest a corpus manifest, run the full
pipeline, write exports and a run report.

Usage:
  schematiq --manifest corpus.json --query "..." --scripted transcript.json --out-dir out/

Exit codes: 0 success, 1 partial (some documents failed), 2 terminal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

from .discovery import DiscoveryAborted, DiscoveryConfig
from .engine import Engine, EngineConfig
from .export import table_to_csv, table_to_json
from .extraction import ExtractionConfig
from .gateway import (
    GatewayError,
    ProviderConfig,
    ProviderConfigError,
    ScriptedTranscript,
)
from .model import Document, ModelValidationError
from .serialize import dumps_canonical, load_schema_file
from .store import SessionStore, StoreConfig

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_ERROR = 2


def load_manifest(manifest_path: Path) -> list[Document]:
    entries = json.loads(manifest_path.read_text(encoding="utf-8"))
    if not isinstance(entries, list) or not entries:
        raise ValueError("manifest must be a non-empty JSON array")
    docs = []
    base = manifest_path.parent
    for entry in entries:
        path = Path(entry["path"])
        if not path.is_absolute():
            path = base / path
        docs.append(
            Document(
                doc_id=entry["doc_id"],
                title=entry.get("title"),
                text=path.read_text(encoding="utf-8"),
                source_name=str(path.name),
            )
        )
    return docs


def read_query(query_arg: str) -> str:
    path = Path(query_arg)
    if path.exists() and path.is_file():
        return path.read_text(encoding="utf-8").strip()
    return query_arg


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="schematiq", description=__doc__)
    p.add_argument("--manifest", required=True, help="corpus manifest JSON: [{doc_id, title?, path}]")
    p.add_argument("--query", required=True, help="research question text, or a path to a text file")
    p.add_argument("--unit", help="manual observation-unit type name (skips unit discovery)")
    p.add_argument("--unit-description", default="", help="description for --unit")
    p.add_argument("--schema-seed", help="schema.json to seed incremental discovery")
    p.add_argument("--scripted", help="scripted transcript JSON (offline deterministic mode)")
    p.add_argument("--model", default="gemini-2.5-flash", help="hosted model id")
    p.add_argument("--extraction-model", default=None, help="hosted model id for extraction")
    p.add_argument("--api-key-env", default="SCHEMATIQ_API_KEY", help="env var holding the API key")
    p.add_argument("--batch-size", type=int, default=5)
    p.add_argument("--max-fields", type=int, default=40)
    p.add_argument("--out-dir", default="schematiq_out")
    p.add_argument("--format", choices=["csv", "json", "both"], default="both")
    p.add_argument("--parallel", type=int, default=4, help="max documents processed concurrently")
    p.add_argument("--include-conflicts", action="store_true",
                   help="add per-field conflict columns to the CSV")
    p.add_argument("--data-dir", default=None, help="session store root (default <out-dir>/sessions)")
    return p


def _engine_config(args) -> EngineConfig:
    if args.scripted:
        discovery_provider = ProviderConfig(provider_id="scripted")
        extraction_provider = discovery_provider
    else:
        discovery_provider = ProviderConfig(
            provider_id="hosted_api", model_id=args.model, api_key_env_var=args.api_key_env
        )
        extraction_provider = ProviderConfig(
            provider_id="hosted_api",
            model_id=args.extraction_model or args.model,
            api_key_env_var=args.api_key_env,
        )
    return EngineConfig(
        discovery_provider=discovery_provider,
        extraction_provider=extraction_provider,
        discovery=DiscoveryConfig(batch_size=args.batch_size, max_fields=args.max_fields),
        extraction=ExtractionConfig(max_parallel_docs=args.parallel),
    )


def run(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    try:
        docs = load_manifest(Path(args.manifest))
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: cannot read manifest: {exc}", file=sys.stderr)
        return EXIT_ERROR

    query = read_query(args.query)
    data_dir = Path(args.data_dir) if args.data_dir else out_dir / "sessions"
    store = SessionStore(StoreConfig(root_dir=data_dir))

    transcript = None
    if args.scripted:
        try:
            transcript = ScriptedTranscript.load(args.scripted)
        except (OSError, ValueError) as exc:
            print(f"error: cannot read transcript: {exc}", file=sys.stderr)
            return EXIT_ERROR

    try:
        engine = Engine(store, _engine_config(args), transcript=transcript)
    except ProviderConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR

    try:
        state = engine.create_session(query, docs)
    except ModelValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    print(f"session {state.session_id}: {len(docs)} documents")

    try:
        if args.unit:
            state = engine.set_unit_manual(state, args.unit, args.unit_description)
        else:
            state = engine.discover_unit(state)
        print(f"observation unit: {state.ou_spec.type_name}")

        if args.schema_seed:
            seed = load_schema_file(args.schema_seed)
            if seed is None:
                print(f"error: schema seed not found: {args.schema_seed}", file=sys.stderr)
                return EXIT_ERROR
            # install the seed, then extend it through the incremental path
            from .model import replace

            state = replace(state, schema=seed, phase="schema_discovered")
            engine.store.save_session(state)
            state = engine.discover_schema(state, incremental=True)
        else:
            state = engine.discover_schema(state)
        print(f"schema: {len(state.schema.fields)} fields (v{state.schema.version})")

        state, report = engine.extract(state)
    except DiscoveryAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (GatewayError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR

    unit_name = state.ou_spec.type_name if state.ou_spec else "Instance"
    if args.format in ("csv", "both"):
        csv_text = table_to_csv(
            state.table,
            state.schema,
            instance_column=unit_name,
            include_conflicts=args.include_conflicts,
        )
        # bytes, so the CRLF line endings survive platform newline translation
        (out_dir / "table.csv").write_bytes(csv_text.encode("utf-8"))
    if args.format in ("json", "both"):
        (out_dir / "table.json").write_text(table_to_json(state.table), encoding="utf-8")
    (out_dir / "report.json").write_text(dumps_canonical(report.to_dict()), encoding="utf-8")

    print(
        f"table: {report.instances_found} rows, fill rate {report.fill_rate:.2f}, "
        f"{report.llm_calls} LLM calls"
    )
    if report.docs_failed:
        print(f"warning: {report.docs_failed} document(s) failed: {report.failed_doc_ids}")
        return EXIT_PARTIAL
    return EXIT_OK


def main() -> None:
    logging.basicConfig(level=logging.WARNING)
    sys.exit(run())


if __name__ == "__main__":
    main()
