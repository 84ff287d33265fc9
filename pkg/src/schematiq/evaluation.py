"""Measurement harness: schema alignment against gold schemas, input-ablation
overlap, and instance recall/precision, with the curated gold schemas for the
legal and biology use cases bundled as fixtures.

All functions are pure; reports serialize to JSON plus a plain-text summary.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from typing import Mapping, Optional, Sequence

from .model import InstanceRecord, Schema, normalize_name
from .serialize import schema_from_dict
from .templates import DEFAULT_TEMPLATES, PromptTemplate


@dataclass(frozen=True)
class SchemaAlignment:
    shared: tuple[tuple[str, str], ...]  # (candidate_field, gold_field)
    candidate_only: tuple[str, ...]
    gold_only: tuple[str, ...]
    matcher: str  # "exact_normalized" | "manual_map"
    coverage: float

    def to_dict(self) -> dict:
        return {
            "shared": [list(p) for p in self.shared],
            "candidate_only": list(self.candidate_only),
            "gold_only": list(self.gold_only),
            "matcher": self.matcher,
            "coverage": self.coverage,
            "note": "coverage weights all gold fields equally",
        }


@dataclass(frozen=True)
class RecallReport:
    true_positive: int
    false_negative: int
    false_positive: int
    recall: float
    precision: float
    degenerate_precision: bool = False
    per_doc: tuple[dict, ...] = ()

    def to_dict(self) -> dict:
        return {
            "true_positive": self.true_positive,
            "false_negative": self.false_negative,
            "false_positive": self.false_positive,
            "recall": self.recall,
            "precision": self.precision,
            "degenerate_precision": self.degenerate_precision,
            "per_doc": [dict(d) for d in self.per_doc],
        }


def align_schemas(
    candidate: Schema,
    gold: Schema,
    matcher: str = "exact_normalized",
    manual_map: Optional[Mapping[str, str]] = None,
) -> SchemaAlignment:
    """Pair candidate fields with gold fields.

    exact_normalized matches by normalized name; manual_map applies an
    expert-provided candidate->gold pairing and leaves everything else
    unmatched. The three output lists partition both schemas' fields.
    """
    if matcher not in ("exact_normalized", "manual_map"):
        raise ValueError(f"unknown matcher {matcher!r}")
    if (matcher == "manual_map") != (manual_map is not None):
        raise ValueError("manual_map must be provided iff matcher='manual_map'")

    cand_by_key = {f.key: f.canonical_name for f in candidate.fields}
    gold_by_key = {f.key: f.canonical_name for f in gold.fields}

    pairs: list[tuple[str, str]] = []
    matched_cand: set[str] = set()
    matched_gold: set[str] = set()

    if matcher == "exact_normalized":
        for key, cand_name in cand_by_key.items():
            if key in gold_by_key:
                pairs.append((cand_name, gold_by_key[key]))
                matched_cand.add(key)
                matched_gold.add(key)
    else:
        for cand_name, gold_name in manual_map.items():
            ck, gk = normalize_name(cand_name), normalize_name(gold_name)
            if ck not in cand_by_key:
                raise ValueError(f"manual_map names unknown candidate field {cand_name!r}")
            if gk not in gold_by_key:
                raise ValueError(f"manual_map names unknown gold field {gold_name!r}")
            if ck in matched_cand or gk in matched_gold:
                raise ValueError(f"manual_map pairs a field twice: {cand_name!r}")
            pairs.append((cand_by_key[ck], gold_by_key[gk]))
            matched_cand.add(ck)
            matched_gold.add(gk)

    candidate_only = tuple(
        name for key, name in cand_by_key.items() if key not in matched_cand
    )
    gold_only = tuple(name for key, name in gold_by_key.items() if key not in matched_gold)
    coverage = len(matched_gold) / len(gold_by_key) if gold_by_key else 0.0
    return SchemaAlignment(
        shared=tuple(pairs),
        candidate_only=candidate_only,
        gold_only=gold_only,
        matcher=matcher,
        coverage=coverage,
    )


def instance_metrics(
    predicted: Sequence[InstanceRecord],
    gold: Sequence[str],
    gold_by_doc: Optional[Mapping[str, Sequence[str]]] = None,
) -> RecallReport:
    """Match predicted instances to gold names by normalized name.

    When gold_by_doc is given, the per-doc breakdown groups hits and misses
    by each document's gold instance count so density-linked misses are
    visible. Empty predictions yield precision 1.0 by convention, flagged
    degenerate.
    """
    if not gold:
        raise ValueError("gold names must be non-empty")
    gold_keys = {}
    for name in gold:
        gold_keys.setdefault(normalize_name(name), name)
    pred_keys = {}
    for rec in predicted:
        pred_keys.setdefault(rec.canonical_key, rec.display_name)

    tp = len(gold_keys.keys() & pred_keys.keys())
    fn = len(gold_keys.keys() - pred_keys.keys())
    fp = len(pred_keys.keys() - gold_keys.keys())
    recall = tp / (tp + fn) if (tp + fn) else 0.0
    degenerate = (tp + fp) == 0
    precision = 1.0 if degenerate else tp / (tp + fp)

    per_doc: list[dict] = []
    if gold_by_doc:
        for doc_id in sorted(gold_by_doc):
            names = gold_by_doc[doc_id]
            keys = {normalize_name(n) for n in names}
            matched = len(keys & pred_keys.keys())
            per_doc.append(
                {
                    "doc_id": doc_id,
                    "gold_count": len(keys),
                    "matched_count": matched,
                    "missed": sorted(
                        gold_keys.get(k, k) for k in keys - pred_keys.keys()
                    ),
                }
            )
    return RecallReport(
        true_positive=tp,
        false_negative=fn,
        false_positive=fp,
        recall=recall,
        precision=precision,
        degenerate_precision=degenerate,
        per_doc=tuple(per_doc),
    )


# Region keys name which of the three runs contain the field.
ABLATION_REGIONS = (
    "query_only",
    "documents_only",
    "combined_only",
    "query_and_documents",
    "query_and_combined",
    "documents_and_combined",
    "all_three",
)


def ablation_overlap(
    schema_query_only: Schema,
    schema_docs_only: Schema,
    schema_both: Schema,
) -> dict[str, list[str]]:
    """Assign every field (by normalized name) to exactly one of the seven
    regions of the three-set membership diagram."""
    keys_q = {f.key: f.canonical_name for f in schema_query_only.fields}
    keys_d = {f.key: f.canonical_name for f in schema_docs_only.fields}
    keys_b = {f.key: f.canonical_name for f in schema_both.fields}
    buckets: dict[str, list[str]] = {region: [] for region in ABLATION_REGIONS}

    for key in sorted(keys_q.keys() | keys_d.keys() | keys_b.keys()):
        in_q, in_d, in_b = key in keys_q, key in keys_d, key in keys_b
        name = keys_q.get(key) or keys_d.get(key) or keys_b[key]
        if in_q and in_d and in_b:
            buckets["all_three"].append(name)
        elif in_q and in_d:
            buckets["query_and_documents"].append(name)
        elif in_q and in_b:
            buckets["query_and_combined"].append(name)
        elif in_d and in_b:
            buckets["documents_and_combined"].append(name)
        elif in_q:
            buckets["query_only"].append(name)
        elif in_d:
            buckets["documents_only"].append(name)
        else:
            buckets["combined_only"].append(name)
    return buckets


# -- ablation template overrides ------------------------------------------------

# Prompt variants for the input ablation: each omits one of the two inputs.
# Substantive bindings still must be supplied; the omitted one is simply not
# referenced by the body.


def ablation_templates(condition: str) -> dict[str, PromptTemplate]:
    """Template overrides for `query_only` or `documents_only` runs."""
    if condition not in ("query_only", "documents_only"):
        raise ValueError(f"unknown ablation condition {condition!r}")
    unit = DEFAULT_TEMPLATES["unit_discovery"]
    schema = DEFAULT_TEMPLATES["schema_discovery"]
    if condition == "query_only":
        unit_body = unit.body.replace("Documents:\n{documents}\n", "")
        schema_body = schema.body.replace("Documents:\n{documents}\n", "")
    else:
        unit_body = unit.body.replace("Research question:\n{query}\n", "")
        schema_body = schema.body.replace("Research question:\n{query}\n", "")
    return {
        "unit_discovery": PromptTemplate(
            template_id="unit_discovery",
            body=unit_body,
            required_bindings=unit.required_bindings,
            response_contract=unit.response_contract,
        ),
        "schema_discovery": PromptTemplate(
            template_id="schema_discovery",
            body=schema_body,
            required_bindings=schema.required_bindings,
            response_contract=schema.response_contract,
        ),
    }


# -- fixtures and reports -----------------------------------------------------------


def load_gold_fixture(name: str) -> tuple[Schema, dict]:
    """Load a bundled gold fixture ("legal" or "bio"); returns the schema and
    the raw fixture dict (which includes the observation-unit definition)."""
    filename = {"legal": "gold_legal_schema.json", "bio": "gold_bio_schema.json"}[name]
    raw = json.loads(
        resources.files("schematiq").joinpath("fixtures", filename).read_text("utf-8")
    )
    return schema_from_dict(raw), raw


def alignment_summary(alignment: SchemaAlignment) -> str:
    lines = [
        f"matcher: {alignment.matcher}",
        f"coverage (equal field weighting): {alignment.coverage:.3f}",
        f"shared: {len(alignment.shared)}",
    ]
    for cand, gold in alignment.shared:
        lines.append(f"  = {cand} <-> {gold}")
    lines.append(f"candidate only: {len(alignment.candidate_only)}")
    for name in alignment.candidate_only:
        lines.append(f"  + {name}")
    lines.append(f"gold only: {len(alignment.gold_only)}")
    for name in alignment.gold_only:
        lines.append(f"  - {name}")
    return "\n".join(lines)


def recall_summary(report: RecallReport) -> str:
    lines = [
        f"recall: {report.recall:.3f}   precision: {report.precision:.3f}"
        + ("   (degenerate: no predictions)" if report.degenerate_precision else ""),
        f"tp={report.true_positive} fn={report.false_negative} fp={report.false_positive}",
    ]
    if report.per_doc:
        lines.append("per-document (gold_count -> matched):")
        for entry in report.per_doc:
            lines.append(
                f"  {entry['doc_id']}: {entry['matched_count']}/{entry['gold_count']}"
                + (f" missed={entry['missed']}" if entry["missed"] else "")
            )
    return "\n".join(lines)
