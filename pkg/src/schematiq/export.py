"""Table export: RFC 4180 CSV and canonical JSON.

CSV layout: one header row of canonical field names in schema order,
prefixed by the instance column; one row per instance. Conflict cells
render empty; pass include_conflicts=True to add a "<field> (conflict)"
companion column carrying the disagreeing candidates. JSON export is the
full table including evidence and statuses, safe to re-import.
"""

from __future__ import annotations

import csv
import io

from .model import CellValue, Schema, Table
from .serialize import table_from_json, table_to_json  # re-exported for callers

__all__ = ["table_to_csv", "table_to_json", "table_from_json"]


def _render_value(cell: CellValue) -> str:
    if cell.status != "filled" or cell.value is None:
        return ""
    if isinstance(cell.value, tuple):
        return "; ".join(cell.value)
    return str(cell.value)


def _render_conflict(cell: CellValue) -> str:
    if cell.status != "conflict":
        return ""
    parts = []
    for cand in cell.candidates:
        if isinstance(cand.value, tuple):
            parts.append("; ".join(cand.value))
        else:
            parts.append(str(cand.value))
    return " | ".join(parts)


def table_to_csv(
    table: Table,
    schema: Schema,
    instance_column: str = "Instance",
    include_conflicts: bool = False,
) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n", quoting=csv.QUOTE_MINIMAL)

    header = [instance_column]
    for name in schema.field_names:
        header.append(name)
        if include_conflicts:
            header.append(f"{name} (conflict)")
    writer.writerow(header)

    for row in table.rows:
        out = [row.instance.display_name]
        for name in schema.field_names:
            cell = row.cells.get(name) or CellValue(field_name=name, status="missing")
            out.append(_render_value(cell))
            if include_conflicts:
                out.append(_render_conflict(cell))
        writer.writerow(out)
    return buf.getvalue()
