"""Typed cell-value parsing and comparison.

Numbers parse with a locale-independent decimal point; dates normalize to
ISO-8601 when unambiguous and otherwise stay text with a warning; enum
values resolve case-insensitively to the field's canonical spelling.
"""

from __future__ import annotations

import re
from datetime import datetime
from typing import Optional

from .model import CellContent, SchemaField, normalize

_INT_RE = re.compile(r"^[+-]?\d+$")

_DATE_FORMATS = ("%Y-%m-%d", "%B %d, %Y", "%b %d, %Y", "%d %B %Y", "%d %b %Y", "%Y/%m/%d")


def parse_date_value(text: str) -> tuple[Optional[str], Optional[str]]:
    """Return (iso_date, None) when unambiguous, else (original_text, warning).

    Slash dates where both leading numbers could be the month are kept as
    text with a warning rather than silently guessed.
    """
    raw = text.strip()
    for fmt in _DATE_FORMATS:
        try:
            return datetime.strptime(raw, fmt).date().isoformat(), None
        except ValueError:
            continue
    m = re.match(r"^(\d{1,2})[/-](\d{1,2})[/-](\d{4})$", raw)
    if m:
        a, b, year = int(m.group(1)), int(m.group(2)), int(m.group(3))
        if a > 12 and b <= 12:
            return f"{year:04d}-{b:02d}-{a:02d}", None
        if b > 12 and a <= 12:
            return f"{year:04d}-{a:02d}-{b:02d}", None
        if a == b and a <= 12:
            return f"{year:04d}-{a:02d}-{b:02d}", None
        return raw, "ambiguous date kept as text"
    return raw, "unrecognized date kept as text"


def parse_cell_value(raw, field: SchemaField) -> tuple[CellContent, Optional[str]]:
    """Coerce a model-returned value into the field's kind.

    Raises ValueError when the value cannot represent the kind (the type
    gate); returns (value, note) otherwise, note carrying any warning.
    """
    if field.value_kind == "number":
        if isinstance(raw, bool):
            raise ValueError("boolean is not a number")
        if isinstance(raw, (int, float)):
            return raw, None
        text = str(raw).strip().replace(",", "")
        if _INT_RE.match(text):
            return int(text), None
        try:
            return float(text), None
        except ValueError:
            raise ValueError(f"{raw!r} is not numeric") from None
    if field.value_kind == "date":
        value, note = parse_date_value(str(raw))
        return value, note
    if field.value_kind == "enum":
        text = str(raw).strip()
        assert field.allowed_values is not None
        for allowed in field.allowed_values:
            if normalize(allowed) == normalize(text):
                return allowed, None
        raise ValueError(f"{raw!r} not in allowed values {list(field.allowed_values)}")
    if field.value_kind == "list_of_text":
        if isinstance(raw, (list, tuple)):
            items = tuple(str(x).strip() for x in raw if str(x).strip())
        else:
            items = tuple(s.strip() for s in str(raw).split(";") if s.strip())
        if not items:
            raise ValueError("empty list value")
        return items, None
    # text
    return str(raw).strip(), None


def values_equivalent(a: CellContent, b: CellContent, kind: str) -> bool:
    if kind == "number":
        return float(a) == float(b)
    if kind == "list_of_text":
        aa = a if isinstance(a, tuple) else (str(a),)
        bb = b if isinstance(b, tuple) else (str(b),)
        return [normalize(x) for x in aa] == [normalize(x) for x in bb]
    return normalize(str(a)) == normalize(str(b))
