"""Query-driven schema discovery and evidence-grounded table extraction."""

from .model import (
    CellValue,
    Document,
    Evidence,
    InstanceRecord,
    ObservationUnitSpec,
    ResearchQuery,
    Row,
    Schema,
    SchemaField,
    SessionState,
    Table,
    normalize,
    normalize_name,
)

__version__ = "0.1.0"

__all__ = [
    "CellValue",
    "Document",
    "Evidence",
    "InstanceRecord",
    "ObservationUnitSpec",
    "ResearchQuery",
    "Row",
    "Schema",
    "SchemaField",
    "SessionState",
    "Table",
    "normalize",
    "normalize_name",
    "__version__",
]
