"""Export per-token embeddings from a pretrained text encoder to JSON lines."""

from embed_export.export import (
    ExportError,
    ExportRecord,
    ValidationReport,
    export_token_embeddings,
    validate_export,
)

__all__ = [
    "ExportError",
    "ExportRecord",
    "ValidationReport",
    "export_token_embeddings",
    "validate_export",
]
