"""Token-embedding export and validation.

`export_token_embeddings` runs a frozen pretrained text encoder (anything
`transformers.AutoModel` can load, by hub id or local directory) over a file
of prompts, one per line, and writes one JSON record per prompt:

    {"prompt_id": str, "text": str, "dim": int,
     "token_embeddings": [[dim floats], ...]}

The embeddings are the model's last hidden layer for the full tokenized
sequence, special tokens included, so a record always holds at least one
token. The model stays in eval mode under no_grad; for a fixed model
revision the output is deterministic, and the same prompt always yields the
same rows.

`validate_export` re-reads such a file and checks every record against the
schema (field presence and types, row lengths equal to the declared dim, a
single dim shared by all records, finite values, unique nonempty prompt
ids). Any file it passes can be consumed downstream without error.
"""

from __future__ import annotations

import json
import math
import sys
from dataclasses import dataclass, field

__all__ = [
    "ExportError",
    "ExportRecord",
    "ValidationReport",
    "export_token_embeddings",
    "validate_export",
]


class ExportError(Exception):
    """Raised when the model cannot be loaded or the prompts are unusable."""


@dataclass
class ExportRecord:
    """One exported prompt: id, source text, and its token-embedding matrix."""
    prompt_id: str
    text: str
    dim: int
    token_embeddings: list[list[float]]

    def __post_init__(self):
        if not self.token_embeddings:
            raise ValueError("a record needs at least one token embedding")
        if any(len(row) != self.dim for row in self.token_embeddings):
            raise ValueError("every embedding row must have length dim")

    def as_dict(self) -> dict:
        return {"prompt_id": self.prompt_id, "text": self.text,
                "dim": self.dim, "token_embeddings": self.token_embeddings}


def export_token_embeddings(model_id: str, prompts_path: str,
                            out_path: str) -> int:
    """Embed every prompt line of `prompts_path` and write JSON lines.

    Empty (whitespace-only) lines are skipped with a warning on stderr.
    Prompts longer than the model's position table are truncated. Returns
    the number of records written; raises ExportError when the model cannot
    be loaded or no usable prompt line remains.
    """
    import torch
    from transformers import AutoModel, AutoTokenizer

    try:
        tokenizer = AutoTokenizer.from_pretrained(model_id)
        model = AutoModel.from_pretrained(model_id)
    except Exception as e:
        raise ExportError(f"cannot load model {model_id!r}: {e}") from e
    model.eval()
    max_len = getattr(model.config, "max_position_embeddings", None)

    with open(prompts_path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()

    n_written = 0
    with open(out_path, "w", encoding="utf-8") as out, torch.no_grad():
        for lineno, line in enumerate(lines, start=1):
            text = line.strip()
            if not text:
                print(f"warning: skipped empty prompt line {lineno}",
                      file=sys.stderr)
                continue
            kwargs = {"return_tensors": "pt"}
            if max_len is not None:
                kwargs.update(truncation=True, max_length=max_len)
            encoded = tokenizer(text, **kwargs)
            hidden = model(**encoded).last_hidden_state[0]
            record = ExportRecord(
                prompt_id=f"prompt-{n_written:04d}",
                text=text,
                dim=int(hidden.shape[-1]),
                token_embeddings=hidden.tolist(),
            )
            out.write(json.dumps(record.as_dict()) + "\n")
            n_written += 1
    if n_written == 0:
        raise ExportError(f"{prompts_path}: no nonempty prompt lines")
    return n_written


@dataclass
class ValidationReport:
    """Outcome of checking an export file against the record schema."""
    path: str
    n_records: int = 0
    dim: int | None = None
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations and self.n_records > 0

    def summary(self) -> str:
        if self.ok:
            return f"OK, {self.n_records} records, dim {self.dim}"
        lines = [f"INVALID, {len(self.violations)} violations:"]
        lines.extend(f"  {v}" for v in self.violations)
        return "\n".join(lines)


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _check_record(rec: dict, index: int, report: ValidationReport) -> None:
    bad = False

    def flag(msg: str) -> None:
        nonlocal bad
        bad = True
        report.violations.append(f"record {index}: {msg}")

    for key, kind in (("prompt_id", str), ("text", str),
                      ("dim", int), ("token_embeddings", list)):
        if key not in rec:
            flag(f"missing field {key!r}")
        elif not isinstance(rec[key], kind) or isinstance(rec[key], bool):
            flag(f"field {key!r} must be {kind.__name__}")
    if bad:
        return
    if not rec["prompt_id"]:
        flag("prompt_id must be nonempty")
    if rec["dim"] <= 0:
        flag("dim must be positive")
    rows = rec["token_embeddings"]
    if not rows:
        flag("token_embeddings must hold at least one token")
    for r, row in enumerate(rows):
        if not isinstance(row, list) or any(
                isinstance(v, bool) or not isinstance(v, (int, float))
                for v in row):
            flag(f"token {r}: rows must be lists of numbers")
        elif _is_int(rec["dim"]) and rec["dim"] > 0 and len(row) != rec["dim"]:
            flag(f"token {r}: row length {len(row)} != dim {rec['dim']}")
        elif any(not math.isfinite(v) for v in row):
            flag(f"token {r}: non-finite value")
    if bad:
        return
    if report.dim is None:
        report.dim = rec["dim"]
    elif rec["dim"] != report.dim:
        flag(f"dim {rec['dim']} differs from first record's {report.dim}")


def validate_export(path: str) -> ValidationReport:
    """Check an export file; every violation is listed with its record index.

    Record indices count nonempty lines in file order, starting at 0. The
    file passes only when it holds at least one record and none violates the
    schema.
    """
    report = ValidationReport(path=path)
    seen_ids: dict[str, int] = {}
    index = 0
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                report.violations.append(f"record {index}: not valid JSON ({e})")
                index += 1
                continue
            if not isinstance(rec, dict):
                report.violations.append(f"record {index}: not a JSON object")
                index += 1
                continue
            _check_record(rec, index, report)
            pid = rec.get("prompt_id")
            if isinstance(pid, str) and pid:
                if pid in seen_ids:
                    report.violations.append(
                        f"record {index}: duplicate prompt_id {pid!r} "
                        f"(first at record {seen_ids[pid]})")
                else:
                    seen_ids[pid] = index
            index += 1
    report.n_records = index
    if index == 0:
        report.violations.append("file holds no records")
    return report
