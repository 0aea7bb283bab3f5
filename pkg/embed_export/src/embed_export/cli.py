"""Command-line entry points.

    embed-export export   --model ID_OR_PATH --prompts FILE --out FILE
    embed-export validate FILE

Exit codes: 0 success, 1 validation violations, 2 bad arguments or
unreadable files, 3 model load failure.
"""

from __future__ import annotations

import argparse
import sys

from embed_export.export import ExportError, export_token_embeddings, validate_export


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="embed-export",
        description="Export per-token text-encoder embeddings to JSON lines.")
    sub = parser.add_subparsers(dest="command", required=True)

    ex = sub.add_parser("export", help="embed a file of prompts, one per line")
    ex.add_argument("--model", required=True,
                    help="transformers model id or local checkpoint directory")
    ex.add_argument("--prompts", required=True, help="text file, one prompt per line")
    ex.add_argument("--out", required=True, help="output JSON-lines path")

    va = sub.add_parser("validate", help="check an export file against the schema")
    va.add_argument("path", help="JSON-lines export file")

    args = parser.parse_args(argv)

    if args.command == "export":
        try:
            n = export_token_embeddings(args.model, args.prompts, args.out)
        except ExportError as e:
            print(f"error: {e}", file=sys.stderr)
            return 3 if "cannot load model" in str(e) else 2
        except OSError as e:
            print(f"error: {e}", file=sys.stderr)
            return 2
        print(f"wrote {n} records to {args.out}")
        return 0

    try:
        report = validate_export(args.path)
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    print(report.summary())
    return 0 if report.ok else 1


if __name__ == "__main__":
    raise SystemExit(main())
