"""Command line front end: `embed-export export --sentences f.jsonl
--encoder <id> --out archive.bin`. JSON summary on stdout, exit code 0 on
success, 1 on bad input, 2 on unexpected failure."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import ExportError
from .exporter import export, manifest_path


class UsageError(Exception):
    pass


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):  # noqa: D102 - argparse hook
        raise UsageError(f"{message}\n{self.format_usage()}")


def build_parser() -> _ArgumentParser:
    parser = _ArgumentParser(
        prog="embed-export",
        description="Export contextual sentence embeddings to the binary archive format.",
    )
    sub = parser.add_subparsers(dest="command", metavar="command")
    # add_parser reuses type(parser), so subcommand errors raise UsageError too
    p = sub.add_parser("export", help="encode a sentence file and write archive plus manifest")
    p.add_argument("--sentences", required=True, help="sentence JSONL file")
    p.add_argument("--encoder", required=True, help="encoder hub id or local directory")
    p.add_argument("--out", required=True, help="archive path to write")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.add_argument("--threads", type=int, default=None, help="torch CPU thread cap")
    return parser


def cmd_export(args) -> int:
    if args.threads is not None:
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        import torch

        torch.set_num_threads(args.threads)
    existing = [p for p in (Path(args.out), manifest_path(args.out)) if p.exists()]
    if existing and not args.force:
        names = ", ".join(str(p) for p in existing)
        raise ExportError(f"refusing to overwrite {names} (pass --force to allow)")
    out_path, manifest = export(args.sentences, args.encoder, args.out)
    payload = {
        "out": str(out_path),
        "manifest": str(manifest_path(out_path)),
        "record_count": manifest.record_count,
        "deterministic": manifest.deterministic,
    }
    print(json.dumps(payload, sort_keys=True))
    return 0


def dispatch(argv: list[str]) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError(build_parser().format_usage())
        return cmd_export(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - last-resort boundary
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
