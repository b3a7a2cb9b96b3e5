"""Command line front end: (rgb, depth, caption) triples in, bundles out.

Exit codes follow the envfuse convention: 0 all good, 1 some samples
failed, 2 the invocation itself was unusable.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from .extract import DEFAULT_MODEL, ExtractionJob, FeatureExtractor, extract_and_export

EXIT_OK = 0
EXIT_FAILURES = 1
EXIT_USAGE = 2

MANIFEST_COLUMNS = ("rgb", "depth", "caption", "out")


class UsageError(Exception):
    pass


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clip-adapter",
        description="Extract CLIP features for RGB-D panoramas into .m2fb bundles.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    ex = sub.add_parser("extract", help="extract one sample, or many via --manifest")
    ex.add_argument("--rgb", type=Path, help="RGB panorama image")
    ex.add_argument("--depth", type=Path, help="depth map image")
    ex.add_argument("--caption", help="caption text")
    ex.add_argument("--caption-file", type=Path, help="file holding the caption text")
    ex.add_argument("--out", type=Path, help="output bundle path (.m2fb)")
    ex.add_argument("--manifest", type=Path, help="CSV with rgb,depth,caption,out columns")
    ex.add_argument("--model", default=DEFAULT_MODEL, help="model name or local directory")
    ex.add_argument("--device", default="cpu")
    return parser


def _read_caption(args) -> str:
    if (args.caption is None) == (args.caption_file is None):
        raise UsageError("exactly one of --caption / --caption-file is required")
    if args.caption is not None:
        return args.caption
    try:
        return args.caption_file.read_text(encoding="utf-8").strip()
    except OSError as exc:
        raise UsageError(f"cannot read caption file: {exc}") from exc


def _jobs_from_manifest(path: Path, device: str) -> list[ExtractionJob]:
    # The whole manifest is validated before any model work starts, so a
    # malformed row aborts cleanly instead of half-processing the batch.
    try:
        with open(path, newline="", encoding="utf-8") as fp:
            reader = csv.DictReader(fp)
            header = reader.fieldnames or []
            missing = [c for c in MANIFEST_COLUMNS if c not in header]
            if missing:
                raise UsageError(f"manifest missing columns: {', '.join(missing)}")
            jobs = []
            for lineno, row in enumerate(reader, start=2):
                try:
                    jobs.append(
                        ExtractionJob(
                            rgb=row["rgb"] or "",
                            depth=row["depth"] or "",
                            caption=row["caption"] or "",
                            out=row["out"] or "",
                            device=device,
                        )
                    )
                except ValueError as exc:
                    raise UsageError(f"manifest line {lineno}: {exc}") from exc
    except OSError as exc:
        raise UsageError(f"cannot read manifest: {exc}") from exc
    if not jobs:
        raise UsageError("manifest has no data rows")
    return jobs


def _jobs_from_args(args) -> list[ExtractionJob]:
    if args.manifest is not None:
        extra = [f for f in ("rgb", "depth", "caption", "caption_file", "out") if getattr(args, f) is not None]
        if extra:
            raise UsageError("--manifest cannot be combined with per-sample flags")
        return _jobs_from_manifest(args.manifest, args.device)
    if args.rgb is None or args.depth is None or args.out is None:
        raise UsageError("--rgb, --depth and --out are required (or use --manifest)")
    caption = _read_caption(args)
    try:
        return [ExtractionJob(rgb=args.rgb, depth=args.depth, caption=caption, out=args.out, device=args.device)]
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_extract(args) -> int:
    jobs = _jobs_from_args(args)
    extractor = FeatureExtractor.from_pretrained(args.model, device=args.device)
    failures = 0
    for job in jobs:
        try:
            bundle = extract_and_export(job, extractor)
        except (OSError, ValueError) as exc:
            failures += 1
            print(f"failed {job.out}: {exc}", file=sys.stderr)
            continue
        print(f"wrote {job.out} (m={bundle.m}, d={bundle.d})")
    if failures:
        print(f"{failures} of {len(jobs)} samples failed", file=sys.stderr)
        return EXIT_FAILURES
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return cmd_extract(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
