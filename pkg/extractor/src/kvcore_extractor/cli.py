"""extract / validate command line."""

from __future__ import annotations

import argparse
import sys

from .extract import ExtractionSpec, extract, validate


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="kvcore-extract",
        description="Capture pre-RoPE key/value projection activations "
        "from a pretrained transformer as KVCR streams",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    e = subs.add_parser("extract", help="run a dataset through a model, dump streams")
    e.add_argument("--model", required=True, help="hub id or local model path")
    e.add_argument("--data", required=True,
                   help="text file, directory of .txt files, or hub dataset name[:split]")
    e.add_argument("--max-tokens", type=int, required=True, dest="max_tokens")
    e.add_argument("--out", required=True)
    e.add_argument("--window", type=int, default=128,
                   help="tokens per forward pass (default 128)")

    v = subs.add_parser("validate", help="re-parse every stream file in a directory")
    v.add_argument("dir")

    args = parser.parse_args(argv)
    try:
        if args.command == "extract":
            spec = ExtractionSpec(
                model=args.model, data=args.data,
                max_tokens=args.max_tokens, out_dir=args.out,
                window=args.window,
            )
            result = extract(spec)
            print(
                f"captured {result.tokens_captured} tokens x "
                f"{result.feature_dim} dims over {result.n_layers} layers"
            )
            for path in result.stream_paths:
                print(f"  {path}")
            print(f"manifest: {result.manifest_path}")
            return 0
        report = validate(args.dir)
        bad = 0
        for entry in report:
            if entry["ok"]:
                print(
                    f"OK   {entry['file']}: layer {entry['layer']} "
                    f"{entry['kind']}, {entry['tokens']} tokens x "
                    f"{entry['feature_dim']}"
                )
            else:
                bad += 1
                print(f"FAIL {entry['file']}: {entry['error']}")
        print(f"{len(report) - bad}/{len(report)} files valid")
        return 0 if bad == 0 else 3
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
