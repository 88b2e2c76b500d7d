"""`idp-export`: image folder tree in, feature container out."""

from __future__ import annotations

import argparse
import sys

from .backbones import available
from .export import ShapeMismatch, export, manifest_for


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="idp-export", description=__doc__)
    parser.add_argument("--in", dest="input_root", required=True,
                        help="folder with one subfolder per class")
    parser.add_argument("--out", required=True, help="output container path")
    parser.add_argument("--backbone", default="tiny", choices=available())
    parser.add_argument("--resolution", type=int, default=160)
    parser.add_argument("--role", choices=["source", "target"], default="target")
    parser.add_argument("--weights", help="optional state-dict checkpoint to load")
    args = parser.parse_args(argv)
    try:
        manifest = manifest_for(
            args.input_root, args.out, args.backbone, args.resolution,
            args.role, args.weights,
        )
        dataset = export(manifest)
    except (FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ShapeMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(
        f"wrote {args.out}: {len(dataset.records)} records, "
        f"{len(dataset.labels.names)} classes, grid "
        f"{dataset.shape.width}x{dataset.shape.height}x{dataset.shape.channels}"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
