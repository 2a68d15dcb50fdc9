"""CLI: export video clip embeddings to a DARC1 file."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .backbone import available_backbones, load_backbone
from .clips import ClipSpec
from .export import export, read_manifest


def cmd_export(args) -> int:
    backbone = load_backbone(
        args.backbone,
        weights=Path(args.weights) if args.weights else None,
        init_seed=args.seed,
    )
    rows = read_manifest(args.videos)
    spec = ClipSpec(
        frames_per_clip=args.frames,
        step=args.step,
        clips_per_sample=args.clips,
        seed=args.seed,
    )
    class_names = None
    if args.classes:
        class_names = [
            line.strip() for line in Path(args.classes).read_text().splitlines() if line.strip()
        ]
    meta = {}
    if args.modality:
        meta["modality"] = args.modality
    if args.split:
        meta["split"] = args.split
    count = export(
        rows, backbone, args.view, args.out,
        spec=spec, class_names=class_names, batch_size=args.batch, meta=meta,
    )
    print(f"wrote {count} rows x {backbone.dim} channels to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vidembed", description="Video clip embedding exporter"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("export", help="run the backbone over a manifest of segments")
    p.add_argument("--videos", required=True, help="manifest CSV (path,start_frame,end_frame,label)")
    p.add_argument("--view", choices=["plain", "aug"], required=True)
    p.add_argument("--out", required=True, help="output .darc1 file")
    p.add_argument("--backbone", default="swin3d_b", choices=available_backbones())
    p.add_argument("--weights", help="state-dict file for the backbone")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=32, help="frames per clip")
    p.add_argument("--step", type=int, default=2, help="temporal stride inside a clip")
    p.add_argument("--clips", type=int, default=2, help="clips averaged per segment")
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--classes", help="text file with one class name per line")
    p.add_argument("--modality", help="modality tag for the sidecar")
    p.add_argument("--split", help="split tag for the sidecar")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
