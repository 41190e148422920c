"""Command-line entry: one process exports one video."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .backbones import BACKBONES
from .errors import ExportError, UsageError
from .export import CATEGORIES, GENERATOR_MODELS, ExportJob, export

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_EXPORT = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # noqa: A003 - argparse API name
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(
        prog="edut-export",
        description=(
            "Featurize one video + prompt into EDUT tensors and append a "
            "manifest stub (placeholder labels) to the output bundle."
        ),
    )
    p.add_argument("--video", required=True, type=Path,
                   help=".npy frame stack, image directory, or video file")
    p.add_argument("--prompt", required=True)
    p.add_argument("--out-dir", required=True, type=Path)
    p.add_argument("--video-id", required=True)
    p.add_argument("--model", required=True, choices=GENERATOR_MODELS,
                   help="generator that produced the video")
    p.add_argument("--category", required=True, choices=CATEGORIES)
    p.add_argument("--frames", type=int, default=4,
                   help="frames kept by uniform temporal sampling")
    p.add_argument("--backbone", choices=BACKBONES, default="stub")
    p.add_argument("--stub-height", type=int, default=4)
    p.add_argument("--stub-width", type=int, default=4)
    p.add_argument("--stub-channels", type=int, default=16)
    p.add_argument("--weights-vst", type=Path, default=None,
                   help="local state-dict for the video backbone")
    p.add_argument("--weights-blip", type=Path, default=None,
                   help="local model directory for the multimodal backbone")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        job = ExportJob(
            video_path=args.video,
            prompt=args.prompt,
            out_dir=args.out_dir,
            video_id=args.video_id,
            generator_model=args.model,
            category=args.category,
            t_frames=args.frames,
            backbone=args.backbone,
            stub_height=args.stub_height,
            stub_width=args.stub_width,
            stub_channels=args.stub_channels,
            weights_vst=args.weights_vst,
            weights_blip=args.weights_blip,
        )
        result = export(job)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ExportError as exc:
        print(f"export error: {exc}", file=sys.stderr)
        return EXIT_EXPORT
    print(f"wrote {result.f_vst_path}")
    print(f"wrote {result.f_blip_path}")
    print(f"manifest: {result.manifest_path}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
