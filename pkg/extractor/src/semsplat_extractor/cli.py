"""Command-line feature extraction: images to supervision containers, text to
query embedding files. Mirrors the semsplat container and embedding formats."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from semsplat.io import load_png_rgb, write_embedding_file

from .embedders import (DEFAULT_CLIP, DEFAULT_DINO, ModelUnavailableError,
                        make_dense_embedder, make_image_embedder,
                        make_text_embedder)
from .extract import (DEFAULT_SCALES, ExtractionSpec, canonical_entries,
                      embed_queries, write_clip_pyramid, write_dino)


def _parse_scales(text):
    if text is None:
        return DEFAULT_SCALES
    return tuple(float(s) for s in text.split(","))


def cmd_images(args) -> int:
    spec = ExtractionSpec(images=[Path(p) for p in args.images],
                          scales=_parse_scales(args.scales),
                          clip_backend=args.clip_model,
                          dino_backend=args.dino_model,
                          out_dir=Path(args.out_dir))
    clip_embedder = make_image_embedder(spec.clip_backend)
    dino_embedder = make_dense_embedder(spec.dino_backend)
    spec.out_dir.mkdir(parents=True, exist_ok=True)
    for path in spec.images:
        image = load_png_rgb(path)
        clip_out = spec.out_dir / f"clip_{path.stem}.fmfc"
        dino_out = spec.out_dir / f"dino_{path.stem}.fmfc"
        write_clip_pyramid(clip_out, image, clip_embedder, spec.scales)
        write_dino(dino_out, image, dino_embedder)
        print(f"{path.name}: wrote {clip_out.name} "
              f"({len(spec.scales)} scales) and {dino_out.name}")
    return 0


def cmd_queries(args) -> int:
    embedder = make_text_embedder(args.model)
    entries = embed_queries(args.text, embedder)
    write_embedding_file(args.out, entries)
    print(f"wrote {len(entries)} embeddings to {args.out}")
    return 0


def cmd_canonicals(args) -> int:
    embedder = make_text_embedder(args.model)
    entries = canonical_entries(embedder)
    write_embedding_file(args.out, entries)
    print(f"wrote canonical phrases {[label for label, _ in entries]} to {args.out}")
    return 0


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="semsplat-extract",
        description="produce semsplat supervision containers and query embeddings")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("images", help="CLIP pyramid + DINO containers per image")
    p.add_argument("--images", nargs="+", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--scales", help="comma-separated fractions, ascending "
                                    "(default seven from 0.05 to 0.5)")
    p.add_argument("--clip-model", default=DEFAULT_CLIP,
                   help="clip:<hf-id> or stub:<dim>")
    p.add_argument("--dino-model", default=DEFAULT_DINO,
                   help="dino:<hf-id> or stub:<dim>")
    p.set_defaults(func=cmd_images)

    p = sub.add_parser("queries", help="embed text queries into a labeled file")
    p.add_argument("--text", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model", default=DEFAULT_CLIP)
    p.set_defaults(func=cmd_queries)

    p = sub.add_parser("canonicals", help="embed the four canonical phrases")
    p.add_argument("--out", required=True)
    p.add_argument("--model", default=DEFAULT_CLIP)
    p.set_defaults(func=cmd_canonicals)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ModelUnavailableError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
