"""Offline feature extraction feeding the semsplat distillation pipeline."""

from .embedders import (DEFAULT_CLIP, DEFAULT_DINO, ModelUnavailableError,
                        make_dense_embedder, make_image_embedder,
                        make_text_embedder)
from .extract import (DEFAULT_SCALES, ExtractionSpec, canonical_entries,
                      embed_queries, extract_clip_pyramid, extract_dino,
                      write_clip_pyramid, write_dino)

__version__ = "0.1.0"
