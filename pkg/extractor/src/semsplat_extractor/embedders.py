"""Embedding backends.

Real models run through huggingface transformers and are an optional
dependency: when the import or the weight download fails the constructor
raises ``ModelUnavailableError`` with a remediation hint. There is no silent
fallback; the deterministic stub backend must be requested explicitly
(``stub:<dim>``) and exists for tests and offline pipeline work.

Backend identifiers:
    clip:<hf-model-id>   vision-language patch embedder (ViT-B/16 class)
    dino:<hf-model-id>   self-distilled ViT dense feature extractor
    stub:<dim>           deterministic content-hash embedder
"""

from __future__ import annotations

import hashlib

import numpy as np
from PIL import Image

DEFAULT_CLIP = "clip:openai/clip-vit-base-patch16"
DEFAULT_DINO = "dino:facebook/dino-vits16"


class ModelUnavailableError(RuntimeError):
    """A requested foundation-model backend cannot be loaded."""


def _unit_rows(mat):
    return mat / np.maximum(np.linalg.norm(mat, axis=-1, keepdims=True), 1e-12)


class StubImageEmbedder:
    """Deterministic stand-in: a fixed random projection of a downsampled
    grayscale thumbnail. Identical patches map to identical unit vectors."""

    THUMB = 16

    def __init__(self, dim: int):
        self.dim = dim
        rng = np.random.default_rng(dim * 7919 + 13)
        self._proj = rng.standard_normal((self.THUMB * self.THUMB, dim))

    def _thumb(self, patch: np.ndarray) -> np.ndarray:
        img = Image.fromarray((np.clip(patch, 0.0, 1.0) * 255).astype(np.uint8))
        small = img.convert("L").resize((self.THUMB, self.THUMB), Image.BILINEAR)
        return np.asarray(small, dtype=np.float64).ravel() / 255.0

    def embed_patches(self, patches) -> np.ndarray:
        feats = np.stack([np.tanh(self._thumb(p) @ self._proj) for p in patches])
        return _unit_rows(feats)

    def embed_dense(self, image: np.ndarray, grid_px: int = 16) -> np.ndarray:
        h, w = image.shape[:2]
        gh, gw = max(1, h // grid_px), max(1, w // grid_px)
        tiles = [image[gy * grid_px:(gy + 1) * grid_px, gx * grid_px:(gx + 1) * grid_px]
                 for gy in range(gh) for gx in range(gw)]
        return self.embed_patches(tiles).reshape(gh, gw, self.dim)


class StubTextEmbedder:
    """Deterministic text embedder: seeded Gaussian per string, unit norm."""

    def __init__(self, dim: int):
        self.dim = dim

    def embed_texts(self, texts) -> np.ndarray:
        out = np.empty((len(texts), self.dim))
        for i, text in enumerate(texts):
            digest = hashlib.sha256(text.encode("utf-8")).digest()
            seed = int.from_bytes(digest[:8], "little")
            out[i] = np.random.default_rng(seed).standard_normal(self.dim)
        return _unit_rows(out)


def _load_transformers(hint: str):
    try:
        import torch  # noqa: F401
        import transformers
        return transformers
    except ImportError as exc:
        raise ModelUnavailableError(
            f"{hint} needs the optional model dependencies; install them with "
            "`pip install 'semsplat-extractor[models]'`") from exc


class HfClipImageEmbedder:
    """Patch embedder backed by a huggingface CLIP vision tower."""

    def __init__(self, model_id: str):
        transformers = _load_transformers(f"CLIP backend {model_id!r}")
        try:
            self._processor = transformers.CLIPProcessor.from_pretrained(model_id)
            self._model = transformers.CLIPModel.from_pretrained(model_id).eval()
        except Exception as exc:
            raise ModelUnavailableError(
                f"could not load CLIP weights {model_id!r}: {exc}; download them "
                f"first (e.g. `huggingface-cli download {model_id}`) or pass an "
                "explicit stub backend `stub:<dim>` for offline work") from exc
        self.dim = int(self._model.config.projection_dim)

    def embed_patches(self, patches) -> np.ndarray:
        import torch
        images = [Image.fromarray((np.clip(p, 0, 1) * 255).astype(np.uint8))
                  for p in patches]
        inputs = self._processor(images=images, return_tensors="pt")
        with torch.no_grad():
            feats = self._model.get_image_features(**inputs)
        return _unit_rows(feats.cpu().numpy().astype(np.float64))


class HfClipTextEmbedder:
    def __init__(self, model_id: str):
        transformers = _load_transformers(f"CLIP text backend {model_id!r}")
        try:
            self._processor = transformers.CLIPProcessor.from_pretrained(model_id)
            self._model = transformers.CLIPModel.from_pretrained(model_id).eval()
        except Exception as exc:
            raise ModelUnavailableError(
                f"could not load CLIP weights {model_id!r}: {exc}; download them "
                f"first (e.g. `huggingface-cli download {model_id}`) or pass an "
                "explicit stub backend `stub:<dim>` for offline work") from exc
        self.dim = int(self._model.config.projection_dim)

    def embed_texts(self, texts) -> np.ndarray:
        import torch
        inputs = self._processor(text=list(texts), return_tensors="pt", padding=True)
        with torch.no_grad():
            feats = self._model.get_text_features(**inputs)
        return _unit_rows(feats.cpu().numpy().astype(np.float64))


class HfDinoEmbedder:
    """Dense patch-token features from a self-distilled ViT; one forward pass
    at (near-)native resolution."""

    def __init__(self, model_id: str):
        transformers = _load_transformers(f"DINO backend {model_id!r}")
        try:
            self._processor = transformers.AutoImageProcessor.from_pretrained(model_id)
            self._model = transformers.AutoModel.from_pretrained(model_id).eval()
        except Exception as exc:
            raise ModelUnavailableError(
                f"could not load DINO weights {model_id!r}: {exc}; download them "
                f"first (e.g. `huggingface-cli download {model_id}`) or pass an "
                "explicit stub backend `stub:<dim>` for offline work") from exc
        self.dim = int(self._model.config.hidden_size)
        self._patch = int(self._model.config.patch_size)

    def embed_dense(self, image: np.ndarray) -> np.ndarray:
        import torch
        h, w = image.shape[:2]
        gh, gw = max(1, h // self._patch), max(1, w // self._patch)
        pil = Image.fromarray((np.clip(image, 0, 1) * 255).astype(np.uint8))
        inputs = self._processor(
            images=pil, return_tensors="pt",
            size={"height": gh * self._patch, "width": gw * self._patch},
            do_center_crop=False)
        with torch.no_grad():
            tokens = self._model(**inputs).last_hidden_state[0, 1:]
        return tokens.cpu().numpy().astype(np.float64).reshape(gh, gw, self.dim)


def make_image_embedder(backend: str):
    if backend.startswith("stub:"):
        return StubImageEmbedder(int(backend.split(":", 1)[1]))
    if backend.startswith("clip:"):
        return HfClipImageEmbedder(backend.split(":", 1)[1])
    raise ValueError(f"unknown image backend {backend!r}")


def make_dense_embedder(backend: str):
    if backend.startswith("stub:"):
        return StubImageEmbedder(int(backend.split(":", 1)[1]))
    if backend.startswith("dino:"):
        return HfDinoEmbedder(backend.split(":", 1)[1])
    raise ValueError(f"unknown dense backend {backend!r}")


def make_text_embedder(backend: str):
    if backend.startswith("stub:"):
        return StubTextEmbedder(int(backend.split(":", 1)[1]))
    if backend.startswith("clip:"):
        return HfClipTextEmbedder(backend.split(":", 1)[1])
    raise ValueError(f"unknown text backend {backend!r}")
