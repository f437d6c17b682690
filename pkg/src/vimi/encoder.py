"""Deterministic conditioning encoder.

Maps a multimodal prompt to the conditioning matrix consumed by the
denoiser: instruction tokens, then per-unit rows in prompt order (one
hashed-embedding row per text token, a projected patch block per image),
then three metadata rows for noise level, framerate, and resolution.

The image embedder is a pluggable interface. The default stand-in hashes
the image reference into a seeded pseudo-random patch matrix, which keeps
every downstream contract intact without any model weights; a real
encoder can be registered under a new name and swapped in via config.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Protocol

import numpy as np

from .prompts import MultimodalPrompt
from .retrieval import tokenize


class UnresolvableImageError(Exception):
    """Image reference empty or otherwise unresolvable."""


class ShapeMismatchError(Exception):
    """Array shape disagrees with the encoder spec."""


class PromptTooLongError(Exception):
    def __init__(self, got: int, max_tokens: int):
        super().__init__(f"prompt encodes to {got} tokens, max is {max_tokens}")
        self.got = got
        self.max_tokens = max_tokens


@dataclass(frozen=True)
class EncoderSpec:
    d_model: int = 64
    d_feature: int = 64
    image_patch_tokens: int = 4
    max_tokens: int = 256

    def __post_init__(self):
        if min(self.d_model, self.d_feature, self.image_patch_tokens, self.max_tokens) <= 0:
            raise ValueError("all encoder dimensions must be positive")
        if self.max_tokens < 1 + self.image_patch_tokens:
            raise ValueError("max_tokens too small for a single image unit")


@dataclass(frozen=True)
class MetadataTokens:
    """Noise level, framerate, and source resolution; each becomes exactly
    one row appended to the conditioning matrix."""

    sigma: float
    framerate: float
    resolution: tuple[int, int]

    def __post_init__(self):
        if self.sigma <= 0 or self.framerate <= 0:
            raise ValueError("sigma and framerate must be positive")


@dataclass(frozen=True)
class TokenEmbeddingMatrix:
    data: np.ndarray  # (rows, d_model) float64
    mask: np.ndarray  # (rows,) bool, True where the row is a real token

    def __post_init__(self):
        if self.data.ndim != 2 or self.mask.shape != (self.data.shape[0],):
            raise ValueError("mask length must equal row count")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("conditioning matrix has non-finite entries")

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def pooled(self) -> np.ndarray:
        """Mean over valid rows; the conditioning summary fed to the denoiser."""
        valid = self.data[self.mask]
        if valid.shape[0] == 0:
            return np.zeros(self.cols)
        return valid.mean(axis=0)


class ImageEmbedder(Protocol):
    def embed(self, image_ref: str) -> np.ndarray: ...


def _seed_from_bytes(raw: bytes) -> int:
    return int.from_bytes(hashlib.sha256(raw).digest()[:8], "little")


class HashedImageEmbedder:
    """Default stand-in visual encoder.

    Hashes the reference's UTF-8 bytes into a seed and draws a fixed
    pseudo-random patch matrix with unit row norms, returned row-major as
    float32 per the plug-in contract. Deterministic across processes.
    """

    def __init__(self, patch_tokens: int, d_feature: int):
        self.patch_tokens = patch_tokens
        self.d_feature = d_feature
        self._cached = lru_cache(maxsize=4096)(self._embed_uncached)

    def embed(self, image_ref: str) -> np.ndarray:
        if not image_ref:
            raise UnresolvableImageError("empty image reference")
        return self._cached(image_ref)

    def _embed_uncached(self, image_ref: str) -> np.ndarray:
        rng = np.random.default_rng(_seed_from_bytes(b"img\x00" + image_ref.encode("utf-8")))
        rows = rng.standard_normal((self.patch_tokens, self.d_feature))
        rows /= np.linalg.norm(rows, axis=1, keepdims=True)
        return rows.astype(np.float32)


EMBEDDER_REGISTRY: dict[str, Callable[[EncoderSpec], ImageEmbedder]] = {
    "hashed": lambda spec: HashedImageEmbedder(spec.image_patch_tokens, spec.d_feature),
}


def make_embedder(name: str, spec: EncoderSpec) -> ImageEmbedder:
    try:
        factory = EMBEDDER_REGISTRY[name]
    except KeyError:
        raise KeyError(f"no embedder registered under {name!r}") from None
    return factory(spec)


class ImageProjection:
    """Affine map taking visual features into the token embedding space."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        self.weight = np.asarray(weight, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeMismatchError("projection weight/bias shapes inconsistent")

    @staticmethod
    def identity(dim: int) -> "ImageProjection":
        return ImageProjection(np.eye(dim), np.zeros(dim))

    @staticmethod
    def seeded(d_model: int, d_feature: int, seed: int = 0) -> "ImageProjection":
        rng = np.random.default_rng(_seed_from_bytes(b"proj\x00" + seed.to_bytes(8, "little")))
        weight = rng.standard_normal((d_model, d_feature)) / np.sqrt(d_feature)
        bias = 0.1 * rng.standard_normal(d_model)
        return ImageProjection(weight, bias)

    def apply(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.weight.shape[1]:
            raise ShapeMismatchError(
                f"features shape {features.shape} incompatible with projection "
                f"{self.weight.shape}"
            )
        return features @ self.weight.T + self.bias


def project(features: np.ndarray, projection: ImageProjection) -> np.ndarray:
    return projection.apply(features)


@lru_cache(maxsize=65536)
def _token_row_cached(token: str, d_model: int) -> np.ndarray:
    rng = np.random.default_rng(_seed_from_bytes(b"tok\x00" + token.encode("utf-8")))
    row = rng.standard_normal(d_model)
    row /= np.linalg.norm(row)
    row.setflags(write=False)
    return row


def text_token_rows(text: str, d_model: int) -> np.ndarray:
    """One hashed-embedding row per token; reuses the retrieval tokenizer."""
    tokens = tokenize(text)
    if not tokens:
        return np.zeros((0, d_model))
    return np.stack([_token_row_cached(t, d_model) for t in tokens])


def _sinusoid_features(value: float, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    out = np.zeros(dim)
    out[:half] = np.sin(value * freqs)
    out[half : 2 * half] = np.cos(value * freqs)
    return out


def metadata_rows(meta: MetadataTokens, d_model: int) -> np.ndarray:
    """Three rows: sinusoidal features of log noise level, of framerate,
    and of the (height, width) pair split across half the row each.
    Rows are normalized to unit norm so metadata carries the same pooling
    weight as a text or image token row."""
    sigma_row = _sinusoid_features(np.log(meta.sigma), d_model)
    fps_row = _sinusoid_features(meta.framerate, d_model)
    h, w = meta.resolution
    res_row = np.concatenate(
        [_sinusoid_features(float(h), d_model // 2), _sinusoid_features(float(w), d_model - d_model // 2)]
    )
    rows = np.stack([sigma_row, fps_row, res_row])
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


class ConditioningEncoder:
    """Bundles the embedder, projection, and spec behind one encode() call.

    Pure and deterministic given (prompt, metadata, spec, seed); immutable
    after construction, so concurrent use is safe.
    """

    def __init__(
        self,
        spec: EncoderSpec = EncoderSpec(),
        embedder: ImageEmbedder | None = None,
        projection: ImageProjection | None = None,
    ):
        self.spec = spec
        self.embedder = embedder if embedder is not None else make_embedder("hashed", spec)
        if projection is None:
            projection = ImageProjection.seeded(spec.d_model, spec.d_feature)
        self.projection = projection

    def embed_image(self, image_ref: str) -> np.ndarray:
        features = np.asarray(self.embedder.embed(image_ref), dtype=np.float64)
        if features.shape != (self.spec.image_patch_tokens, self.spec.d_feature):
            raise ShapeMismatchError(
                f"embedder returned {features.shape}, spec wants "
                f"{(self.spec.image_patch_tokens, self.spec.d_feature)}"
            )
        return features

    def unit_rows(self, prompt: MultimodalPrompt) -> np.ndarray:
        """Instruction rows plus per-unit rows, without metadata. Split out
        so a training loop can cache them across noise levels."""
        blocks: list[np.ndarray] = []
        if prompt.instruction is not None:
            blocks.append(text_token_rows(prompt.instruction, self.spec.d_model))
        for unit in prompt.units:
            if unit.kind == "text":
                blocks.append(text_token_rows(unit.text, self.spec.d_model))
            else:
                blocks.append(self.projection.apply(self.embed_image(unit.image_ref)))
        blocks = [b for b in blocks if b.shape[0] > 0]
        if not blocks:
            return np.zeros((0, self.spec.d_model))
        return np.concatenate(blocks, axis=0)

    def encode(self, prompt: MultimodalPrompt, meta: MetadataTokens) -> TokenEmbeddingMatrix:
        unit_block = self.unit_rows(prompt)
        return self.attach_metadata(unit_block, meta)

    def attach_metadata(self, unit_block: np.ndarray, meta: MetadataTokens) -> TokenEmbeddingMatrix:
        rows = unit_block.shape[0] + 3
        if rows > self.spec.max_tokens:
            raise PromptTooLongError(rows, self.spec.max_tokens)
        data = np.concatenate([unit_block, metadata_rows(meta, self.spec.d_model)], axis=0)
        return TokenEmbeddingMatrix(data=data, mask=np.ones(rows, dtype=bool))

    def null_conditioning(self) -> TokenEmbeddingMatrix:
        """The fixed unconditional input for classifier-free guidance: an
        all-zero matrix of one token row plus three metadata rows."""
        return TokenEmbeddingMatrix(
            data=np.zeros((4, self.spec.d_model)), mask=np.ones(4, dtype=bool)
        )
