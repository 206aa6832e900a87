"""Image-space edit conditioning.

An image is projected through the frozen image encoder and the adapter
projection into 4 tokens of width 768. The edit carried by an exemplar pair
(x, x_edit) is mixed with the test image y as

    delta = lam * (tokens(x_edit) - tokens(x)) + (1 - lam) * tokens(y)

with no re-normalization afterwards: the mixing weight ``lam`` is the only
strength control and rescaling would silently change its meaning.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
from PIL import Image

from . import imaging, tensor_io
from .clipspace import HIDDEN_DIM, TEXT_WINDOW, EmbeddingModels, seeded_generator
from .errors import ComputationError, ContractError

logger = logging.getLogger(__name__)

NUM_IMAGE_TOKENS = 4
LAMBDA_SOFT_RANGE = (0.0, 1.5)


@dataclass
class ImageTokens:
    """A (4, 768) float32 token matrix plus the id of the image it came from."""

    tokens: np.ndarray
    source_id: str

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float32)
        if self.tokens.shape != (NUM_IMAGE_TOKENS, HIDDEN_DIM):
            raise ContractError(
                f"image tokens must be ({NUM_IMAGE_TOKENS}, {HIDDEN_DIM}), got {self.tokens.shape}"
            )
        if not np.isfinite(self.tokens).all():
            raise ComputationError(f"non-finite image tokens for {self.source_id}")

    def save(self, path: str | Path) -> None:
        tensor_io.write_tensor(path, self.tokens, {"source_id": self.source_id})

    @classmethod
    def load(cls, path: str | Path) -> "ImageTokens":
        arr, meta = tensor_io.read_tensor(path)
        return cls(tokens=arr, source_id=meta.get("source_id", str(path)))


@dataclass
class EditEmbedding:
    """The conditioning pair: 4 image tokens plus the 77-token caption embedding."""

    image_tokens: ImageTokens
    caption_embedding: np.ndarray  # (77, 768) float32
    lambda_used: float
    caption_text: str

    def __post_init__(self):
        self.caption_embedding = np.asarray(self.caption_embedding, dtype=np.float32)
        if self.caption_embedding.shape != (TEXT_WINDOW, HIDDEN_DIM):
            raise ContractError(
                f"caption embedding must be ({TEXT_WINDOW}, {HIDDEN_DIM}),"
                f" got {self.caption_embedding.shape}"
            )

    @property
    def conditioning_token_count(self) -> int:
        return TEXT_WINDOW + NUM_IMAGE_TOKENS  # 77 text + 4 image = 81


class TokenProjector(nn.Module):
    """Adapter projection: linear 768 -> 4*768, reshape to 4 tokens, LayerNorm."""

    def __init__(self, seed: int = 303):
        super().__init__()
        self.proj = nn.Linear(HIDDEN_DIM, NUM_IMAGE_TOKENS * HIDDEN_DIM)
        self.norm = nn.LayerNorm(HIDDEN_DIM)
        g = seeded_generator(seed)
        with torch.no_grad():
            self.proj.weight.normal_(0.0, (1.0 / HIDDEN_DIM) ** 0.5, generator=g)
            self.proj.bias.zero_()
        self.eval()
        self.requires_grad_(False)

    @torch.no_grad()
    def forward(self, embedding: torch.Tensor) -> torch.Tensor:
        tokens = self.proj(embedding).reshape(NUM_IMAGE_TOKENS, HIDDEN_DIM)
        return self.norm(tokens)


def compute_edit_direction(
    x_tokens: ImageTokens,
    xedit_tokens: ImageTokens,
    y_tokens: ImageTokens,
    lam: float,
) -> ImageTokens:
    """Elementwise lam*(xedit - x) + (1-lam)*y over (4, 768) token matrices."""
    if not np.isfinite(lam):
        raise ContractError(f"lambda must be finite, got {lam}")
    shapes = {x_tokens.tokens.shape, xedit_tokens.tokens.shape, y_tokens.tokens.shape}
    if len(shapes) != 1:
        raise ContractError(f"token shape mismatch: {shapes}")
    if not (LAMBDA_SOFT_RANGE[0] <= lam <= LAMBDA_SOFT_RANGE[1]):
        logger.warning("edit weight %.3f outside the usual range %s", lam, LAMBDA_SOFT_RANGE)
    lam32 = np.float32(lam)
    out = lam32 * (xedit_tokens.tokens - x_tokens.tokens) + (np.float32(1.0) - lam32) * y_tokens.tokens
    source_id = f"delta({xedit_tokens.source_id}-{x_tokens.source_id};{y_tokens.source_id};lam={lam})"
    return ImageTokens(tokens=out, source_id=source_id)


class EditEmbedder:
    """Stateless-after-load facade over the frozen encoders and adapter."""

    def __init__(self, models: EmbeddingModels, projector: TokenProjector | None = None):
        self.models = models
        self.projector = projector if projector is not None else TokenProjector()

    @classmethod
    def build(cls, weights_dir: str | Path | None = None, seed: int = 7) -> "EditEmbedder":
        return cls(EmbeddingModels.build(weights_dir=weights_dir, seed=seed))

    def project_image(self, image: Image.Image, source_id: str | None = None) -> ImageTokens:
        """Image -> 4 adapter tokens. Deterministic for identical input bytes."""
        if source_id is None:
            source_id = imaging.image_bytes_sha256(image)[:16]
        emb = self.models.image_encoder.encode(image)
        if not torch.isfinite(emb).all():
            raise ComputationError(f"non-finite image embedding for {source_id}")
        tokens = self.projector(emb).numpy().astype(np.float32)
        return ImageTokens(tokens=tokens, source_id=source_id)

    def embed_caption(self, caption: str) -> np.ndarray:
        """Caption -> (77, 768) text-token embeddings; over-long input truncates."""
        tokens, truncated = self.models.text_encoder.encode(caption)
        if truncated:
            logger.warning("caption exceeds the %d-token window; truncated", TEXT_WINDOW)
        return tokens.numpy().astype(np.float32)

    def build_edit_embedding(self, triplet, caption: str, lam: float) -> EditEmbedding:
        """Full conditioning for a triplet: mixed image tokens + caption embedding.

        ``triplet`` is any object with ``x``, ``x_edit``, ``y`` PIL images
        (see pipeline.ExemplarTriplet).
        """
        if not caption:
            raise ContractError("caption must be non-empty; use the pipeline ablation for null text")
        x_tok = self.project_image(triplet.x)
        xe_tok = self.project_image(triplet.x_edit)
        y_tok = self.project_image(triplet.y)
        delta = compute_edit_direction(x_tok, xe_tok, y_tok, lam)
        return EditEmbedding(
            image_tokens=delta,
            caption_embedding=self.embed_caption(caption),
            lambda_used=float(lam),
            caption_text=caption,
        )
