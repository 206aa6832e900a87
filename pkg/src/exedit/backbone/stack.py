"""Assembled diffusion backbone: noise model + latent codec + DDIM scheduler."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from ..clipspace import HIDDEN_DIM, TEXT_WINDOW
from ..errors import ConfigurationError
from .autoencoder import PerceptualCodec
from .ddim import DdimScheduler
from .unet import LATENT_CHANNELS, CondUNet

NUM_IMAGE_TOKENS = 4


@dataclass
class Conditioning:
    """UNet context: 77 text-token embeddings + 4 image tokens."""

    text: np.ndarray  # (77, 768)
    image_tokens: np.ndarray  # (4, 768)

    def __post_init__(self):
        self.text = np.asarray(self.text, dtype=np.float32)
        self.image_tokens = np.asarray(self.image_tokens, dtype=np.float32)
        assert self.text.shape == (TEXT_WINDOW, HIDDEN_DIM)
        assert self.image_tokens.shape == (NUM_IMAGE_TOKENS, HIDDEN_DIM)

    @property
    def token_count(self) -> int:
        return self.text.shape[0] + self.image_tokens.shape[0]

    @classmethod
    def from_edit_embedding(cls, g) -> "Conditioning":
        return cls(text=g.caption_embedding, image_tokens=g.image_tokens.tokens)

    @classmethod
    def null(cls, empty_text_embedding: np.ndarray) -> "Conditioning":
        """Unconditional branch: empty-caption embedding + zeroed image tokens."""
        return cls(
            text=empty_text_embedding,
            image_tokens=np.zeros((NUM_IMAGE_TOKENS, HIDDEN_DIM), dtype=np.float32),
        )

    def torch_batch(self, device: str = "cpu") -> tuple[torch.Tensor, torch.Tensor]:
        t = torch.from_numpy(self.text).unsqueeze(0).to(device)
        i = torch.from_numpy(self.image_tokens).unsqueeze(0).to(device)
        return t, i


class DiffusionBackbone:
    """Exclusive-use bundle; one generation owns it at a time."""

    def __init__(self, unet: CondUNet, codec: PerceptualCodec, scheduler: DdimScheduler, backbone_id: str, device: str = "cpu"):
        self.unet = unet.to(device)
        self.codec = codec
        self.scheduler = scheduler
        self.backbone_id = backbone_id
        self.device = device
        self.steering = None  # optional ColorSteering, attached by the engine

    @classmethod
    def build(cls, weights_dir: str | Path | None = None, seed: int = 7, device: str = "cpu") -> "DiffusionBackbone":
        unet = CondUNet(seed=seed * 1000 + 404)
        backbone_id = f"ldm-compact/seed{seed}"
        if weights_dir is not None:
            wpath = Path(weights_dir) / "unet.pt"
            if not wpath.exists():
                raise ConfigurationError(f"backbone weights not found: {wpath}")
            unet.load_state_dict(torch.load(wpath, map_location="cpu"))
            backbone_id = f"ldm-compact/{Path(weights_dir).name}"
        return cls(unet=unet, codec=PerceptualCodec(), scheduler=DdimScheduler(), backbone_id=backbone_id, device=device)

    def encode_image(self, image: Image.Image) -> torch.Tensor:
        latent = self.codec.encode(image)
        return torch.from_numpy(latent).unsqueeze(0).to(self.device)

    def decode_latent(self, latent: torch.Tensor | np.ndarray) -> Image.Image:
        if isinstance(latent, torch.Tensor):
            latent = latent.detach().cpu().numpy()
        latent = np.asarray(latent, dtype=np.float32).reshape(LATENT_CHANNELS, 64, 64)
        return self.codec.decode(latent)

    @torch.no_grad()
    def predict_eps(self, x: torch.Tensor, t: int, text_ctx: torch.Tensor, image_ctx: torch.Tensor, taps=None) -> torch.Tensor:
        eps = self.unet(x, self.scheduler.model_t(t), text_ctx, image_ctx, taps=taps)
        if self.steering is not None:
            eps = eps + self.steering(text_ctx, image_ctx)
        return eps
