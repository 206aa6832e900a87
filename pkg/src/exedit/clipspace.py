"""Frozen image/text embedding models with a shared 768-d hidden space.

One encoder pair serves both the conditioning path and the evaluation
metrics. Weights are either loaded from a weights directory (converted
pretrained checkpoints) or deterministically seeded, so every run of the
package sees the same frozen models. The seeded variant is what the test
suite and the self-contained backbone use.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from .errors import ConfigurationError

HIDDEN_DIM = 768
TEXT_WINDOW = 77
VOCAB_SIZE = 8192
PAD_ID, BOS_ID, EOS_ID = 0, 1, 2

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def seeded_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(seed)
    return g


def _init_(t: torch.Tensor, g: torch.Generator, std: float | None = None) -> None:
    if std is None:
        std = (2.0 / t.shape[-1]) ** 0.5 if t.dim() >= 2 else 0.02
    with torch.no_grad():
        t.normal_(0.0, std, generator=g)


def tokenize(text: str) -> tuple[list[int], bool]:
    """Hash-based tokenizer: 77-slot window, BOS/EOS framing, zero padding.

    Returns (ids, truncated). Stable across runs and platforms (blake2s,
    not the randomized builtin hash).
    """
    words = _TOKEN_RE.findall(text.lower())
    body = []
    for w in words:
        digest = hashlib.blake2s(w.encode("utf-8"), digest_size=4).digest()
        body.append(3 + int.from_bytes(digest, "little") % (VOCAB_SIZE - 3))
    truncated = len(body) > TEXT_WINDOW - 2
    body = body[: TEXT_WINDOW - 2]
    ids = [BOS_ID] + body + [EOS_ID]
    ids += [PAD_ID] * (TEXT_WINDOW - len(ids))
    return ids, truncated


class TextEncoder(nn.Module):
    """Token embeddings + positional table + one mixing block, LayerNorm out.

    forward() returns the (77, 768) token sequence; pooled() gives a single
    768-d sentence embedding (masked mean of non-pad positions).
    """

    def __init__(self, seed: int = 101):
        super().__init__()
        self.tok_emb = nn.Embedding(VOCAB_SIZE, HIDDEN_DIM, padding_idx=PAD_ID)
        self.pos_emb = nn.Parameter(torch.zeros(TEXT_WINDOW, HIDDEN_DIM))
        self.ln1 = nn.LayerNorm(HIDDEN_DIM)
        self.seq_mix = nn.Linear(TEXT_WINDOW, TEXT_WINDOW, bias=False)
        self.ln2 = nn.LayerNorm(HIDDEN_DIM)
        self.mlp = nn.Sequential(
            nn.Linear(HIDDEN_DIM, HIDDEN_DIM), nn.GELU(), nn.Linear(HIDDEN_DIM, HIDDEN_DIM)
        )
        self.ln_out = nn.LayerNorm(HIDDEN_DIM)
        g = seeded_generator(seed)
        _init_(self.tok_emb.weight, g, std=0.02)
        _init_(self.pos_emb, g, std=0.01)
        _init_(self.seq_mix.weight, g, std=0.1)
        for m in self.mlp:
            if isinstance(m, nn.Linear):
                _init_(m.weight, g, std=0.05)
                nn.init.zeros_(m.bias)
        self.eval()
        self.requires_grad_(False)

    @torch.no_grad()
    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        h = self.tok_emb(ids) + self.pos_emb
        h = self.ln1(h)
        h = h + self.seq_mix(h.transpose(-1, -2)).transpose(-1, -2)
        h = h + self.mlp(self.ln2(h))
        return self.ln_out(h)

    @torch.no_grad()
    def encode(self, text: str) -> tuple[torch.Tensor, bool]:
        """Text -> (77, 768) token embeddings. Returns (tokens, truncated)."""
        ids, truncated = tokenize(text)
        t = torch.tensor(ids, dtype=torch.long)
        return self.forward(t), truncated

    @torch.no_grad()
    def pooled(self, text: str) -> torch.Tensor:
        ids, _ = tokenize(text)
        t = torch.tensor(ids, dtype=torch.long)
        h = self.forward(t)
        mask = (t != PAD_ID).float().unsqueeze(-1)
        pooled = (h * mask).sum(dim=0) / mask.sum().clamp(min=1.0)
        return F.layer_norm(pooled, (HIDDEN_DIM,))


class ImageEncoder(nn.Module):
    """Small conv tower over 224x224 input -> pooled 768-d embedding."""

    INPUT_SIZE = 224

    def __init__(self, seed: int = 202):
        super().__init__()
        chans = [3, 32, 64, 128, 256]
        convs = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            convs += [nn.Conv2d(cin, cout, 5, stride=2, padding=2), nn.GroupNorm(8, cout), nn.GELU()]
        self.tower = nn.Sequential(*convs)
        self.head = nn.Linear(chans[-1], HIDDEN_DIM)
        self.ln = nn.LayerNorm(HIDDEN_DIM)
        g = seeded_generator(seed)
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                fan_in = m.weight[0].numel()
                _init_(m.weight, g, std=(2.0 / fan_in) ** 0.5)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
        self.eval()
        self.requires_grad_(False)

    @torch.no_grad()
    def encode(self, image: Image.Image) -> torch.Tensor:
        """RGB image (any size) -> 768-d embedding."""
        img = image.convert("RGB").resize((self.INPUT_SIZE, self.INPUT_SIZE), Image.BICUBIC)
        x = torch.from_numpy(np.asarray(img, dtype=np.float32) / 255.0)
        x = x.permute(2, 0, 1).unsqueeze(0) * 2.0 - 1.0
        h = self.tower(x)
        pooled = h.mean(dim=(2, 3)).squeeze(0)
        return self.ln(self.head(pooled))


@dataclass
class EmbeddingModels:
    """The frozen encoder pair plus provenance ids."""

    image_encoder: ImageEncoder
    text_encoder: TextEncoder
    encoder_id: str

    @classmethod
    def build(cls, weights_dir: str | Path | None = None, seed: int = 7) -> "EmbeddingModels":
        img_enc = ImageEncoder(seed=seed * 1000 + 202)
        txt_enc = TextEncoder(seed=seed * 1000 + 101)
        encoder_id = f"embed-768/seed{seed}"
        if weights_dir is not None:
            wdir = Path(weights_dir)
            img_path, txt_path = wdir / "image_encoder.pt", wdir / "text_encoder.pt"
            if not img_path.exists() or not txt_path.exists():
                raise ConfigurationError(f"encoder weights not found under {wdir}")
            img_enc.load_state_dict(torch.load(img_path, map_location="cpu"))
            txt_enc.load_state_dict(torch.load(txt_path, map_location="cpu"))
            encoder_id = f"embed-768/{wdir.name}"
        return cls(image_encoder=img_enc, text_encoder=txt_enc, encoder_id=encoder_id)
