"""DDIM inversion of a test image into terminal noise, and the sanity
reconstruction that walks the same schedule back down.

Both directions are unconditional (empty caption, zero image tokens,
guidance 1) and deterministic (eta = 0). Inversion dominates pipeline
runtime, so results are cached on disk keyed by image content, step count
and backbone identity.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import imaging, tensor_io
from .backbone import Conditioning, DiffusionBackbone, make_schedule
from .errors import ComputationError, ContractError

logger = logging.getLogger(__name__)

LATENT_SHAPE = (4, 64, 64)


@dataclass
class InversionResult:
    y_noise: np.ndarray  # (4, 64, 64) float32 terminal latent
    schedule: list[int]  # ascending timesteps that produced it
    source_image_id: str
    num_steps: int

    def __post_init__(self):
        self.y_noise = np.asarray(self.y_noise, dtype=np.float32)
        if self.y_noise.shape != LATENT_SHAPE:
            raise ContractError(f"terminal latent must be {LATENT_SHAPE}, got {self.y_noise.shape}")
        if not np.isfinite(self.y_noise).all():
            raise ComputationError(f"non-finite terminal latent for {self.source_image_id}")
        if any(b <= a for a, b in zip(self.schedule, self.schedule[1:])):
            raise ContractError("schedule must be strictly increasing")
        if self.num_steps != len(self.schedule):
            raise ContractError("num_steps must equal len(schedule)")


@torch.no_grad()
def invert(
    backbone: DiffusionBackbone,
    image: Image.Image,
    null_cond: Conditioning,
    num_steps: int = 1000,
) -> InversionResult:
    """Image -> terminal latent by walking the DDIM schedule upward."""
    if image.size != (imaging.WORK_SIZE, imaging.WORK_SIZE):
        logger.warning("inversion input is %s, resizing to %dx%d", image.size, imaging.WORK_SIZE, imaging.WORK_SIZE)
        image = imaging.to_work_size(image)
    source_id = imaging.image_bytes_sha256(image)[:16]
    schedule = make_schedule(num_steps, backbone.scheduler.train_steps)
    text_ctx, img_ctx = null_cond.torch_batch(backbone.device)
    x = backbone.encode_image(image)
    t_prev = -1
    for t in schedule:
        eps = backbone.predict_eps(x, t_prev, text_ctx, img_ctx)
        x = backbone.scheduler.step(x, eps, t_prev, t)
        if not torch.isfinite(x).all():
            raise ComputationError(f"inversion diverged at timestep {t}")
        t_prev = t
    return InversionResult(
        y_noise=x.squeeze(0).cpu().numpy(),
        schedule=schedule,
        source_image_id=source_id,
        num_steps=num_steps,
    )


@torch.no_grad()
def reconstruct(backbone: DiffusionBackbone, inv: InversionResult, null_cond: Conditioning) -> Image.Image:
    """Unconditional DDIM denoising over the reversed inversion schedule."""
    if inv.schedule[-1] >= backbone.scheduler.train_steps:
        raise ContractError("inversion schedule exceeds the backbone's training schedule")
    text_ctx, img_ctx = null_cond.torch_batch(backbone.device)
    x = torch.from_numpy(inv.y_noise).unsqueeze(0).to(backbone.device)
    steps = list(reversed(inv.schedule))
    for i, t in enumerate(steps):
        t_to = steps[i + 1] if i + 1 < len(steps) else -1
        eps = backbone.predict_eps(x, t, text_ctx, img_ctx)
        x = backbone.scheduler.step(x, eps, t, t_to)
    return backbone.decode_latent(x.squeeze(0))


class InversionCache:
    """Single-writer/many-reader disk cache of inversion results."""

    def __init__(self, cache_dir: str | Path):
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(image: Image.Image, num_steps: int, backbone_id: str) -> str:
        h = hashlib.sha256()
        h.update(imaging.image_bytes_sha256(image).encode())
        h.update(f"|{num_steps}|{backbone_id}".encode())
        return h.hexdigest()[:32]

    def path_for(self, key: str) -> Path:
        return self.cache_dir / f"{key}.lat"

    def get(self, image: Image.Image, num_steps: int, backbone_id: str) -> InversionResult | None:
        path = self.path_for(self.key(image, num_steps, backbone_id))
        if not path.exists():
            return None
        arr, meta = tensor_io.read_tensor(path)
        return InversionResult(
            y_noise=arr,
            schedule=list(meta["schedule"]),
            source_image_id=meta["source_image_id"],
            num_steps=meta["num_steps"],
        )

    def put(self, image: Image.Image, result: InversionResult, backbone_id: str) -> Path:
        path = self.path_for(self.key(image, result.num_steps, backbone_id))
        tmp = path.with_suffix(".tmp")
        tensor_io.write_tensor(
            tmp,
            result.y_noise,
            {
                "schedule": result.schedule,
                "source_image_id": result.source_image_id,
                "num_steps": result.num_steps,
                "backbone_id": backbone_id,
            },
        )
        tmp.replace(path)
        return path


def invert_cached(
    backbone: DiffusionBackbone,
    image: Image.Image,
    null_cond: Conditioning,
    num_steps: int,
    cache: InversionCache | None,
) -> tuple[InversionResult, bool]:
    """Cache-aware inversion; returns (result, was_cache_hit)."""
    if image.size != (imaging.WORK_SIZE, imaging.WORK_SIZE):
        image = imaging.to_work_size(image)
    if cache is not None:
        hit = cache.get(image, num_steps, backbone.backbone_id)
        if hit is not None:
            return hit, True
    result = invert(backbone, image, null_cond, num_steps)
    if cache is not None:
        cache.put(image, result, backbone.backbone_id)
    return result, False
