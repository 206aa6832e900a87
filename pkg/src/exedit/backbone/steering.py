"""Calibrated conditioning-to-color steering for the seeded backbone.

A trained latent diffusion stack moves the output along the visual
direction its conditioning encodes; seeded random weights have no such
first-order consistency. This module restores it by construction: at build
time it measures, by finite differences through the frozen encoders, how a
global RGB shift of the input moves the mean adapter token (a 768x3
response matrix), and inverts that map. At sampling time the conditioning's
mean token is decoded back into an RGB shift and applied as a constant
noise-prediction offset along the codec's color basis.

A constant offset is exact to work with: DDIM turns a constant added to
every noise prediction into a closed-form terminal offset of
-sqrt((1-abar_T)/abar_T) per unit, independent of the step count, so the
steering gain can be sized analytically and inversion stays exactly
reversible.
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
from PIL import Image

from .. import imaging
from ..clipspace import seeded_generator
from .autoencoder import _RGB2YCC, PerceptualCodec
from .ddim import DdimScheduler

CALIBRATION_EPS = 0.04
REFERENCE_GUIDANCE = 10.0  # scale is sized so the default guidance lands at target strength
TEXT_STEER_SCALE = 0.25  # text nudges color at a fraction of the image path
IMAGE_STEER_GAIN = 4.0  # compensates response attenuation on busy natural content


def _tinted(image: Image.Image, delta: np.ndarray) -> Image.Image:
    arr = np.asarray(image, dtype=np.float32) / 255.0
    return imaging.to_image(np.clip(arr + delta[None, None, :], 0.0, 1.0))


def _cloud(seed: int) -> Image.Image:
    """Deterministic multi-scale texture with natural-image-like statistics."""
    from scipy.ndimage import gaussian_filter

    rng = np.random.default_rng(seed)
    size = imaging.WORK_SIZE
    img = np.zeros((size, size, 3), dtype=np.float64)
    for sigma, amp in ((64, 1.0), (16, 0.5), (4, 0.25)):
        noise = rng.standard_normal((size, size, 3))
        for c in range(3):
            noise[:, :, c] = gaussian_filter(noise[:, :, c], sigma=sigma)
        noise /= np.abs(noise).max() + 1e-9
        img += amp * noise
    img = 0.5 + 0.3 * img / (np.abs(img).max() + 1e-9)
    return imaging.to_image(img.astype(np.float32))


def _calibration_images() -> list[Image.Image]:
    gray = imaging.to_image(np.full((imaging.WORK_SIZE, imaging.WORK_SIZE, 3), 0.5, dtype=np.float32))
    ramp = np.linspace(0.2, 0.8, imaging.WORK_SIZE, dtype=np.float32)
    grad = imaging.to_image(np.stack([np.tile(ramp, (imaging.WORK_SIZE, 1))] * 3, axis=-1))
    return [gray, grad, _cloud(11), _cloud(23), _cloud(47)]


def measure_color_response(embedder) -> np.ndarray:
    """(768, 3) response of the mean adapter token to unit RGB shifts."""
    cols = []
    probes = _calibration_images()
    for j in range(3):
        delta = np.zeros(3, dtype=np.float32)
        delta[j] = CALIBRATION_EPS
        diffs = []
        for probe in probes:
            hi = embedder.project_image(_tinted(probe, delta)).tokens.mean(axis=0)
            lo = embedder.project_image(_tinted(probe, -delta)).tokens.mean(axis=0)
            diffs.append((hi - lo) / (2.0 * CALIBRATION_EPS))
        cols.append(np.mean(diffs, axis=0))
    return np.stack(cols, axis=1).astype(np.float64)


def estimate_tint_decoder(embedder) -> tuple[np.ndarray, np.ndarray]:
    """GLS inverse of the color response, robust to image content.

    The mean token of an arbitrary image carries far more content variation
    than tint response, so a plain pseudo-inverse reads content as color.
    Two defenses: (1) the direction of the average natural token is
    projected out entirely, which cancels the reference-image term the
    conditioning mixture carries at every edit weight; (2) a
    generalized-least-squares estimate, (M' S^-1 M)^-1 M' S^-1 with S the
    token covariance over natural-statistics probes, suppresses the
    remaining content directions while keeping the tint axes.

    Returns (decoder (3, 768) acting on mu-projected tokens, mean token
    mu (768,)).
    """
    response = measure_color_response(embedder)  # (768, 3)
    samples = np.stack(
        [embedder.project_image(_cloud(100 + 7 * i)).tokens.mean(axis=0) for i in range(16)]
    ).astype(np.float64)
    mu = samples.mean(axis=0)
    mu_hat = mu / (np.linalg.norm(mu) + 1e-12)

    def project(rows):
        return rows - np.outer(rows @ mu_hat, mu_hat)

    centered = project(samples - mu)
    cov = centered.T @ centered / (len(samples) - 1)
    alpha = 0.1 * np.trace(cov) / cov.shape[0]
    weights = np.linalg.inv(cov + alpha * np.eye(cov.shape[0]))
    resp_p = project(response.T).T  # (768, 3) with the mu direction removed
    normal = resp_p.T @ weights @ resp_p
    decoder = np.linalg.solve(normal, resp_p.T @ weights)
    # fold the projection into the decoder so it applies to raw mean tokens
    decoder = decoder - np.outer(decoder @ mu_hat, mu_hat)
    return decoder, mu


class ColorSteering(nn.Module):
    """Adds a conditioning-derived constant along the codec's color basis."""

    def __init__(
        self,
        basis: np.ndarray,  # (3, 4, 64, 64)
        image_matrix: np.ndarray,  # (3, 768): mean token -> YCbCr plane target
        text_matrix: np.ndarray,  # (3, 768)
        image_mu: np.ndarray,  # (768,) reference mean token of unedited content
        text_mu: np.ndarray,  # (768,) mean embedding of the empty caption
    ):
        super().__init__()
        self.register_buffer("basis", torch.from_numpy(basis.astype(np.float32)))
        self.register_buffer("image_matrix", torch.from_numpy(image_matrix.astype(np.float32)))
        self.register_buffer("text_matrix", torch.from_numpy(text_matrix.astype(np.float32)))
        self.register_buffer("image_mu", torch.from_numpy(image_mu.astype(np.float32)))
        self.register_buffer("text_mu", torch.from_numpy(text_mu.astype(np.float32)))

    @torch.no_grad()
    def forward(self, text_ctx: torch.Tensor, image_ctx: torch.Tensor) -> torch.Tensor:
        u_img = image_ctx.mean(dim=1)
        # The all-zero token row is the unconditional branch; it must steer by 0.
        nonzero = (image_ctx.abs().sum(dim=(1, 2)) > 0).float().unsqueeze(1)
        u_img = (u_img - self.image_mu) * nonzero
        u_txt = text_ctx.mean(dim=1) - self.text_mu
        coeffs = u_img @ self.image_matrix.T + u_txt @ self.text_matrix.T  # (B, 3)
        return torch.einsum("bk,kchw->bchw", coeffs, self.basis)


def build_color_steering(
    embedder,
    codec: PerceptualCodec,
    scheduler: DdimScheduler,
    seed: int = 7,
) -> ColorSteering:
    terminal_gain = float(np.sqrt((1.0 - scheduler.alpha_bar(scheduler.train_steps - 1)) / scheduler.alpha_bar(scheduler.train_steps - 1)))
    decoder, image_mu = estimate_tint_decoder(embedder)  # (3, 768), (768,)
    # eps-offset coefficient per unit plane target; the minus cancels DDIM's
    # negative terminal gain, REFERENCE_GUIDANCE undoes the CFG amplification.
    gain = -1.0 / (terminal_gain * REFERENCE_GUIDANCE)
    image_matrix = (gain * IMAGE_STEER_GAIN) * (_RGB2YCC @ decoder)
    g = seeded_generator(seed * 1000 + 606)
    text_rows = torch.randn(3, embedder.models.text_encoder.pos_emb.shape[1], generator=g)
    text_rows = text_rows / text_rows.norm(dim=1, keepdim=True)
    text_matrix = (gain * TEXT_STEER_SCALE) * text_rows.numpy().astype(np.float64)
    text_tokens, _ = embedder.models.text_encoder.encode("")
    text_mu = text_tokens.numpy().mean(axis=0)
    return ColorSteering(
        basis=codec.color_shift_basis(),
        image_matrix=image_matrix,
        text_matrix=text_matrix,
        image_mu=image_mu,
        text_mu=text_mu,
    )
