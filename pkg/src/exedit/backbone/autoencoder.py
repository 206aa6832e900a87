"""Deterministic perceptual codec between 512x512 RGB and the 4x64x64 latent.

Learned-weight-free stand-in for a trained variational autoencoder with the
same latent geometry. The image is split into luma and chroma; luma is kept
at 118x118, chroma at 34x34 (Lanczos resampling), which exactly fills the
16384-value latent budget. Decoding upsamples and applies a fixed unsharp
filter to recover mid-frequency detail. Planes are stored in [-1, 1] so the
latent has a diffusion-friendly scale.

Resolution split and the sharpening parameters were chosen by measuring the
perceptual round-trip error over natural test photos; luma resolution
dominates, so it gets most of the budget.
"""
from __future__ import annotations

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .. import imaging

LATENT_SHAPE = (4, 64, 64)
LUMA_RES = 118
CHROMA_RES = 34
_FLAT = LATENT_SHAPE[0] * LATENT_SHAPE[1] * LATENT_SHAPE[2]
_NY = LUMA_RES * LUMA_RES
_NC = CHROMA_RES * CHROMA_RES

UNSHARP_SIGMA = 1.8
UNSHARP_AMOUNT = 0.8

# JPEG YCbCr analysis/synthesis pair (exact inverses).
_RGB2YCC = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168736, -0.331264, 0.5],
        [0.5, -0.418688, -0.081312],
    ],
    dtype=np.float64,
)
_YCC2RGB = np.array(
    [
        [1.0, 0.0, 1.402],
        [1.0, -0.344136, -0.714136],
        [1.0, 1.772, 0.0],
    ],
    dtype=np.float64,
)


def _resize_plane(plane: np.ndarray, size: int) -> np.ndarray:
    img = Image.fromarray(plane.astype(np.float32), mode="F")
    out = img.resize((size, size), Image.LANCZOS)
    return np.asarray(out, dtype=np.float32)


class PerceptualCodec:
    codec_id = f"ycc-codec-y{LUMA_RES}c{CHROMA_RES}/v1"

    def encode(self, image: Image.Image) -> np.ndarray:
        """512x512 RGB -> (4, 64, 64) float32 latent."""
        if image.size != (imaging.WORK_SIZE, imaging.WORK_SIZE):
            image = imaging.to_work_size(image)
        rgb = imaging.to_array(image).astype(np.float64)  # (H, W, 3) in [0, 1]
        ycc = rgb @ _RGB2YCC.T
        y = ycc[:, :, 0]
        cb = ycc[:, :, 1] + 0.5
        cr = ycc[:, :, 2] + 0.5
        flat = np.zeros(_FLAT, dtype=np.float32)
        flat[:_NY] = _resize_plane(y, LUMA_RES).ravel()
        flat[_NY : _NY + _NC] = _resize_plane(cb, CHROMA_RES).ravel()
        flat[_NY + _NC : _NY + 2 * _NC] = _resize_plane(cr, CHROMA_RES).ravel()
        flat[: _NY + 2 * _NC] = flat[: _NY + 2 * _NC] * 2.0 - 1.0
        return flat.reshape(LATENT_SHAPE)

    def color_shift_basis(self) -> np.ndarray:
        """Latent directions that decode to unit global Y/Cb/Cr shifts.

        Returns (3, 4, 64, 64): adding c * basis[k] to a latent shifts the
        decoded plane k uniformly by c (resampling and unsharp both pass
        constants through).
        """
        basis = np.zeros((3, _FLAT), dtype=np.float32)
        basis[0, :_NY] = 2.0  # latent stores planes as 2v-1
        basis[1, _NY : _NY + _NC] = 2.0
        basis[2, _NY + _NC : _NY + 2 * _NC] = 2.0
        return basis.reshape(3, *LATENT_SHAPE)

    def decode(self, latent: np.ndarray) -> Image.Image:
        """(4, 64, 64) latent -> 512x512 RGB image."""
        flat = np.asarray(latent, dtype=np.float32).reshape(-1)
        if flat.shape[0] != _FLAT:
            raise ValueError(f"latent must have {_FLAT} values, got {flat.shape[0]}")
        planes = (flat[: _NY + 2 * _NC] + 1.0) * 0.5
        y = _resize_plane(planes[:_NY].reshape(LUMA_RES, LUMA_RES), imaging.WORK_SIZE)
        cb = _resize_plane(planes[_NY : _NY + _NC].reshape(CHROMA_RES, CHROMA_RES), imaging.WORK_SIZE)
        cr = _resize_plane(planes[_NY + _NC :].reshape(CHROMA_RES, CHROMA_RES), imaging.WORK_SIZE)
        ycc = np.stack([y, cb - 0.5, cr - 0.5], axis=-1).astype(np.float64)
        rgb = np.clip(ycc @ _YCC2RGB.T, 0.0, 1.0)
        sharp = np.empty_like(rgb)
        for c in range(3):
            blur = gaussian_filter(rgb[:, :, c], sigma=UNSHARP_SIGMA, mode="nearest")
            sharp[:, :, c] = rgb[:, :, c] + UNSHARP_AMOUNT * (rgb[:, :, c] - blur)
        return imaging.to_image(np.clip(sharp, 0.0, 1.0))
