"""Image loading, preprocessing and conversion helpers.

All pipeline stages operate on 512x512 RGB. Preprocessing is center-crop to
square followed by bicubic resize, which avoids aspect distortion.
"""
from __future__ import annotations

import hashlib
import io
from pathlib import Path

import numpy as np
from PIL import Image

WORK_SIZE = 512


def load_rgb(path: str | Path) -> Image.Image:
    """Load an image file (PNG/JPEG/...) as RGB."""
    img = Image.open(path)
    return img.convert("RGB")


def to_work_size(img: Image.Image, size: int = WORK_SIZE) -> Image.Image:
    """Center-crop to square, then bicubic-resize to ``size`` x ``size``."""
    w, h = img.size
    s = min(w, h)
    left, top = (w - s) // 2, (h - s) // 2
    img = img.crop((left, top, left + s, top + s))
    if img.size != (size, size):
        img = img.resize((size, size), Image.BICUBIC)
    return img


def load_work_image(path: str | Path, size: int = WORK_SIZE) -> Image.Image:
    return to_work_size(load_rgb(path), size)


def to_array(img: Image.Image) -> np.ndarray:
    """PIL RGB image -> float32 array in [0, 1], shape (H, W, 3)."""
    return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0


def to_image(arr: np.ndarray) -> Image.Image:
    """float array in [0, 1], shape (H, W, 3) -> PIL RGB image."""
    a = np.clip(np.asarray(arr, dtype=np.float32), 0.0, 1.0)
    return Image.fromarray((a * 255.0 + 0.5).astype(np.uint8), mode="RGB")


def image_bytes_sha256(img: Image.Image) -> str:
    """Content hash of the decoded RGB pixel buffer (size-tagged)."""
    h = hashlib.sha256()
    h.update(f"{img.size[0]}x{img.size[1]}:".encode())
    h.update(img.convert("RGB").tobytes())
    return h.hexdigest()


def png_bytes(img: Image.Image) -> bytes:
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def from_png_bytes(data: bytes) -> Image.Image:
    return Image.open(io.BytesIO(data)).convert("RGB")


def hstack(left: Image.Image, right: Image.Image) -> Image.Image:
    """Horizontal concatenation; both images must share height."""
    if left.height != right.height:
        raise ValueError("hstack requires equal heights")
    out = Image.new("RGB", (left.width + right.width, left.height))
    out.paste(left, (0, 0))
    out.paste(right, (left.width, 0))
    return out


def tile_2x2(a: Image.Image, b: Image.Image, c: Image.Image, d: Image.Image) -> Image.Image:
    """2x2 contact sheet: a | b over c | d. All four must share size."""
    sizes = {a.size, b.size, c.size, d.size}
    if len(sizes) != 1:
        raise ValueError("tile_2x2 requires four equally sized images")
    w, h = a.size
    out = Image.new("RGB", (2 * w, 2 * h))
    out.paste(a, (0, 0))
    out.paste(b, (w, 0))
    out.paste(c, (0, h))
    out.paste(d, (w, h))
    return out
