"""Deterministic demo triplets for smoke evaluation and examples.

Ten synthetic exemplar/test quadruples over procedural textures, covering
all six edit types. Each quadruple applies one parametric transform T to
two different base images: (x, T(x)) demonstrates the edit, (y, T(y))
provides the test image and its ground truth. Everything is seeded, so the
suite is bit-identical across runs.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from . import imaging
from .backbone.steering import _cloud
from .dataset import Manifest, ManifestEntry


def _tint(arr: np.ndarray, delta) -> np.ndarray:
    return np.clip(arr + np.asarray(delta, dtype=np.float32)[None, None, :], 0.0, 1.0)


def _region_tint(arr: np.ndarray, delta, mask: np.ndarray) -> np.ndarray:
    out = arr.copy()
    out[mask] = np.clip(arr[mask] + np.asarray(delta, dtype=np.float32), 0.0, 1.0)
    return out


def _top_mask(size: int) -> np.ndarray:
    m = np.zeros((size, size), dtype=bool)
    m[: size // 2] = True
    return m


def _rect_mask(size: int, x0, y0, x1, y1) -> np.ndarray:
    m = np.zeros((size, size), dtype=bool)
    m[y0:y1, x0:x1] = True
    return m


def _draw_disc(img: Image.Image, center, radius, color) -> Image.Image:
    out = img.copy()
    d = ImageDraw.Draw(out)
    d.ellipse([center[0] - radius, center[1] - radius, center[0] + radius, center[1] + radius], fill=color)
    return out


def _draw_square(img: Image.Image, center, half, color) -> Image.Image:
    out = img.copy()
    d = ImageDraw.Draw(out)
    d.rectangle([center[0] - half, center[1] - half, center[0] + half, center[1] + half], fill=color)
    return out


def _transforms():
    s = imaging.WORK_SIZE
    q = s // 4

    def t_warm(img):
        return imaging.to_image(_tint(imaging.to_array(img), (0.22, 0.06, -0.14)))

    def t_cool(img):
        return imaging.to_image(_tint(imaging.to_array(img), (-0.16, 0.02, 0.20)))

    def t_backdrop_green(img):
        return imaging.to_image(_region_tint(imaging.to_array(img), (-0.10, 0.22, -0.08), _top_mask(s)))

    def t_backdrop_dusk(img):
        return imaging.to_image(_region_tint(imaging.to_array(img), (0.16, -0.06, 0.18), _top_mask(s)))

    def t_patch_red(img):
        return imaging.to_image(
            _region_tint(imaging.to_array(img), (0.28, -0.08, -0.08), _rect_mask(s, q, q, 3 * q, 3 * q))
        )

    def t_patch_blue(img):
        return imaging.to_image(
            _region_tint(imaging.to_array(img), (-0.10, -0.04, 0.30), _rect_mask(s, q, 2 * q, 3 * q, s - 20))
        )

    def t_swap_warm(img):
        base = _draw_disc(img, (s // 2, s // 2), q, (200, 60, 40))
        return base

    def t_swap_cool(img):
        return _draw_square(img, (s // 2, s // 2), q - 10, (40, 90, 210))

    def t_move(img):
        return _draw_disc(img, (3 * q, s // 2), q // 2, (240, 200, 40))

    def t_insert(img):
        return _draw_disc(img, (s // 2, 3 * q), q // 2, (30, 180, 150))

    return [
        ("global_style", t_warm),
        ("global_style", t_cool),
        ("background", t_backdrop_green),
        ("background", t_backdrop_dusk),
        ("localized_style", t_patch_red),
        ("localized_style", t_patch_blue),
        ("object_replacement", t_swap_warm),
        ("object_replacement", t_swap_cool),
        ("motion", t_move),
        ("object_insertion", t_insert),
    ]


def _bases(index: int) -> tuple[Image.Image, Image.Image]:
    x = _cloud(1000 + 13 * index)
    y = _cloud(2000 + 17 * index)
    return x, y


def build_demo_suite(out_dir: str | Path) -> Manifest:
    """Write the 10-triplet suite (images + manifest.json) into out_dir."""
    out = Path(out_dir)
    img_dir = out / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    manifest = Manifest()
    for i, (edit_type, transform) in enumerate(_transforms()):
        x, y = _bases(i)
        variants = {"x": x, "x_edit": transform(x), "y": y, "y_edit": transform(y)}
        paths = {}
        for name, img in variants.items():
            # motion edits pair a moved object against its pre-move position
            if edit_type == "motion" and name in ("x", "y"):
                s = imaging.WORK_SIZE
                img = _draw_disc(img, (s // 4, s // 2), s // 8, (240, 200, 40))
            path = img_dir / f"{i:02d}_{name}.png"
            img.save(path)
            paths[name] = str(path.relative_to(out))
        manifest.entries.append(
            ManifestEntry(
                id=f"demo{i:02d}",
                x=paths["x"],
                x_edit=paths["x_edit"],
                y=paths["y"],
                y_edit=paths["y_edit"],
                edit_type=edit_type,
            )
        )
    manifest.base_dir = out
    manifest.save(out / "manifest.json")
    return manifest
