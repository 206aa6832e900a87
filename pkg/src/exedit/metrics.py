"""Evaluation metrics: perceptual distance, structural similarity, and the
three embedding-space alignment scores, plus dataset-level aggregation.

Perceptual distance follows the deep-feature recipe over a frozen VGG16
feature stack: unit-normalize each selected activation along channels,
average squared differences spatially, sum over layers. Structural
similarity uses the standard 11x11 Gaussian window (sigma 1.5) with
K1=0.01, K2=0.03 on a 255 dynamic range. The alignment scores are plain
cosines in the shared 768-d embedding space, with the zero-vector case
defined as 0 so the identity edit scores 0 instead of NaN.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
from PIL import Image
from scipy.ndimage import gaussian_filter

from . import imaging
from .clipspace import EmbeddingModels, seeded_generator
from .errors import ConfigurationError

logger = logging.getLogger(__name__)

SSIM_K1, SSIM_K2, SSIM_L = 0.01, 0.03, 255.0
SSIM_SIGMA, SSIM_WIN = 1.5, 11

VGG_CFG = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512]
# Indices (exclusive) of the five tap points in the layer list built below:
# relu1_2, relu2_2, relu3_3, relu4_3, relu5_3.
VGG_SLICES = (4, 9, 16, 23, 30)


class VggFeatures(nn.Module):
    """VGG16 convolutional stack; weights loaded or deterministically seeded."""

    def __init__(self, seed: int = 505):
        super().__init__()
        layers: list[nn.Module] = []
        cin = 3
        for v in VGG_CFG:
            if v == "M":
                layers.append(nn.MaxPool2d(2, 2))
            else:
                layers += [nn.Conv2d(cin, v, 3, padding=1), nn.ReLU(inplace=True)]
                cin = v
        self.layers = nn.ModuleList(layers)
        g = seeded_generator(seed)
        with torch.no_grad():
            for m in self.layers:
                if isinstance(m, nn.Conv2d):
                    fan_in = m.weight[0].numel()
                    m.weight.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=g)
                    m.bias.zero_()
        self.eval()
        self.requires_grad_(False)

    @torch.no_grad()
    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        h = x
        prev = 0
        for stop in VGG_SLICES:
            for i in range(prev, stop):
                h = self.layers[i](h)
            feats.append(h)
            prev = stop
        return feats


def _unit_normalize(t: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
    return t / (torch.sqrt((t * t).sum(dim=1, keepdim=True)) + eps)


def _img_to_pm1(img: Image.Image) -> torch.Tensor:
    x = torch.from_numpy(np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0)
    return x.permute(2, 0, 1).unsqueeze(0) * 2.0 - 1.0


class PerceptualDistance:
    def __init__(self, weights_dir: str | Path | None = None, seed: int = 505):
        self.net = VggFeatures(seed=seed)
        self.net_id = f"vgg16-feat/seed{seed}"
        if weights_dir is not None:
            wpath = Path(weights_dir) / "vgg16_features.pt"
            if not wpath.exists():
                raise ConfigurationError(f"perceptual net weights not found: {wpath}")
            self.net.load_state_dict(torch.load(wpath, map_location="cpu"))
            self.net_id = f"vgg16-feat/{Path(weights_dir).name}"

    @torch.no_grad()
    def __call__(self, a: Image.Image, b: Image.Image) -> float:
        if a.size != b.size:
            logger.warning("perceptual distance size mismatch %s vs %s; resizing second", a.size, b.size)
            b = b.resize(a.size, Image.BICUBIC)
        fa = self.net(_img_to_pm1(a))
        fb = self.net(_img_to_pm1(b))
        total = 0.0
        for x, y in zip(fa, fb):
            d = (_unit_normalize(x) - _unit_normalize(y)) ** 2
            total += float(d.sum(dim=1).mean())
        return total


def ssim(a: Image.Image | np.ndarray, b: Image.Image | np.ndarray) -> float:
    """Mean structural similarity over channels, Gaussian-weighted window."""
    xa = np.asarray(a.convert("RGB") if isinstance(a, Image.Image) else a, dtype=np.float64)
    xb = np.asarray(b.convert("RGB") if isinstance(b, Image.Image) else b, dtype=np.float64)
    if xa.shape != xb.shape:
        bb = imaging.to_image(xb / 255.0).resize((xa.shape[1], xa.shape[0]), Image.BICUBIC)
        logger.warning("ssim size mismatch; resized second image")
        xb = np.asarray(bb, dtype=np.float64)
    if xa.ndim == 2:
        xa, xb = xa[:, :, None], xb[:, :, None]
    c1 = (SSIM_K1 * SSIM_L) ** 2
    c2 = (SSIM_K2 * SSIM_L) ** 2
    truncate = ((SSIM_WIN - 1) / 2) / SSIM_SIGMA
    pad = (SSIM_WIN - 1) // 2

    def blur(x):
        return gaussian_filter(x, sigma=SSIM_SIGMA, truncate=truncate)

    vals = []
    for c in range(xa.shape[2]):
        x, y = xa[:, :, c], xb[:, :, c]
        ux, uy = blur(x), blur(y)
        vx = blur(x * x) - ux * ux
        vy = blur(y * y) - uy * uy
        vxy = blur(x * y) - ux * uy
        s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        vals.append(float(s[pad:-pad, pad:-pad].mean()))
    return float(np.mean(vals))


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity with the zero-vector case defined as 0."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < 1e-12 or nv < 1e-12:
        return 0.0
    return float(np.dot(u, v) / (nu * nv))


class MetricSuite:
    """The five metrics bound to one frozen encoder pair."""

    def __init__(self, models: EmbeddingModels, perceptual: PerceptualDistance | None = None):
        self.models = models
        self.perceptual = perceptual if perceptual is not None else PerceptualDistance()

    def lpips(self, a: Image.Image, b: Image.Image) -> float:
        return self.perceptual(a, b)

    def ssim(self, a: Image.Image, b: Image.Image) -> float:
        return ssim(a, b)

    def _img_emb(self, img: Image.Image) -> np.ndarray:
        return self.models.image_encoder.encode(img).numpy().astype(np.float64)

    def _txt_emb(self, text: str) -> np.ndarray:
        return self.models.text_encoder.pooled(text).numpy().astype(np.float64)

    def clip_score(self, image: Image.Image, caption: str) -> float:
        """100 x cosine(image, caption), floored at 0."""
        c = cosine(self._img_emb(image), self._txt_emb(caption))
        return float(max(0.0, 100.0 * c))

    def directional_similarity(self, y: Image.Image, y_hat: Image.Image, caption: str) -> float:
        """Cosine between the image-embedding change and the caption embedding."""
        delta = self._img_emb(y_hat) - self._img_emb(y)
        return cosine(delta, self._txt_emb(caption))

    def s_visual(self, x: Image.Image, x_edit: Image.Image, y: Image.Image, y_hat: Image.Image) -> float:
        """Cosine between the exemplar embedding change and the output change."""
        d_exemplar = self._img_emb(x_edit) - self._img_emb(x)
        d_output = self._img_emb(y_hat) - self._img_emb(y)
        return cosine(d_exemplar, d_output)


METRIC_COLUMNS = ("lpips", "ssim", "clip_score", "dir_sim", "s_visual")


@dataclass
class MetricReport:
    rows: list[dict] = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    failures: list[dict] = field(default_factory=list)

    def compute_aggregates(self) -> None:
        self.aggregates = {}
        for col in METRIC_COLUMNS:
            vals = [r[col] for r in self.rows if r.get(col) is not None]
            self.aggregates[col] = float(np.mean(vals)) if vals else None
        self.aggregates["num_rows"] = len(self.rows)
        self.aggregates["num_failures"] = len(self.failures)

    def to_json(self, path: str | Path) -> None:
        payload = {
            "schema_version": 1,
            "rows": self.rows,
            "aggregates": self.aggregates,
            "metadata": self.metadata,
            "failures": self.failures,
        }
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(("id",) + METRIC_COLUMNS)
            for r in self.rows:
                writer.writerow([r["id"]] + [r.get(c) for c in METRIC_COLUMNS])

    def summary_lines(self) -> list[str]:
        lines = [f"{'metric':<12} mean over {self.aggregates.get('num_rows', 0)} samples"]
        for col in METRIC_COLUMNS:
            v = self.aggregates.get(col)
            lines.append(f"{col:<12} {'n/a' if v is None else f'{v:.4f}'}")
        if self.aggregates.get("num_failures"):
            lines.append(f"failures     {self.aggregates['num_failures']}")
        return lines


def _find_result(results_dir: Path, entry_id: str) -> tuple[Path | None, str]:
    """Locate an entry's generated image and caption inside a results tree."""
    bundle = results_dir / entry_id
    if (bundle / "result.png").exists():
        caption_file = bundle / "caption.txt"
        caption = caption_file.read_text().strip() if caption_file.exists() else ""
        return bundle / "result.png", caption
    flat = results_dir / f"{entry_id}.png"
    if flat.exists():
        return flat, ""
    return None, ""


def evaluate(manifest, results_dir: str | Path, suite: MetricSuite, metadata: dict | None = None) -> MetricReport:
    """Score every manifest entry against its result bundle.

    Structural metrics compare the generated image against the ground-truth
    edited test image when it exists; rows without ground truth keep those
    cells null. Rows whose result is missing or unreadable are reported as
    failures and excluded from the means.
    """
    results_dir = Path(results_dir)
    report = MetricReport(metadata=dict(metadata or {}))
    report.metadata.setdefault("perceptual_net", suite.perceptual.net_id)
    report.metadata.setdefault("encoder", suite.models.encoder_id)
    for entry in manifest.entries:
        try:
            result_path, caption = _find_result(results_dir, entry.id)
            if result_path is None:
                raise FileNotFoundError(f"no result for {entry.id} under {results_dir}")
            y_hat = imaging.load_work_image(result_path)
            resolve = manifest.resolve if hasattr(manifest, "resolve") else (lambda p: p)
            x = imaging.load_work_image(resolve(entry.x))
            x_edit = imaging.load_work_image(resolve(entry.x_edit))
            y = imaging.load_work_image(resolve(entry.y))
            row: dict = {"id": entry.id}
            if entry.y_edit:
                y_edit = imaging.load_work_image(resolve(entry.y_edit))
                row["lpips"] = suite.lpips(y_hat, y_edit)
                row["ssim"] = suite.ssim(y_hat, y_edit)
            else:
                row["lpips"] = None
                row["ssim"] = None
            if caption:
                row["clip_score"] = suite.clip_score(y_hat, caption)
                row["dir_sim"] = suite.directional_similarity(y, y_hat, caption)
            else:
                row["clip_score"] = None
                row["dir_sim"] = None
            row["s_visual"] = suite.s_visual(x, x_edit, y, y_hat)
            report.rows.append(row)
        except Exception as exc:  # one bad sample must not sink the report
            report.failures.append({"id": entry.id, "error": str(exc)})
    report.compute_aggregates()
    return report
