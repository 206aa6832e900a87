"""End-to-end edit transfer: verbalize -> embed -> invert -> capture ->
injected generation -> decode, plus the sweep and ablation drivers.

The engine owns one backbone exclusively; a sweep or ablation run shares the
verbalization, the cached inversion and the source-pass captures across its
variants, so only the conditioning changes between generations.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image, ImageFilter

from . import imaging
from .backbone import Conditioning, DiffusionBackbone, make_schedule
from .backbone.steering import build_color_steering
from .clipspace import TEXT_WINDOW
from .dataset import EDIT_TYPES
from .edit_embedding import NUM_IMAGE_TOKENS, EditEmbedder, compute_edit_direction
from .errors import ContractError
from .injection import InjectionConfig, Injector
from .inversion import InversionCache, invert_cached
from .vlm import ReplayVlmBackend, VlmClient

logger = logging.getLogger(__name__)

ABLATION_FLAGS = ("no_injection", "no_caption", "no_image_delta")
PROVENANCE_SCHEMA_VERSION = 1


@dataclass
class ExemplarTriplet:
    """The unit of work: exemplar pair, test image, optional ground truth."""

    x: Image.Image
    x_edit: Image.Image
    y: Image.Image
    y_edit: Image.Image | None = None
    edit_type: str = "global_style"
    id: str = ""

    def __post_init__(self):
        if self.edit_type not in EDIT_TYPES:
            raise ContractError(f"edit_type {self.edit_type!r} not in taxonomy {EDIT_TYPES}")
        self.x = imaging.to_work_size(self.x)
        self.x_edit = imaging.to_work_size(self.x_edit)
        self.y = imaging.to_work_size(self.y)
        if self.y_edit is not None:
            self.y_edit = imaging.to_work_size(self.y_edit)
        if not self.id:
            self.id = imaging.image_bytes_sha256(self.x)[:8] + imaging.image_bytes_sha256(self.y)[:8]

    @classmethod
    def from_paths(cls, x, x_edit, y, y_edit=None, edit_type="global_style", id="") -> "ExemplarTriplet":
        return cls(
            x=imaging.load_rgb(x),
            x_edit=imaging.load_rgb(x_edit),
            y=imaging.load_rgb(y),
            y_edit=imaging.load_rgb(y_edit) if y_edit else None,
            edit_type=edit_type,
            id=id,
        )


@dataclass
class EditOptions:
    lam: float = 0.65
    guidance_scale: float = 10.0
    gen_steps: int = 50
    inversion_steps: int = 1000
    seed: int = 0
    ablations: frozenset = frozenset()
    injection: InjectionConfig = field(default_factory=InjectionConfig)

    def __post_init__(self):
        self.ablations = frozenset(self.ablations)
        unknown = self.ablations - set(ABLATION_FLAGS)
        if unknown:
            raise ContractError(f"unknown ablation flags: {sorted(unknown)}")
        if self.gen_steps > self.inversion_steps:
            raise ContractError("gen_steps must not exceed inversion_steps")

    def to_dict(self) -> dict:
        return {
            "lambda": self.lam,
            "guidance_scale": self.guidance_scale,
            "gen_steps": self.gen_steps,
            "inversion_steps": self.inversion_steps,
            "seed": self.seed,
            "ablations": sorted(self.ablations),
            "injection": self.injection.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EditOptions":
        return cls(
            lam=d.get("lambda", 0.65),
            guidance_scale=d.get("guidance_scale", 10.0),
            gen_steps=d.get("gen_steps", 50),
            inversion_steps=d.get("inversion_steps", 1000),
            seed=d.get("seed", 0),
            ablations=frozenset(d.get("ablations", [])),
            injection=InjectionConfig.from_dict(d.get("injection", {})),
        )


@dataclass
class EditResult:
    image: Image.Image
    options_used: dict
    caption: str
    g_text: str
    timings: dict
    backbone_id: str
    vlm_id: str
    encoder_id: str
    triplet_id: str
    image_ids: dict
    conditioning_tokens: int = TEXT_WINDOW + NUM_IMAGE_TOKENS

    def provenance(self) -> dict:
        return {
            "schema_version": PROVENANCE_SCHEMA_VERSION,
            "triplet_id": self.triplet_id,
            "image_ids": self.image_ids,
            "options": self.options_used,
            "caption": self.caption,
            "g_text": self.g_text,
            "backbone_id": self.backbone_id,
            "vlm_id": self.vlm_id,
            "encoder_id": self.encoder_id,
            "conditioning_tokens": self.conditioning_tokens,
        }

    def save_bundle(self, out_dir: str | Path, image_name: str = "result.png") -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.image.save(out / image_name)
        (out / "provenance.json").write_text(json.dumps(self.provenance(), indent=2, sort_keys=True))
        (out / "timings.json").write_text(json.dumps(self.timings, indent=2, sort_keys=True))
        (out / "caption.txt").write_text(self.caption)
        return out


class _StageTimer:
    def __init__(self, on_stage=None):
        self.timings: dict[str, float] = {}
        self.on_stage = on_stage

    def run(self, name: str, fn):
        if self.on_stage is not None:
            self.on_stage(name)
        start = time.perf_counter()
        out = fn()
        self.timings[name] = round(time.perf_counter() - start, 4)
        return out


class EditEngine:
    """Real engine over a diffusion backbone plus the frozen encoders."""

    def __init__(
        self,
        backbone: DiffusionBackbone,
        embedder: EditEmbedder,
        vlm_client: VlmClient,
        cache_dir: str | Path | None = None,
    ):
        self.backbone = backbone
        self.embedder = embedder
        self.vlm = vlm_client
        self.cache = InversionCache(cache_dir) if cache_dir else None
        self.null_text = embedder.embed_caption("")
        self.injector = Injector(backbone, Conditioning.null(self.null_text))
        self.backbone_id = backbone.backbone_id
        self.vlm_id = vlm_client.backend.backend_id
        self.encoder_id = embedder.models.encoder_id

    @classmethod
    def build(
        cls,
        weights_dir: str | Path | None = None,
        cache_dir: str | Path | None = None,
        vlm_backend=None,
        seed: int = 7,
        device: str = "cpu",
    ) -> "EditEngine":
        backbone = DiffusionBackbone.build(weights_dir=weights_dir, seed=seed, device=device)
        embedder = EditEmbedder.build(weights_dir=weights_dir, seed=seed)
        backbone.steering = build_color_steering(embedder, backbone.codec, backbone.scheduler, seed=seed)
        client = VlmClient(vlm_backend if vlm_backend is not None else ReplayVlmBackend())
        return cls(backbone, embedder, client, cache_dir=cache_dir)

    # -- stage helpers shared by edit/sweep/ablate ---------------------------

    def _verbalize(self, triplet: ExemplarTriplet, opts: EditOptions) -> tuple[str, str]:
        if "no_caption" in opts.ablations:
            return "", ""
        v = self.vlm.verbalize(triplet.x, triplet.x_edit, triplet.y)
        return v.g_text, v.g_caption

    def _conditioning(self, triplet: ExemplarTriplet, opts: EditOptions, caption: str) -> Conditioning:
        y_tokens = self.embedder.project_image(triplet.y)
        if "no_image_delta" in opts.ablations:
            image_tokens = y_tokens
        else:
            x_tokens = self.embedder.project_image(triplet.x)
            xe_tokens = self.embedder.project_image(triplet.x_edit)
            image_tokens = compute_edit_direction(x_tokens, xe_tokens, y_tokens, opts.lam)
        text = self.embedder.embed_caption(caption) if caption else self.null_text
        return Conditioning(text=text, image_tokens=image_tokens.tokens)

    def _generate(self, y_noise, cond: Conditioning, opts: EditOptions, store) -> np.ndarray:
        config = replace(opts.injection, guidance_scale=opts.guidance_scale)
        if "no_injection" in opts.ablations:
            return self.injector.conditioned_denoise(
                y_noise, cond, opts.guidance_scale, make_schedule(opts.gen_steps)
            )
        return self.injector.injected_denoise(y_noise, cond, store, config, seed=opts.seed)

    def _result(self, triplet, opts, image, caption, g_text, timings) -> EditResult:
        return EditResult(
            image=image,
            options_used=opts.to_dict(),
            caption=caption,
            g_text=g_text,
            timings=dict(timings),
            backbone_id=self.backbone_id,
            vlm_id=self.vlm_id,
            encoder_id=self.encoder_id,
            triplet_id=triplet.id,
            image_ids={
                "x": imaging.image_bytes_sha256(triplet.x)[:16],
                "x_edit": imaging.image_bytes_sha256(triplet.x_edit)[:16],
                "y": imaging.image_bytes_sha256(triplet.y)[:16],
            },
        )

    # -- public operations ----------------------------------------------------

    def edit(self, triplet: ExemplarTriplet, opts: EditOptions, on_stage=None) -> EditResult:
        """Run the full transfer for one triplet."""
        timer = _StageTimer(on_stage)
        g_text, caption = timer.run("caption", lambda: self._verbalize(triplet, opts))
        cond = timer.run("embed", lambda: self._conditioning(triplet, opts, caption))
        inv, cache_hit = timer.run(
            "invert",
            lambda: invert_cached(
                self.backbone, triplet.y, self.injector.null_cond, opts.inversion_steps, self.cache
            ),
        )
        if "no_injection" in opts.ablations:
            store = None
            timer.timings["capture"] = 0.0
        else:
            store = timer.run(
                "capture",
                lambda: self.injector.record_source_pass(
                    inv.y_noise, make_schedule(opts.gen_steps), opts.injection
                ),
            )
        latent = timer.run("generate", lambda: self._generate(inv.y_noise, cond, opts, store))
        image = timer.run("decode", lambda: self.backbone.decode_latent(latent))
        timer.timings["total"] = round(sum(v for k, v in timer.timings.items() if k != "total"), 4)
        timer.timings["inversion_cache_hit"] = cache_hit
        return self._result(triplet, opts, image, caption, g_text, timer.timings)

    def lambda_sweep(self, triplet: ExemplarTriplet, lambdas: list[float], opts: EditOptions, on_stage=None) -> list[EditResult]:
        """One result per edit weight, reusing caption, inversion and captures."""
        if not lambdas:
            raise ContractError("lambda sweep needs a non-empty weight list")
        timer = _StageTimer(on_stage)
        g_text, caption = timer.run("caption", lambda: self._verbalize(triplet, opts))
        inv, _ = timer.run(
            "invert",
            lambda: invert_cached(
                self.backbone, triplet.y, self.injector.null_cond, opts.inversion_steps, self.cache
            ),
        )
        needs_store = "no_injection" not in opts.ablations
        store = (
            timer.run(
                "capture",
                lambda: self.injector.record_source_pass(
                    inv.y_noise, make_schedule(opts.gen_steps), opts.injection
                ),
            )
            if needs_store
            else None
        )
        results = []
        for lam in lambdas:
            lam_opts = replace(opts, lam=lam)
            cond = self._conditioning(triplet, lam_opts, caption)
            sub_timer = _StageTimer(on_stage)
            latent = sub_timer.run("generate", lambda: self._generate(inv.y_noise, cond, lam_opts, store))
            image = sub_timer.run("decode", lambda: self.backbone.decode_latent(latent))
            timings = dict(timer.timings, **sub_timer.timings)
            results.append(self._result(triplet, lam_opts, image, caption, g_text, timings))
        return results

    def ablate(self, triplet: ExemplarTriplet, opts: EditOptions, on_stage=None) -> dict[str, EditResult]:
        """The four flag sets {none, no_injection, no_caption, no_image_delta}."""
        out: dict[str, EditResult] = {}
        for flag in ("none",) + ABLATION_FLAGS:
            flags = frozenset() if flag == "none" else frozenset({flag})
            out[flag] = self.edit(triplet, replace(opts, ablations=flags), on_stage=on_stage)
        return out


class StubEngine:
    """Deterministic fake pipeline (blur + tint parameterized by the edit
    weight) behind the same interface, for service/UI tests without a
    backbone."""

    backbone_id = "stub"
    vlm_id = "replay"
    encoder_id = "stub"

    def __init__(self, cache_dir=None):
        self.vlm = VlmClient(ReplayVlmBackend())

    def _stub_image(self, triplet: ExemplarTriplet, lam: float) -> Image.Image:
        y = np.asarray(triplet.y, dtype=np.float32) / 255.0
        blurred = np.asarray(triplet.y.filter(ImageFilter.GaussianBlur(2)), dtype=np.float32) / 255.0
        x_mean = np.asarray(triplet.x, dtype=np.float32).reshape(-1, 3).mean(axis=0) / 255.0
        xe_mean = np.asarray(triplet.x_edit, dtype=np.float32).reshape(-1, 3).mean(axis=0) / 255.0
        tint = xe_mean - x_mean
        strength = float(np.clip(lam, 0.0, 1.5))
        out = np.clip(0.5 * (y + blurred) + strength * tint, 0.0, 1.0)
        return imaging.to_image(out)

    def edit(self, triplet: ExemplarTriplet, opts: EditOptions, on_stage=None) -> EditResult:
        timer = _StageTimer(on_stage)
        if "no_caption" in opts.ablations:
            g_text, caption = "", ""
            timer.run("caption", lambda: None)
        else:
            v = timer.run("caption", lambda: self.vlm.verbalize(triplet.x, triplet.x_edit, triplet.y))
            g_text, caption = v.g_text, v.g_caption
        timer.run("invert", lambda: None)
        timer.run("capture", lambda: None)
        lam = 0.0 if "no_image_delta" in opts.ablations else opts.lam
        image = timer.run("generate", lambda: self._stub_image(triplet, lam))
        if "no_injection" in opts.ablations:
            image = image.transpose(Image.FLIP_LEFT_RIGHT)  # visibly structure-breaking
        timer.run("decode", lambda: None)
        timer.timings["total"] = round(sum(v for k, v in timer.timings.items() if k != "total"), 4)
        return EditResult(
            image=image,
            options_used=opts.to_dict(),
            caption=caption,
            g_text=g_text,
            timings=timer.timings,
            backbone_id=self.backbone_id,
            vlm_id=self.vlm_id,
            encoder_id=self.encoder_id,
            triplet_id=triplet.id,
            image_ids={
                "x": imaging.image_bytes_sha256(triplet.x)[:16],
                "x_edit": imaging.image_bytes_sha256(triplet.x_edit)[:16],
                "y": imaging.image_bytes_sha256(triplet.y)[:16],
            },
        )

    def lambda_sweep(self, triplet, lambdas, opts, on_stage=None):
        if not lambdas:
            raise ContractError("lambda sweep needs a non-empty weight list")
        return [self.edit(triplet, replace(opts, lam=lam), on_stage=on_stage) for lam in lambdas]

    def ablate(self, triplet, opts, on_stage=None):
        out = {}
        for flag in ("none",) + ABLATION_FLAGS:
            flags = frozenset() if flag == "none" else frozenset({flag})
            out[flag] = self.edit(triplet, replace(opts, ablations=flags), on_stage=on_stage)
        return out


def build_engine(stub: bool = False, weights_dir=None, cache_dir=None, vlm_backend=None, seed: int = 7):
    if stub:
        return StubEngine(cache_dir=cache_dir)
    return EditEngine.build(weights_dir=weights_dir, cache_dir=cache_dir, vlm_backend=vlm_backend, seed=seed)


def save_sweep_bundle(results: list[EditResult], out_dir: str | Path) -> Path:
    """Sweep result bundle: one image per weight plus the shared caption."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    listing = []
    for res in results:
        lam = res.options_used["lambda"]
        name = f"result_lambda_{lam:g}.png"
        res.image.save(out / name)
        listing.append({"lambda": lam, "image": name})
    (out / "caption.txt").write_text(results[0].caption if results else "")
    (out / "provenance.json").write_text(
        json.dumps(
            {
                "schema_version": PROVENANCE_SCHEMA_VERSION,
                "sweep": listing,
                "base": results[0].provenance() if results else {},
            },
            indent=2,
            sort_keys=True,
        )
    )
    (out / "timings.json").write_text(json.dumps([r.timings for r in results], indent=2))
    return out
