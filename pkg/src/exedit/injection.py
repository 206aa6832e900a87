"""Source-pass capture and target-pass injection.

The source pass denoises the inverted latent unconditionally and records,
per timestep, the residual feature ``f`` at the feature layer and the
self-attention ``Q``/``K`` at the configured decoder layers. The target pass
denoises the same latent conditioned on the edit embedding, with the
recorded tensors REPLACING the target's own at every injected site (values
``V`` stay the target's). Replacement is exact substitution, never a blend;
with injection fractions at zero the instrumented pass is bitwise identical
to an uninstrumented one.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import tensor_io
from .backbone import Conditioning, DiffusionBackbone
from .errors import ComputationError, ConfigurationError, ContractError

KIND_FEATURE, KIND_Q, KIND_K = "f", "Q", "K"


@dataclass
class InjectionConfig:
    feature_layer: int = 4
    qk_layers: tuple[int, ...] = tuple(range(4, 12))  # decoder indices 4..11 inclusive
    feature_step_fraction: float = 1.0
    qk_step_fraction: float = 1.0
    guidance_scale: float = 10.0

    def validate(self, num_decoder_layers: int) -> None:
        for layer in (self.feature_layer, *self.qk_layers):
            if not 0 <= layer < num_decoder_layers:
                raise ConfigurationError(
                    f"layer {layer} outside decoder range [0, {num_decoder_layers})"
                )
        for frac in (self.feature_step_fraction, self.qk_step_fraction):
            if not 0.0 <= frac <= 1.0:
                raise ConfigurationError(f"step fraction {frac} outside [0, 1]")

    def to_dict(self) -> dict:
        return {
            "feature_layer": self.feature_layer,
            "qk_layers": list(self.qk_layers),
            "feature_step_fraction": self.feature_step_fraction,
            "qk_step_fraction": self.qk_step_fraction,
            "guidance_scale": self.guidance_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InjectionConfig":
        return cls(
            feature_layer=d.get("feature_layer", 4),
            qk_layers=tuple(d.get("qk_layers", range(4, 12))),
            feature_step_fraction=d.get("feature_step_fraction", 1.0),
            qk_step_fraction=d.get("qk_step_fraction", 1.0),
            guidance_scale=d.get("guidance_scale", 10.0),
        )


class CaptureStore:
    """Per-(timestep, layer, kind) tensors recorded from the source pass."""

    def __init__(self, schedule: list[int], feature_layer: int, qk_layers: tuple[int, ...]):
        self.schedule = list(schedule)
        self.feature_layer = feature_layer
        self.qk_layers = tuple(qk_layers)
        self._data: dict[tuple[int, int, str], torch.Tensor] = {}
        self.source_final_latent: np.ndarray | None = None

    def put(self, t: int, layer: int, kind: str, tensor: torch.Tensor) -> None:
        self._data[(t, layer, kind)] = tensor.detach().clone()

    def get(self, t: int, layer: int, kind: str) -> torch.Tensor:
        key = (t, layer, kind)
        if key not in self._data:
            raise ContractError(f"capture store missing (timestep={t}, layer={layer}, kind={kind})")
        return self._data[key]

    def __len__(self) -> int:
        return len(self._data)

    def validate_complete(self) -> None:
        for t in self.schedule:
            expected = [(t, self.feature_layer, KIND_FEATURE)]
            expected += [(t, l, k) for l in self.qk_layers for k in (KIND_Q, KIND_K)]
            for key in expected:
                if key not in self._data:
                    raise ContractError(
                        f"capture store incomplete: missing (timestep={key[0]}, layer={key[1]}, kind={key[2]})"
                    )
        for key, tensor in self._data.items():
            if not torch.isfinite(tensor).all():
                raise ComputationError(f"non-finite capture at {key}")

    def spill(self, out_dir: str | Path) -> Path:
        """Write all captures to disk (header + raw float32 per tensor)."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for (t, layer, kind), tensor in self._data.items():
            tensor_io.write_tensor(out / f"{t}_{layer}_{kind}.f32", tensor.numpy())
        meta = {
            "schedule": self.schedule,
            "feature_layer": self.feature_layer,
            "qk_layers": list(self.qk_layers),
        }
        if self.source_final_latent is not None:
            tensor_io.write_tensor(out / "source_final.f32", self.source_final_latent)
        (out / "store.json").write_text(json.dumps(meta))
        return out

    @classmethod
    def load(cls, in_dir: str | Path) -> "CaptureStore":
        src = Path(in_dir)
        meta = json.loads((src / "store.json").read_text())
        store = cls(meta["schedule"], meta["feature_layer"], tuple(meta["qk_layers"]))
        for f in src.glob("*_*_*.f32"):
            t, layer, kind = f.stem.split("_")
            arr, _ = tensor_io.read_tensor(f)
            store._data[(int(t), int(layer), kind)] = torch.from_numpy(arr)
        final = src / "source_final.f32"
        if final.exists():
            store.source_final_latent, _ = tensor_io.read_tensor(final)
        return store


class RecordingTaps:
    """Pass-through taps that copy f/Q/K into a CaptureStore."""

    def __init__(self, store: CaptureStore):
        self.store = store
        self.t: int | None = None

    def begin_step(self, t: int, step_index: int, total_steps: int) -> None:
        self.t = t

    def feature(self, layer: int, f: torch.Tensor) -> torch.Tensor:
        if layer == self.store.feature_layer:
            self.store.put(self.t, layer, KIND_FEATURE, f)
        return f

    def qk(self, layer: int, q: torch.Tensor, k: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if layer in self.store.qk_layers:
            self.store.put(self.t, layer, KIND_Q, q)
            self.store.put(self.t, layer, KIND_K, k)
        return q, k


class InjectingTaps:
    """Taps that substitute stored source tensors at active steps.

    ``audit`` (optional list) receives one record per substitution with the
    post-decision tensor, so tests can assert bit-level replacement.
    """

    def __init__(self, store: CaptureStore, config: InjectionConfig, total_steps: int, audit: list | None = None):
        self.store = store
        self.config = config
        self.total_steps = total_steps
        self.audit = audit
        self.t: int | None = None
        self._feature_on = False
        self._qk_on = False

    def begin_step(self, t: int, step_index: int, total_steps: int) -> None:
        self.t = t
        self._feature_on = step_index < round(self.config.feature_step_fraction * total_steps)
        self._qk_on = step_index < round(self.config.qk_step_fraction * total_steps)

    def _expand(self, stored: torch.Tensor, batch: int) -> torch.Tensor:
        if stored.shape[0] == batch:
            return stored
        return stored.expand(batch, *stored.shape[1:]).contiguous()

    def feature(self, layer: int, f: torch.Tensor) -> torch.Tensor:
        if not (self._feature_on and layer == self.config.feature_layer):
            return f
        out = self._expand(self.store.get(self.t, layer, KIND_FEATURE), f.shape[0])
        if self.audit is not None:
            self.audit.append({"t": self.t, "layer": layer, "kind": KIND_FEATURE, "tensor": out.clone()})
        return out

    def qk(self, layer: int, q: torch.Tensor, k: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if not (self._qk_on and layer in self.config.qk_layers):
            return q, k
        q_out = self._expand(self.store.get(self.t, layer, KIND_Q), q.shape[0])
        k_out = self._expand(self.store.get(self.t, layer, KIND_K), k.shape[0])
        if self.audit is not None:
            self.audit.append({"t": self.t, "layer": layer, "kind": KIND_Q, "tensor": q_out.clone()})
            self.audit.append({"t": self.t, "layer": layer, "kind": KIND_K, "tensor": k_out.clone()})
        return q_out, k_out


class Injector:
    """Runs source capture and injected/plain conditioned denoising."""

    def __init__(self, backbone: DiffusionBackbone, null_cond: Conditioning):
        self.backbone = backbone
        self.null_cond = null_cond

    @torch.no_grad()
    def record_source_pass(
        self,
        y_noise: np.ndarray | torch.Tensor,
        schedule: list[int],
        config: InjectionConfig | None = None,
    ) -> CaptureStore:
        """Unconditional denoising of y_noise, capturing f/Q/K over the schedule."""
        config = config or InjectionConfig()
        config.validate(self.backbone.unet.num_decoder_layers)
        store = CaptureStore(schedule, config.feature_layer, config.qk_layers)
        taps = RecordingTaps(store)
        x = self._as_latent(y_noise)
        text_ctx, img_ctx = self.null_cond.torch_batch(self.backbone.device)
        steps = list(reversed(schedule))
        for i, t in enumerate(steps):
            taps.begin_step(t, i, len(steps))
            t_to = steps[i + 1] if i + 1 < len(steps) else -1
            eps = self.backbone.predict_eps(x, t, text_ctx, img_ctx, taps=taps)
            x = self.backbone.scheduler.step(x, eps, t, t_to)
            if not torch.isfinite(x).all():
                raise ComputationError(f"source pass diverged at timestep {t}")
        store.source_final_latent = x.squeeze(0).cpu().numpy()
        store.validate_complete()
        return store

    @torch.no_grad()
    def injected_denoise(
        self,
        y_noise: np.ndarray | torch.Tensor,
        g,
        store: CaptureStore,
        config: InjectionConfig,
        seed: int = 0,
        schedule: list[int] | None = None,
        audit: list | None = None,
    ) -> np.ndarray:
        """Conditioned denoising with source tensors substituted at active sites.

        ``g`` is an edit embedding (anything exposing ``caption_embedding``
        and ``image_tokens``) or a prebuilt Conditioning.
        """
        config.validate(self.backbone.unet.num_decoder_layers)
        if schedule is not None and list(schedule) != list(store.schedule):
            raise ContractError("denoising schedule differs from the capture schedule")
        if store.feature_layer != config.feature_layer or store.qk_layers != tuple(config.qk_layers):
            raise ContractError("injection layers differ from the captured layers")
        cond = g if isinstance(g, Conditioning) else Conditioning.from_edit_embedding(g)
        taps = InjectingTaps(store, config, total_steps=len(store.schedule), audit=audit)
        return self._cfg_loop(y_noise, cond, config.guidance_scale, store.schedule, taps)

    @torch.no_grad()
    def conditioned_denoise(
        self,
        y_noise: np.ndarray | torch.Tensor,
        g,
        guidance_scale: float,
        schedule: list[int],
    ) -> np.ndarray:
        """Plain conditioned denoising from y_noise (the no-injection path)."""
        cond = g if isinstance(g, Conditioning) else Conditioning.from_edit_embedding(g)
        return self._cfg_loop(y_noise, cond, guidance_scale, schedule, taps=None)

    def _as_latent(self, y_noise) -> torch.Tensor:
        if isinstance(y_noise, np.ndarray):
            y_noise = torch.from_numpy(np.asarray(y_noise, dtype=np.float32))
        if y_noise.dim() == 3:
            y_noise = y_noise.unsqueeze(0)
        return y_noise.to(self.backbone.device)

    def _cfg_loop(self, y_noise, cond: Conditioning, guidance_scale: float, schedule: list[int], taps) -> np.ndarray:
        x = self._as_latent(y_noise)
        cond_text, cond_img = cond.torch_batch(self.backbone.device)
        if guidance_scale == 1.0:
            text_ctx, img_ctx = cond_text, cond_img
        else:
            null_text, null_img = self.null_cond.torch_batch(self.backbone.device)
            text_ctx = torch.cat([null_text, cond_text], dim=0)
            img_ctx = torch.cat([null_img, cond_img], dim=0)
        steps = list(reversed(schedule))
        for i, t in enumerate(steps):
            if taps is not None:
                taps.begin_step(t, i, len(steps))
            t_to = steps[i + 1] if i + 1 < len(steps) else -1
            if guidance_scale == 1.0:
                eps = self.backbone.predict_eps(x, t, text_ctx, img_ctx, taps=taps)
            else:
                eps_pair = self.backbone.predict_eps(
                    x.expand(2, -1, -1, -1).contiguous(), t, text_ctx, img_ctx, taps=taps
                )
                eps_u, eps_c = eps_pair[0:1], eps_pair[1:2]
                eps = eps_u + guidance_scale * (eps_c - eps_u)
            x = self.backbone.scheduler.step(x, eps, t, t_to)
            if not torch.isfinite(x).all():
                raise ComputationError(f"denoising diverged at timestep {t}")
        return x.squeeze(0).cpu().numpy()
