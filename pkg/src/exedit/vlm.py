"""Multimodal VLM client: verbalizes the edit in an exemplar pair.

Two-step prompt chain: the exemplar pair is composed into a 2x1 grid and
described (``g_text``), then that description is spliced into a captioning
prompt against the test image to produce the target caption (``g_caption``).
An instruction-form summary (``g_edit_inst``) is available for exporting to
instruction-conditioned editors.

Word caps are hard post-conditions enforced here regardless of backend
behavior. The templates below are fixed strings; only the marked splice
point is substituted.
"""
from __future__ import annotations

import base64
import hashlib
import logging
import os
import re
from dataclasses import dataclass, field

import httpx
import numpy as np
from PIL import Image

from . import imaging
from .errors import GenerationError, TransportError

logger = logging.getLogger(__name__)

VLM_URL_ENV = "EXEDIT_VLM_URL"

GRID_DESCRIBE_PROMPT = (
    "The given image is a 2x1 grid of two individual images. The image on the right is an "
    "edited version of the image on the left. Give a detailed explanation of the edits "
    "required to obtain the second image starting from the first image. The suggested edits "
    "can include addition/removal of objects, replacement of objects, change of style, "
    "change of background, motion, etc. Describe ONLY the edits, and do not mention any "
    "elements that don’t require editing. Ignore minor changes and focus on a broad "
    "holistic view of the required edit. Give an answer in 100 words or less. Your answer "
    "should be in a single paragraph. Strictly adhere to this format."
)

CAPTION_PROMPT_TEMPLATE = (
    "Generate a one line description of an image generated after applying the following "
    "edit on this image - “{description}”.\n"
    "Generate the caption in one line based on the content of the input image. If any part "
    "of the mentioned edit is not applicable to the given image, ignore it. Make sure that "
    "your caption completely describes the final image that would be obtained after "
    "applying this edit on the given image. The generated caption should be in one line, "
    "and should contain less than 20 words. Do not exceed 20 words."
)

INSTRUCTION_PROMPT_TEMPLATE = (
    "Generate a one line edit instruction to edit the given image. The edit should follow "
    "the instruction in this longer edit - “{description}”\n"
    "Generate the edit instruction in a single line based on the content of the input "
    "image. If any part of the mentioned image is not applicable to the given image, "
    "ignore it. Make sure that your instruction is sufficient to replicate the describe "
    "edit. The generated instruction should be in one line, and should contain less than "
    "20 words. Do not exceed 20 words."
)

DESCRIBE_WORD_CAP = 100
CAPTION_WORD_CAP = 40
INSTRUCTION_WORD_CAP = 20

_SENTENCE_END = re.compile(r"[.!?][\"')”]?$")


@dataclass
class VlmRequest:
    image: Image.Image
    prompt: str
    max_words: int = 100
    decode_temperature: float = 0.0

    def __post_init__(self):
        if not self.prompt:
            raise ValueError("prompt must be non-empty")
        if self.max_words <= 0:
            raise ValueError("max_words must be positive")
        if self.decode_temperature < 0:
            raise ValueError("decode_temperature must be >= 0")


@dataclass
class EditVerbalization:
    g_text: str
    g_caption: str
    g_edit_inst: str | None = None
    provenance: dict = field(default_factory=dict)


def enforce_word_cap(text: str, cap: int) -> str:
    """Single-paragraph text capped at ``cap`` words.

    Over-length replies are cut at the last sentence boundary inside the cap
    when one exists, otherwise at the cap word.
    """
    flat = " ".join(text.split())
    words = flat.split(" ")
    if len(words) <= cap:
        return flat
    head = words[:cap]
    cut = len(head)
    for i in range(len(head), 0, -1):
        if _SENTENCE_END.search(head[i - 1]):
            cut = i
            break
    logger.warning("reply of %d words exceeds the %d-word cap; truncated", len(words), cap)
    return " ".join(head[:cut])


def compose_grid(x: Image.Image, x_edit: Image.Image) -> Image.Image:
    """2x1 grid, original on the left, edited on the right (1024x512 for 512 inputs)."""
    if x.size != x_edit.size or x.size != (imaging.WORK_SIZE, imaging.WORK_SIZE):
        x = imaging.to_work_size(x)
        x_edit = imaging.to_work_size(x_edit)
    return imaging.hstack(x, x_edit)


class HttpVlmBackend:
    """Remote backend speaking JSON: {image: base64 PNG, prompt, max_new_tokens,
    temperature} -> {text}."""

    def __init__(self, url: str | None = None, timeout: float = 120.0):
        self.url = url or os.environ.get(VLM_URL_ENV, "")
        if not self.url:
            raise TransportError(f"no VLM backend URL (set {VLM_URL_ENV} or pass --vlm-url)")
        self.timeout = timeout

    @property
    def backend_id(self) -> str:
        return f"http:{self.url}"

    def complete(self, image: Image.Image, prompt: str, max_new_tokens: int, temperature: float) -> str:
        payload = {
            "image": base64.b64encode(imaging.png_bytes(image)).decode("ascii"),
            "prompt": prompt,
            "max_new_tokens": max_new_tokens,
            "temperature": temperature,
        }
        try:
            resp = httpx.post(self.url, json=payload, timeout=self.timeout)
            resp.raise_for_status()
        except (httpx.TransportError, httpx.HTTPStatusError) as exc:
            raise TransportError(f"VLM backend unavailable: {exc}") from exc
        text = resp.json().get("text", "")
        if not text.strip():
            raise GenerationError("VLM backend returned an empty reply")
        return text


class ReplayVlmBackend:
    """Deterministic in-process backend for tests and stub mode.

    Replays canned responses keyed by prompt hash when provided; otherwise
    synthesizes a stable description from image statistics, so identical
    (image, prompt) pairs always yield identical text.
    """

    def __init__(self, responses: dict[str, str] | None = None):
        self.responses = dict(responses or {})

    @property
    def backend_id(self) -> str:
        return "replay"

    @staticmethod
    def prompt_key(prompt: str) -> str:
        return hashlib.sha256(prompt.encode("utf-8")).hexdigest()[:16]

    def record(self, prompt: str, text: str) -> None:
        self.responses[self.prompt_key(prompt)] = text

    def complete(self, image: Image.Image, prompt: str, max_new_tokens: int, temperature: float) -> str:
        key = self.prompt_key(prompt)
        if key in self.responses:
            return self.responses[key]
        small = image.convert("RGB").resize((8, 8), Image.BICUBIC)
        means = [int(v) for v in np.asarray(small).reshape(-1, 3).mean(axis=0)]
        r, g, b = means
        tone = ("warm red" if r >= g and r >= b else "green") if max(r, g, b) != b else "cool blue"
        brightness = "bright" if (r + g + b) / 3 > 127 else "dark"
        sig = hashlib.sha256(small.tobytes() + prompt.encode("utf-8")).hexdigest()[:6]
        if "caption" in prompt.lower():
            return f"a {brightness} scene rendered in {tone} tones, variant {sig}."
        if "edit instruction" in prompt.lower():
            return f"shift the image toward {tone} {brightness} tones ({sig})."
        return (
            f"The right image shifts the scene toward {tone}, {brightness} tones while the "
            f"layout stays unchanged (variant {sig})."
        )


class VlmClient:
    """The prompt chain over a pluggable backend."""

    def __init__(self, backend, caption_word_cap: int = CAPTION_WORD_CAP):
        self.backend = backend
        self.caption_word_cap = caption_word_cap

    def describe_edit(self, grid: Image.Image, temperature: float = 0.0) -> str:
        reply = self.backend.complete(grid, GRID_DESCRIBE_PROMPT, max_new_tokens=300, temperature=temperature)
        return enforce_word_cap(reply, DESCRIBE_WORD_CAP)

    def caption_edited(self, y: Image.Image, g_text: str, temperature: float = 0.0) -> str:
        if not g_text:
            raise ValueError("g_text must be non-empty")
        prompt = CAPTION_PROMPT_TEMPLATE.format(description=g_text)
        reply = self.backend.complete(y, prompt, max_new_tokens=120, temperature=temperature)
        return enforce_word_cap(reply, self.caption_word_cap)

    def edit_instruction(self, y: Image.Image, g_text: str, temperature: float = 0.0) -> str:
        if not g_text:
            raise ValueError("g_text must be non-empty")
        prompt = INSTRUCTION_PROMPT_TEMPLATE.format(description=g_text)
        reply = self.backend.complete(y, prompt, max_new_tokens=80, temperature=temperature)
        return enforce_word_cap(reply, INSTRUCTION_WORD_CAP)

    def verbalize(
        self,
        x: Image.Image,
        x_edit: Image.Image,
        y: Image.Image,
        with_instruction: bool = False,
    ) -> EditVerbalization:
        grid = compose_grid(x, x_edit)
        g_text = self.describe_edit(grid)
        g_caption = self.caption_edited(y, g_text)
        g_inst = self.edit_instruction(y, g_text) if with_instruction else None
        return EditVerbalization(
            g_text=g_text,
            g_caption=g_caption,
            g_edit_inst=g_inst,
            provenance={
                "backend": self.backend.backend_id,
                "prompts": ["grid_describe", "caption", *(["instruction"] if with_instruction else [])],
                "caption_word_cap": self.caption_word_cap,
            },
        )
