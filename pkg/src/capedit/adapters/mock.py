"""Deterministic mock adapters.

These satisfy every adapter contract without model weights, so the whole
pipeline (captioning, after-caption generation, inversion, generation,
metrics) runs end-to-end offline and bitwise-reproducibly.

Mock embedding hash procedure
-----------------------------
Embeddings are derived from SHA-256 so any independent implementation can
reproduce them exactly:

* ``stream(key, n)`` yields ``n`` floats in [-1, 1): for block b = 0, 1, ...
  compute ``SHA-256(utf8(key) + "|" + str(b))``; split the 32-byte digest
  into four big-endian unsigned 64-bit integers ``u``; map each to
  ``u / 2**63 - 1.0``. Consume in digest order.
* Token vector for token ``tok`` at position ``i``:
  unit-normalized ``stream(f"tok|{seed}|{i}|{tok}", embed_dim)``.
  Tokens are ``text.strip().lower().split()``, truncated/padded to the
  context length with the empty-string token.
* Pooled vector for text ``s``: unit-normalized
  ``stream(f"pooled|{seed}|{s}", embed_dim)``.
* Image vector: unit-normalized ``stream(f"img|{seed}|{content_id}", embed_dim)``
  where ``content_id`` is the SHA-256 of the RGB pixel bytes.
"""

from __future__ import annotations

import hashlib
import logging
import re

import numpy as np
from PIL import Image

from ..errors import ContractError
from .base import Captioner, Diffusion, Embedder, TextGenerator
from .types import ImageEmbedding, LatentImage, LlmConfig, TextConditioning, image_content_id

logger = logging.getLogger(__name__)


def hash_stream(key: str, n: int) -> np.ndarray:
    """Deterministic floats in [-1, 1) from SHA-256 blocks (see module doc)."""
    out = np.empty(n, dtype=np.float64)
    filled = 0
    block = 0
    while filled < n:
        digest = hashlib.sha256(f"{key}|{block}".encode("utf-8")).digest()
        for off in range(0, 32, 8):
            if filled >= n:
                break
            u = int.from_bytes(digest[off:off + 8], "big")
            out[filled] = u / 2.0**63 - 1.0
            filled += 1
        block += 1
    return out.astype(np.float32)


def _unit(v: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise ContractError("cannot normalize a zero vector")
    return (v / norm).astype(np.float32)


class MockEmbedder(Embedder):
    """Seeded-hash text/image embedder; fixed context length and dimension."""

    def __init__(self, seed: int = 0, context_length: int = 16, embed_dim: int = 32):
        super().__init__()
        self.seed = seed
        self._context_length = context_length
        self._embed_dim = embed_dim
        self.model_id = f"mock-embedder-s{seed}-c{context_length}-d{embed_dim}"

    @property
    def context_length(self) -> int:
        return self._context_length

    @property
    def embed_dim(self) -> int:
        return self._embed_dim

    def _token_vector(self, token: str, position: int) -> np.ndarray:
        return _unit(hash_stream(f"tok|{self.seed}|{position}|{token}", self._embed_dim))

    def _encode_tokens(self, text: str) -> np.ndarray:
        tokens = text.strip().lower().split()
        if len(tokens) > self._context_length:
            logger.warning(
                "text of %d tokens truncated to context length %d",
                len(tokens), self._context_length,
            )
            tokens = tokens[: self._context_length]
        tokens = tokens + [""] * (self._context_length - len(tokens))
        return np.stack([self._token_vector(tok, i) for i, tok in enumerate(tokens)])

    def embed_text(self, text: str) -> TextConditioning:
        if not text.strip():
            raise ContractError("embed_text requires non-empty text; "
                                "use uncond_conditioning() for the empty prompt")
        self.calls.embed_text += 1
        return TextConditioning(
            tokens_embedded=self._encode_tokens(text),
            pooled=_unit(hash_stream(f"pooled|{self.seed}|{text}", self._embed_dim)),
            source_text=text,
        )

    def uncond_conditioning(self) -> TextConditioning:
        """Conditioning for the empty prompt (classifier-free guidance branch)."""
        self.calls.embed_text += 1
        return TextConditioning(
            tokens_embedded=self._encode_tokens(""),
            pooled=_unit(hash_stream(f"pooled|{self.seed}|", self._embed_dim)),
            source_text="",
        )

    def embed_image(self, image: Image.Image) -> ImageEmbedding:
        self.calls.embed_image += 1
        content_id = image_content_id(image)
        vec = _unit(hash_stream(f"img|{self.seed}|{content_id}", self._embed_dim))
        return ImageEmbedding(vector=vec, source_image_id=content_id)


_TONES = ["a dark", "a dim", "a neutral", "a bright", "a light"]


class MockCaptioner(Captioner):
    """Fixture-table captioner with a deterministic content-derived fallback."""

    def __init__(self, fixtures: dict[str, str] | None = None):
        super().__init__()
        self.fixtures = dict(fixtures or {})
        self.model_id = "mock-captioner"

    def register(self, image: Image.Image, caption: str) -> str:
        """Pin ``caption`` for this exact image content; returns the content id."""
        content_id = image_content_id(image)
        self.fixtures[content_id] = caption
        return content_id

    def caption_image(self, image: Image.Image) -> str:
        self.calls.caption_image += 1
        content_id = image_content_id(image)
        if content_id in self.fixtures:
            return self.fixtures[content_id]
        rgb = np.asarray(image.convert("RGB"), dtype=np.float32)
        tone = _TONES[min(int(rgb.mean() / 256.0 * len(_TONES)), len(_TONES) - 1)]
        return f"{tone} synthetic image, {image.width} by {image.height} pixels"


class MockDiffusion(Diffusion):
    """Mock denoiser + exact space-to-depth latent codec.

    The codec rearranges each ``f x f`` pixel block into channels, so
    encode/decode is an exact identity for images whose dimensions are
    multiples of the factor (latent channels = 3 * f**2).

    Predictor modes:
      * ``zero``        -- eps = 0
      * ``linear``      -- eps = gain * z
      * ``frozen``      -- one frozen seeded tensor per shape, input-independent
      * ``conditioned`` -- eps = tanh(mean(pooled)) * frozen field per timestep;
                           depends on conditioning and t but not on z
    """

    def __init__(self, mode: str = "conditioned", gain: float = 0.1, seed: int = 0,
                 factor: int = 8, any_shape: bool = False):
        super().__init__()
        if mode not in ("zero", "linear", "frozen", "conditioned"):
            raise ContractError(f"unknown mock predictor mode {mode!r}")
        self.mode = mode
        self.gain = gain
        self.seed = seed
        self.factor = factor
        self.any_shape = any_shape
        self._field_cache: dict[tuple, np.ndarray] = {}
        self.model_id = f"mock-diffusion-{mode}-s{seed}-f{factor}"

    @property
    def latent_channels(self) -> int:
        return 3 * self.factor * self.factor

    @property
    def downsample_factor(self) -> int:
        return self.factor

    def _frozen_field(self, key: tuple, shape: tuple) -> np.ndarray:
        cached = self._field_cache.get(key)
        if cached is None:
            cached = hash_stream("eps|" + "|".join(str(k) for k in key),
                                 int(np.prod(shape))).reshape(shape)
            self._field_cache[key] = cached
        return cached

    def predict_noise(self, latent: LatentImage, timestep: int,
                      conditioning: TextConditioning) -> np.ndarray:
        self.calls.predict_noise += 1
        if timestep < 0:
            raise ContractError(f"timestep must be >= 0, got {timestep}")
        z = latent.data
        if not self.any_shape and z.shape[0] != self.latent_channels:
            raise ContractError(
                f"latent shape {z.shape} does not match model latent shape "
                f"({self.latent_channels}, h, w)"
            )
        if self.mode == "zero":
            return np.zeros_like(z)
        if self.mode == "linear":
            return (self.gain * z).astype(np.float32)
        if self.mode == "frozen":
            return self._frozen_field((self.seed, z.shape), z.shape)
        strength = float(np.tanh(conditioning.pooled.mean()))
        field = self._frozen_field((self.seed, timestep, z.shape), z.shape)
        return (strength * field).astype(np.float32)

    def _crop_to_factor(self, image: Image.Image) -> Image.Image:
        f = self.factor
        w, h = image.width, image.height
        cw, ch = (w // f) * f, (h // f) * f
        if cw == 0 or ch == 0:
            raise ContractError(f"image {w}x{h} smaller than codec factor {f}")
        if (cw, ch) != (w, h):
            logger.warning("image %dx%d center-cropped to %dx%d (factor %d)",
                           w, h, cw, ch, f)
            left, top = (w - cw) // 2, (h - ch) // 2
            image = image.crop((left, top, left + cw, top + ch))
        return image

    def encode_image(self, image: Image.Image) -> LatentImage:
        self.calls.encode_image += 1
        image = self._crop_to_factor(image.convert("RGB"))
        f = self.factor
        px = np.asarray(image, dtype=np.float32) / 255.0  # (H, W, 3)
        h8, w8 = image.height // f, image.width // f
        blocks = px.reshape(h8, f, w8, f, 3)
        data = blocks.transpose(4, 1, 3, 0, 2).reshape(3 * f * f, h8, w8)
        return LatentImage(data=data, width=image.width, height=image.height,
                           scaling_factor=1.0)

    def decode_latent(self, latent: LatentImage) -> Image.Image:
        self.calls.decode_latent += 1
        f = self.factor
        c, h8, w8 = latent.data.shape
        if c != 3 * f * f:
            raise ContractError(
                f"latent has {c} channels; codec expects {3 * f * f}"
            )
        blocks = latent.data.reshape(3, f, f, h8, w8).transpose(3, 1, 4, 2, 0)
        px = blocks.reshape(h8 * f, w8 * f, 3)
        px = np.clip(np.rint(px * 255.0), 0, 255).astype(np.uint8)
        return Image.fromarray(px, mode="RGB")


_META_PROMPT_MARKER = "I have a list of prompts"
_N_CAPTIONS_RE = re.compile(r"(?:generate|craft)\s+(\d+)\s+(?:image captions|pairs)",
                            re.IGNORECASE)
_SIMPLIFIED_RE = re.compile(r"caption '(.+?)'.*transformation '(.+?)'", re.DOTALL)


def _sig(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:8]


class MockTextGenerator(TextGenerator):
    """Scripted LLM with deterministic rule-based fallbacks.

    Resolution order per call: queued responses (consumed in order), the
    exact-match script table, regex rules, then built-in fallbacks that
    recognize the stock prompt shapes (caption prompts, count prompts, the
    meta-prompt) so the mock profile works with no fixtures at all.
    """

    def __init__(self, script: dict[str, str] | None = None,
                 rules: list[tuple[str, str]] | None = None,
                 queue: list[str] | None = None):
        super().__init__()
        self.script = dict(script or {})
        self.rules = [(re.compile(p, re.DOTALL), out) for p, out in (rules or [])]
        self.queue = list(queue or [])
        self.model_id = "mock-llm"
        self.last_prompt: str | None = None

    @staticmethod
    def wrap_chat(prompt: str) -> str:
        return f"[INST] {prompt} [/INST]"

    def generate_text(self, prompt: str, config: LlmConfig) -> str:
        if not prompt.strip():
            raise ContractError("prompt must be non-empty")
        self.calls.generate_text += 1
        if config.uses_chat_template:
            prompt = self.wrap_chat(prompt)
        self.last_prompt = prompt
        if self.queue:
            return self.queue.pop(0)
        if prompt in self.script:
            return self.script[prompt]
        for pattern, out in self.rules:
            m = pattern.search(prompt)
            if m:
                return out.format(*m.groups())
        return self._fallback(prompt)

    def _fallback(self, prompt: str) -> str:
        if _META_PROMPT_MARKER in prompt[:160]:
            sig = _sig(prompt)
            return (
                f'prompt: "Describe the image after applying [TRANSFORMATION] '
                f'to [SOURCE_CAPTION]. Variant {sig}."\n'
                f'prompt: "Write the caption for [SOURCE_CAPTION] once '
                f'[TRANSFORMATION] has been applied. Variant {sig}."\n'
            )
        m = _N_CAPTIONS_RE.search(prompt)
        if m:
            n = int(m.group(1))
            topic = _sig(prompt)
            before = "\n".join(
                f"Caption {k + 1}: a scene before the change, take {k + 1} ({topic})."
                for k in range(n))
            after = "\n".join(
                f"Caption {k + 1}: a scene after the change, take {k + 1} ({topic})."
                for k in range(n))
            return f"Before transformation\n\n{before}\n\nAfter transformation\n\n{after}\n"
        m = _SIMPLIFIED_RE.search(prompt)
        if m:
            caption, transformation = m.group(1), m.group(2)
            return f"{caption}, {transformation}."
        return f"a scene, revised (sig {_sig(prompt)})."
