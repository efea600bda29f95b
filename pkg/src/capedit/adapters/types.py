"""Value types exchanged between the pipeline and model adapters."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from ..errors import ContractError


@dataclass(frozen=True)
class TextConditioning:
    """Text encoder output for one string (or an average of several).

    ``tokens_embedded`` is the per-token encoder output the denoiser
    cross-attends, shape (context_length, embed_dim). ``pooled`` is the
    single-vector embedding used for metric computation, shape (embed_dim,).
    Both are fixed-size per loaded embedder.
    """

    tokens_embedded: np.ndarray
    pooled: np.ndarray
    source_text: str

    def __post_init__(self):
        tokens = np.asarray(self.tokens_embedded, dtype=np.float32)
        pooled = np.asarray(self.pooled, dtype=np.float32)
        if tokens.ndim != 2:
            raise ContractError(f"tokens_embedded must be 2-D, got shape {tokens.shape}")
        if pooled.ndim != 1:
            raise ContractError(f"pooled must be 1-D, got shape {pooled.shape}")
        if not np.all(np.isfinite(tokens)) or not np.all(np.isfinite(pooled)):
            raise ContractError("conditioning contains non-finite entries")
        object.__setattr__(self, "tokens_embedded", tokens)
        object.__setattr__(self, "pooled", pooled)

    @property
    def context_length(self) -> int:
        return self.tokens_embedded.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.tokens_embedded.shape[1]


@dataclass(frozen=True)
class ImageEmbedding:
    """Single-vector image embedding in the same space as pooled text."""

    vector: np.ndarray
    source_image_id: str

    def __post_init__(self):
        vec = np.asarray(self.vector, dtype=np.float32)
        if vec.ndim != 1:
            raise ContractError(f"embedding vector must be 1-D, got shape {vec.shape}")
        if not np.all(np.isfinite(vec)):
            raise ContractError("image embedding contains non-finite entries")
        object.__setattr__(self, "vector", vec)


@dataclass(frozen=True)
class LatentImage:
    """Latent-space image as produced by the codec.

    Spatial dims of ``data`` (channels, h, w) are the pixel dims divided by
    the codec's fixed downsampling factor.
    """

    data: np.ndarray
    width: int
    height: int
    scaling_factor: float = 1.0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise ContractError(f"latent data must be 3-D, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ContractError("latent contains non-finite entries")
        _, h, w = data.shape
        if h <= 0 or w <= 0 or self.height % h != 0 or self.width % w != 0:
            raise ContractError(
                f"latent spatial dims {h}x{w} do not evenly divide pixel dims "
                f"{self.height}x{self.width}"
            )
        if self.height // h != self.width // w:
            raise ContractError("latent downsampling factor differs between axes")
        object.__setattr__(self, "data", data)

    @property
    def downsample_factor(self) -> int:
        return self.height // self.data.shape[1]

    def with_data(self, data: np.ndarray) -> "LatentImage":
        return LatentImage(data=data, width=self.width, height=self.height,
                           scaling_factor=self.scaling_factor)


@dataclass(frozen=True)
class LlmConfig:
    """Decoding configuration for a text generator.

    temperature == 0 must imply fully deterministic generation for a fixed
    seed and model.
    """

    model_id: str
    uses_chat_template: bool = False
    max_new_tokens: int = 128
    temperature: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.temperature < 0:
            raise ContractError(f"temperature must be >= 0, got {self.temperature}")
        if self.max_new_tokens < 1:
            raise ContractError("max_new_tokens must be >= 1")


def image_content_id(image: Image.Image) -> str:
    """Stable content hash for a decoded image (mode+size+pixels)."""
    rgb = image.convert("RGB")
    h = hashlib.sha256()
    h.update(f"RGB:{rgb.width}x{rgb.height}:".encode())
    h.update(rgb.tobytes())
    return h.hexdigest()


@dataclass
class CallCounters:
    """Per-adapter call instrumentation; used by cache-contract tests."""

    embed_text: int = 0
    embed_image: int = 0
    caption_image: int = 0
    predict_noise: int = 0
    encode_image: int = 0
    decode_latent: int = 0
    generate_text: int = 0

    def snapshot(self) -> dict:
        return dict(self.__dict__)
