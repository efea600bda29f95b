"""Adapter interfaces over the four pre-trained capabilities the pipeline uses.

The pipeline never talks to a model directly; it consumes these interfaces.
Every adapter must be deterministic under a fixed seed/config so runs are
reproducible. Instances are single-threaded: do not share one across
concurrent jobs (run one instance per worker/device instead).
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .types import CallCounters, ImageEmbedding, LatentImage, LlmConfig, TextConditioning


class Embedder(ABC):
    """Text and image embedding into a shared latent space."""

    model_id: str = "embedder"

    def __init__(self):
        self.calls = CallCounters()

    @property
    @abstractmethod
    def context_length(self) -> int: ...

    @property
    @abstractmethod
    def embed_dim(self) -> int: ...

    @abstractmethod
    def embed_text(self, text: str) -> TextConditioning:
        """Encode ``text`` into token-level and pooled embeddings.

        The token sequence is padded/truncated to the fixed context length;
        over-long text is truncated with a logged warning, never an exception.
        """

    @abstractmethod
    def embed_image(self, image: Image.Image) -> ImageEmbedding:
        """Embed an RGB image into the same space as pooled text vectors."""


class Captioner(ABC):
    """Image-to-text captioning; greedy decoding by default."""

    model_id: str = "captioner"

    def __init__(self):
        self.calls = CallCounters()

    @abstractmethod
    def caption_image(self, image: Image.Image) -> str:
        """Return a non-empty single-sentence caption for ``image``."""


class Diffusion(ABC):
    """Noise prediction plus the latent codec of one diffusion backbone."""

    model_id: str = "diffusion"

    def __init__(self):
        self.calls = CallCounters()

    @property
    @abstractmethod
    def latent_channels(self) -> int: ...

    @property
    @abstractmethod
    def downsample_factor(self) -> int: ...

    @abstractmethod
    def predict_noise(self, latent: LatentImage, timestep: int,
                      conditioning: TextConditioning) -> np.ndarray:
        """Predict the noise residual; output shape equals ``latent.data.shape``."""

    @abstractmethod
    def encode_image(self, image: Image.Image) -> LatentImage:
        """Encode pixels to latent space.

        Dimensions not divisible by the downsampling factor are center-cropped
        to the nearest multiple, with a logged warning.
        """

    @abstractmethod
    def decode_latent(self, latent: LatentImage) -> Image.Image:
        """Decode a latent back to pixels at ``latent.width`` x ``latent.height``."""


class TextGenerator(ABC):
    """LLM completion; returns raw, unparsed text."""

    model_id: str = "generator"

    def __init__(self):
        self.calls = CallCounters()

    @abstractmethod
    def generate_text(self, prompt: str, config: LlmConfig) -> str:
        """Complete ``prompt``; deterministic at temperature 0.

        Chat-template wrapping is applied here when
        ``config.uses_chat_template`` is set.
        """


@dataclass
class AdapterSet:
    """The four adapters one pipeline instance runs against."""

    embedder: Embedder
    captioner: Captioner
    diffusion: Diffusion
    generator: TextGenerator
    llm_config: LlmConfig
    # Metrics may use a different embedder than the denoiser conditioning
    # (e.g. a ViT-B/32 scorer vs. the backbone's own text encoder).
    metric_embedder: Embedder | None = None
    profile: str = "mock"

    def __post_init__(self):
        if self.metric_embedder is None:
            self.metric_embedder = self.embedder

    @property
    def model_ids(self) -> dict:
        return {
            "embedder": self.embedder.model_id,
            "captioner": self.captioner.model_id,
            "diffusion": self.diffusion.model_id,
            "generator": self.generator.model_id,
            "metric_embedder": self.metric_embedder.model_id,
        }

    def call_snapshot(self) -> dict:
        return {
            "embedder": self.embedder.calls.snapshot(),
            "captioner": self.captioner.calls.snapshot(),
            "diffusion": self.diffusion.calls.snapshot(),
            "generator": self.generator.calls.snapshot(),
        }
