from .base import AdapterSet, Captioner, Diffusion, Embedder, TextGenerator
from .config import DEFAULT_CONFIG, build_adapter_set, load_config
from .mock import MockCaptioner, MockDiffusion, MockEmbedder, MockTextGenerator, hash_stream
from .types import (
    CallCounters,
    ImageEmbedding,
    LatentImage,
    LlmConfig,
    TextConditioning,
    image_content_id,
)

__all__ = [
    "AdapterSet",
    "CallCounters",
    "Captioner",
    "DEFAULT_CONFIG",
    "Diffusion",
    "Embedder",
    "ImageEmbedding",
    "LatentImage",
    "LlmConfig",
    "MockCaptioner",
    "MockDiffusion",
    "MockEmbedder",
    "MockTextGenerator",
    "TextConditioning",
    "TextGenerator",
    "build_adapter_set",
    "hash_stream",
    "image_content_id",
    "load_config",
]
