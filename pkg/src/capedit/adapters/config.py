"""Adapter selection from a JSON config file.

The config maps adapter roles to model identifiers, device and precision;
a single ``profile`` switch ("mock" or "real") decides whether checkpoints
are loaded at all. Environment variables override the remote LLM endpoint:
``CAPEDIT_LLM_ENDPOINT`` and ``CAPEDIT_LLM_API_KEY``.
"""

from __future__ import annotations

import copy
import json
import os
from pathlib import Path

from ..errors import ConfigError
from .base import AdapterSet
from .mock import MockCaptioner, MockDiffusion, MockEmbedder, MockTextGenerator
from .types import LlmConfig

DEFAULT_CONFIG: dict = {
    "profile": "mock",
    "mock": {
        "seed": 0,
        "context_length": 16,
        "embed_dim": 32,
        "predictor": "conditioned",
        "codec_factor": 8,
    },
    "real": {
        "embedder": {"model_id": "openai/clip-vit-base-patch32", "device": "cpu"},
        "captioner": {"model_id": "Salesforce/blip-image-captioning-base", "device": "cpu"},
        "diffusion": {"model_id": "CompVis/stable-diffusion-v1-4", "device": "cpu",
                      "precision": "float32"},
        "llm_backend": "hf",  # "hf" or "remote"
        "llm_device": "cpu",
        "llm_endpoint": "",
    },
    "llm": {
        "model_id": "mistralai/Mistral-7B-Instruct-v0.2",
        "uses_chat_template": True,
        "max_new_tokens": 128,
        "temperature": 0.0,
        "seed": 0,
    },
}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path: str | Path | None = None) -> dict:
    """Load adapter config, layering the file (if any) over the defaults.

    ``path`` defaults to the ``CAPEDIT_CONFIG`` environment variable.
    """
    if path is None:
        path = os.environ.get("CAPEDIT_CONFIG")
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"adapter config file not found: {path}")
    try:
        file_cfg = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"adapter config {path} is not valid JSON: {exc}") from exc
    return _merge(DEFAULT_CONFIG, file_cfg)


def llm_config_from(cfg: dict) -> LlmConfig:
    llm = cfg.get("llm", {})
    try:
        return LlmConfig(
            model_id=llm["model_id"],
            uses_chat_template=bool(llm.get("uses_chat_template", False)),
            max_new_tokens=int(llm.get("max_new_tokens", 128)),
            temperature=float(llm.get("temperature", 0.0)),
            seed=int(llm.get("seed", 0)),
        )
    except KeyError as exc:
        raise ConfigError(f"llm config missing key {exc}") from exc


def build_adapter_set(cfg: dict | None = None, profile: str | None = None) -> AdapterSet:
    """Instantiate the adapters named by ``cfg`` for the given profile."""
    cfg = cfg or load_config()
    profile = profile or cfg.get("profile", "mock")
    llm_config = llm_config_from(cfg)

    if profile == "mock":
        mock = cfg.get("mock", {})
        embedder = MockEmbedder(
            seed=int(mock.get("seed", 0)),
            context_length=int(mock.get("context_length", 16)),
            embed_dim=int(mock.get("embed_dim", 32)),
        )
        diffusion = MockDiffusion(
            mode=mock.get("predictor", "conditioned"),
            seed=int(mock.get("seed", 0)),
            factor=int(mock.get("codec_factor", 8)),
        )
        return AdapterSet(
            embedder=embedder,
            captioner=MockCaptioner(),
            diffusion=diffusion,
            generator=MockTextGenerator(),
            llm_config=LlmConfig(model_id="mock-llm", uses_chat_template=False,
                                 max_new_tokens=llm_config.max_new_tokens,
                                 temperature=0.0, seed=llm_config.seed),
            profile="mock",
        )

    if profile == "real":
        from . import real as real_adapters

        rcfg = cfg.get("real", {})
        metric_embedder = real_adapters.ClipEmbedder(
            model_id=rcfg["embedder"]["model_id"],
            device=rcfg["embedder"].get("device", "cpu"),
        )
        captioner = real_adapters.BlipCaptioner(
            model_id=rcfg["captioner"]["model_id"],
            device=rcfg["captioner"].get("device", "cpu"),
        )
        diffusion = real_adapters.StableDiffusionBackbone(
            model_id=rcfg["diffusion"]["model_id"],
            device=rcfg["diffusion"].get("device", "cpu"),
            dtype=rcfg["diffusion"].get("precision", "float32"),
        )
        endpoint = os.environ.get("CAPEDIT_LLM_ENDPOINT") or rcfg.get("llm_endpoint", "")
        if rcfg.get("llm_backend", "hf") == "remote" or endpoint:
            generator = real_adapters.RemoteTextGenerator(endpoint=endpoint)
        else:
            generator = real_adapters.HfTextGenerator(
                model_id=llm_config.model_id, device=rcfg.get("llm_device", "cpu"))
        return AdapterSet(
            embedder=diffusion.conditioning_embedder,
            captioner=captioner,
            diffusion=diffusion,
            generator=generator,
            llm_config=llm_config,
            metric_embedder=metric_embedder,
            profile="real",
        )

    raise ConfigError(f"unknown adapter profile {profile!r} (expected 'mock' or 'real')")
