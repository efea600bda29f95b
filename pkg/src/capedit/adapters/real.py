"""Adapters over real pre-trained checkpoints.

Everything here imports torch/transformers/diffusers lazily: the packages are
an optional install (``pip install capedit[real]``) and nothing in the mock
profile touches them. Checkpoints are referenced by hub id from the adapter
config; the pipeline never hardcodes a model.
"""

from __future__ import annotations

import json
import logging
import os
import urllib.error
import urllib.request

import numpy as np
from PIL import Image

from ..errors import AdapterUnavailableError, ContractError, InputFormatError, TransportError
from .base import Captioner, Diffusion, Embedder, TextGenerator
from .types import ImageEmbedding, LatentImage, LlmConfig, TextConditioning, image_content_id

logger = logging.getLogger(__name__)


def _require(module_names: list[str], what: str):
    import importlib

    mods = []
    for name in module_names:
        try:
            mods.append(importlib.import_module(name))
        except ImportError as exc:
            raise AdapterUnavailableError(
                f"{what} needs the '{name}' package; install capedit[real]",
                reason="config",
            ) from exc
    return mods


def _load_rgb(image: Image.Image) -> Image.Image:
    try:
        return image.convert("RGB")
    except Exception as exc:
        raise InputFormatError(f"cannot decode image: {exc}") from exc


class ClipEmbedder(Embedder):
    """CLIP text+image embedder (reference scorer is ViT-B/32)."""

    def __init__(self, model_id: str = "openai/clip-vit-base-patch32",
                 device: str = "cpu"):
        super().__init__()
        (torch,) = _require(["torch"], "CLIP embedder")
        (transformers,) = _require(["transformers"], "CLIP embedder")
        self.torch = torch
        self.device = device
        self.model_id = model_id
        try:
            self.model = transformers.CLIPModel.from_pretrained(model_id).to(device).eval()
            self.processor = transformers.CLIPProcessor.from_pretrained(model_id)
        except Exception as exc:
            raise AdapterUnavailableError(
                f"failed to load CLIP checkpoint {model_id!r}: {exc}", reason="config"
            ) from exc

    @property
    def context_length(self) -> int:
        return int(self.model.config.text_config.max_position_embeddings)

    @property
    def embed_dim(self) -> int:
        return int(self.model.config.projection_dim)

    def embed_text(self, text: str) -> TextConditioning:
        if not text.strip():
            raise ContractError("embed_text requires non-empty text")
        self.calls.embed_text += 1
        tok = self.processor.tokenizer(
            [text], padding="max_length", truncation=True,
            max_length=self.context_length, return_tensors="pt",
        )
        if tok.input_ids.shape[1] >= self.context_length:
            logger.warning("text truncated to context length %d", self.context_length)
        with self.torch.no_grad():
            out = self.model.text_model(input_ids=tok.input_ids.to(self.device))
            tokens = out.last_hidden_state[0]
            pooled = self.model.text_projection(out.pooler_output)[0]
        return TextConditioning(
            tokens_embedded=tokens.float().cpu().numpy(),
            pooled=pooled.float().cpu().numpy(),
            source_text=text,
        )

    def uncond_conditioning(self) -> TextConditioning:
        self.calls.embed_text += 1
        tok = self.processor.tokenizer(
            [""], padding="max_length", truncation=True,
            max_length=self.context_length, return_tensors="pt",
        )
        with self.torch.no_grad():
            out = self.model.text_model(input_ids=tok.input_ids.to(self.device))
            tokens = out.last_hidden_state[0]
            pooled = self.model.text_projection(out.pooler_output)[0]
        return TextConditioning(tokens_embedded=tokens.float().cpu().numpy(),
                                pooled=pooled.float().cpu().numpy(), source_text="")

    def embed_image(self, image: Image.Image) -> ImageEmbedding:
        self.calls.embed_image += 1
        rgb = _load_rgb(image)
        inputs = self.processor(images=rgb, return_tensors="pt")
        with self.torch.no_grad():
            vec = self.model.get_image_features(pixel_values=inputs.pixel_values.to(self.device))[0]
        return ImageEmbedding(vector=vec.float().cpu().numpy(),
                              source_image_id=image_content_id(rgb))


class BlipCaptioner(Captioner):
    """BLIP captioner with greedy decoding for reproducibility."""

    def __init__(self, model_id: str = "Salesforce/blip-image-captioning-base",
                 device: str = "cpu", max_new_tokens: int = 48):
        super().__init__()
        (torch,) = _require(["torch"], "BLIP captioner")
        (transformers,) = _require(["transformers"], "BLIP captioner")
        self.torch = torch
        self.device = device
        self.model_id = model_id
        self.max_new_tokens = max_new_tokens
        try:
            self.model = transformers.BlipForConditionalGeneration.from_pretrained(
                model_id).to(device).eval()
            self.processor = transformers.BlipProcessor.from_pretrained(model_id)
        except Exception as exc:
            raise AdapterUnavailableError(
                f"failed to load BLIP checkpoint {model_id!r}: {exc}", reason="config"
            ) from exc

    def caption_image(self, image: Image.Image) -> str:
        self.calls.caption_image += 1
        rgb = _load_rgb(image)
        inputs = self.processor(images=rgb, return_tensors="pt").to(self.device)
        try:
            with self.torch.no_grad():
                ids = self.model.generate(**inputs, max_new_tokens=self.max_new_tokens,
                                          do_sample=False, num_beams=1)
            caption = self.processor.decode(ids[0], skip_special_tokens=True).strip()
        except Exception as exc:
            raise AdapterUnavailableError(
                f"captioner {self.model_id!r} failed at inference: {exc}", reason="runtime"
            ) from exc
        if not caption:
            raise AdapterUnavailableError(
                f"captioner {self.model_id!r} returned an empty caption", reason="runtime")
        return caption


class StableDiffusionBackbone(Diffusion):
    """UNet noise prediction and VAE codec from a Stable Diffusion checkpoint.

    Also exposes the checkpoint's own text encoder as ``conditioning_embedder``,
    since the denoiser cross-attends that space (not the metric embedder's).
    """

    def __init__(self, model_id: str = "CompVis/stable-diffusion-v1-4",
                 device: str = "cpu", dtype: str = "float32"):
        super().__init__()
        (torch,) = _require(["torch"], "Stable Diffusion backbone")
        (diffusers,) = _require(["diffusers"], "Stable Diffusion backbone")
        (transformers,) = _require(["transformers"], "Stable Diffusion backbone")
        self.torch = torch
        self.device = device
        self.model_id = model_id
        torch_dtype = getattr(torch, dtype)
        try:
            self.vae = diffusers.AutoencoderKL.from_pretrained(
                model_id, subfolder="vae", torch_dtype=torch_dtype).to(device).eval()
            self.unet = diffusers.UNet2DConditionModel.from_pretrained(
                model_id, subfolder="unet", torch_dtype=torch_dtype).to(device).eval()
            self.text_encoder = transformers.CLIPTextModel.from_pretrained(
                model_id, subfolder="text_encoder", torch_dtype=torch_dtype).to(device).eval()
            self.tokenizer = transformers.CLIPTokenizer.from_pretrained(
                model_id, subfolder="tokenizer")
        except Exception as exc:
            raise AdapterUnavailableError(
                f"failed to load diffusion checkpoint {model_id!r}: {exc}", reason="config"
            ) from exc
        self.scaling_factor = float(self.vae.config.scaling_factor)
        self.conditioning_embedder = _SdTextEmbedder(self)

    @property
    def latent_channels(self) -> int:
        return int(self.unet.config.in_channels)

    @property
    def downsample_factor(self) -> int:
        return 2 ** (len(self.vae.config.block_out_channels) - 1)

    def predict_noise(self, latent: LatentImage, timestep: int,
                      conditioning: TextConditioning) -> np.ndarray:
        self.calls.predict_noise += 1
        z = latent.data
        if z.shape[0] != self.latent_channels:
            raise ContractError(
                f"latent shape {z.shape} does not match model latent shape "
                f"({self.latent_channels}, h, w)")
        torch = self.torch
        with torch.no_grad():
            zt = torch.from_numpy(z[None]).to(self.device, self.unet.dtype)
            cond = torch.from_numpy(conditioning.tokens_embedded[None]).to(
                self.device, self.unet.dtype)
            eps = self.unet(zt, timestep, encoder_hidden_states=cond).sample[0]
        return eps.float().cpu().numpy()

    def encode_image(self, image: Image.Image) -> LatentImage:
        self.calls.encode_image += 1
        rgb = _load_rgb(image)
        f = self.downsample_factor
        cw, ch = (rgb.width // f) * f, (rgb.height // f) * f
        if (cw, ch) != (rgb.width, rgb.height):
            logger.warning("image %dx%d center-cropped to %dx%d (factor %d)",
                           rgb.width, rgb.height, cw, ch, f)
            left, top = (rgb.width - cw) // 2, (rgb.height - ch) // 2
            rgb = rgb.crop((left, top, left + cw, top + ch))
        torch = self.torch
        px = np.asarray(rgb, dtype=np.float32) / 127.5 - 1.0
        with torch.no_grad():
            x = torch.from_numpy(px.transpose(2, 0, 1)[None]).to(self.device, self.vae.dtype)
            posterior = self.vae.encode(x).latent_dist
            z = posterior.mode()[0] * self.scaling_factor
        return LatentImage(data=z.float().cpu().numpy(), width=rgb.width,
                           height=rgb.height, scaling_factor=self.scaling_factor)

    def decode_latent(self, latent: LatentImage) -> Image.Image:
        self.calls.decode_latent += 1
        torch = self.torch
        with torch.no_grad():
            z = torch.from_numpy(latent.data[None]).to(self.device, self.vae.dtype)
            x = self.vae.decode(z / latent.scaling_factor).sample[0]
        px = ((x.float().cpu().numpy().transpose(1, 2, 0) + 1.0) * 127.5)
        return Image.fromarray(np.clip(np.rint(px), 0, 255).astype(np.uint8), mode="RGB")


class _SdTextEmbedder(Embedder):
    """The diffusion checkpoint's own text encoder (cross-attention space)."""

    def __init__(self, backbone: StableDiffusionBackbone):
        super().__init__()
        self.backbone = backbone
        self.model_id = f"{backbone.model_id}/text_encoder"

    @property
    def context_length(self) -> int:
        return int(self.backbone.tokenizer.model_max_length)

    @property
    def embed_dim(self) -> int:
        return int(self.backbone.text_encoder.config.hidden_size)

    def _encode(self, text: str) -> TextConditioning:
        torch = self.backbone.torch
        tok = self.backbone.tokenizer(
            [text], padding="max_length", truncation=True,
            max_length=self.context_length, return_tensors="pt")
        with torch.no_grad():
            out = self.backbone.text_encoder(tok.input_ids.to(self.backbone.device))
            tokens = out.last_hidden_state[0]
            pooled = out.pooler_output[0]
        return TextConditioning(tokens_embedded=tokens.float().cpu().numpy(),
                                pooled=pooled.float().cpu().numpy(), source_text=text)

    def embed_text(self, text: str) -> TextConditioning:
        if not text.strip():
            raise ContractError("embed_text requires non-empty text")
        self.calls.embed_text += 1
        return self._encode(text)

    def uncond_conditioning(self) -> TextConditioning:
        self.calls.embed_text += 1
        return self._encode("")

    def embed_image(self, image: Image.Image) -> ImageEmbedding:
        raise AdapterUnavailableError(
            "the diffusion text encoder has no image tower; use the metric embedder",
            reason="config")


class HfTextGenerator(TextGenerator):
    """Local causal-LM generation via transformers; greedy at temperature 0."""

    def __init__(self, model_id: str, device: str = "cpu", dtype: str = "float32"):
        super().__init__()
        (torch,) = _require(["torch"], "HF text generator")
        (transformers,) = _require(["transformers"], "HF text generator")
        self.torch = torch
        self.device = device
        self.model_id = model_id
        try:
            self.tokenizer = transformers.AutoTokenizer.from_pretrained(model_id)
            self.model = transformers.AutoModelForCausalLM.from_pretrained(
                model_id, torch_dtype=getattr(torch, dtype)).to(device).eval()
        except Exception as exc:
            raise AdapterUnavailableError(
                f"failed to load LLM checkpoint {model_id!r}: {exc}", reason="config"
            ) from exc

    def generate_text(self, prompt: str, config: LlmConfig) -> str:
        if not prompt.strip():
            raise ContractError("prompt must be non-empty")
        self.calls.generate_text += 1
        torch = self.torch
        if config.uses_chat_template:
            ids = self.tokenizer.apply_chat_template(
                [{"role": "user", "content": prompt}],
                add_generation_prompt=True, return_tensors="pt")
        else:
            ids = self.tokenizer(prompt, return_tensors="pt").input_ids
        max_ctx = getattr(self.model.config, "max_position_embeddings", None)
        if max_ctx and ids.shape[1] + config.max_new_tokens > max_ctx:
            raise InputFormatError(
                f"prompt of {ids.shape[1]} tokens overflows the {max_ctx}-token context")
        torch.manual_seed(config.seed)
        do_sample = config.temperature > 0
        with torch.no_grad():
            out = self.model.generate(
                ids.to(self.device),
                max_new_tokens=config.max_new_tokens,
                do_sample=do_sample,
                temperature=config.temperature if do_sample else None,
                pad_token_id=self.tokenizer.eos_token_id,
            )
        return self.tokenizer.decode(out[0, ids.shape[1]:], skip_special_tokens=True)


class RemoteTextGenerator(TextGenerator):
    """OpenAI-compatible chat endpoint; endpoint/key come from env or config."""

    def __init__(self, endpoint: str, api_key: str | None = None, timeout_s: float = 120.0):
        super().__init__()
        if not endpoint:
            raise AdapterUnavailableError("remote LLM endpoint URL is empty", reason="config")
        self.endpoint = endpoint.rstrip("/")
        self.api_key = api_key or os.environ.get("CAPEDIT_LLM_API_KEY")
        self.timeout_s = timeout_s
        self.model_id = f"remote:{self.endpoint}"

    def generate_text(self, prompt: str, config: LlmConfig) -> str:
        if not prompt.strip():
            raise ContractError("prompt must be non-empty")
        self.calls.generate_text += 1
        payload = {
            "model": config.model_id,
            "messages": [{"role": "user", "content": prompt}],
            "max_tokens": config.max_new_tokens,
            "temperature": config.temperature,
            "seed": config.seed,
        }
        req = urllib.request.Request(
            f"{self.endpoint}/chat/completions",
            data=json.dumps(payload).encode("utf-8"),
            headers={"Content-Type": "application/json",
                     **({"Authorization": f"Bearer {self.api_key}"} if self.api_key else {})},
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout_s) as resp:
                body = json.loads(resp.read().decode("utf-8"))
        except urllib.error.HTTPError as exc:
            if exc.code in (400, 413, 422):
                raise InputFormatError(
                    f"endpoint rejected the request ({exc.code}); "
                    "likely context overflow") from exc
            raise TransportError(f"endpoint returned HTTP {exc.code}") from exc
        except (urllib.error.URLError, TimeoutError) as exc:
            raise TransportError(f"endpoint unreachable: {exc}") from exc
        try:
            return body["choices"][0]["message"]["content"]
        except (KeyError, IndexError) as exc:
            raise TransportError(f"malformed endpoint response: {body!r}") from exc
