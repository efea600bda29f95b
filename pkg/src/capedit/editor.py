"""End-to-end orchestration of one edit.

Pipeline: caption the input, prompt for the after-edit caption, build the
weighted edit direction, DDIM-invert the input under its caption, regenerate
under the shifted conditioning, decode. Each run writes a manifest that is
sufficient to reproduce it (model ids, template, seed, weights, step counts,
checksums), and the expensive inversion is cached by content so weight
exploration re-runs skip the captioner, the LLM and the inversion entirely.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from PIL import Image

from .direction import (
    DEFAULT_WEIGHT,
    EditDirection,
    apply as apply_direction,
    direction as make_direction,
    mean_conditioning,
)
from .adapters.base import AdapterSet
from .adapters.types import TextConditioning, image_content_id
from .captions import CaptionPair, CaptionPipeline
from .ddim import DdimEngine, InvertedLatent, NoiseSchedule
from .errors import CacheMissError, ContractError, InputFormatError

logger = logging.getLogger(__name__)

CONDITIONING_MODES = ("full", "instruction_only", "after_caption_only")
STAGES = ("captioning", "inverting", "generating")


@dataclass(frozen=True)
class EditConfig:
    """Knobs for one edit; defaults are the reference configuration."""

    weight: float = DEFAULT_WEIGHT
    steps_invert: int = 100
    steps_generate: int = 100
    guidance_scale: float = 7.5
    n_captions: int = 1
    shots: int = 0
    before_source: str = "captioner"
    conditioning_mode: str = "full"
    seed: int = 0
    template: str | None = None
    before_caption_override: str | None = None
    after_caption_override: str | None = None

    def __post_init__(self):
        if self.steps_invert < 1 or self.steps_generate < 1:
            raise ContractError("step counts must be >= 1")
        if self.weight < 0:
            raise ContractError("weight must be >= 0")
        if self.conditioning_mode not in CONDITIONING_MODES:
            raise ContractError(
                f"conditioning_mode must be one of {CONDITIONING_MODES}, "
                f"got {self.conditioning_mode!r}")
        if self.seed < 0:
            raise ContractError("seed must be >= 0")


@dataclass(frozen=True)
class EditRequest:
    image: Image.Image | str | Path
    instruction: str
    config: EditConfig = field(default_factory=EditConfig)

    def __post_init__(self):
        if not self.instruction.strip():
            raise ContractError("instruction must be non-empty")

    def load_image(self) -> Image.Image:
        if isinstance(self.image, Image.Image):
            return self.image.convert("RGB")
        path = Path(self.image)
        try:
            with Image.open(path) as img:
                return img.convert("RGB")
        except FileNotFoundError:
            raise InputFormatError("image file not found", source=str(path))
        except Exception as exc:
            raise InputFormatError(f"cannot decode image: {exc}", source=str(path))


@dataclass
class EditResult:
    output_image: Image.Image
    output_path: Path
    image_id: str
    caption_pair: CaptionPair
    direction_norm: float
    timings: dict[str, float]
    manifest_id: str
    manifest_path: Path


class Editor:
    """Runs edits against one adapter set, with caching and manifests.

    One edit at a time per instance; callers that need concurrency run one
    editor (and adapter set) per worker.
    """

    def __init__(self, adapters: AdapterSet, runs_dir: str | Path,
                 templates_dir: str | Path | None = None):
        self.adapters = adapters
        self.runs_dir = Path(runs_dir)
        self.manifests_dir = self.runs_dir / "manifests"
        self.images_dir = self.runs_dir / "images"
        self.cache_dir = self.runs_dir / "cache"
        for d in (self.manifests_dir, self.images_dir, self.cache_dir):
            d.mkdir(parents=True, exist_ok=True)
        self.captions = CaptionPipeline(adapters, templates_dir=templates_dir)
        self.engine = DdimEngine(adapters.diffusion, adapters.embedder)
        self.cache_hits = 0
        self.cache_misses = 0

    # -- cache -------------------------------------------------------------

    def _inversion_key(self, content_id: str, caption: str, steps: int) -> str:
        h = hashlib.sha256()
        h.update(f"{content_id}|{caption}|{steps}|{self.adapters.diffusion.model_id}"
                 .encode("utf-8"))
        return h.hexdigest()[:24]

    def _inversion_path(self, key: str) -> Path:
        return self.cache_dir / f"inv-{key}.npz"

    def cache_stats(self) -> dict:
        return {
            "hits": self.cache_hits,
            "misses": self.cache_misses,
            "inversions": len(list(self.cache_dir.glob("inv-*.npz"))),
        }

    def _invert_cached(self, image: Image.Image, caption: str, steps: int,
                       sched: NoiseSchedule) -> tuple[InvertedLatent, str, bool]:
        key = self._inversion_key(image_content_id(image), caption, steps)
        path = self._inversion_path(key)
        if path.exists():
            self.cache_hits += 1
            return InvertedLatent.load(path), key, True
        self.cache_misses += 1
        latent = self.adapters.diffusion.encode_image(image)
        inverted = self.engine.invert(latent, caption, steps=steps, sched=sched)
        inverted.save(path)
        return inverted, key, False

    # -- conditioning ------------------------------------------------------

    def _save_conditioning(self, cond: TextConditioning, path: Path):
        np.savez(path, tokens=cond.tokens_embedded, pooled=cond.pooled,
                 meta=np.frombuffer(json.dumps({"source_text": cond.source_text})
                                    .encode(), dtype=np.uint8))

    def _load_conditioning(self, path: Path) -> TextConditioning:
        with np.load(path) as archive:
            meta = json.loads(archive["meta"].tobytes().decode())
            return TextConditioning(tokens_embedded=archive["tokens"],
                                    pooled=archive["pooled"],
                                    source_text=meta["source_text"])

    # -- main entry points ---------------------------------------------------

    def edit(self, req: EditRequest, on_stage=None) -> EditResult:
        """Run the full pipeline for one request."""
        cfg = req.config
        notify = on_stage or (lambda stage: None)
        timings: dict[str, float] = {}
        stage = "setup"
        started = time.perf_counter()
        calls_before = self.adapters.call_snapshot()
        try:
            image = req.load_image()
            original_size = (image.width, image.height)
            f = self.adapters.diffusion.downsample_factor
            cw, ch = (image.width // f) * f, (image.height // f) * f
            if (cw, ch) != (image.width, image.height):
                left, top = (image.width - cw) // 2, (image.height - ch) // 2
                image = image.crop((left, top, left + cw, top + ch))

            stage = "captioning"
            notify(stage)
            t0 = time.perf_counter()
            if cfg.before_caption_override:
                inversion_caption = cfg.before_caption_override
            else:
                inversion_caption = self.captions.before_caption(image)
            template_name = None
            if cfg.conditioning_mode == "instruction_only":
                # This ablation conditions on the instruction embedding alone;
                # no after-edit caption is generated.
                pair = CaptionPair(before=(inversion_caption,),
                                   after=(req.instruction,),
                                   before_source="captioner", n_captions=1)
            else:
                template_name = self.captions.template_for(
                    cfg.n_captions, cfg.shots, cfg.before_source, cfg.template).name
                pair = self.captions.make_caption_pair(
                    image, req.instruction,
                    n_captions=cfg.n_captions, shots=cfg.shots,
                    before_source=cfg.before_source, template=cfg.template,
                    before_override=cfg.before_caption_override or (
                        inversion_caption if cfg.before_source == "captioner" else None),
                    after_override=cfg.after_caption_override,
                )
            timings["captioning_s"] = time.perf_counter() - t0

            stage = "inverting"
            notify(stage)
            t0 = time.perf_counter()
            sched_inv = NoiseSchedule.scaled_linear(steps=cfg.steps_invert)
            inverted, inv_key, cache_hit = self._invert_cached(
                image, inversion_caption, cfg.steps_invert, sched_inv)
            timings["inverting_s"] = time.perf_counter() - t0

            stage = "generating"
            notify(stage)
            t0 = time.perf_counter()
            base_cond = self.adapters.embedder.embed_text(inversion_caption)
            edit_dir = None
            if cfg.conditioning_mode == "full":
                before_cond = mean_conditioning(
                    self.adapters.embedder, list(pair.before))
                after_cond = mean_conditioning(
                    self.adapters.embedder, list(pair.after))
                edit_dir = make_direction(before_cond, after_cond)
                cond = apply_direction(edit_dir, base_cond, cfg.weight)
                direction_norm = cfg.weight * edit_dir.norm
            elif cfg.conditioning_mode == "instruction_only":
                cond = self.adapters.embedder.embed_text(req.instruction)
                direction_norm = 0.0
            else:  # after_caption_only
                cond = mean_conditioning(
                    self.adapters.embedder, list(pair.after))
                direction_norm = 0.0
            sched_gen = (sched_inv if cfg.steps_generate == cfg.steps_invert
                         else NoiseSchedule.scaled_linear(steps=cfg.steps_generate))
            out_latent = self.engine.generate(
                inverted, cond, steps=cfg.steps_generate,
                guidance_scale=cfg.guidance_scale, sched=sched_gen)
            output = self.adapters.diffusion.decode_latent(out_latent)
            timings["generating_s"] = time.perf_counter() - t0
        except Exception as exc:
            timings["total_s"] = time.perf_counter() - started
            self._write_failure_manifest(req, stage, exc, timings)
            raise

        timings["total_s"] = time.perf_counter() - started
        manifest_id = self._manifest_id({
            "kind": "edit",
            "image": image_content_id(image),
            "instruction": req.instruction,
            "config": asdict(cfg),
            "models": self.adapters.model_ids,
        })
        image_meta = {
            "content_id": image_content_id(image),
            "width": image.width,
            "height": image.height,
            "original_size": list(original_size),
            "source": (str(req.image)
                       if not isinstance(req.image, Image.Image) else None),
        }
        if edit_dir is not None:
            edit_dir.save(self.cache_dir / f"dir-{manifest_id}.npz")
        self._save_conditioning(base_cond, self.cache_dir / f"cond-{manifest_id}.npz")
        return self._finalize(
            manifest_id=manifest_id, kind="edit", parent=None, image=image,
            original_size=original_size, instruction=req.instruction, cfg=cfg,
            pair=pair, inversion_caption=inversion_caption, inverted=inverted,
            inv_key=inv_key, cache_hit=cache_hit, weight=cfg.weight,
            direction_norm=direction_norm, output=output, timings=timings,
            calls_before=calls_before, template_name=template_name,
            image_meta=image_meta,
        )

    def rerun_with_weight(self, manifest_id: str, w: float, on_stage=None) -> EditResult:
        """Re-apply the cached direction at a new weight; no captioner/LLM calls."""
        notify = on_stage or (lambda stage: None)
        manifest = self.load_manifest(manifest_id)
        if manifest.get("kind") == "rerun":
            manifest_id = manifest["parent_manifest"]
            manifest = self.load_manifest(manifest_id)
        if manifest["config"]["conditioning_mode"] != "full":
            raise ContractError("weight reruns only apply to full-mode edits")
        inv_path = self._inversion_path(manifest["inversion"]["cache_key"])
        dir_path = self.cache_dir / f"dir-{manifest_id}.npz"
        cond_path = self.cache_dir / f"cond-{manifest_id}.npz"
        for p in (inv_path, dir_path, cond_path):
            if not p.exists():
                raise CacheMissError(
                    f"cached artifact {p.name} is gone; run a full edit first")
        calls_before = self.adapters.call_snapshot()
        timings: dict[str, float] = {}
        started = time.perf_counter()
        self.cache_hits += 1
        inverted = InvertedLatent.load(inv_path)
        edit_dir = EditDirection.load(dir_path)
        base_cond = self._load_conditioning(cond_path)
        cfg = EditConfig(**{**manifest["config"], "weight": w})
        notify("generating")
        t0 = time.perf_counter()
        cond = apply_direction(edit_dir, base_cond, w)
        sched = NoiseSchedule.scaled_linear(steps=cfg.steps_generate)
        out_latent = self.engine.generate(inverted, cond, steps=cfg.steps_generate,
                                          guidance_scale=cfg.guidance_scale, sched=sched)
        output = self.adapters.diffusion.decode_latent(out_latent)
        timings["generating_s"] = time.perf_counter() - t0
        timings["total_s"] = time.perf_counter() - started

        pair = CaptionPair(before=tuple(manifest["captions"]["before"]),
                           after=tuple(manifest["captions"]["after"]),
                           before_source=manifest["config"]["before_source"],
                           n_captions=manifest["config"]["n_captions"])
        new_id = self._manifest_id({
            "kind": "rerun", "parent": manifest_id, "weight": w,
            "models": self.adapters.model_ids,
        })
        return self._finalize(
            manifest_id=new_id, kind="rerun", parent=manifest_id,
            image=None, original_size=tuple(manifest["image"]["original_size"]),
            instruction=manifest["instruction"], cfg=cfg, pair=pair,
            inversion_caption=manifest["captions"]["inversion"], inverted=inverted,
            inv_key=manifest["inversion"]["cache_key"], cache_hit=True, weight=w,
            direction_norm=w * edit_dir.norm, output=output, timings=timings,
            calls_before=calls_before, image_meta=manifest["image"],
            template_name=manifest.get("template"),
        )

    # -- manifests -----------------------------------------------------------

    @staticmethod
    def _manifest_id(identity: dict) -> str:
        blob = json.dumps(identity, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]

    def manifest_path(self, manifest_id: str) -> Path:
        return self.manifests_dir / f"{manifest_id}.json"

    def load_manifest(self, manifest_id: str) -> dict:
        path = self.manifest_path(manifest_id)
        if not path.exists():
            raise CacheMissError(f"no manifest {manifest_id!r} under {self.manifests_dir}")
        return json.loads(path.read_text())

    def _calls_delta(self, before: dict) -> dict:
        after = self.adapters.call_snapshot()
        return {role: {name: after[role][name] - before[role].get(name, 0)
                       for name in after[role]}
                for role in after}

    def _write_failure_manifest(self, req: EditRequest, stage: str, exc: Exception,
                                timings: dict):
        failure_id = self._manifest_id({
            "kind": "failure", "instruction": req.instruction,
            "stage": stage, "error": str(exc),
        })
        record = {
            "manifest_id": failure_id,
            "kind": "failure",
            "created_at": datetime.now(timezone.utc).isoformat(),
            "instruction": req.instruction,
            "config": asdict(req.config),
            "failed_stage": stage,
            "error": f"{type(exc).__name__}: {exc}",
            "timings": timings,
        }
        self.manifest_path(failure_id).write_text(json.dumps(record, indent=2))
        logger.error("edit failed at stage %s: %s (manifest %s)", stage, exc, failure_id)

    def _finalize(self, *, manifest_id, kind, parent, image, original_size, instruction,
                  cfg, pair, inversion_caption, inverted, inv_key, cache_hit, weight,
                  direction_norm, output, timings, calls_before,
                  image_meta=None, template_name=None) -> EditResult:
        image_id = f"{manifest_id}-out"
        out_path = self.images_dir / f"{image_id}.png"
        output.save(out_path, format="PNG")
        out_sha = hashlib.sha256(out_path.read_bytes()).hexdigest()
        if image_meta is None:
            image_meta = {
                "content_id": image_content_id(image),
                "width": image.width,
                "height": image.height,
                "original_size": list(original_size),
            }
        manifest = {
            "manifest_id": manifest_id,
            "kind": kind,
            "parent_manifest": parent,
            "created_at": datetime.now(timezone.utc).isoformat(),
            "profile": self.adapters.profile,
            "model_ids": self.adapters.model_ids,
            "image": image_meta,
            "instruction": instruction,
            "template": template_name,
            "config": asdict(cfg),
            "captions": {
                "inversion": inversion_caption,
                "before": list(pair.before),
                "after": list(pair.after),
            },
            "direction": {"weight": weight, "norm": direction_norm},
            "inversion": {
                "cache_key": inv_key,
                "cache_hit": cache_hit,
                "steps": inverted.steps,
                "guidance_scale": inverted.guidance_scale_inversion,
                "trajectory_checksum": inverted.trajectory_checksum,
            },
            "output": {
                "image_id": image_id,
                "image_path": str(out_path.relative_to(self.runs_dir)),
                "sha256": out_sha,
            },
            "timings": timings,
            "calls": self._calls_delta(calls_before),
        }
        self.manifest_path(manifest_id).write_text(json.dumps(manifest, indent=2))
        return EditResult(
            output_image=output, output_path=out_path, image_id=image_id,
            caption_pair=pair, direction_norm=direction_norm, timings=timings,
            manifest_id=manifest_id, manifest_path=self.manifest_path(manifest_id),
        )
