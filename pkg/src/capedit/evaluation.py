"""Dataset ingestion, the four quality metrics, and the batch harness.

Metrics: CLIP-T / CLIP-I are cosine similarities between the output-image
embedding and the reference caption / image embedding (higher is better;
"cosine distance" is reported as similarity throughout). BLEU is sentence
4-gram BLEU with brevity penalty and no smoothing, over a Moses-compatible
tokenization. Caption cosine is the cosine of pooled caption embeddings.

The dataset loader reads a directory with a ``manifest.json`` listing
example records; ``import_magicbrush`` converts the public distribution
(per-image folders plus ``edit_turns.json``) into that layout so the
pipeline is isolated from upstream format drift.
"""

from __future__ import annotations

import json
import logging
import math
import re
import shutil
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .adapters.base import AdapterSet, Embedder
from .editor import EditConfig, EditRequest, Editor
from .errors import ConfigError, ContractError, InputFormatError

logger = logging.getLogger(__name__)


# -- tokenization -------------------------------------------------------------

_TOK_PUNCT = re.compile(r"([\[\](){}\"“”,;:!?])")
_TOK_FINAL_PERIOD = re.compile(r"(?<!\d)\.(?!\d)")
_TOK_APOSTROPHE = re.compile(r"(\w)'(\w)")
_TOK_WS = re.compile(r"\s+")


def moses_tokenize(text: str) -> list[str]:
    """Moses-compatible tokenization (the subset caption text exercises).

    Rules, in order: pad brackets/quotes/commas/colons/semicolons/!? with
    spaces; split periods not flanked by digits; split English contractions
    and possessives before the apostrophe ("dog's" -> "dog 's"); collapse
    whitespace. Case is preserved.
    """
    text = _TOK_PUNCT.sub(r" \1 ", text)
    text = _TOK_FINAL_PERIOD.sub(" . ", text)
    text = _TOK_APOSTROPHE.sub(r"\1 '\2", text)
    return [t for t in _TOK_WS.split(text.strip()) if t]


# -- metrics ------------------------------------------------------------------

def cosine(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ContractError("cosine undefined for zero vectors")
    return float(np.dot(u, v) / (nu * nv))


def bleu4(candidate: str, reference: str) -> float:
    """Sentence 4-gram BLEU in [0, 100]; no smoothing.

    A candidate shorter than four tokens (or any zero n-gram precision)
    scores 0.0 rather than raising.
    """
    if not candidate.strip() or not reference.strip():
        raise ContractError("bleu4 requires non-empty strings")
    cand = moses_tokenize(candidate)
    ref = moses_tokenize(reference)
    if len(cand) < 4:
        return 0.0
    log_precision_sum = 0.0
    for n in range(1, 5):
        cand_ngrams: dict[tuple, int] = {}
        for i in range(len(cand) - n + 1):
            gram = tuple(cand[i:i + n])
            cand_ngrams[gram] = cand_ngrams.get(gram, 0) + 1
        ref_ngrams: dict[tuple, int] = {}
        for i in range(len(ref) - n + 1):
            gram = tuple(ref[i:i + n])
            ref_ngrams[gram] = ref_ngrams.get(gram, 0) + 1
        clipped = sum(min(count, ref_ngrams.get(gram, 0))
                      for gram, count in cand_ngrams.items())
        total = max(len(cand) - n + 1, 0)
        if clipped == 0 or total == 0:
            return 0.0
        log_precision_sum += math.log(clipped / total)
    brevity = 1.0 if len(cand) >= len(ref) else math.exp(1.0 - len(ref) / len(cand))
    return 100.0 * brevity * math.exp(log_precision_sum / 4.0)


def clip_t(embedder: Embedder, output_image: Image.Image, caption: str) -> float:
    """Cosine between the output-image embedding and the caption embedding."""
    img = embedder.embed_image(output_image)
    txt = embedder.embed_text(caption)
    return cosine(img.vector, txt.pooled)


def clip_i(embedder: Embedder, output_image: Image.Image,
           reference_image: Image.Image) -> float:
    """Cosine between the output-image and reference-image embeddings."""
    out = embedder.embed_image(output_image)
    ref = embedder.embed_image(reference_image)
    return cosine(out.vector, ref.vector)


def caption_cosine(embedder: Embedder, candidate: str, reference: str) -> float:
    """Cosine between two captions' pooled embeddings."""
    a = embedder.embed_text(candidate)
    b = embedder.embed_text(reference)
    return cosine(a.pooled, b.pooled)


# -- dataset ------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetExample:
    example_id: str
    source_image: Path
    target_image: Path
    instruction: str
    target_caption: str | None = None  # absent in the development split

    def __post_init__(self):
        if not self.instruction.strip():
            raise ContractError(f"example {self.example_id}: empty instruction")

    def load_source(self) -> Image.Image:
        return _open_rgb(self.source_image)

    def load_target(self) -> Image.Image:
        return _open_rgb(self.target_image)


def _open_rgb(path: Path) -> Image.Image:
    try:
        with Image.open(path) as img:
            return img.convert("RGB")
    except FileNotFoundError:
        raise InputFormatError("image file not found", source=str(path))
    except Exception as exc:
        raise InputFormatError(f"cannot decode image: {exc}", source=str(path))


def load_dataset(dataset_dir: str | Path, split: str | None = None,
                 limit: int | None = None) -> list[DatasetExample]:
    dataset_dir = Path(dataset_dir)
    manifest_path = dataset_dir / "manifest.json"
    if not manifest_path.exists():
        raise ConfigError(f"no manifest.json under {dataset_dir}")
    manifest = json.loads(manifest_path.read_text())
    if split is not None and manifest.get("split") not in (None, split):
        raise ConfigError(
            f"dataset at {dataset_dir} is split {manifest.get('split')!r}, "
            f"wanted {split!r}")
    examples = []
    for record in manifest["examples"][: limit if limit else None]:
        examples.append(DatasetExample(
            example_id=record["example_id"],
            source_image=dataset_dir / record["source_image"],
            target_image=dataset_dir / record["target_image"],
            instruction=record["instruction"],
            target_caption=record.get("target_caption"),
        ))
    return examples


def import_magicbrush(source_dir: str | Path, dest_dir: str | Path,
                      split: str = "test") -> int:
    """Convert a public MAGICBRUSH-style distribution into our layout.

    Expects ``edit_turns.json`` (records with "input", "output" and
    "instruction" file names) next to per-image folders, plus an optional
    caption table in ``global_descriptions.json`` or ``captions.json``
    mapping output file names to target captions. Returns the number of
    examples imported.
    """
    source_dir, dest_dir = Path(source_dir), Path(dest_dir)
    turns_path = source_dir / "edit_turns.json"
    if not turns_path.exists():
        raise ConfigError(f"no edit_turns.json under {source_dir}")
    turns = json.loads(turns_path.read_text())
    captions: dict[str, str] = {}
    for cap_name in ("global_descriptions.json", "captions.json"):
        cap_path = source_dir / cap_name
        if cap_path.exists():
            raw = json.loads(cap_path.read_text())
            # Either {output_name: caption} or {folder: {output_name: caption}}.
            for key, value in raw.items():
                if isinstance(value, dict):
                    captions.update(value)
                else:
                    captions[key] = value
            break

    by_name: dict[str, Path] = {}
    for path in source_dir.rglob("*"):
        if path.is_file() and path.suffix.lower() in (".png", ".jpg", ".jpeg"):
            by_name.setdefault(path.name, path)

    images_dir = dest_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    records = []
    skipped = 0
    for i, turn in enumerate(turns):
        input_name, output_name = turn.get("input"), turn.get("output")
        instruction = turn.get("instruction", "")
        if not input_name or not output_name or not instruction.strip():
            skipped += 1
            continue
        src, tgt = by_name.get(input_name), by_name.get(output_name)
        if src is None or tgt is None:
            skipped += 1
            continue
        example_id = f"{split}-{i:05d}"
        src_rel = f"images/{example_id}-src{src.suffix.lower()}"
        tgt_rel = f"images/{example_id}-tgt{tgt.suffix.lower()}"
        shutil.copyfile(src, dest_dir / src_rel)
        shutil.copyfile(tgt, dest_dir / tgt_rel)
        record = {
            "example_id": example_id,
            "source_image": src_rel,
            "target_image": tgt_rel,
            "instruction": instruction,
        }
        caption = captions.get(output_name)
        if caption:
            record["target_caption"] = caption
        records.append(record)
    if skipped:
        logger.warning("skipped %d incomplete records during import", skipped)
    (dest_dir / "manifest.json").write_text(json.dumps(
        {"split": split, "examples": records}, indent=2))
    return len(records)


# -- batch harness ------------------------------------------------------------

METRIC_FIELDS = ("clip_t_tgt", "clip_i_tgt", "clip_t_src", "clip_i_src",
                 "bleu", "caption_cosine")


@dataclass
class EvalRecord:
    example_id: str
    clip_t_tgt: float | None = None
    clip_i_tgt: float | None = None
    clip_t_src: float | None = None
    clip_i_src: float | None = None
    bleu: float | None = None
    caption_cosine: float | None = None
    generated_caption: str | None = None
    manifest_id: str | None = None
    error: str | None = None


def evaluate_example(editor: Editor, example: DatasetExample,
                     cfg: EditConfig) -> EvalRecord:
    """Edit one example and score the output against gold and source."""
    adapters = editor.adapters
    embedder = adapters.metric_embedder
    result = editor.edit(EditRequest(image=example.source_image,
                                     instruction=example.instruction, config=cfg))
    source = example.load_source()
    target = example.load_target()
    generated_caption = result.caption_pair.after[0]
    source_caption = result.caption_pair.before[0]
    record = EvalRecord(example_id=example.example_id,
                        generated_caption=generated_caption,
                        manifest_id=result.manifest_id)
    record.clip_i_tgt = clip_i(embedder, result.output_image, target)
    record.clip_i_src = clip_i(embedder, result.output_image, source)
    record.clip_t_src = clip_t(embedder, result.output_image, source_caption)
    if example.target_caption:
        record.clip_t_tgt = clip_t(embedder, result.output_image, example.target_caption)
        if cfg.conditioning_mode != "instruction_only":
            record.bleu = bleu4(generated_caption, example.target_caption)
            record.caption_cosine = caption_cosine(embedder, generated_caption,
                                                   example.target_caption)
    return record


def summarize(records: list[EvalRecord]) -> dict:
    """Arithmetic means over present fields; ordering-invariant."""
    summary: dict = {"examples": len(records),
                     "failures": sum(1 for r in records if r.error)}
    for name in METRIC_FIELDS:
        values = [getattr(r, name) for r in records
                  if r.error is None and getattr(r, name) is not None]
        summary[f"mean_{name}"] = float(np.mean(values)) if values else None
        summary[f"count_{name}"] = len(values)
    return summary


def format_table(summary: dict, label: str, reference: str = "tgt") -> str:
    """Human-readable summary row mirroring the benchmark table columns."""
    def fmt(value):
        return "   -   " if value is None else f"{value:7.4f}"

    lines = []
    if reference in ("tgt", "both"):
        lines.append(f"{'':24s} {'BLEU':>8s} {'Cosine Sim.':>12s} {'CLIP-T':>8s} {'CLIP-I':>8s}")
        lines.append(f"{label:24s} {fmt(summary['mean_bleu']):>8s} "
                     f"{fmt(summary['mean_caption_cosine']):>12s} "
                     f"{fmt(summary['mean_clip_t_tgt']):>8s} "
                     f"{fmt(summary['mean_clip_i_tgt']):>8s}")
    if reference in ("src", "both"):
        lines.append(f"{'':24s} {'CLIP-T Src':>12s} {'CLIP-I Src':>12s}")
        lines.append(f"{label:24s} {fmt(summary['mean_clip_t_src']):>12s} "
                     f"{fmt(summary['mean_clip_i_src']):>12s}")
    lines.append(f"examples: {summary['examples']}  failures: {summary['failures']}")
    return "\n".join(lines)


def run_batch(editor: Editor, examples: list[DatasetExample], cfg: EditConfig,
              out_dir: str | Path, resume: bool = True,
              reference: str = "both") -> tuple[list[EvalRecord], dict]:
    """Evaluate ``examples``, resuming past completed ids via records.jsonl.

    Per-example failures are recorded and the batch continues; the summary
    carries the failure count. Returns (records, summary).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records_path = out_dir / "records.jsonl"
    done: dict[str, EvalRecord] = {}
    if resume and records_path.exists():
        for line in records_path.read_text().splitlines():
            if line.strip():
                data = json.loads(line)
                done[data["example_id"]] = EvalRecord(**data)

    records: list[EvalRecord] = []
    with records_path.open("a") as sink:
        for example in examples:
            if example.example_id in done:
                records.append(done[example.example_id])
                continue
            try:
                record = evaluate_example(editor, example, cfg)
            except Exception as exc:  # per-example isolation
                logger.error("example %s failed: %s", example.example_id, exc)
                record = EvalRecord(example_id=example.example_id,
                                    error=f"{type(exc).__name__}: {exc}")
            records.append(record)
            sink.write(json.dumps(asdict(record)) + "\n")
            sink.flush()

    summary = summarize(records)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    label = editor.adapters.model_ids["generator"]
    (out_dir / "table.txt").write_text(format_table(summary, label, reference) + "\n")
    return records, summary


# Worker processes own their adapter instances; the parent is the single
# writer of records.jsonl and merges results as they complete.
_WORKER_EDITOR: Editor | None = None


def _worker_init(config_path, profile, runs_dir):
    from .adapters.config import build_adapter_set, load_config

    global _WORKER_EDITOR
    cfg = load_config(config_path)
    adapters = build_adapter_set(cfg, profile=profile)
    _WORKER_EDITOR = Editor(adapters, runs_dir=runs_dir)


def _worker_eval(example_payload: dict, cfg_payload: dict) -> dict:
    example = DatasetExample(
        example_id=example_payload["example_id"],
        source_image=Path(example_payload["source_image"]),
        target_image=Path(example_payload["target_image"]),
        instruction=example_payload["instruction"],
        target_caption=example_payload.get("target_caption"),
    )
    cfg = EditConfig(**cfg_payload)
    try:
        record = evaluate_example(_WORKER_EDITOR, example, cfg)
    except Exception as exc:
        record = EvalRecord(example_id=example.example_id,
                            error=f"{type(exc).__name__}: {exc}")
    return asdict(record)


def run_batch_parallel(examples: list[DatasetExample], cfg: EditConfig,
                       out_dir: str | Path, workers: int,
                       config_path, profile, runs_dir,
                       resume: bool = True,
                       reference: str = "both") -> tuple[list[EvalRecord], dict]:
    """Fan examples out across worker processes, one adapter set each."""
    from concurrent.futures import ProcessPoolExecutor

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records_path = out_dir / "records.jsonl"
    done: dict[str, EvalRecord] = {}
    if resume and records_path.exists():
        for line in records_path.read_text().splitlines():
            if line.strip():
                data = json.loads(line)
                done[data["example_id"]] = EvalRecord(**data)

    pending = [e for e in examples if e.example_id not in done]
    records: list[EvalRecord] = [done[e.example_id] for e in examples
                                 if e.example_id in done]
    cfg_payload = asdict(cfg)
    with records_path.open("a") as sink, ProcessPoolExecutor(
            max_workers=workers, initializer=_worker_init,
            initargs=(config_path, profile, str(runs_dir))) as pool:
        payloads = [{"example_id": e.example_id,
                     "source_image": str(e.source_image),
                     "target_image": str(e.target_image),
                     "instruction": e.instruction,
                     "target_caption": e.target_caption} for e in pending]
        for data in pool.map(_worker_eval, payloads,
                             [cfg_payload] * len(payloads)):
            records.append(EvalRecord(**data))
            sink.write(json.dumps(data) + "\n")
            sink.flush()

    summary = summarize(records)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    (out_dir / "table.txt").write_text(
        format_table(summary, f"workers={workers}", reference) + "\n")
    return records, summary
