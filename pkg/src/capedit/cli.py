"""Command-line surface.

Every command honors the global --config/--profile/--seed/--out options and
writes its artifacts under the --out directory. Failures exit nonzero with a
single machine-parsable ``error: <Type>: <message>`` line on stderr.
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click

from . import evaluation, metaprompt
from .adapters.config import build_adapter_set, llm_config_from, load_config
from .editor import CONDITIONING_MODES, EditConfig, EditRequest, Editor
from .errors import CapeditError, ConfigError


def _fail(exc: Exception) -> int:
    click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
    return 1


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except CapeditError as exc:
            sys.exit(_fail(exc))
    return wrapper


@click.group()
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="Adapter config file (JSON); defaults to $CAPEDIT_CONFIG.")
@click.option("--profile", type=click.Choice(["mock", "real"]), default=None,
              help="Adapter profile; mock runs with no model weights.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(), default="runs", show_default=True,
              help="Directory for manifests, images, cache and reports.")
@click.pass_context
def main(ctx, config_path, profile, seed, out_dir):
    """Training-free instruction-guided image editing."""
    ctx.ensure_object(dict)
    ctx.obj.update(config_path=config_path, profile=profile, seed=seed,
                   out_dir=Path(out_dir))


def _build_editor(obj) -> Editor:
    try:
        cfg = load_config(obj["config_path"])
    except ConfigError as exc:
        raise ConfigError(f"{exc}; pass --config or set CAPEDIT_CONFIG") from exc
    cfg.setdefault("llm", {})["seed"] = obj["seed"]
    adapters = build_adapter_set(cfg, profile=obj["profile"])
    return Editor(adapters, runs_dir=obj["out_dir"])


def _edit_options(fn):
    options = [
        click.option("--weight", type=float, default=1.0, show_default=True),
        click.option("--steps-invert", type=int, default=100, show_default=True),
        click.option("--steps-generate", type=int, default=100, show_default=True),
        click.option("--guidance", type=float, default=7.5, show_default=True),
        click.option("--n-captions", type=click.Choice(["1", "2", "4"]), default="1"),
        click.option("--shots", type=click.Choice(["0", "1", "3"]), default="0"),
        click.option("--before-source", type=click.Choice(["captioner", "llm"]),
                     default="captioner"),
        click.option("--mode", "conditioning_mode",
                     type=click.Choice(list(CONDITIONING_MODES)), default="full"),
        click.option("--template", default=None,
                     help="Prompt template name (defaults by configuration)."),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def _edit_config(obj, weight, steps_invert, steps_generate, guidance, n_captions,
                 shots, before_source, conditioning_mode, template,
                 before_caption=None, after_caption=None) -> EditConfig:
    return EditConfig(
        weight=weight, steps_invert=steps_invert, steps_generate=steps_generate,
        guidance_scale=guidance, n_captions=int(n_captions), shots=int(shots),
        before_source=before_source, conditioning_mode=conditioning_mode,
        seed=obj["seed"], template=template,
        before_caption_override=before_caption, after_caption_override=after_caption,
    )


@main.command()
@click.option("--image", required=True, type=click.Path(exists=True))
@click.option("--instruction", required=True)
@click.option("--before-caption", default=None,
              help="Override the captioner's before-edit caption.")
@click.option("--after-caption", default=None,
              help="Override the LLM's after-edit caption.")
@_edit_options
@click.pass_obj
@handle_errors
def edit(obj, image, instruction, before_caption, after_caption, **edit_kwargs):
    """Edit one image according to an instruction."""
    editor = _build_editor(obj)
    cfg = _edit_config(obj, before_caption=before_caption,
                       after_caption=after_caption, **edit_kwargs)
    result = editor.edit(EditRequest(image=image, instruction=instruction, config=cfg))
    click.echo(f"manifest: {result.manifest_id}")
    click.echo(f"image: {result.output_path}")


@main.command()
@click.option("--manifest", "manifest_id", required=True)
@click.option("--weight", type=float, required=True)
@click.pass_obj
@handle_errors
def rerun(obj, manifest_id, weight):
    """Re-generate a cached edit at a new edit-direction weight."""
    editor = _build_editor(obj)
    result = editor.rerun_with_weight(manifest_id, weight)
    click.echo(f"manifest: {result.manifest_id}")
    click.echo(f"image: {result.output_path}")


@main.command()
@click.option("--image", required=True, type=click.Path(exists=True))
@click.option("--caption", default=None,
              help="Inversion caption; defaults to the captioner output.")
@click.option("--steps", type=int, default=100, show_default=True)
@click.pass_obj
@handle_errors
def invert(obj, image, caption, steps):
    """DDIM-invert an image into its terminal noise latent."""
    from PIL import Image as PILImage

    from .ddim import NoiseSchedule

    editor = _build_editor(obj)
    with PILImage.open(image) as img:
        rgb = img.convert("RGB")
    if caption is None:
        caption = editor.captions.before_caption(rgb)
        click.echo(f"caption: {caption}")
    sched = NoiseSchedule.scaled_linear(steps=steps)
    inverted, key, hit = editor._invert_cached(rgb, caption, steps, sched)
    click.echo(f"cache-key: {key}{' (cached)' if hit else ''}")
    click.echo(f"latent: {editor._inversion_path(key)}")


@main.command()
@click.option("--dataset", "dataset_dir", required=True, type=click.Path(exists=True))
@click.option("--split", default="test", show_default=True)
@click.option("--limit", type=int, default=None)
@click.option("--workers", type=int, default=1, show_default=True)
@click.option("--reference", type=click.Choice(["tgt", "src", "both"]), default="both")
@click.option("--run-name", default="eval", show_default=True)
@click.option("--no-resume", is_flag=True, default=False)
@_edit_options
@click.pass_obj
@handle_errors
def evaluate(obj, dataset_dir, split, limit, workers, reference, run_name,
             no_resume, **edit_kwargs):
    """Run the metric harness over a dataset split."""
    editor = _build_editor(obj)
    cfg = _edit_config(obj, **edit_kwargs)
    examples = evaluation.load_dataset(dataset_dir, split=split, limit=limit)
    out_dir = obj["out_dir"] / run_name
    if workers > 1:
        click.echo("note: fan-out uses one worker process per adapter set",
                   err=True)
        records, summary = evaluation.run_batch_parallel(
            examples, cfg, out_dir, workers=workers,
            config_path=obj["config_path"], profile=obj["profile"],
            runs_dir=obj["out_dir"], resume=not no_resume, reference=reference)
    else:
        records, summary = evaluation.run_batch(
            editor, examples, cfg, out_dir, resume=not no_resume,
            reference=reference)
    click.echo((out_dir / "table.txt").read_text().rstrip())
    click.echo(f"records: {out_dir / 'records.jsonl'}")


@main.command("import-dataset")
@click.option("--source", required=True, type=click.Path(exists=True))
@click.option("--dest", required=True, type=click.Path())
@click.option("--split", default="test", show_default=True)
@handle_errors
def import_dataset(source, dest, split):
    """Convert a public MAGICBRUSH-style distribution to the local layout."""
    count = evaluation.import_magicbrush(source, dest, split=split)
    click.echo(f"imported: {count} examples -> {dest}")


@main.command("optimize-prompt")
@click.option("--dataset", "dataset_dir", required=True, type=click.Path(exists=True))
@click.option("--steps", type=int, default=20, show_default=True)
@click.option("--proposals", type=int, default=2, show_default=True)
@click.option("--examples-per-step", type=int, default=8, show_default=True)
@click.option("--steps-invert", type=int, default=50, show_default=True)
@click.option("--steps-generate", type=int, default=50, show_default=True)
@click.option("--run-name", default="metaprompt", show_default=True)
@click.option("--resume", is_flag=True, default=False)
@click.pass_obj
@handle_errors
def optimize_prompt(obj, dataset_dir, steps, proposals, examples_per_step,
                    steps_invert, steps_generate, run_name, resume):
    """Search for a better after-caption prompt by meta-prompting."""
    editor = _build_editor(obj)
    pool = evaluation.load_dataset(dataset_dir)
    settings = metaprompt.OptimizeSettings(
        steps=steps, proposals_per_step=proposals,
        examples_per_step=examples_per_step, rng_seed=obj["seed"])
    scorer = metaprompt.pipeline_scorer(
        editor, EditConfig(steps_invert=steps_invert, steps_generate=steps_generate,
                           seed=obj["seed"]))
    out_dir = obj["out_dir"] / run_name
    state, trace = metaprompt.optimize(
        pool, editor.adapters.generator, editor.adapters.llm_config, scorer,
        settings=settings, out_dir=out_dir, resume=resume)
    if state.history:
        best = state.history[-1]
        click.echo(f"best-prompt: {best.template_text}")
        click.echo(f"best-score: {best.score}")
    click.echo(f"trace: {out_dir / 'trace.jsonl'}")


@main.command()
@click.option("--trace", "trace_path", type=click.Path(exists=True), default=None,
              help="Optimizer trace to render as a score curve.")
@click.option("--eval", "eval_dir", type=click.Path(exists=True), default=None,
              help="Evaluation run directory to print the summary table for.")
@click.option("--out", "out_path", type=click.Path(), default=None)
@handle_errors
def report(trace_path, eval_dir, out_path):
    """Render an optimizer score curve or print an evaluation table."""
    if trace_path is None and eval_dir is None:
        raise ConfigError("report needs --trace or --eval")
    if trace_path is not None:
        out = Path(out_path) if out_path else Path(trace_path).with_suffix(".png")
        metaprompt.render_trace_curve(trace_path, out)
        click.echo(f"curve: {out}")
    if eval_dir is not None:
        table = Path(eval_dir) / "table.txt"
        if not table.exists():
            raise ConfigError(f"no table.txt under {eval_dir}")
        click.echo(table.read_text().rstrip())


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
@click.option("--queue-size", type=int, default=16, show_default=True)
@click.pass_obj
@handle_errors
def serve(obj, host, port, queue_size):
    """Start the HTTP edit-job service."""
    try:
        import uvicorn
    except ImportError as exc:
        raise ConfigError("serving requires uvicorn (pip install capedit[serve])") from exc

    from .service import create_app

    editor = _build_editor(obj)
    app = create_app(editor, queue_size=queue_size)
    uvicorn.run(app, host=host, port=port, log_level="info")


if __name__ == "__main__":
    main()
