"""Automatic prompt discovery by meta-prompting.

An LLM is shown a fixed meta-instruction plus the best prompts found so far
(with their scores, ascending) and asked for a better prompt. Each step:
sample a few dataset examples, propose new candidate prompts, score every
candidate -- new and retained -- on this step's sample by running the full
edit pipeline and summing per-example image similarity against the gold
image, then keep the top 3. State and a per-step trace persist to disk so
an interrupted run resumes exactly.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .adapters.base import TextGenerator
from .adapters.types import LlmConfig
from .captions import parse_captions
from .editor import EditConfig, EditRequest, Editor
from .errors import ContractError
from .evaluation import DatasetExample, clip_i

logger = logging.getLogger(__name__)

REQUIRED_PLACEHOLDERS = ("[SOURCE_CAPTION]", "[TRANSFORMATION]")
DEFAULT_STEPS = 20
DEFAULT_PROPOSALS = 2
DEFAULT_EXAMPLES_PER_STEP = 8
TOP_K = 3

_PROMPT_LINE_RE = re.compile(r'prompt:\s*"([^"\n]+)"', re.IGNORECASE)


def meta_instruction() -> str:
    return resources.files("capedit.templates").joinpath(
        "meta_instruction.txt").read_text().strip()


def candidate_is_valid(template_text: str) -> bool:
    return all(p in template_text for p in REQUIRED_PLACEHOLDERS)


@dataclass
class PromptCandidate:
    """One candidate prompt template and its latest/best scores."""

    template_text: str
    score: float | None = None
    best_score: float | None = None
    born_step: int = 0

    def __post_init__(self):
        if not candidate_is_valid(self.template_text):
            raise ContractError(
                "candidate must contain both placeholder fields "
                f"{REQUIRED_PLACEHOLDERS}")


@dataclass
class OptimizerState:
    """History (ascending by score, at most top-3), step counter and pool."""

    history: list[PromptCandidate] = field(default_factory=list)
    step: int = 0
    rng_seed: int = 0
    eval_pool: list[DatasetExample] = field(default_factory=list)

    def check(self):
        if len(self.history) > TOP_K:
            raise ContractError(f"history exceeds top-{TOP_K}")
        scores = [c.score for c in self.history]
        if any(s is None for s in scores) and self.history:
            raise ContractError("retained candidates must be scored")
        if any(a > b for a, b in zip(scores, scores[1:])):
            raise ContractError("history must be sorted ascending by score")


def build_meta_prompt(state: OptimizerState) -> str:
    """Meta-instruction plus prompt/score blocks in ascending-score order."""
    parts = [meta_instruction()]
    for candidate in state.history:
        parts.append(f'prompt: "{candidate.template_text}"\nscore: {candidate.score}')
    return "\n\n".join(parts)


def parse_candidates(completion: str) -> list[str]:
    """Extract candidate templates from a completion.

    Primary form is quoted lines after a "prompt:" marker; the fallback takes
    the longest line containing both placeholders.
    """
    found = _PROMPT_LINE_RE.findall(completion)
    if found:
        return found
    lines = [line.strip().strip('"') for line in completion.splitlines()]
    valid = [line for line in lines if line and candidate_is_valid(line)]
    return [max(valid, key=len)] if valid else []


def propose(state: OptimizerState, generator: TextGenerator, llm_config: LlmConfig,
            n: int = DEFAULT_PROPOSALS, max_attempts: int = 3) -> list[PromptCandidate]:
    """Ask the LLM for ``n`` new candidates, revalidating and resampling.

    Invalid candidates consume one of ``max_attempts`` resamples and are then
    dropped; with zero valid candidates the step proceeds on history alone.
    """
    if n < 1:
        raise ContractError("must propose at least one candidate")
    meta = build_meta_prompt(state)
    seen = {c.template_text for c in state.history}
    valid: list[PromptCandidate] = []
    for _ in range(max_attempts):
        completion = generator.generate_text(meta, llm_config)
        for text in parse_candidates(completion):
            if not candidate_is_valid(text):
                logger.warning("dropping candidate without both placeholders: %r",
                               text[:80])
                continue
            if text in seen:
                continue
            seen.add(text)
            valid.append(PromptCandidate(template_text=text, born_step=state.step))
            if len(valid) == n:
                return valid
    if not valid:
        logger.warning("no valid candidates after %d attempts; proceeding with "
                       "history only", max_attempts)
    return valid


def pipeline_scorer(editor: Editor, edit_config: EditConfig | None = None
                    ) -> Callable[[str, DatasetExample], float]:
    """Per-example scorer: render the candidate, caption, edit, score.

    The candidate prompt is filled with the example's before-edit caption and
    edit request, the LLM produces the after-edit caption, the full edit runs,
    and the output is scored by image similarity against the gold image
    (the development split carries no captions, so caption metrics cannot
    steer the search).
    """
    cfg = edit_config or EditConfig(steps_invert=50, steps_generate=50)
    adapters = editor.adapters

    def score_one(template_text: str, example: DatasetExample) -> float:
        before = editor.captions.before_caption(example.load_source())
        prompt = (template_text
                  .replace("[SOURCE_CAPTION]", before)
                  .replace("[TRANSFORMATION]", example.instruction))
        completion = adapters.generator.generate_text(prompt, adapters.llm_config)
        after = parse_captions(completion, 1, which="after")[0]
        result = editor.edit(EditRequest(
            image=example.source_image, instruction=example.instruction,
            config=EditConfig(**{**cfg.__dict__, "before_caption_override": before,
                                 "after_caption_override": after})))
        return clip_i(adapters.metric_embedder, result.output_image,
                      example.load_target())

    return score_one


def score_prompt(candidate: PromptCandidate, examples: Sequence[DatasetExample],
                 scorer: Callable[[str, DatasetExample], float]) -> float:
    """Sum of per-example scores; a failed example contributes 0."""
    total = 0.0
    for example in examples:
        try:
            total += scorer(candidate.template_text, example)
        except Exception as exc:
            logger.error("scoring %r on %s failed: %s", candidate.template_text[:60],
                         getattr(example, "example_id", example), exc)
    return total


@dataclass
class OptimizeSettings:
    steps: int = DEFAULT_STEPS
    proposals_per_step: int = DEFAULT_PROPOSALS
    examples_per_step: int = DEFAULT_EXAMPLES_PER_STEP
    rng_seed: int = 0


def _sample_step_examples(pool: Sequence[DatasetExample], step: int, seed: int,
                          k: int) -> list[DatasetExample]:
    # Per-step child seed so resumption reproduces the same draws.
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(step,)))
    k = min(k, len(pool))
    idx = rng.choice(len(pool), size=k, replace=False)
    return [pool[int(i)] for i in idx]


def _save_state(state: OptimizerState, path: Path):
    payload = {
        "step": state.step,
        "rng_seed": state.rng_seed,
        "history": [candidate.__dict__ for candidate in state.history],
    }
    path.write_text(json.dumps(payload, indent=2))


def _load_state(path: Path, pool: list[DatasetExample]) -> OptimizerState:
    payload = json.loads(path.read_text())
    history = [PromptCandidate(**entry) for entry in payload["history"]]
    return OptimizerState(history=history, step=payload["step"],
                          rng_seed=payload["rng_seed"], eval_pool=pool)


def optimize(pool: list[DatasetExample], generator: TextGenerator,
             llm_config: LlmConfig,
             scorer: Callable[[str, DatasetExample], float],
             settings: OptimizeSettings | None = None,
             out_dir: str | Path | None = None,
             resume: bool = False) -> tuple[OptimizerState, list[dict]]:
    """Run the optimization loop; returns final state and the per-step trace.

    With ``out_dir`` set, ``state.json`` and ``trace.jsonl`` persist after
    every step and ``resume=True`` continues an interrupted run, reproducing
    the same remaining trace.
    """
    settings = settings or OptimizeSettings()
    state_path = trace_path = None
    trace: list[dict] = []
    state = OptimizerState(rng_seed=settings.rng_seed, eval_pool=pool)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        state_path = out_dir / "state.json"
        trace_path = out_dir / "trace.jsonl"
        if resume and state_path.exists():
            state = _load_state(state_path, pool)
            if trace_path.exists():
                trace = [json.loads(line) for line in
                         trace_path.read_text().splitlines() if line.strip()]

    best_ever = max((c.best_score for c in state.history
                     if c.best_score is not None), default=None)
    for step in range(state.step, settings.steps):
        sample = _sample_step_examples(pool, step, settings.rng_seed,
                                       settings.examples_per_step)
        new = propose(state, generator, llm_config, n=settings.proposals_per_step)
        candidates = new + state.history
        for candidate in candidates:
            candidate.score = score_prompt(candidate, sample, scorer)
            candidate.best_score = (candidate.score if candidate.best_score is None
                                    else max(candidate.best_score, candidate.score))
        # Top-k by this step's score; ties broken toward the older candidate.
        ranked = sorted(candidates, key=lambda c: (-c.score, c.born_step))
        retained = sorted(ranked[:TOP_K], key=lambda c: (c.score, -c.born_step))
        state.history = retained
        state.step = step + 1
        state.check()
        step_best = retained[-1].score if retained else None
        if step_best is not None:
            best_ever = step_best if best_ever is None else max(best_ever, step_best)
        trace.append({
            "step": step,
            "sample_ids": [getattr(e, "example_id", e) for e in sample],
            "candidates": [{"template_text": c.template_text, "score": c.score,
                            "born_step": c.born_step} for c in candidates],
            "history": [{"template_text": c.template_text, "score": c.score,
                         "best_score": c.best_score, "born_step": c.born_step}
                        for c in retained],
            "best_score": step_best,
            "best_ever": best_ever,
        })
        if out_dir is not None:
            _save_state(state, state_path)
            trace_path.write_text(
                "".join(json.dumps(entry) + "\n" for entry in trace))
    return state, trace


def render_trace_curve(trace_path: str | Path, out_path: str | Path) -> Path:
    """Plot best score per step (the optimization curve) to an image file."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    entries = [json.loads(line) for line in
               Path(trace_path).read_text().splitlines() if line.strip()]
    if not entries:
        raise ContractError(f"trace {trace_path} is empty")
    steps = [e["step"] for e in entries]
    best = [e["best_score"] for e in entries]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, best, marker="o", label="best prompt score")
    ax.set_xlabel("optimization step")
    ax.set_ylabel("score (summed image similarity)")
    ax.legend()
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
