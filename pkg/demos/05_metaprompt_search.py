"""Automatic prompt discovery with the meta-prompting loop.

Each step the (mock) LLM sees the meta-instruction plus the best prompts so
far with their scores and proposes two new candidate templates; every
candidate is scored on a fresh sample of examples by running the full edit
pipeline and summing per-example image similarity to the gold image; the
top three survive. The per-step trace renders as a score curve.
"""

import json
from pathlib import Path

import numpy as np
from PIL import Image

from capedit.adapters import build_adapter_set
from capedit.editor import EditConfig, Editor
from capedit.evaluation import load_dataset
from capedit.metaprompt import (
    OptimizeSettings,
    optimize,
    pipeline_scorer,
    render_trace_curve,
)

out_dir = Path(__file__).parent / "output" / "metaprompt"
dataset_dir = out_dir / "devset"
images = dataset_dir / "images"
images.mkdir(parents=True, exist_ok=True)

rng = np.random.default_rng(4)
records = []
for i in range(8):  # development split: gold images, no captions
    source = rng.integers(0, 256, (64, 64, 3), dtype=np.uint8)
    Image.fromarray(source, "RGB").save(images / f"dev{i}-src.png")
    Image.fromarray(np.roll(source, 8, axis=1), "RGB").save(images / f"dev{i}-tgt.png")
    records.append({
        "example_id": f"dev-{i}",
        "source_image": f"images/dev{i}-src.png",
        "target_image": f"images/dev{i}-tgt.png",
        "instruction": f"shift the scene sideways, variant {i}",
    })
(dataset_dir / "manifest.json").write_text(
    json.dumps({"split": "dev", "examples": records}, indent=2))

adapters = build_adapter_set(profile="mock")
editor = Editor(adapters, runs_dir=out_dir / "runs")
pool = load_dataset(dataset_dir)
scorer = pipeline_scorer(editor, EditConfig(steps_invert=10, steps_generate=10))

state, trace = optimize(
    pool, adapters.generator, adapters.llm_config, scorer,
    settings=OptimizeSettings(steps=6, examples_per_step=4),
    out_dir=out_dir / "optimizer")

for entry in trace:
    print(f"step {entry['step']:2d}  best score {entry['best_score']:.4f}")
best = state.history[-1]
print(f"\nbest prompt after {state.step} steps (score {best.score:.4f}):")
print(f"  {best.template_text}")

curve = render_trace_curve(out_dir / "optimizer" / "trace.jsonl",
                           out_dir / "score_curve.png")
print(f"\nscore curve: {curve}")
