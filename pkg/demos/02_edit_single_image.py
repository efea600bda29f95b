"""One full edit, end to end.

Caption the input, ask the (mock) LLM for the after-edit caption, build the
edit direction, invert, regenerate under the shifted conditioning, decode.
Everything lands under demos/output/ with a manifest sufficient to reproduce
the run.
"""

import json
from pathlib import Path

import numpy as np
from PIL import Image

from capedit.adapters import build_adapter_set
from capedit.editor import EditConfig, EditRequest, Editor

out_dir = Path(__file__).parent / "output" / "single_edit"
rng = np.random.default_rng(1)
image = Image.fromarray(rng.integers(0, 256, (64, 64, 3), dtype=np.uint8), "RGB")
image_path = out_dir / "input.png"
out_dir.mkdir(parents=True, exist_ok=True)
image.save(image_path)

editor = Editor(build_adapter_set(profile="mock"), runs_dir=out_dir / "runs")
request = EditRequest(
    image=image_path,
    instruction="make the sky pink",
    config=EditConfig(steps_invert=50, steps_generate=50, weight=1.0),
)
result = editor.edit(request, on_stage=lambda stage: print(f"stage: {stage}"))

print(f"before caption: {result.caption_pair.before[0]}")
print(f"after caption:  {result.caption_pair.after[0]}")
print(f"direction norm: {result.direction_norm:.4f}")
print(f"output image:   {result.output_path}")
print(f"manifest:       {result.manifest_path}")

manifest = json.loads(result.manifest_path.read_text())
print("timings:", {k: round(v, 3) for k, v in manifest["timings"].items()})
