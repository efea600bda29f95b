"""Steer the edit strength: one inversion, three weights.

The expensive inversion is cached by content, so re-running at a new
edit-direction weight costs a generation pass only -- no captioner, no LLM,
no embedding work. The three outputs are placed side by side.
"""

from pathlib import Path

import numpy as np
from PIL import Image

from capedit.adapters import build_adapter_set
from capedit.editor import EditConfig, EditRequest, Editor

out_dir = Path(__file__).parent / "output" / "weight_sweep"
out_dir.mkdir(parents=True, exist_ok=True)
rng = np.random.default_rng(2)
image = Image.fromarray(rng.integers(0, 256, (64, 64, 3), dtype=np.uint8), "RGB")
image_path = out_dir / "input.png"
image.save(image_path)

editor = Editor(build_adapter_set(profile="mock"), runs_dir=out_dir / "runs")
base = editor.edit(EditRequest(
    image=image_path, instruction="add birds to the sky",
    config=EditConfig(steps_invert=50, steps_generate=50, weight=1.0)))
print(f"base edit {base.manifest_id} at weight 1.0")

panes = [image]
for weight in (0.75, 1.0, 1.25):
    swept = editor.rerun_with_weight(base.manifest_id, weight)
    panes.append(swept.output_image)
    print(f"  weight {weight}: {swept.output_path.name} "
          f"(direction norm {swept.direction_norm:.3f})")

print("cache stats:", editor.cache_stats())

montage = Image.new("RGB", (64 * len(panes) + 8 * (len(panes) - 1), 64), "white")
for i, pane in enumerate(panes):
    montage.paste(pane, (i * 72, 0))
montage_path = out_dir / "input_vs_weights.png"
montage.save(montage_path)
print(f"montage (input | w=0.75 | w=1.0 | w=1.25): {montage_path}")
