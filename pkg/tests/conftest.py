import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from capedit.adapters import (
    AdapterSet,
    LlmConfig,
    MockCaptioner,
    MockDiffusion,
    MockEmbedder,
    MockTextGenerator,
)

FIXTURES_DIR = Path(__file__).parent / "fixtures"


def make_adapters(predictor: str = "conditioned", seed: int = 0,
                  factor: int = 8, script: dict | None = None,
                  queue: list | None = None) -> AdapterSet:
    return AdapterSet(
        embedder=MockEmbedder(seed=seed),
        captioner=MockCaptioner(),
        diffusion=MockDiffusion(mode=predictor, seed=seed, factor=factor),
        generator=MockTextGenerator(script=script, queue=queue),
        llm_config=LlmConfig(model_id="mock-llm", temperature=0.0, seed=seed),
        profile="mock",
    )


def synth_image(width: int = 64, height: int = 64, seed: int = 0) -> Image.Image:
    rng = np.random.default_rng(seed)
    px = rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8)
    return Image.fromarray(px, mode="RGB")


def make_dataset(root: Path, n: int = 3, split: str = "test",
                 with_captions: bool = True, size: int = 64) -> Path:
    """Synthetic dataset in the local layout: sources plus edited targets."""
    images = root / "images"
    images.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(n):
        source = synth_image(size, size, seed=100 + i)
        target_px = 255 - np.asarray(source)  # a maximally visible "edit"
        target = Image.fromarray(target_px.astype(np.uint8), mode="RGB")
        src_rel, tgt_rel = f"images/ex{i}-src.png", f"images/ex{i}-tgt.png"
        source.save(root / src_rel)
        target.save(root / tgt_rel)
        record = {
            "example_id": f"{split}-ex{i}",
            "source_image": src_rel,
            "target_image": tgt_rel,
            "instruction": f"invert the colors of object {i}",
        }
        if with_captions:
            record["target_caption"] = f"a color-inverted scene number {i}"
        records.append(record)
    (root / "manifest.json").write_text(
        json.dumps({"split": split, "examples": records}, indent=2))
    return root


@pytest.fixture
def adapters():
    return make_adapters()


@pytest.fixture
def image():
    return synth_image()


@pytest.fixture
def dataset_dir(tmp_path):
    return make_dataset(tmp_path / "dataset", n=3)
