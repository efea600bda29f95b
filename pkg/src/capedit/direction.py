"""Edit-direction embeddings.

The direction is the per-token difference between the after-edit and
before-edit caption embeddings, applied as a weighted shift on the base
conditioning: tokens' = tokens + w * delta. It is computed and applied at
the token-sequence level (the representation the denoiser cross-attends),
so w = 0 degenerates to the exact source conditioning. The pooled vector
carries the matching shift so metric-space arithmetic stays consistent.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .adapters.base import Embedder
from .adapters.types import TextConditioning
from .errors import ContractError

WEIGHT_GRID = (0.75, 1.0, 1.25)  # the studied weight sweep
DEFAULT_WEIGHT = 1.0


@dataclass(frozen=True)
class EditDirection:
    """Vector from the before-conditioning to the after-conditioning."""

    delta_tokens: np.ndarray  # (context_length, embed_dim)
    delta_pooled: np.ndarray  # (embed_dim,)
    weight: float = DEFAULT_WEIGHT

    def __post_init__(self):
        tokens = np.asarray(self.delta_tokens, dtype=np.float32)
        pooled = np.asarray(self.delta_pooled, dtype=np.float32)
        if tokens.ndim != 2 or pooled.ndim != 1 or pooled.shape[0] != tokens.shape[1]:
            raise ContractError(
                f"inconsistent direction shapes: tokens {tokens.shape}, "
                f"pooled {pooled.shape}")
        if not np.all(np.isfinite(tokens)) or not np.all(np.isfinite(pooled)):
            raise ContractError("direction contains non-finite entries")
        if self.weight <= 0:
            raise ContractError(f"direction weight must be > 0, got {self.weight}")
        object.__setattr__(self, "delta_tokens", tokens)
        object.__setattr__(self, "delta_pooled", pooled)

    @property
    def norm(self) -> float:
        """Frobenius norm of the token-level delta."""
        return float(np.linalg.norm(self.delta_tokens))

    def save(self, path: str | Path):
        np.savez(Path(path), delta_tokens=self.delta_tokens,
                 delta_pooled=self.delta_pooled,
                 meta=np.frombuffer(json.dumps({"weight": self.weight}).encode(),
                                    dtype=np.uint8))

    @classmethod
    def load(cls, path: str | Path) -> "EditDirection":
        with np.load(Path(path)) as archive:
            meta = json.loads(archive["meta"].tobytes().decode())
            return cls(delta_tokens=archive["delta_tokens"],
                       delta_pooled=archive["delta_pooled"], weight=meta["weight"])


def mean_conditioning(embedder: Embedder, captions: list[str]) -> TextConditioning:
    """Elementwise arithmetic mean of the captions' conditionings.

    All captions are encoded to the same fixed context length, so token
    matrices align; a single caption reduces to plain embed_text.
    """
    if not captions:
        raise ContractError("mean_conditioning requires at least one caption")
    encoded = [embedder.embed_text(c) for c in captions]
    if len(encoded) == 1:
        return encoded[0]
    tokens = np.mean([e.tokens_embedded for e in encoded], axis=0)
    pooled = np.mean([e.pooled for e in encoded], axis=0)
    return TextConditioning(tokens_embedded=tokens.astype(np.float32),
                            pooled=pooled.astype(np.float32),
                            source_text=" | ".join(captions))


def direction(before: TextConditioning, after: TextConditioning) -> EditDirection:
    """delta = after - before, elementwise, weight initialized to 1."""
    if before.tokens_embedded.shape != after.tokens_embedded.shape:
        raise ContractError(
            f"conditioning shapes differ: before {before.tokens_embedded.shape}, "
            f"after {after.tokens_embedded.shape}")
    return EditDirection(
        delta_tokens=after.tokens_embedded - before.tokens_embedded,
        delta_pooled=after.pooled - before.pooled,
        weight=DEFAULT_WEIGHT,
    )


def apply(edit_dir: EditDirection, base: TextConditioning, w: float) -> TextConditioning:
    """Shift ``base`` by w * delta; w = 0 returns the base unchanged.

    w = 0 is meant for reconstruction checks only; production edits use
    w > 0.
    """
    if w < 0:
        raise ContractError(f"weight must be >= 0, got {w}")
    if base.tokens_embedded.shape != edit_dir.delta_tokens.shape:
        raise ContractError(
            f"direction shape {edit_dir.delta_tokens.shape} does not match "
            f"conditioning shape {base.tokens_embedded.shape}")
    if w == 0:
        return base
    return TextConditioning(
        tokens_embedded=base.tokens_embedded + np.float32(w) * edit_dir.delta_tokens,
        pooled=base.pooled + np.float32(w) * edit_dir.delta_pooled,
        source_text=f"{base.source_text} [edit shift w={w:g}]",
    )
