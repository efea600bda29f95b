"""Deterministic DDIM generation and inversion.

The update is the deterministic (eta = 0) DDIM rule. With ``a(t)`` the
cumulative alpha at timestep t, one step from t down to t_prev is

    z_prev = sqrt(a(t_prev)) * (z_t - sqrt(1 - a(t)) * eps) / sqrt(a(t))
             + sqrt(1 - a(t_prev)) * eps

and the inversion step is its exact algebraic inverse for the same eps
tensor. Trajectories run over the selected (inference) timesteps only: the
image latent sits at the lowest selected timestep, terminal noise at the
highest. During inversion the noise prediction for the transition
t_prev -> t is evaluated at the pre-step latent with timestep t (the usual
one-step-lag approximation: the latent lags one step behind the timestep it
is evaluated at), which makes inversion the exact mirror of generation for
any predictor that does not depend on the latent itself.

All schedule arithmetic runs in float64 regardless of the latent dtype; the
round-trip invariants are float-sensitive.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .adapters.base import Diffusion, Embedder
from .adapters.types import LatentImage, TextConditioning
from .errors import ContractError, DivergenceError, ScheduleError

DEFAULT_TRAIN_TIMESTEPS = 1000
DEFAULT_BETA_START = 0.00085
DEFAULT_BETA_END = 0.012
DEFAULT_STEPS = 100  # both inversion and generation default to 100 steps


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative-alpha table plus the inference subsampling.

    ``alphas_cumprod[t]`` is in (0, 1] and non-increasing in t;
    ``selected_timesteps`` is strictly increasing and indexes into it.
    """

    alphas_cumprod: np.ndarray
    num_train_timesteps: int
    selected_timesteps: tuple[int, ...]

    def __post_init__(self):
        acp = np.asarray(self.alphas_cumprod, dtype=np.float64)
        if acp.ndim != 1 or acp.shape[0] != self.num_train_timesteps:
            raise ScheduleError(
                f"alphas_cumprod must have shape ({self.num_train_timesteps},), "
                f"got {acp.shape}")
        if np.any(acp <= 0) or np.any(acp > 1):
            raise ScheduleError("alphas_cumprod entries must lie in (0, 1]")
        if np.any(np.diff(acp) > 0):
            raise ScheduleError("alphas_cumprod must be non-increasing")
        sel = tuple(int(t) for t in self.selected_timesteps)
        if len(sel) < 1:
            raise ScheduleError("need at least one selected timestep")
        if any(t < 0 or t >= self.num_train_timesteps for t in sel):
            raise ScheduleError("selected timesteps out of range")
        if any(b <= a for a, b in zip(sel, sel[1:])):
            raise ScheduleError("selected timesteps must be strictly increasing")
        if any(acp[b] >= acp[a] for a, b in zip(sel, sel[1:])):
            raise ScheduleError("alphas_cumprod must be strictly decreasing "
                                "over the selected timesteps")
        object.__setattr__(self, "alphas_cumprod", acp)
        object.__setattr__(self, "selected_timesteps", sel)

    @classmethod
    def scaled_linear(cls, steps: int = DEFAULT_STEPS,
                      num_train_timesteps: int = DEFAULT_TRAIN_TIMESTEPS,
                      beta_start: float = DEFAULT_BETA_START,
                      beta_end: float = DEFAULT_BETA_END) -> "NoiseSchedule":
        """The scaled-linear beta schedule used by SD-style latent denoisers."""
        betas = np.linspace(math.sqrt(beta_start), math.sqrt(beta_end),
                            num_train_timesteps, dtype=np.float64) ** 2
        acp = np.cumprod(1.0 - betas)
        stride = num_train_timesteps // steps
        if stride < 1:
            raise ScheduleError(
                f"cannot select {steps} steps from {num_train_timesteps} timesteps")
        selected = tuple(range(0, stride * steps, stride))
        return cls(alphas_cumprod=acp, num_train_timesteps=num_train_timesteps,
                   selected_timesteps=selected)

    @property
    def steps(self) -> int:
        return len(self.selected_timesteps)

    def alpha_at(self, t: int) -> float:
        if t < 0 or t >= self.num_train_timesteps:
            raise ScheduleError(f"timestep {t} outside [0, {self.num_train_timesteps})")
        return float(self.alphas_cumprod[t])

    def _check_member(self, t: int):
        if t not in self.selected_timesteps:
            raise ScheduleError(f"timestep {t} is not in the selected schedule")

    def subsample(self, steps: int) -> "NoiseSchedule":
        """Evenly subsample the selected timesteps, keeping both endpoints."""
        if steps == self.steps:
            return self
        if steps < 1 or steps > self.steps:
            raise ScheduleError(
                f"cannot subsample {self.steps} selected steps down to {steps}")
        idx = np.round(np.linspace(0, self.steps - 1, steps)).astype(int)
        selected = tuple(self.selected_timesteps[i] for i in sorted(set(int(i) for i in idx)))
        return NoiseSchedule(alphas_cumprod=self.alphas_cumprod,
                             num_train_timesteps=self.num_train_timesteps,
                             selected_timesteps=selected)


def ddim_step(z_t: np.ndarray, eps: np.ndarray, t: int, t_prev: int,
              sched: NoiseSchedule) -> np.ndarray:
    """One deterministic denoising step z_t -> z_{t_prev} (t > t_prev)."""
    sched._check_member(t)
    sched._check_member(t_prev)
    if t <= t_prev:
        raise ContractError(f"ddim_step needs t > t_prev, got t={t}, t_prev={t_prev}")
    a_t = sched.alpha_at(t)
    a_prev = sched.alpha_at(t_prev)
    z = np.asarray(z_t, dtype=np.float64)
    e = np.asarray(eps, dtype=np.float64)
    if z.shape != e.shape:
        raise ContractError(f"latent shape {z.shape} != eps shape {e.shape}")
    x0 = (z - math.sqrt(1.0 - a_t) * e) / math.sqrt(a_t)
    out = math.sqrt(a_prev) * x0 + math.sqrt(1.0 - a_prev) * e
    return out.astype(np.asarray(z_t).dtype)


def ddim_invert_step(z_prev: np.ndarray, eps: np.ndarray, t: int, t_prev: int,
                     sched: NoiseSchedule) -> np.ndarray:
    """Exact algebraic inverse of ddim_step for the same eps tensor."""
    sched._check_member(t)
    sched._check_member(t_prev)
    if t <= t_prev:
        raise ContractError(f"ddim_invert_step needs t > t_prev, got t={t}, t_prev={t_prev}")
    a_t = sched.alpha_at(t)
    a_prev = sched.alpha_at(t_prev)
    z = np.asarray(z_prev, dtype=np.float64)
    e = np.asarray(eps, dtype=np.float64)
    if z.shape != e.shape:
        raise ContractError(f"latent shape {z.shape} != eps shape {e.shape}")
    x0 = (z - math.sqrt(1.0 - a_prev) * e) / math.sqrt(a_prev)
    out = math.sqrt(a_t) * x0 + math.sqrt(1.0 - a_t) * e
    return out.astype(np.asarray(z_prev).dtype)


@dataclass(frozen=True)
class InvertedLatent:
    """Terminal noise of an inversion plus everything needed to re-run it."""

    latent: LatentImage
    conditioning_text: str
    steps: int
    guidance_scale_inversion: float
    trajectory_checksum: str

    def save(self, path: str | Path):
        meta = {
            "conditioning_text": self.conditioning_text,
            "steps": self.steps,
            "guidance_scale_inversion": self.guidance_scale_inversion,
            "trajectory_checksum": self.trajectory_checksum,
            "width": self.latent.width,
            "height": self.latent.height,
            "scaling_factor": self.latent.scaling_factor,
        }
        np.savez(Path(path), data=self.latent.data,
                 meta=np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8))

    @classmethod
    def load(cls, path: str | Path) -> "InvertedLatent":
        with np.load(Path(path)) as archive:
            data = archive["data"]
            meta = json.loads(archive["meta"].tobytes().decode("utf-8"))
        latent = LatentImage(data=data, width=meta["width"], height=meta["height"],
                             scaling_factor=meta["scaling_factor"])
        return cls(latent=latent, conditioning_text=meta["conditioning_text"],
                   steps=meta["steps"],
                   guidance_scale_inversion=meta["guidance_scale_inversion"],
                   trajectory_checksum=meta["trajectory_checksum"])


class DdimEngine:
    """Runs inversion and guided generation against one diffusion adapter.

    Pure over its inputs apart from the injected noise predictor; run one
    engine (and adapter) per concurrent trajectory.
    """

    def __init__(self, diffusion: Diffusion, embedder: Embedder):
        self.diffusion = diffusion
        self.embedder = embedder
        self._uncond: TextConditioning | None = None

    def _uncond_conditioning(self) -> TextConditioning:
        # The empty-prompt conditioning is constant per embedder; memoize so
        # guided re-runs do no embedding work.
        if self._uncond is None:
            self._uncond = self.embedder.uncond_conditioning()
        return self._uncond

    def _eps(self, latent: LatentImage, t: int, cond: TextConditioning,
             uncond: TextConditioning | None, guidance: float) -> np.ndarray:
        eps_cond = self.diffusion.predict_noise(latent, t, cond)
        if guidance == 1.0 or uncond is None:
            return eps_cond
        eps_uncond = self.diffusion.predict_noise(latent, t, uncond)
        return eps_uncond + guidance * (eps_cond - eps_uncond)

    def invert(self, image_latent: LatentImage, caption: str, steps: int | None = None,
               sched: NoiseSchedule | None = None) -> InvertedLatent:
        """Deconstruct an image latent into terminal noise under its caption.

        Guidance during inversion is fixed at 1.0; asymmetric guidance breaks
        invertibility.
        """
        if not caption.strip():
            raise ContractError("inversion requires a non-empty caption")
        sched = self._resolve_schedule(steps, sched)
        cond = self.embedder.embed_text(caption)
        checksum = hashlib.sha256()
        z = image_latent.data.astype(np.float32)
        current = image_latent.with_data(z)
        ts = sched.selected_timesteps
        for i in range(1, len(ts)):
            t_prev, t = ts[i - 1], ts[i]
            eps = self._eps(current, t, cond, None, 1.0)
            z = ddim_invert_step(z, eps, t, t_prev, sched)
            if not np.all(np.isfinite(z)):
                raise DivergenceError("inversion latent became non-finite", step_index=i)
            checksum.update(z.tobytes())
            current = current.with_data(z)
        return InvertedLatent(
            latent=current,
            conditioning_text=caption,
            steps=sched.steps,
            guidance_scale_inversion=1.0,
            trajectory_checksum=checksum.hexdigest(),
        )

    def generate(self, start: InvertedLatent, conditioning: TextConditioning,
                 steps: int | None = None, guidance_scale: float = 1.0,
                 sched: NoiseSchedule | None = None) -> LatentImage:
        """Reconstruct from terminal noise under (possibly shifted) conditioning.

        With guidance_scale > 1 the prediction is blended classifier-free:
        eps = eps_uncond + g * (eps_cond - eps_uncond).
        """
        sched = self._resolve_schedule(steps if steps is not None else start.steps, sched)
        uncond = None
        if guidance_scale != 1.0:
            uncond = self._uncond_conditioning()
        z = start.latent.data.astype(np.float32)
        current = start.latent.with_data(z)
        ts = sched.selected_timesteps
        for i in range(len(ts) - 1, 0, -1):
            t, t_prev = ts[i], ts[i - 1]
            eps = self._eps(current, t, conditioning, uncond, guidance_scale)
            z = ddim_step(z, eps, t, t_prev, sched)
            if not np.all(np.isfinite(z)):
                raise DivergenceError("generation latent became non-finite",
                                      step_index=len(ts) - 1 - i)
            current = current.with_data(z)
        return current

    def _resolve_schedule(self, steps: int | None, sched: NoiseSchedule | None) -> NoiseSchedule:
        if sched is None:
            return NoiseSchedule.scaled_linear(steps=steps or DEFAULT_STEPS)
        if steps is not None and steps != sched.steps:
            return sched.subsample(steps)
        return sched
