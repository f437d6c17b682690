"""Deterministic probability-flow sampling for the toy diffusion model.

Integrates dx/dsigma = (x - D(x, sigma)) / sigma from sigma_max down to 0
with Heun's second-order method on a rho-spaced noise schedule. Classifier
-free guidance blends conditional and null denoiser outputs; the cascade
runs a low-resolution base stage, upsamples nearest-neighbor, and feeds the
result to an upsampler model as auxiliary conditioning.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .diffusion import DiffusionConfig, ToyDenoiser, VideoTensor, denoise
from .encoder import ConditioningEncoder, MetadataTokens, TokenEmbeddingMatrix
from .prompts import MultimodalPrompt


class NonFiniteStateError(Exception):
    """The integrator state picked up NaN or Inf entries."""


class CascadeShapeError(Exception):
    """Stage shapes are not nearest-neighbor compatible."""


class InvalidNError(ValueError):
    """Step count must be at least 1."""


@dataclass(frozen=True)
class SigmaSchedule:
    """Strictly decreasing noise levels ending at exactly zero."""

    sigmas: np.ndarray

    def __post_init__(self):
        s = self.sigmas
        if s.ndim != 1 or s.shape[0] < 2:
            raise ValueError("schedule needs at least [sigma_max, 0]")
        if s[-1] != 0.0:
            raise ValueError("schedule must end at sigma = 0")
        if np.any(np.diff(s) >= 0):
            raise ValueError("schedule must be strictly decreasing")

    @property
    def num_steps(self) -> int:
        return self.sigmas.shape[0] - 1


def build_schedule(config: DiffusionConfig, num_steps: int, rho: float | None = None) -> SigmaSchedule:
    """sigma_i = (sigma_max^(1/rho) + i/(N-1) * (sigma_min^(1/rho) - sigma_max^(1/rho)))^rho
    for i in 0..N-1, then a final entry of exactly 0."""
    if num_steps < 1:
        raise InvalidNError(f"num_steps must be >= 1, got {num_steps}")
    rho = config.rho if rho is None else rho
    if num_steps == 1:
        return SigmaSchedule(sigmas=np.array([config.sigma_max, 0.0]))
    i = np.arange(num_steps, dtype=np.float64)
    lo = config.sigma_min ** (1.0 / rho)
    hi = config.sigma_max ** (1.0 / rho)
    ramp = (hi + i / (num_steps - 1) * (lo - hi)) ** rho
    return SigmaSchedule(sigmas=np.concatenate([ramp, [0.0]]))


@dataclass(frozen=True)
class GuidanceConfig:
    """scale w blends denoiser branches: D_null + w * (D_cond - D_null).
    w == 1.0 and w == 0.0 return the single relevant branch untouched."""

    scale: float = 1.0
    null_condition: TokenEmbeddingMatrix | None = None


def guided_denoise(
    model: ToyDenoiser,
    x_sigma: np.ndarray,
    sigma: float,
    C: TokenEmbeddingMatrix,
    guidance: GuidanceConfig,
    aux: np.ndarray | None = None,
) -> np.ndarray:
    if guidance.scale == 1.0:
        return denoise(model, x_sigma, sigma, C, aux)
    if guidance.null_condition is None:
        raise ValueError("guidance with scale != 1 needs a null condition")
    if guidance.scale == 0.0:
        return denoise(model, x_sigma, sigma, guidance.null_condition, aux)
    d_cond = denoise(model, x_sigma, sigma, C, aux)
    d_null = denoise(model, x_sigma, sigma, guidance.null_condition, aux)
    return d_null + guidance.scale * (d_cond - d_null)


def heun_step(
    denoise_fn: Callable[[np.ndarray, float], np.ndarray],
    x: np.ndarray,
    sigma: float,
    sigma_next: float,
) -> np.ndarray:
    """One Heun step; the final step to sigma = 0 degrades to plain Euler
    because the slope (x - D) / sigma is undefined there."""
    d = (x - denoise_fn(x, sigma)) / sigma
    x_euler = x + (sigma_next - sigma) * d
    if sigma_next == 0.0:
        return x_euler
    d_next = (x_euler - denoise_fn(x_euler, sigma_next)) / sigma_next
    return x + (sigma_next - sigma) * 0.5 * (d + d_next)


def integrate(
    denoise_fn: Callable[[np.ndarray, float], np.ndarray],
    x_init: np.ndarray,
    schedule: SigmaSchedule,
) -> np.ndarray:
    """Run the full schedule. x_init is the state at schedule.sigmas[0]."""
    x = np.asarray(x_init, dtype=np.float64)
    for i in range(schedule.num_steps):
        x = heun_step(denoise_fn, x, float(schedule.sigmas[i]), float(schedule.sigmas[i + 1]))
        if not np.all(np.isfinite(x)):
            bad = int(np.size(x) - np.count_nonzero(np.isfinite(x)))
            raise NonFiniteStateError(
                f"{bad} non-finite entries after step {i} (sigma {schedule.sigmas[i]:.6g} "
                f"-> {schedule.sigmas[i + 1]:.6g})"
            )
    return x


def sample(
    model: ToyDenoiser,
    prompt: MultimodalPrompt,
    encoder: ConditioningEncoder,
    config: DiffusionConfig,
    num_steps: int,
    rng: np.random.Generator,
    framerate: float,
    guidance_scale: float = 1.0,
    rho: float | None = None,
    aux: np.ndarray | None = None,
) -> VideoTensor:
    """Draw x ~ N(0, sigma_max^2 I) and integrate down to a clean video.

    The conditioning matrix is rebuilt per noise level because the metadata
    rows embed sigma; guidance attaches the same metadata to an all-zero
    unit block so only the prompt content differs between branches.
    """
    schedule = build_schedule(config, num_steps, rho=rho)
    unit_block = encoder.unit_rows(prompt)
    null_block = np.zeros((1, encoder.spec.d_model))
    resolution = (model.data_shape[1], model.data_shape[2])

    def denoise_fn(x: np.ndarray, sigma: float) -> np.ndarray:
        meta = MetadataTokens(sigma=sigma, framerate=framerate, resolution=resolution)
        cond = encoder.attach_metadata(unit_block, meta)
        gcfg = GuidanceConfig(
            scale=guidance_scale, null_condition=encoder.attach_metadata(null_block, meta)
        )
        return guided_denoise(model, x, sigma, cond, gcfg, aux=aux)

    x = rng.standard_normal(model.data_shape) * float(schedule.sigmas[0])
    out = integrate(denoise_fn, x, schedule)
    return VideoTensor(data=out, framerate=framerate)


@dataclass(frozen=True)
class CascadeConfig:
    stage1_shape: tuple[int, int, int, int]
    stage2_shape: tuple[int, int, int, int]
    stage1_steps: int = 256
    stage2_steps: int = 40

    def __post_init__(self):
        f1, h1, w1, c1 = self.stage1_shape
        f2, h2, w2, c2 = self.stage2_shape
        if f1 != f2 or c1 != c2:
            raise CascadeShapeError("stages must share frame count and channels")
        if h2 % h1 != 0 or w2 % w1 != 0:
            raise CascadeShapeError(
                f"stage-2 resolution {h2}x{w2} is not an integer multiple of {h1}x{w1}"
            )
        if self.stage1_steps < 1 or self.stage2_steps < 1:
            raise ValueError("step counts must be >= 1")


def upsample_nearest(data: np.ndarray, factor_h: int, factor_w: int) -> np.ndarray:
    """Repeat rows and columns; frames and channels pass through."""
    return np.repeat(np.repeat(data, factor_h, axis=1), factor_w, axis=2)


def block_mean_downsample(data: np.ndarray, factor_h: int, factor_w: int) -> np.ndarray:
    """Average non-overlapping factor_h x factor_w blocks; the left inverse
    of upsample_nearest, used to derive base-stage training targets."""
    f, h, w, c = data.shape
    if h % factor_h != 0 or w % factor_w != 0:
        raise CascadeShapeError(f"{h}x{w} not divisible by {factor_h}x{factor_w}")
    return data.reshape(f, h // factor_h, factor_h, w // factor_w, factor_w, c).mean(axis=(2, 4))


def cascade_sample(
    base_model: ToyDenoiser,
    upsampler_model: ToyDenoiser,
    prompt: MultimodalPrompt,
    encoder: ConditioningEncoder,
    config: DiffusionConfig,
    cascade: CascadeConfig,
    rng: np.random.Generator,
    framerate: float,
    guidance_scale: float = 1.0,
    rho: float | None = None,
) -> VideoTensor:
    """Two-stage generation: base video at stage-1 shape, nearest-neighbor
    upsample, then the upsampler refines at stage-2 shape with the upsampled
    base as auxiliary conditioning in both guidance branches."""
    if tuple(base_model.data_shape) != tuple(cascade.stage1_shape):
        raise CascadeShapeError("base model shape does not match stage-1 shape")
    if tuple(upsampler_model.data_shape) != tuple(cascade.stage2_shape):
        raise CascadeShapeError("upsampler model shape does not match stage-2 shape")
    stage1 = sample(
        base_model,
        prompt,
        encoder,
        config,
        cascade.stage1_steps,
        rng,
        framerate,
        guidance_scale=guidance_scale,
        rho=rho,
    )
    factor_h = cascade.stage2_shape[1] // cascade.stage1_shape[1]
    factor_w = cascade.stage2_shape[2] // cascade.stage1_shape[2]
    aux = upsample_nearest(stage1.data, factor_h, factor_w).ravel()
    return sample(
        upsampler_model,
        prompt,
        encoder,
        config,
        cascade.stage2_steps,
        rng,
        framerate,
        guidance_scale=guidance_scale,
        rho=rho,
        aux=aux,
    )
