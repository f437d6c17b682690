"""Variance-exploding diffusion math with a preconditioned toy denoiser.

The forward process perturbs clean data x to x + sigma * eps. The denoiser
is parameterized as

    D(x_sigma) = c_out(sigma) * F(c_in(sigma) * x_sigma) + c_skip(sigma) * x_sigma

and trained on the weighted objective lambda(sigma) * ||D(x_sigma) - x||^2
with lambda chosen so lambda(sigma) * c_out(sigma)^2 == 1. F is a small
dense network over the flattened, c_in-scaled input concatenated with the
mean-pooled conditioning matrix; gradients are exact reverse-mode, all in
float64 so finite-difference checks can be tight.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import cos, pi
from pathlib import Path
from typing import Callable

import numpy as np

from .encoder import ConditioningEncoder, MetadataTokens, TokenEmbeddingMatrix
from .prompts import MultimodalPrompt
from .serialization import FrameReader, FrameWriter

VIDEO_MAGIC = b"VIMI-VID1"
VIDEO_VERSION = 1
CHECKPOINT_MAGIC = b"VIMI-CKP1"
CHECKPOINT_VERSION = 1


class ShapeMismatchError(Exception):
    """Tensor shapes disagree."""


class DivergedLossError(Exception):
    """Training loss became NaN or Inf."""


@dataclass(frozen=True)
class DiffusionConfig:
    sigma_data: float = 0.5
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    p_mean: float = -1.2
    p_std: float = 1.2

    def __post_init__(self):
        if self.sigma_data <= 0 or self.rho <= 0:
            raise ValueError("sigma_data and rho must be positive")
        if not (0 < self.sigma_min < self.sigma_max):
            raise ValueError("need 0 < sigma_min < sigma_max")


@dataclass(frozen=True)
class VideoTensor:
    """frames x height x width x channels array with framerate metadata."""

    data: np.ndarray
    framerate: float

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ShapeMismatchError(f"video data must be 4-D, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("video data has non-finite entries")
        if self.framerate <= 0:
            raise ValueError("framerate must be positive")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        f, h, w, c = self.data.shape
        return f, h, w, c

    @property
    def resolution(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]

    def save(self, path: str | Path) -> None:
        w = FrameWriter(VIDEO_MAGIC, VIDEO_VERSION)
        for dim in self.data.shape:
            w.write_u32(dim)
        w.write_f32(self.framerate)
        w.write_bytes(self.data.astype("<f4").tobytes())
        Path(path).write_bytes(w.finish())

    @staticmethod
    def load(path: str | Path) -> "VideoTensor":
        r = FrameReader(Path(path).read_bytes(), VIDEO_MAGIC, expect_version=VIDEO_VERSION)
        shape = tuple(r.read_u32() for _ in range(4))
        framerate = r.read_f32()
        count = int(np.prod(shape))
        values = np.frombuffer(r.read_bytes(4 * count), dtype="<f4").astype(np.float64)
        return VideoTensor(data=values.reshape(shape), framerate=framerate)


def scalings(sigma: float, sigma_data: float) -> tuple[float, float, float]:
    """Preconditioning coefficients (c_in, c_out, c_skip) at one noise level."""
    var = sigma * sigma + sigma_data * sigma_data
    c_in = 1.0 / np.sqrt(var)
    c_out = sigma * sigma_data / np.sqrt(var)
    c_skip = sigma_data * sigma_data / var
    return c_in, c_out, c_skip


def loss_weight(sigma: float, sigma_data: float) -> float:
    """lambda(sigma) = (sigma^2 + sigma_data^2) / (sigma * sigma_data)^2."""
    return (sigma * sigma + sigma_data * sigma_data) / (sigma * sigma_data) ** 2


def perturb(x: VideoTensor, sigma: float, noise: np.ndarray) -> VideoTensor:
    """x + sigma * noise, elementwise."""
    if noise.shape != x.data.shape:
        raise ShapeMismatchError(f"noise shape {noise.shape} != video shape {x.data.shape}")
    return VideoTensor(data=x.data + sigma * noise, framerate=x.framerate)


def sample_sigma(config: DiffusionConfig, rng: np.random.Generator) -> float:
    """Draw a training noise level: log-normal, clamped to the sigma range."""
    sigma = float(np.exp(config.p_mean + config.p_std * rng.standard_normal()))
    return min(max(sigma, config.sigma_min), config.sigma_max)


def gaussian_oracle_denoiser(
    mu_d: np.ndarray | float, sigma_d: float, x_sigma: np.ndarray, sigma: float
) -> np.ndarray:
    """Closed-form optimal denoiser when the data is N(mu_d, sigma_d^2 I):
    the posterior mean (sigma_d^2 * x_sigma + sigma^2 * mu_d) / (sigma_d^2 + sigma^2).
    """
    return (sigma_d**2 * np.asarray(x_sigma) + sigma**2 * mu_d) / (sigma_d**2 + sigma**2)


class ToyDenoiser:
    """Three dense layers with tanh, standing in for a full backbone.

    The network consumes [c_in * x_sigma flattened; conditioning vector]
    where the conditioning vector is the pooled conditioning matrix,
    optionally extended with an auxiliary flat block (the cascade's
    upsampled low-resolution video). Parameters are float64 throughout.
    """

    PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")

    def __init__(
        self,
        data_shape: tuple[int, int, int, int],
        cond_dim: int,
        hidden: int = 64,
        sigma_data: float = 0.5,
        seed: int = 0,
    ):
        self.data_shape = tuple(int(d) for d in data_shape)
        self.data_dim = int(np.prod(self.data_shape))
        self.cond_dim = int(cond_dim)
        self.hidden = int(hidden)
        self.sigma_data = float(sigma_data)
        in_dim = self.data_dim + self.cond_dim
        rng = np.random.default_rng(seed)
        self.w1 = rng.standard_normal((self.hidden, in_dim)) / np.sqrt(in_dim)
        self.b1 = np.zeros(self.hidden)
        self.w2 = rng.standard_normal((self.hidden, self.hidden)) / np.sqrt(self.hidden)
        self.b2 = np.zeros(self.hidden)
        self.w3 = rng.standard_normal((self.data_dim, self.hidden)) / np.sqrt(self.hidden)
        self.b3 = np.zeros(self.data_dim)

    # -- raw network -------------------------------------------------------

    def network(self, z: np.ndarray) -> np.ndarray:
        """F itself: batched forward over rows of z."""
        return self._forward(z)[0]

    def _forward(self, z: np.ndarray):
        z1 = z @ self.w1.T + self.b1
        a1 = np.tanh(z1)
        z2 = a1 @ self.w2.T + self.b2
        a2 = np.tanh(z2)
        y = a2 @ self.w3.T + self.b3
        return y, (z, a1, a2)

    def _backward(self, dy: np.ndarray, cache) -> dict[str, np.ndarray]:
        z, a1, a2 = cache
        dw3 = dy.T @ a2
        db3 = dy.sum(axis=0)
        da2 = dy @ self.w3
        dz2 = da2 * (1.0 - a2 * a2)
        dw2 = dz2.T @ a1
        db2 = dz2.sum(axis=0)
        da1 = dz2 @ self.w2
        dz1 = da1 * (1.0 - a1 * a1)
        dw1 = dz1.T @ z
        db1 = dz1.sum(axis=0)
        return {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2, "w3": dw3, "b3": db3}

    # -- parameter vector ---------------------------------------------------

    def params_flat(self) -> np.ndarray:
        return np.concatenate([getattr(self, n).ravel() for n in self.PARAM_NAMES])

    def set_params_flat(self, theta: np.ndarray) -> None:
        pos = 0
        for name in self.PARAM_NAMES:
            arr = getattr(self, name)
            n = arr.size
            setattr(self, name, theta[pos : pos + n].reshape(arr.shape).copy())
            pos += n
        if pos != theta.size:
            raise ShapeMismatchError(f"parameter vector has {theta.size} entries, expected {pos}")

    @property
    def n_params(self) -> int:
        return sum(getattr(self, n).size for n in self.PARAM_NAMES)

    def conditioning_column_mask(self) -> np.ndarray:
        """Flat boolean mask selecting the first-layer columns that read the
        conditioning block; the part left unfrozen during warmup."""
        mask = np.zeros(self.n_params, dtype=bool)
        w1_mask = np.zeros_like(self.w1, dtype=bool)
        w1_mask[:, self.data_dim :] = True
        mask[: self.w1.size] = w1_mask.ravel()
        return mask

    # -- persistence ---------------------------------------------------------

    def save(self, path: str | Path) -> None:
        blocks = {name: getattr(self, name) for name in self.PARAM_NAMES}
        blocks["meta"] = np.array(
            [*self.data_shape, self.cond_dim, self.hidden, self.sigma_data], dtype=np.float64
        )
        w = FrameWriter(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
        w.write_u32(len(blocks))
        for name, arr in blocks.items():
            w.write_str(name)
            w.write_u32(arr.ndim)
            for dim in arr.shape:
                w.write_u32(dim)
            w.write_bytes(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        Path(path).write_bytes(w.finish())

    @staticmethod
    def load(path: str | Path) -> "ToyDenoiser":
        r = FrameReader(Path(path).read_bytes(), CHECKPOINT_MAGIC, expect_version=CHECKPOINT_VERSION)
        blocks: dict[str, np.ndarray] = {}
        for _ in range(r.read_u32()):
            name = r.read_str()
            shape = tuple(r.read_u32() for _ in range(r.read_u32()))
            count = int(np.prod(shape)) if shape else 1
            blocks[name] = np.frombuffer(r.read_bytes(8 * count), dtype="<f8").reshape(shape).copy()
        meta = blocks["meta"]
        model = ToyDenoiser(
            data_shape=tuple(int(v) for v in meta[:4]),
            cond_dim=int(meta[4]),
            hidden=int(meta[5]),
            sigma_data=float(meta[6]),
        )
        for name in ToyDenoiser.PARAM_NAMES:
            setattr(model, name, blocks[name])
        return model


def conditioning_vector(
    model: ToyDenoiser, C: TokenEmbeddingMatrix, aux: np.ndarray | None = None
) -> np.ndarray:
    cond = C.pooled()
    if aux is not None:
        cond = np.concatenate([cond, np.asarray(aux, dtype=np.float64).ravel()])
    if cond.shape[0] != model.cond_dim:
        raise ShapeMismatchError(
            f"conditioning vector has {cond.shape[0]} entries, model wants {model.cond_dim}"
        )
    return cond


def denoise(
    model: ToyDenoiser,
    x_sigma: VideoTensor | np.ndarray,
    sigma: float,
    C: TokenEmbeddingMatrix,
    aux: np.ndarray | None = None,
) -> VideoTensor | np.ndarray:
    """Evaluate the preconditioned denoiser at one noise level."""
    wrap = isinstance(x_sigma, VideoTensor)
    arr = x_sigma.data if wrap else np.asarray(x_sigma, dtype=np.float64)
    flat = arr.reshape(1, -1)
    if flat.shape[1] != model.data_dim:
        raise ShapeMismatchError(f"input has {flat.shape[1]} elements, model wants {model.data_dim}")
    cond = conditioning_vector(model, C, aux)
    c_in, c_out, c_skip = scalings(sigma, model.sigma_data)
    z = np.concatenate([c_in * flat, cond[None, :]], axis=1)
    f_out = model.network(z)
    out = (c_out * f_out + c_skip * flat).reshape(arr.shape)
    return VideoTensor(data=out, framerate=x_sigma.framerate) if wrap else out


def loss(
    model: ToyDenoiser,
    x: VideoTensor | np.ndarray,
    sigma: float,
    noise: np.ndarray,
    C: TokenEmbeddingMatrix,
    aux: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Weighted denoising loss and its exact gradient over the flat
    parameter vector, for a single sample."""
    arr = x.data if isinstance(x, VideoTensor) else np.asarray(x, dtype=np.float64)
    cond = conditioning_vector(model, C, aux)
    return _loss_and_grad_batch(
        model,
        arr.reshape(1, -1),
        np.array([sigma]),
        noise.reshape(1, -1),
        cond[None, :],
    )


def _loss_and_grad_batch(
    model: ToyDenoiser,
    x_flat: np.ndarray,
    sigmas: np.ndarray,
    noise_flat: np.ndarray,
    conds: np.ndarray,
) -> tuple[float, np.ndarray]:
    """Mean over the batch of lambda(sigma) * ||D(x_sigma) - x||^2 plus its
    gradient. One reverse pass serves the whole batch."""
    batch = x_flat.shape[0]
    sig = sigmas[:, None]
    var = sig**2 + model.sigma_data**2
    c_in = 1.0 / np.sqrt(var)
    c_out = sig * model.sigma_data / np.sqrt(var)
    c_skip = model.sigma_data**2 / var
    lam = var / (sig * model.sigma_data) ** 2

    x_noisy = x_flat + sig * noise_flat
    z = np.concatenate([c_in * x_noisy, conds], axis=1)
    f_out, cache = model._forward(z)
    d_out = c_out * f_out + c_skip * x_noisy
    resid = d_out - x_flat
    losses = lam[:, 0] * np.sum(resid * resid, axis=1)
    total = float(losses.mean())

    # dL/dF = (2/B) * lam * c_out * resid; gradients w.r.t. z are not needed.
    dy = (2.0 / batch) * lam * c_out * resid
    grads = model._backward(dy, cache)
    flat = np.concatenate([grads[n].ravel() for n in ToyDenoiser.PARAM_NAMES])
    return total, flat


@dataclass(frozen=True)
class TrainingConfig:
    steps: int = 2000
    lr: float = 5e-3
    batch_size: int = 16
    freeze_steps: int | None = None  # None -> 10% of steps
    seed: int = 0

    def resolved_freeze_steps(self) -> int:
        return self.steps // 10 if self.freeze_steps is None else self.freeze_steps


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    if total_steps <= 1:
        return base_lr
    return base_lr * 0.5 * (1.0 + cos(pi * step / (total_steps - 1)))


def train_toy(
    model: ToyDenoiser,
    dataset: list[tuple[VideoTensor, MultimodalPrompt]],
    config: DiffusionConfig,
    encoder: ConditioningEncoder,
    training: TrainingConfig = TrainingConfig(),
    aux_fn: Callable[[int], np.ndarray] | None = None,
    on_step: Callable[[int, float], None] | None = None,
) -> ToyDenoiser:
    """Gradient descent on the denoising objective with a cosine schedule.

    During the first freeze_steps only the first-layer columns that read
    the conditioning vector are updated, warming up the conditioning
    pathway before the rest of the network moves. `aux_fn(index)` supplies
    the per-sample auxiliary conditioning block for upsampler training.
    Raises DivergedLossError as soon as the loss stops being finite.
    """
    if not dataset:
        raise ValueError("dataset must be non-empty")
    rng = np.random.default_rng(training.seed)
    freeze_steps = training.resolved_freeze_steps()
    cond_mask = model.conditioning_column_mask()

    x_cache = [video.data.reshape(-1) for video, _ in dataset]
    unit_cache = [encoder.unit_rows(prompt) for _, prompt in dataset]
    meta_cache = [(video.framerate, video.resolution) for video, _ in dataset]
    aux_cache = [aux_fn(i) if aux_fn is not None else None for i in range(len(dataset))]

    for step in range(training.steps):
        idx = rng.integers(0, len(dataset), size=training.batch_size)
        sigmas = np.array([sample_sigma(config, rng) for _ in idx])
        x_flat = np.stack([x_cache[i] for i in idx])
        noise = rng.standard_normal(x_flat.shape)
        conds = []
        for j, i in enumerate(idx):
            fps, res = meta_cache[i]
            meta = MetadataTokens(sigma=sigmas[j], framerate=fps, resolution=res)
            c_mat = encoder.attach_metadata(unit_cache[i], meta)
            conds.append(conditioning_vector(model, c_mat, aux_cache[i]))
        conds = np.stack(conds)

        step_loss, grad = _loss_and_grad_batch(model, x_flat, sigmas, noise, conds)
        if not np.isfinite(step_loss):
            raise DivergedLossError(f"loss became {step_loss} at step {step}")
        if step < freeze_steps:
            grad = np.where(cond_mask, grad, 0.0)
        lr_t = cosine_lr(training.lr, step, training.steps)
        model.set_params_flat(model.params_flat() - lr_t * grad)
        if on_step is not None:
            on_step(step, step_loss)
    return model
