"""Distribution-level evaluation: Gaussian fits and Frechet distance.

Generated and reference videos are reduced to compact feature vectors,
fitted with Gaussians, and compared with

    d^2 = ||mu_a - mu_b||^2 + Tr(cov_a + cov_b - 2 (cov_a cov_b)^(1/2))

computed through an eigendecomposition of the symmetrized product
cov_b^(1/2) cov_a cov_b^(1/2), which is similar to cov_a cov_b but
symmetric positive semi-definite, so no general matrix square root is
needed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import VideoTensor


class TooFewSamplesError(Exception):
    """Not enough samples for an unbiased covariance."""


class DimensionMismatchError(Exception):
    """Gaussian fits live in different dimensions."""


class NumericalFailureError(Exception):
    """Eigendecomposition produced eigenvalues too negative to trust."""


@dataclass(frozen=True)
class GaussianFit:
    mean: np.ndarray
    cov: np.ndarray
    n_samples: int

    def __post_init__(self):
        if self.mean.ndim != 1:
            raise ValueError("mean must be a vector")
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise ValueError(f"cov must be {d}x{d}, got {self.cov.shape}")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def fit_gaussian(samples: np.ndarray) -> GaussianFit:
    """Sample mean and unbiased covariance over rows of an (n, d) array."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise ValueError(f"samples must be 2-D, got shape {samples.shape}")
    n = samples.shape[0]
    if n < 2:
        raise TooFewSamplesError(f"need at least 2 samples, got {n}")
    mean = samples.mean(axis=0)
    centered = samples - mean
    cov = centered.T @ centered / (n - 1)
    return GaussianFit(mean=mean, cov=cov, n_samples=n)


def _psd_eigvals(matrix: np.ndarray, label: str) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition with small negative eigenvalues clipped to zero;
    eigenvalues beyond the tolerance indicate a genuinely non-PSD input."""
    values, vectors = np.linalg.eigh((matrix + matrix.T) / 2.0)
    scale = max(1.0, float(np.max(np.abs(values))) if values.size else 1.0)
    if np.min(values) < -1e-6 * scale:
        raise NumericalFailureError(
            f"{label} has eigenvalue {np.min(values):.3e}, below the PSD tolerance"
        )
    return np.clip(values, 0.0, None), vectors


def frechet_distance(a: GaussianFit, b: GaussianFit) -> float:
    if a.dim != b.dim:
        raise DimensionMismatchError(f"fits have dims {a.dim} and {b.dim}")
    for name, fit in (("a", a), ("b", b)):
        if not (np.all(np.isfinite(fit.mean)) and np.all(np.isfinite(fit.cov))):
            raise NumericalFailureError(f"fit {name} contains non-finite values")
    diff = a.mean - b.mean
    vals_b, vecs_b = _psd_eigvals(b.cov, "cov_b")
    sqrt_b = (vecs_b * np.sqrt(vals_b)) @ vecs_b.T
    product = sqrt_b @ a.cov @ sqrt_b
    vals_p, _ = _psd_eigvals(product, "cov product")
    trace_term = float(np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.sum(np.sqrt(vals_p)))
    return float(diff @ diff) + trace_term


def feature_extract(video: VideoTensor) -> np.ndarray:
    """Per-frame channel means, per-frame channel population variances, and
    mean-squared temporal differences; dimension 2*f*c + (f - 1)."""
    data = video.data
    f = data.shape[0]
    means = data.mean(axis=(1, 2)).ravel()
    variances = data.var(axis=(1, 2)).ravel()
    if f > 1:
        diffs = np.mean((data[1:] - data[:-1]) ** 2, axis=(1, 2, 3))
    else:
        diffs = np.zeros(0)
    return np.concatenate([means, variances, diffs])


def frechet_from_features(features_a: np.ndarray, features_b: np.ndarray) -> float:
    """Fit both feature sets and compare in one call."""
    return frechet_distance(fit_gaussian(features_a), fit_gaussian(features_b))
