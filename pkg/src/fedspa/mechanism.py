"""Per-sample clipping, masked sensitivity and Gaussian noise on active coordinates."""

import math
from dataclasses import dataclass

import numpy as np

from fedspa.errors import InvalidParameter, NumericError
from fedspa.rng import as_generator
from fedspa.sparsify import SparseMask


@dataclass(frozen=True)
class ClipSpec:
    """Per-coordinate clipping bound ``c``; the implied global bound is ``G = c * sqrt(dim)``."""

    per_coord_bound: float
    dim: int

    def __post_init__(self):
        if not self.per_coord_bound > 0:
            raise InvalidParameter(f"per_coord_bound must be > 0, got {self.per_coord_bound}")
        if self.dim < 1:
            raise InvalidParameter(f"dim must be positive, got {self.dim}")

    @property
    def G(self) -> float:
        return self.per_coord_bound * math.sqrt(self.dim)

    @classmethod
    def from_global(cls, G: float, dim: int) -> "ClipSpec":
        return cls(G / math.sqrt(dim), dim)


@dataclass
class NoiseSpec:
    sigma: float
    rng: np.random.Generator

    def __post_init__(self):
        if not self.sigma >= 0:
            raise InvalidParameter(f"sigma must be >= 0, got {self.sigma}")
        self.rng = as_generator(self.rng)


def clip_per_sample(grad, spec: ClipSpec) -> np.ndarray:
    """Clamp every coordinate to ``[-c, c]``.

    Accepts a single gradient of shape ``(d,)`` or a stack ``(B, d)``.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape[-1] != spec.dim:
        raise InvalidParameter(f"gradient dim {grad.shape[-1]} != clip dim {spec.dim}")
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient coordinate")
    c = spec.per_coord_bound
    return np.clip(grad, -c, c)


def l2_sensitivity_sq(p: float, G: float, B: int) -> float:
    """Squared L2 sensitivity ``2 p G^2 / B^2`` of the masked minibatch gradient."""
    if not 0 < p <= 1:
        raise InvalidParameter(f"p must be in (0, 1], got {p}")
    if B < 1:
        raise InvalidParameter(f"batch size must be >= 1, got {B}")
    if G < 0:
        raise InvalidParameter(f"G must be >= 0, got {G}")
    return 2.0 * p * G * G / (B * B)


def perturb_on_mask(grad, mask: SparseMask, noise: NoiseSpec) -> np.ndarray:
    """Add N(0, sigma^2) to the active coordinates only.

    Draws exactly ``k`` normals from the noise stream; nothing is drawn when
    sigma is zero.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != (mask.dim,):
        raise InvalidParameter(f"gradient shape {grad.shape} does not match mask dim {mask.dim}")
    out = grad.copy()
    if noise.sigma > 0:
        out[mask.active] += noise.sigma * noise.rng.standard_normal(mask.k)
    return out


def perturb_dense(grad, noise: NoiseSpec) -> np.ndarray:
    """DP-Fed baseline: noise on every coordinate."""
    grad = np.asarray(grad, dtype=np.float64)
    if noise.sigma == 0:
        return grad.copy()
    return grad + noise.sigma * noise.rng.standard_normal(grad.shape)
