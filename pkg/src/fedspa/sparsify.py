"""RandK sparsification.

A mask keeps ``k`` of ``d`` coordinates chosen uniformly at random. The
scaled variant multiplies kept values by ``1/p = d/k`` so that the
sparsified vector is an unbiased estimate of the input.
"""

import struct
from dataclasses import dataclass

import numpy as np

from fedspa.errors import FormatError, InvalidParameter
from fedspa.rng import as_generator


@dataclass(frozen=True)
class SparseMask:
    dim: int
    active: np.ndarray  # sorted int64 indices, size k

    def __post_init__(self):
        active = np.asarray(self.active, dtype=np.int64)
        if self.dim < 1:
            raise InvalidParameter(f"dim must be positive, got {self.dim}")
        if active.ndim != 1 or not 1 <= active.size <= self.dim:
            raise InvalidParameter(f"mask must have 1..{self.dim} indices, got {active.size}")
        if np.any(np.diff(active) <= 0):
            raise InvalidParameter("mask indices must be sorted and distinct")
        if active[0] < 0 or active[-1] >= self.dim:
            raise InvalidParameter(f"mask indices must lie in [0, {self.dim})")
        active.setflags(write=False)
        object.__setattr__(self, "active", active)

    @property
    def k(self) -> int:
        return int(self.active.size)

    @property
    def p(self) -> float:
        return self.k / self.dim

    @classmethod
    def full(cls, dim: int) -> "SparseMask":
        return cls(dim, np.arange(dim))

    def __eq__(self, other):
        if not isinstance(other, SparseMask):
            return NotImplemented
        return self.dim == other.dim and np.array_equal(self.active, other.active)

    def __hash__(self):
        return hash((self.dim, self.active.tobytes()))


def k_for_ratio(dim: int, p: float) -> int:
    """Number of kept coordinates for compression ratio ``p`` (at least 1)."""
    if not 0 < p <= 1:
        raise InvalidParameter(f"compression ratio must be in (0, 1], got {p}")
    return max(1, min(dim, int(round(p * dim))))


def sample_mask(dim: int, k: int, rng) -> SparseMask:
    """Uniform k-subset of range(dim) via a partial Fisher-Yates shuffle."""
    if dim < 1 or not 1 <= k <= dim:
        raise InvalidParameter(f"need 1 <= k <= dim, got k={k}, dim={dim}")
    rng = as_generator(rng)
    idx = np.arange(dim, dtype=np.int64)
    # swap targets for positions 0..k-1, drawn in one call
    targets = rng.integers(np.arange(k), dim)
    for i, j in enumerate(targets):
        idx[i], idx[j] = idx[j], idx[i]
    return SparseMask(dim, np.sort(idx[:k]))


def _check_dim(mask: SparseMask, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (mask.dim,):
        raise InvalidParameter(f"vector shape {x.shape} does not match mask dim {mask.dim}")
    return x


def apply_unscaled(mask: SparseMask, x) -> np.ndarray:
    x = _check_dim(mask, x)
    out = np.zeros_like(x)
    out[mask.active] = x[mask.active]
    return out


def apply_scaled(mask: SparseMask, x) -> np.ndarray:
    """Keep the active coordinates and divide them by ``p``."""
    x = _check_dim(mask, x)
    out = np.zeros_like(x)
    out[mask.active] = x[mask.active] / mask.p
    return out


def encode_sparse(mask: SparseMask, x) -> bytes:
    """Serialize the active entries of ``x`` as (k, u32 indices, f64 values), little-endian."""
    x = _check_dim(mask, x)
    if mask.dim > 2**32:
        raise InvalidParameter("indices do not fit in u32")
    return (
        struct.pack("<I", mask.k)
        + mask.active.astype("<u4").tobytes()
        + x[mask.active].astype("<f8").tobytes()
    )


def decode_sparse(payload: bytes, dim: int) -> tuple[SparseMask, np.ndarray]:
    """Inverse of :func:`encode_sparse`; returns the mask and the dense vector."""
    if len(payload) < 4:
        raise FormatError("payload shorter than header", offset=0)
    (k,) = struct.unpack_from("<I", payload, 0)
    expected = 4 + 12 * k
    if len(payload) != expected:
        raise FormatError(f"expected {expected} bytes for k={k}, got {len(payload)}", offset=len(payload))
    indices = np.frombuffer(payload, dtype="<u4", count=k, offset=4).astype(np.int64)
    values = np.frombuffer(payload, dtype="<f8", count=k, offset=4 + 4 * k)
    try:
        mask = SparseMask(dim, indices)
    except InvalidParameter as exc:
        raise FormatError(f"bad index list: {exc}", offset=4) from None
    dense = np.zeros(dim)
    dense[indices] = values
    return mask, dense


def payload_bits(mask: SparseMask, bits_per_value: int = 32, bits_per_index: int = 32) -> int:
    """Realistic uplink size of one update: dense if nothing is dropped, else (index, value) pairs."""
    if mask.k == mask.dim:
        return mask.dim * bits_per_value
    return mask.k * (bits_per_index + bits_per_value)
