"""Count-normalized sinusoidal image-index embedding.

Image j of N gets a fixed vector built from the normalized index j/N: channel
pair (2k, 2k+1) holds (sin, cos) of (j/N) / tau^(2k/C). Normalizing by the
current image count keeps the angle argument inside (0, 1] no matter how many
images arrive, so unseen counts land between seen ones instead of outside
them. The embedding is a pure function of (j, N, config); nothing here is
learned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ConfigError, ValidationError


@dataclass(frozen=True)
class IndexEmbedConfig:
    tau: float = 10000.0
    channels: int = 32

    def __post_init__(self):
        if not self.tau > 1.0:
            raise ConfigError(f"tau must be > 1, got {self.tau}")
        if self.channels < 2 or self.channels % 2 != 0:
            raise ConfigError(f"channels must be an even integer >= 2, got {self.channels}")


@dataclass(frozen=True)
class IndexEmbedding:
    """Embedding of image j out of N. values has one (sin, cos) pair per angle."""

    image_index: int
    total_images: int
    values: np.ndarray


def index_embedding(j: int, n: int, cfg: IndexEmbedConfig) -> IndexEmbedding:
    """E_j for image j of n: values[2k] = sin(a_k), values[2k+1] = cos(a_k).

    a_k = (j/n) / tau^(2k/C). j must lie in [1, n]; out-of-range ordinals are
    an error rather than being clamped, since a clamped index would silently
    alias two different images.
    """
    if n < 1:
        raise ValidationError(f"image count must be >= 1, got {n}")
    if not (1 <= j <= n):
        raise ValidationError(f"image index {j} outside [1, {n}]")
    j_norm = j / n
    k = np.arange(cfg.channels // 2, dtype=np.float64)
    angles = j_norm / cfg.tau ** (2.0 * k / cfg.channels)
    values = np.empty(cfg.channels, dtype=np.float64)
    values[0::2] = np.sin(angles)
    values[1::2] = np.cos(angles)
    values.flags.writeable = False
    return IndexEmbedding(image_index=j, total_images=n, values=values)


def embedding_table(n: int, cfg: IndexEmbedConfig) -> np.ndarray:
    """Matrix of all n embeddings; row j-1 is index_embedding(j, n, cfg)."""
    if n < 1:
        raise ValidationError(f"image count must be >= 1, got {n}")
    table = np.stack([index_embedding(j, n, cfg).values for j in range(1, n + 1)])
    table.flags.writeable = False
    return table


def add_index_embedding(tokens: np.ndarray, emb: IndexEmbedding) -> np.ndarray:
    """Add emb.values to every token row. Shape is preserved."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[1] != emb.values.shape[0]:
        raise ValidationError(
            f"token matrix with {tokens.shape[-1] if tokens.ndim else '?'} channels "
            f"does not match embedding width {emb.values.shape[0]}"
        )
    return tokens + emb.values[None, :]


def two_sum(a: np.ndarray, b: np.ndarray):
    """Error-free transformation: returns (s, t) with s = fl(a+b) and a+b = s+t.

    Knuth's branch-free TwoSum. The rounding error t of each elementwise add
    is itself a representable float, which is what makes exact un-adding
    possible later.
    """
    s = a + b
    bb = s - a
    t = (a - (s - bb)) + (b - bb)
    return s, t


def add_index_embedding_tracked(tokens: np.ndarray, emb: IndexEmbedding):
    """Like add_index_embedding but also returns the per-entry rounding error."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[1] != emb.values.shape[0]:
        raise ValidationError(
            f"token matrix with {tokens.shape[-1] if tokens.ndim else '?'} channels "
            f"does not match embedding width {emb.values.shape[0]}"
        )
    return two_sum(tokens, np.broadcast_to(emb.values[None, :], tokens.shape))


def remove_index_embedding(summed: np.ndarray, emb: IndexEmbedding, residue: np.ndarray) -> np.ndarray:
    """Exact inverse of add_index_embedding_tracked.

    With s = fl(a + e) and residue t from the tracked add, a = s - e + t in
    real arithmetic. Plain fl(s - e) is off by one ulp for roughly a quarter
    of random inputs, so the subtraction is done error-free as well and the
    two residues are folded back in.
    """
    u, v = two_sum(summed, -emb.values[None, :])
    return u + (v + residue)
