"""Three-axis rotary position embedding over (frame, height, width).

Each head channel pair (2i, 2i+1) is rotated by angle pos_axis * inv_freq_i,
where the pairs are partitioned across the three axes. Rotating queries and
keys this way makes their inner product depend only on the position
difference, which is the whole point: attention sees relative offsets along
every axis at once.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import ConfigError, ValidationError


@dataclass(frozen=True)
class RopeConfig:
    """Channel split across the three axes plus the rotation base.

    axes_dim gives (d_frame, d_height, d_width); their sum is the head
    dimension. Spatial axes default to more channels than the frame axis
    because grids are wider than they are deep.
    """

    axes_dim: tuple = (8, 12, 12)
    base: float = 10000.0

    def __post_init__(self):
        if len(self.axes_dim) != 3:
            raise ConfigError(f"axes_dim must have three entries, got {self.axes_dim!r}")
        for d in self.axes_dim:
            if not isinstance(d, int) or d < 2 or d % 2 != 0:
                raise ConfigError(f"each axis dimension must be an even integer >= 2, got {d!r}")
        if not self.base > 1.0:
            raise ConfigError(f"rotation base must be > 1, got {self.base}")

    @property
    def head_dim(self) -> int:
        return sum(self.axes_dim)


@dataclass(frozen=True)
class FrequencyTable:
    """Per-axis inverse frequencies; entry i of an axis is base^(-2i/d_axis)."""

    frame: np.ndarray
    height: np.ndarray
    width: np.ndarray

    @property
    def half_dim(self) -> int:
        return len(self.frame) + len(self.height) + len(self.width)


def _axis_freqs(d_axis: int, base: float) -> np.ndarray:
    i = np.arange(d_axis // 2, dtype=np.float64)
    return base ** (-2.0 * i / d_axis)


def build_freq_table(cfg: RopeConfig) -> FrequencyTable:
    """Inverse-frequency vectors for the three axes.

    Each vector starts at 1 and decreases geometrically, so low channel pairs
    rotate fast (fine positions) and high pairs slowly (coarse positions).
    """
    d_f, d_h, d_w = cfg.axes_dim
    table = FrequencyTable(
        frame=_axis_freqs(d_f, cfg.base),
        height=_axis_freqs(d_h, cfg.base),
        width=_axis_freqs(d_w, cfg.base),
    )
    for arr in (table.frame, table.height, table.width):
        arr.flags.writeable = False
    return table


def token_frequencies(pos, table: FrequencyTable) -> np.ndarray:
    """Angle vector of one token: [f*frame_freqs, h*height_freqs, w*width_freqs]."""
    f, h, w = pos
    if f < 0 or h < 0 or w < 0:
        raise ValidationError(f"position components must be >= 0, got {pos!r}")
    return np.concatenate([f * table.frame, h * table.height, w * table.width])


def positions_to_angles(positions: np.ndarray, table: FrequencyTable) -> np.ndarray:
    """Angle matrix (L, head_dim/2) for an (L, 3) array of positions."""
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim != 2 or positions.shape[1] != 3:
        raise ValidationError(f"positions must be (L, 3), got shape {positions.shape}")
    if np.any(positions < 0):
        raise ValidationError("position components must be >= 0")
    return np.concatenate(
        [
            positions[:, 0:1] * table.frame[None, :],
            positions[:, 1:2] * table.height[None, :],
            positions[:, 2:3] * table.width[None, :],
        ],
        axis=1,
    )


def apply_rope(x: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Rotate channel pairs (2i, 2i+1) of x by angles[i].

    x has head_dim as its last axis, angles has head_dim/2 as its last axis;
    leading axes broadcast. Each pair is a proper 2D rotation, so the
    Euclidean norm of x is preserved.
    """
    x = np.asarray(x, dtype=np.float64)
    angles = np.asarray(angles, dtype=np.float64)
    if x.shape[-1] != 2 * angles.shape[-1]:
        raise ValidationError(
            f"vector length {x.shape[-1]} must be twice the angle count {angles.shape[-1]}"
        )
    even = x[..., 0::2]
    odd = x[..., 1::2]
    c = np.cos(angles)
    s = np.sin(angles)
    out = np.empty(np.broadcast_shapes(x.shape[:-1], angles.shape[:-1]) + x.shape[-1:])
    out[..., 0::2] = even * c - odd * s
    out[..., 1::2] = even * s + odd * c
    return out


def apply_rope_literal_sum(x: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Collapsed x_even*cos + x_odd*sin mix, for diagnostics only.

    Returns a half-length vector per input. This form is not norm-preserving
    and has no relative-offset property; it exists so tests can demonstrate
    why the pairwise rotation in apply_rope is used instead.
    """
    x = np.asarray(x, dtype=np.float64)
    angles = np.asarray(angles, dtype=np.float64)
    if x.shape[-1] != 2 * angles.shape[-1]:
        raise ValidationError(
            f"vector length {x.shape[-1]} must be twice the angle count {angles.shape[-1]}"
        )
    return x[..., 0::2] * np.cos(angles) + x[..., 1::2] * np.sin(angles)


def positions_to_rotated_qk(q, k, p_q, p_k, table: FrequencyTable):
    """Rotate a query/key pair at their respective grid positions."""
    return (
        apply_rope(q, token_frequencies(p_q, table)),
        apply_rope(k, token_frequencies(p_k, table)),
    )


def freq_table_dump(cfg: RopeConfig) -> dict:
    """JSON-ready dict of a config and its frequency table (plain floats)."""
    t = build_freq_table(cfg)
    return {
        "axes_dim": list(cfg.axes_dim),
        "base": float(cfg.base),
        "head_dim": cfg.head_dim,
        "frame_freqs": [float(v) for v in t.frame],
        "height_freqs": [float(v) for v in t.height],
        "width_freqs": [float(v) for v in t.width],
    }
