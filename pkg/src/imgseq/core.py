"""Shared domain types: token grids, latent images, sequence metadata, and RNG.

Everything here is an immutable value after construction; operations are pure
functions. The Rng is the single stateful object and is single-owner by
contract (use independent seeded instances across threads).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np


class ValidationError(ValueError):
    """Raised when data violates a type invariant or operation precondition."""


class ConfigError(ValueError):
    """Raised when a configuration value is out of its legal domain."""


class TrainingError(RuntimeError):
    """Raised when training produces a non-finite loss or update."""


KIND_IMAGE = "image"
KIND_SEPARATOR = "separator"
KIND_TEXT = "text"
VALID_KINDS = frozenset({KIND_IMAGE, KIND_SEPARATOR, KIND_TEXT})


@dataclass(frozen=True)
class GridShape:
    """Token grid of one image: frames x height x width, all in token units."""

    frames: int
    height: int
    width: int

    def __post_init__(self):
        for name in ("frames", "height", "width"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ValidationError(f"GridShape.{name} must be an integer >= 1, got {v!r}")

    @property
    def token_count(self) -> int:
        return self.frames * self.height * self.width


@dataclass(frozen=True)
class LatentImage:
    """Flattened latent tokens of one reference image.

    `data` has one row per grid cell (frames*height*width rows) and `channels`
    columns. `image_index` is the 1-based ordinal of the image in its input
    set. The data array is copied and frozen at construction.
    """

    image_index: int
    grid: GridShape
    channels: int
    data: np.ndarray

    def __post_init__(self):
        if not isinstance(self.image_index, int) or self.image_index < 1:
            raise ValidationError(f"image_index must be an integer >= 1, got {self.image_index!r}")
        if self.channels < 1:
            raise ValidationError(f"channels must be >= 1, got {self.channels}")
        data = np.array(self.data, dtype=np.float64, copy=True)
        if data.ndim != 2 or data.shape != (self.grid.token_count, self.channels):
            raise ValidationError(
                f"data shape {np.shape(self.data)} does not match grid "
                f"({self.grid.token_count} tokens x {self.channels} channels)"
            )
        if not np.all(np.isfinite(data)):
            raise ValidationError("LatentImage data contains non-finite entries")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def token_count(self) -> int:
        return self.grid.token_count


Position = Union[tuple, int]


@dataclass(frozen=True)
class TokenMeta:
    """Provenance of one sequence token.

    `position` is an (f, h, w) triple for image and separator tokens and a
    scalar index within the text block for text tokens. `token_id` records the
    vocabulary id a token was embedded from, when the sequence was built from
    discrete ids (used to route gradients back to the embedding table).
    """

    kind: str
    image_index: Optional[int] = None
    position: Optional[Position] = None
    token_id: Optional[int] = None

    def __post_init__(self):
        if self.kind not in VALID_KINDS:
            raise ValidationError(f"unknown token kind {self.kind!r}")
        if self.kind == KIND_IMAGE:
            if self.image_index is None or self.image_index < 1:
                raise ValidationError("image token must carry image_index >= 1")
            if not (isinstance(self.position, tuple) and len(self.position) == 3):
                raise ValidationError("image token must carry a full (f, h, w) position")
        if self.kind == KIND_SEPARATOR and (self.image_index is None or self.image_index < 1):
            raise ValidationError("separator token must carry the index of the image it follows")
        if self.kind == KIND_TEXT and self.image_index is not None:
            raise ValidationError("text token must not carry an image_index")


def flatten_image(img: LatentImage, token_ids: Optional[Sequence[int]] = None):
    """Flatten a latent image into (tokens, metas) in row-major (f, h, w) order.

    Row i of the returned matrix is the grid cell with f = i // (H*W),
    h = (i % (H*W)) // W, w = i % W. `token_ids`, when given, must have one id
    per grid cell and is recorded in the metas.
    """
    g = img.grid
    if token_ids is not None and len(token_ids) != g.token_count:
        raise ValidationError(
            f"token_ids length {len(token_ids)} does not match token count {g.token_count}"
        )
    tokens = img.data  # already row-major (f, h, w) by the LatentImage contract
    metas = []
    i = 0
    for f in range(g.frames):
        for h in range(g.height):
            for w in range(g.width):
                metas.append(
                    TokenMeta(
                        kind=KIND_IMAGE,
                        image_index=img.image_index,
                        position=(f, h, w),
                        token_id=None if token_ids is None else int(token_ids[i]),
                    )
                )
                i += 1
    return tokens, metas


def validate_sequence(seq) -> Optional[str]:
    """Check an assembled sequence against the layout policy.

    Returns None when the sequence is well formed, otherwise a description of
    the first violation found. Checks: metadata partition, span coverage,
    per-image contiguity and ordering, separator placement, and text placement.
    """
    L = seq.tokens.shape[0]
    if len(seq.metas) != L:
        return f"meta count {len(seq.metas)} != token count {L}"

    for i, m in enumerate(seq.metas):
        if m.kind not in VALID_KINDS:
            return f"token {i}: unknown kind {m.kind!r}"

    cursor = 0
    for span in seq.layout:
        if span.start != cursor:
            return f"span {span} does not start at {cursor} (spans must tile [0, L))"
        if span.length < 1:
            return f"span {span} has non-positive length"
        for i in range(span.start, span.start + span.length):
            m = seq.metas[i]
            if m.kind != span.kind:
                return f"token {i} kind {m.kind} disagrees with span kind {span.kind}"
            if span.kind != KIND_TEXT and m.image_index != span.image_index:
                return f"token {i} image_index {m.image_index} disagrees with span {span}"
        cursor += span.length
    if cursor != L:
        return f"spans cover [0, {cursor}) but sequence has {L} tokens"

    image_spans = [s for s in seq.layout if s.kind == KIND_IMAGE]
    sep_spans = [s for s in seq.layout if s.kind == KIND_SEPARATOR]
    text_spans = [s for s in seq.layout if s.kind == KIND_TEXT]

    indices = [s.image_index for s in image_spans]
    if indices != sorted(set(indices)):
        return "non-contiguous image block: an image occupies more than one span or spans are out of order"
    if indices != list(range(1, seq.image_count + 1)):
        return f"image spans {indices} are not the contiguous ordinals 1..{seq.image_count}"

    first_image_start = image_spans[0].start if image_spans else 0
    for s in sep_spans:
        if s.start < first_image_start:
            return "separator before first image"
    if seq.use_separator:
        expected = seq.image_count if seq.trailing_separator else seq.image_count - 1
        if len(sep_spans) != expected:
            return f"expected {expected} separator spans, found {len(sep_spans)}"
        # each separator must immediately follow the image block it is tagged with
        by_pos = {s.start: s for s in sep_spans}
        for img_span in image_spans:
            wants_sep = seq.trailing_separator or img_span.image_index < seq.image_count
            sep = by_pos.get(img_span.start + img_span.length)
            if wants_sep and (sep is None or sep.image_index != img_span.image_index):
                return f"image {img_span.image_index} is not followed by its separator"
            if not wants_sep and sep is not None:
                return f"unexpected trailing separator after image {img_span.image_index}"
    elif sep_spans:
        return "separator spans present although separators are disabled"

    if len(text_spans) > 1:
        return "more than one text span"
    if text_spans and text_spans[0].start + text_spans[0].length != L:
        return "text span is not at the end of the sequence"
    for i, m in enumerate(seq.metas):
        if m.kind == KIND_TEXT and not isinstance(m.position, int):
            return f"text token {i} position must be a scalar index"
    return None


# --- deterministic randomness -------------------------------------------------

_MASK64 = (1 << 64) - 1
_SPLITMIX_GAMMA = 0x9E3779B97F4A7C15


def _mix64(x: int) -> int:
    """splitmix64 output mixing function."""
    x &= _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Rng:
    """xoshiro256** generator seeded through splitmix64.

    The stream is fully specified by the two published algorithms, so equal
    seeds give identical draws on every platform. Draw-consuming helpers
    document how many raw 64-bit words they use so streams stay stable.
    """

    def __init__(self, seed: int):
        if not isinstance(seed, int):
            raise ValidationError(f"seed must be an integer, got {type(seed).__name__}")
        self.seed = seed & _MASK64
        s = self.seed
        state = []
        for _ in range(4):
            s = (s + _SPLITMIX_GAMMA) & _MASK64
            state.append(_mix64(s))
        self._s = state

    def u64(self) -> int:
        """Next raw 64-bit word of the xoshiro256** stream."""
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def uniform(self) -> float:
        """Uniform draw in [0, 1) with 53-bit resolution (one u64)."""
        return (self.u64() >> 11) * 2.0**-53

    def _uniform_open(self) -> float:
        """Uniform draw in (0, 1]; safe as a log argument (one u64)."""
        return ((self.u64() >> 11) + 1) * 2.0**-53

    def randint(self, n: int) -> int:
        """Unbiased uniform integer in [0, n) via rejection sampling."""
        if n < 1:
            raise ValidationError(f"randint bound must be >= 1, got {n}")
        limit = ((1 << 64) // n) * n
        while True:
            x = self.u64()
            if x < limit:
                return x % n

    def normals(self, n: int) -> np.ndarray:
        """n standard-normal draws via Box-Muller (two u64 per pair)."""
        pairs = (n + 1) // 2
        out = np.empty(2 * pairs, dtype=np.float64)
        for i in range(pairs):
            u1 = self._uniform_open()
            u2 = self.uniform()
            r = math.sqrt(-2.0 * math.log(u1))
            a = 2.0 * math.pi * u2
            out[2 * i] = r * math.cos(a)
            out[2 * i + 1] = r * math.sin(a)
        return out[:n]

    def normal_matrix(self, shape, std: float = 1.0) -> np.ndarray:
        size = int(np.prod(shape))
        return (self.normals(size) * std).reshape(shape)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def sample_without_replacement(self, pool: Sequence[int], k: int) -> list:
        """k distinct draws from pool via partial Fisher-Yates."""
        if k > len(pool):
            raise ValidationError(f"cannot draw {k} distinct items from a pool of {len(pool)}")
        items = list(pool)
        for i in range(k):
            j = i + self.randint(len(items) - i)
            items[i], items[j] = items[j], items[i]
        return items[:k]

    def child(self, *keys: int) -> "Rng":
        """Derived generator for an independent substream.

        The child seed folds the keys into the parent seed order-sensitively,
        so child(a, b) and child(b, a) differ.
        """
        h = _mix64(self.seed ^ 0xA0761D6478BD642F)
        for k in keys:
            h = _mix64((h * _SPLITMIX_GAMMA + _mix64(int(k))) & _MASK64)
        return Rng(h)
