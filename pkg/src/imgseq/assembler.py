"""Assembly of the unified multi-image token sequence.

Order: image 1 tokens, separator, image 2 tokens, separator, ..., image N
tokens, separator (the trailing one is optional), then text tokens. Image
tokens optionally carry their image-index embedding; the separator is one
shared learnable parameter referenced at every insertion point; text tokens
pass through bitwise untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import (
    KIND_IMAGE,
    KIND_SEPARATOR,
    KIND_TEXT,
    GridShape,
    LatentImage,
    Rng,
    TokenMeta,
    ValidationError,
    flatten_image,
)
from .index_embed import (
    IndexEmbedConfig,
    add_index_embedding_tracked,
    index_embedding,
    remove_index_embedding,
)

SEP_POLICY_NEUTRAL = "neutral"
SEP_POLICY_INHERIT = "inherit"
SEP_POLICIES = (SEP_POLICY_NEUTRAL, SEP_POLICY_INHERIT)


@dataclass
class SeparatorToken:
    """Shared learnable boundary token, width x channels.

    One instance is referenced at every insertion point, so its gradient is
    the sum over all separator spans. values stays writeable: the optimizer
    owns it during training.
    """

    width: int
    channels: int
    values: np.ndarray
    learnable: bool = True

    def __post_init__(self):
        if self.width < 1:
            raise ValidationError(f"separator width must be >= 1, got {self.width}")
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (self.width, self.channels):
            raise ValidationError(
                f"separator values shape {values.shape} != ({self.width}, {self.channels})"
            )
        if not np.all(np.isfinite(values)):
            raise ValidationError("separator values contain non-finite entries")
        self.values = values


def init_separator(channels: int, width: int = 1, std: float = 0.02, rng: Optional[Rng] = None) -> SeparatorToken:
    """Gaussian-initialized separator; small std keeps early training near the no-separator baseline."""
    rng = rng if rng is not None else Rng(0)
    return SeparatorToken(width=width, channels=channels, values=rng.normal_matrix((width, channels), std=std))


@dataclass(frozen=True)
class Span:
    kind: str
    image_index: Optional[int]
    start: int
    length: int


@dataclass
class AssembledSequence:
    """One flattened multimodal sequence plus everything needed to audit it.

    embed_residue holds the per-entry rounding error of the index-embedding
    addition (zero rows elsewhere) so the original image tokens can be
    recovered bit-exactly.
    """

    tokens: np.ndarray
    metas: list
    image_count: int
    layout: list
    channels: int
    sep_width: int
    use_separator: bool
    use_index_embed: bool
    trailing_separator: bool
    sep_position_policy: str
    text_len: int
    index_config: IndexEmbedConfig
    embed_residue: np.ndarray
    grids: dict = field(default_factory=dict)

    @property
    def length(self) -> int:
        return self.tokens.shape[0]


def expected_length(token_counts: Sequence[int], sep_width: int, use_separator: bool,
                    trailing_separator: bool, text_len: int) -> int:
    """Length law: sum of image tokens + separators + text."""
    n = len(token_counts)
    seps = 0
    if use_separator and n > 0:
        seps = n if trailing_separator else n - 1
    return sum(token_counts) + seps * sep_width + text_len


def assemble(
    images: Sequence[LatentImage],
    sep: Optional[SeparatorToken],
    icfg: IndexEmbedConfig,
    text: Optional[np.ndarray] = None,
    *,
    use_separator: bool = True,
    use_index_embed: bool = True,
    trailing_separator: bool = True,
    sep_position_policy: str = SEP_POLICY_NEUTRAL,
    image_token_ids: Optional[Sequence[Sequence[int]]] = None,
    text_token_ids: Optional[Sequence[int]] = None,
) -> AssembledSequence:
    """Build the full sequence from per-image latents, the shared separator, and text.

    Image ordinals must be the contiguous run 1..N in order. All parts must
    share one channel count. When token ids are supplied they are recorded in
    the metas so gradients can later be routed back to an embedding table.
    """
    if not images:
        raise ValidationError("assemble requires at least one image")
    n = len(images)
    indices = [img.image_index for img in images]
    if indices != list(range(1, n + 1)):
        raise ValidationError(f"image indices {indices} are not the contiguous run 1..{n}")
    channels = images[0].channels
    for img in images:
        if img.channels != channels:
            raise ValidationError(
                f"image {img.image_index} has {img.channels} channels, expected {channels}"
            )
    if use_separator:
        if sep is None:
            raise ValidationError("use_separator=True but no separator token given")
        if sep.channels != channels:
            raise ValidationError(f"separator channels {sep.channels} != image channels {channels}")
    if sep_position_policy not in SEP_POLICIES:
        raise ValidationError(f"unknown separator position policy {sep_position_policy!r}")
    if use_index_embed and icfg.channels != channels:
        raise ValidationError(f"index embedding width {icfg.channels} != image channels {channels}")
    if text is not None:
        text = np.asarray(text, dtype=np.float64)
        if text.size == 0:
            text = None
    if text is not None and (text.ndim != 2 or text.shape[1] != channels):
        raise ValidationError(f"text token matrix shape {text.shape} incompatible with {channels} channels")
    if image_token_ids is not None and len(image_token_ids) != n:
        raise ValidationError("image_token_ids must have one entry per image")
    text_len = 0 if text is None else text.shape[0]
    if text_token_ids is not None and len(text_token_ids) != text_len:
        raise ValidationError("text_token_ids length does not match text token count")

    sep_width = sep.width if (use_separator and sep is not None) else 0
    parts = []
    residue_parts = []
    metas: list = []
    layout: list = []
    grids: dict = {}
    cursor = 0

    for pos_in_list, img in enumerate(images):
        ids = None if image_token_ids is None else image_token_ids[pos_in_list]
        tokens, img_metas = flatten_image(img, token_ids=ids)
        if use_index_embed:
            emb = index_embedding(img.image_index, n, icfg)
            tokens, residue = add_index_embedding_tracked(tokens, emb)
        else:
            tokens = np.array(tokens, copy=True)
            residue = np.zeros_like(tokens)
        parts.append(tokens)
        residue_parts.append(residue)
        metas.extend(img_metas)
        layout.append(Span(KIND_IMAGE, img.image_index, cursor, img.token_count))
        grids[img.image_index] = img.grid
        cursor += img.token_count

        wants_sep = use_separator and (trailing_separator or img.image_index < n)
        if wants_sep:
            parts.append(np.array(sep.values, copy=True))
            residue_parts.append(np.zeros_like(sep.values))
            for r in range(sep.width):
                metas.append(
                    TokenMeta(
                        kind=KIND_SEPARATOR,
                        image_index=img.image_index,
                        position=(img.image_index - 1, 0, 0),
                    )
                )
            layout.append(Span(KIND_SEPARATOR, img.image_index, cursor, sep.width))
            cursor += sep.width

    if text is not None:
        parts.append(np.array(text, copy=True))
        residue_parts.append(np.zeros_like(text))
        for t in range(text_len):
            metas.append(
                TokenMeta(
                    kind=KIND_TEXT,
                    position=t,
                    token_id=None if text_token_ids is None else int(text_token_ids[t]),
                )
            )
        layout.append(Span(KIND_TEXT, None, cursor, text_len))
        cursor += text_len

    all_tokens = np.concatenate(parts, axis=0)
    all_residue = np.concatenate(residue_parts, axis=0)
    assert cursor == all_tokens.shape[0]
    all_tokens.flags.writeable = False
    all_residue.flags.writeable = False

    return AssembledSequence(
        tokens=all_tokens,
        metas=metas,
        image_count=n,
        layout=layout,
        channels=channels,
        sep_width=sep_width,
        use_separator=use_separator,
        use_index_embed=use_index_embed,
        trailing_separator=trailing_separator,
        sep_position_policy=sep_position_policy,
        text_len=text_len,
        index_config=icfg,
        embed_residue=all_residue,
        grids=grids,
    )


@dataclass(frozen=True)
class PositionAssignment:
    """Rotation inputs per token: integer (f, h, w) coords and a rotate switch.

    Tokens with rotate=False get the identity rotation regardless of coords.
    """

    coords: np.ndarray
    rotate: np.ndarray


def assign_positions(seq: AssembledSequence) -> PositionAssignment:
    """Pseudo-video position of every token.

    Image j's cell (f, h, w) sits at (j-1+f, h, w): each image claims its own
    frame slot while keeping its 2D layout. A separator after image j carries
    (j-1, 0, 0); under the "neutral" policy its rotation is suppressed, under
    "inherit" it rotates like frame j-1. Text token t sits at (N+1, 0, t),
    one frame past every image.
    """
    L = seq.tokens.shape[0]
    coords = np.zeros((L, 3), dtype=np.int64)
    rotate = np.ones(L, dtype=bool)
    for i, m in enumerate(seq.metas):
        if m.kind == KIND_IMAGE:
            f, h, w = m.position
            coords[i] = (m.image_index - 1 + f, h, w)
        elif m.kind == KIND_SEPARATOR:
            coords[i] = (m.image_index - 1, 0, 0)
            if seq.sep_position_policy == SEP_POLICY_NEUTRAL:
                rotate[i] = False
        else:
            coords[i] = (seq.image_count + 1, 0, m.position)
    coords.flags.writeable = False
    rotate.flags.writeable = False
    return PositionAssignment(coords=coords, rotate=rotate)


def recover_images(seq: AssembledSequence) -> dict:
    """Original per-image token matrices, bit-exact.

    Uses the layout to slice each image span and the stored rounding residue
    to undo the index-embedding addition without losing the last bit.
    """
    out = {}
    for span in seq.layout:
        if span.kind != KIND_IMAGE:
            continue
        block = seq.tokens[span.start : span.start + span.length]
        if seq.use_index_embed:
            emb = index_embedding(span.image_index, seq.image_count, seq.index_config)
            residue = seq.embed_residue[span.start : span.start + span.length]
            out[span.image_index] = remove_index_embedding(block, emb, residue)
        else:
            out[span.image_index] = np.array(block, copy=True)
    return out


def sequence_report(seq: AssembledSequence) -> dict:
    """Deterministic JSON-ready description of an assembled sequence."""
    pos = assign_positions(seq)
    return {
        "length": seq.length,
        "image_count": seq.image_count,
        "channels": seq.channels,
        "text_len": seq.text_len,
        "use_separator": seq.use_separator,
        "use_index_embed": seq.use_index_embed,
        "trailing_separator": seq.trailing_separator,
        "sep_position_policy": seq.sep_position_policy,
        "separator_width": seq.sep_width,
        "spans": [
            {
                "kind": s.kind,
                "image_index": s.image_index,
                "start": s.start,
                "length": s.length,
            }
            for s in seq.layout
        ],
        "positions": [[int(c) for c in row] for row in pos.coords],
        "rotated": [bool(b) for b in pos.rotate],
    }


def render_report(report: dict) -> str:
    """Plain-text rendering of sequence_report output."""
    lines = [
        f"sequence length {report['length']}, {report['image_count']} images, "
        f"{report['channels']} channels, text {report['text_len']}",
        f"separator: {'on' if report['use_separator'] else 'off'}"
        + (f" (width {report['separator_width']}, trailing "
           f"{'on' if report['trailing_separator'] else 'off'}, "
           f"policy {report['sep_position_policy']})" if report["use_separator"] else ""),
        f"index_embed: {'on' if report['use_index_embed'] else 'off'}",
    ]
    for s in report["spans"]:
        tag = f"image {s['image_index']}" if s["kind"] == "image" else (
            f"sep after image {s['image_index']}" if s["kind"] == "separator" else "text")
        lines.append(f"  [{s['start']:4d}..{s['start'] + s['length']:4d})  {tag}")
    return "\n".join(lines)


@dataclass(frozen=True)
class AssemblySpec:
    """Declarative description of an assembly, loadable from JSON."""

    grids: tuple
    channels: int
    sep_width: int = 1
    use_separator: bool = True
    use_index_embed: bool = True
    trailing_separator: bool = True
    sep_position_policy: str = SEP_POLICY_NEUTRAL
    text_len: int = 0
    tau: float = 10000.0
    seed: int = 0


def parse_assembly_spec(d: dict) -> AssemblySpec:
    """Validate and convert a JSON dict into an AssemblySpec."""
    if not isinstance(d, dict):
        raise ValidationError("assembly spec must be a JSON object")
    if "grids" not in d or "channels" not in d:
        raise ValidationError("assembly spec requires 'grids' and 'channels'")
    grids = []
    for g in d["grids"]:
        if not (isinstance(g, (list, tuple)) and len(g) == 3):
            raise ValidationError(f"grid entry {g!r} must be [frames, height, width]")
        grids.append(GridShape(int(g[0]), int(g[1]), int(g[2])))
    known = {
        "grids", "channels", "sep_width", "use_separator", "use_index_embed",
        "trailing_separator", "sep_position_policy", "text_len", "tau", "seed",
    }
    unknown = set(d) - known
    if unknown:
        raise ValidationError(f"unknown assembly spec keys: {sorted(unknown)}")
    return AssemblySpec(
        grids=tuple(grids),
        channels=int(d["channels"]),
        sep_width=int(d.get("sep_width", 1)),
        use_separator=bool(d.get("use_separator", True)),
        use_index_embed=bool(d.get("use_index_embed", True)),
        trailing_separator=bool(d.get("trailing_separator", True)),
        sep_position_policy=str(d.get("sep_position_policy", SEP_POLICY_NEUTRAL)),
        text_len=int(d.get("text_len", 0)),
        tau=float(d.get("tau", 10000.0)),
        seed=int(d.get("seed", 0)),
    )


def realize_assembly(spec: AssemblySpec) -> AssembledSequence:
    """Draw deterministic inputs for a spec and assemble them.

    Draw order (fixed so outputs are reproducible): separator values first,
    then each image's tokens in index order, then text tokens.
    """
    rng = Rng(spec.seed)
    sep = init_separator(spec.channels, width=spec.sep_width, rng=rng.child(0)) if spec.use_separator else None
    images = [
        LatentImage(
            image_index=j,
            grid=g,
            channels=spec.channels,
            data=rng.child(j).normal_matrix((g.token_count, spec.channels)),
        )
        for j, g in enumerate(spec.grids, start=1)
    ]
    text = None
    if spec.text_len > 0:
        text = rng.child(len(spec.grids) + 1).normal_matrix((spec.text_len, spec.channels))
    return assemble(
        images,
        sep,
        IndexEmbedConfig(tau=spec.tau, channels=spec.channels),
        text,
        use_separator=spec.use_separator,
        use_index_embed=spec.use_index_embed,
        trailing_separator=spec.trailing_separator,
        sep_position_policy=spec.sep_position_policy,
    )
