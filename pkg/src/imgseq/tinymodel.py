"""Small attention classifier over assembled sequences, gradients by hand.

Architecture: token embedding -> [pre-norm attention block, pre-norm
feed-forward block] x layers -> final layer norm at the last text token ->
linear head. Rotation by 3D position is applied to queries and keys only.
Everything is plain numpy; the backward pass is derived manually so the
learnable separator's gradient path (sum over its insertion points) is
explicit and finite-difference checkable.

Params and Gradients are dicts keyed by block name ("embed", "layer0.wq",
..., "head.w", "sep") holding float64 arrays of matching shapes.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .assembler import (
    SEP_POLICY_NEUTRAL,
    AssembledSequence,
    SeparatorToken,
    assemble,
    assign_positions,
)
from .core import (
    KIND_SEPARATOR,
    KIND_TEXT,
    GridShape,
    LatentImage,
    Rng,
    TrainingError,
    ValidationError,
)
from .index_embed import IndexEmbedConfig
from .mrope import RopeConfig, apply_rope, build_freq_table, positions_to_angles

LN_EPS = 1e-5

# Multiplier on stored embedding/separator parameters when they enter a
# sequence: 1/0.02, so std-0.02 parameters produce unit-variance content
# commensurate with the sinusoidal index values added on top.
TOKEN_SCALE = 50.0


@dataclass(frozen=True)
class ModelConfig:
    vocab: int
    channels: int = 32
    head_dim: int = 8
    heads: int = 4
    layers: int = 2
    ff_mult: int = 4
    sep_width: int = 1
    rope: RopeConfig = RopeConfig(axes_dim=(4, 2, 2))
    index_embed: Optional[IndexEmbedConfig] = None
    use_rope: bool = True
    use_separator: bool = True
    use_index_embed: bool = True
    dtype: str = "float64"

    def __post_init__(self):
        if self.vocab < 2:
            raise ValidationError(f"vocab must be >= 2, got {self.vocab}")
        if self.channels != self.heads * self.head_dim:
            raise ValidationError(
                f"channels {self.channels} != heads {self.heads} x head_dim {self.head_dim}"
            )
        if self.layers < 1:
            raise ValidationError(f"layers must be >= 1, got {self.layers}")
        if self.ff_mult < 1:
            raise ValidationError(f"ff_mult must be >= 1, got {self.ff_mult}")
        if self.sep_width < 1:
            raise ValidationError(f"sep_width must be >= 1, got {self.sep_width}")
        if self.rope.head_dim != self.head_dim:
            raise ValidationError(
                f"rope axes {self.rope.axes_dim} sum to {self.rope.head_dim}, "
                f"head_dim is {self.head_dim}"
            )
        if self.index_embed is None:
            object.__setattr__(self, "index_embed", IndexEmbedConfig(channels=self.channels))
        if self.index_embed.channels != self.channels:
            raise ValidationError(
                f"index embedding width {self.index_embed.channels} != channels {self.channels}"
            )
        if self.dtype not in ("float64", "float32"):
            raise ValidationError(f"dtype must be float64 or float32, got {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32


def param_shapes(cfg: ModelConfig) -> dict:
    """Block name -> shape, in a fixed order shared by init and checkpoints."""
    c, ff, v = cfg.channels, cfg.ff_mult * cfg.channels, cfg.vocab
    shapes = {"embed": (v, c)}
    for i in range(cfg.layers):
        p = f"layer{i}."
        shapes[p + "ln1.g"] = (c,)
        shapes[p + "ln1.b"] = (c,)
        shapes[p + "wq"] = (c, c)
        shapes[p + "wk"] = (c, c)
        shapes[p + "wv"] = (c, c)
        shapes[p + "wo"] = (c, c)
        shapes[p + "ln2.g"] = (c,)
        shapes[p + "ln2.b"] = (c,)
        shapes[p + "w1"] = (c, ff)
        shapes[p + "b1"] = (ff,)
        shapes[p + "w2"] = (ff, c)
        shapes[p + "b2"] = (c,)
    shapes["lnf.g"] = (c,)
    shapes["lnf.b"] = (c,)
    shapes["head.w"] = (c, v)
    shapes["head.b"] = (v,)
    shapes["sep"] = (cfg.sep_width, c)
    return shapes


def init_params(cfg: ModelConfig, rng: Rng) -> dict:
    """Gaussian std-0.02 weights; layer-norm gains 1, every bias 0.

    Draw order is the iteration order of param_shapes, so a fixed seed gives
    bit-identical parameters on every platform.
    """
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".g"):
            params[name] = np.ones(shape)
        elif name.endswith((".b", "b1", "b2")):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal_matrix(shape, std=0.02)
    return params


def zero_grads(cfg: ModelConfig) -> dict:
    return {name: np.zeros(shape) for name, shape in param_shapes(cfg).items()}


# --- sequence construction from discrete token ids ----------------------------


def build_sequence(
    params: dict,
    cfg: ModelConfig,
    image_token_ids: Sequence[np.ndarray],
    grids: Sequence[GridShape],
    instruction_ids: Sequence[int],
    *,
    trailing_separator: bool = True,
    sep_position_policy: str = SEP_POLICY_NEUTRAL,
) -> AssembledSequence:
    """Embed discrete ids and assemble them under the model's flags.

    Token ids are recorded in the sequence metadata, which is what lets the
    backward pass scatter gradients into the embedding table and lets the
    gradient checker rebuild the sequence from perturbed parameters.

    Embedding rows and the separator parameter enter the sequence multiplied
    by TOKEN_SCALE: with the conventional std-0.02 parameter init, raw content
    would sit two orders of magnitude below the unit-amplitude sinusoidal
    index values added on top of it, leaving the identity signal nothing to
    attach to; the fixed scale restores parity while the stored parameters
    keep their small-init contract.
    """
    if len(image_token_ids) != len(grids):
        raise ValidationError("one id array per grid required")
    if len(instruction_ids) < 1:
        raise ValidationError("at least one instruction token required (readout position)")
    embed = TOKEN_SCALE * params["embed"]
    images = []
    ids_per_image = []
    for j, (ids, grid) in enumerate(zip(image_token_ids, grids), start=1):
        ids = np.asarray(ids, dtype=np.int64).ravel()
        if ids.shape[0] != grid.token_count:
            raise ValidationError(
                f"image {j}: {ids.shape[0]} ids for a {grid.token_count}-cell grid"
            )
        if np.any(ids < 0) or np.any(ids >= cfg.vocab):
            raise ValidationError(f"image {j}: token id outside [0, {cfg.vocab})")
        images.append(LatentImage(j, grid, cfg.channels, embed[ids]))
        ids_per_image.append([int(t) for t in ids])
    instr = [int(t) for t in instruction_ids]
    if any(t < 0 or t >= cfg.vocab for t in instr):
        raise ValidationError(f"instruction token id outside [0, {cfg.vocab})")
    sep = SeparatorToken(cfg.sep_width, cfg.channels, TOKEN_SCALE * params["sep"])
    return assemble(
        images,
        sep if cfg.use_separator else None,
        cfg.index_embed,
        embed[instr],
        use_separator=cfg.use_separator,
        use_index_embed=cfg.use_index_embed,
        trailing_separator=trailing_separator,
        sep_position_policy=sep_position_policy,
        image_token_ids=ids_per_image,
        text_token_ids=instr,
    )


def rebuild_tokens(params: dict, seq: AssembledSequence, cfg: ModelConfig) -> AssembledSequence:
    """Reassemble seq's token matrix from current params via recorded ids."""
    image_ids = []
    grids = []
    instr = []
    for span in seq.layout:
        metas = seq.metas[span.start : span.start + span.length]
        if span.kind == "image":
            ids = [m.token_id for m in metas]
            if any(t is None for t in ids):
                raise ValidationError("sequence was not built from token ids; cannot rebuild")
            image_ids.append(np.array(ids, dtype=np.int64))
            grids.append(seq.grids[span.image_index])
        elif span.kind == KIND_TEXT:
            ids = [m.token_id for m in metas]
            if any(t is None for t in ids):
                raise ValidationError("text span was not built from token ids; cannot rebuild")
            instr.extend(ids)
    rebuilt = build_sequence(
        params,
        cfg,
        image_ids,
        grids,
        instr,
        trailing_separator=seq.trailing_separator,
        sep_position_policy=seq.sep_position_policy,
    )
    if rebuilt.length != seq.length:
        raise ValidationError("rebuilt sequence length changed; metadata is inconsistent")
    return rebuilt


# --- forward -------------------------------------------------------------------


def _ln_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv)

def _ln_backward(dy, g, cache):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    dxhat = dy * g
    # d/dx of (x - mu) * inv with inv depending on x through the variance
    mean_dxhat = dxhat.mean(axis=-1, keepdims=True)
    mean_dxhat_xhat = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
    return dx, dg, db


_GELU_C = math.sqrt(2.0 / math.pi)

def _gelu(x):
    u = _GELU_C * (x + 0.044715 * x**3)
    return 0.5 * x * (1.0 + np.tanh(u))

def _gelu_grad(x):
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du


def _softmax_last(x):
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def _readout_index(seq: AssembledSequence) -> int:
    qpos = None
    for i, m in enumerate(seq.metas):
        if m.kind == KIND_TEXT:
            qpos = i
    if qpos is None:
        raise ValidationError("sequence has no text token to read the logits from")
    return qpos


def _check_model_sequence(seq: AssembledSequence, cfg: ModelConfig):
    if seq.channels != cfg.channels:
        raise ValidationError(f"sequence channels {seq.channels} != model channels {cfg.channels}")
    if seq.use_separator != cfg.use_separator:
        raise ValidationError("sequence separator flag disagrees with model config")
    if seq.use_index_embed != cfg.use_index_embed:
        raise ValidationError("sequence index-embed flag disagrees with model config")
    if seq.use_separator and seq.sep_width != cfg.sep_width:
        raise ValidationError(f"sequence sep width {seq.sep_width} != model {cfg.sep_width}")
    if seq.use_index_embed and seq.index_config != cfg.index_embed:
        raise ValidationError("sequence index-embedding config disagrees with model config")


def forward(params: dict, seq: AssembledSequence, cfg: ModelConfig):
    """Logits at the last text token, plus the cache the backward pass needs."""
    _check_model_sequence(seq, cfg)
    dt = cfg.np_dtype
    qpos = _readout_index(seq)
    p = {k: v.astype(dt, copy=False) for k, v in params.items()}

    table = build_freq_table(cfg.rope)
    pos = assign_positions(seq)
    angles = positions_to_angles(pos.coords, table)
    angles[~pos.rotate] = 0.0
    if not cfg.use_rope:
        angles[:] = 0.0
    angles = angles.astype(dt)

    x = seq.tokens.astype(dt, copy=True)
    heads, scale = cfg.heads, 1.0 / math.sqrt(cfg.head_dim)
    L = x.shape[0]
    layers = []
    for i in range(cfg.layers):
        pre = f"layer{i}."
        h1, ln1_cache = _ln_forward(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
        q = (h1 @ p[pre + "wq"]).reshape(L, heads, cfg.head_dim).transpose(1, 0, 2)
        k = (h1 @ p[pre + "wk"]).reshape(L, heads, cfg.head_dim).transpose(1, 0, 2)
        v = (h1 @ p[pre + "wv"]).reshape(L, heads, cfg.head_dim).transpose(1, 0, 2)
        qr = apply_rope(q, angles[None, :, :]).astype(dt, copy=False)
        kr = apply_rope(k, angles[None, :, :]).astype(dt, copy=False)
        scores = (qr @ kr.transpose(0, 2, 1)) * scale
        att = _softmax_last(scores)
        ctx = att @ v
        ctx_flat = ctx.transpose(1, 0, 2).reshape(L, cfg.channels)
        att_out = ctx_flat @ p[pre + "wo"]
        x_mid = x + att_out
        h2, ln2_cache = _ln_forward(x_mid, p[pre + "ln2.g"], p[pre + "ln2.b"])
        a1 = h2 @ p[pre + "w1"] + p[pre + "b1"]
        g1 = _gelu(a1)
        x_out = x_mid + g1 @ p[pre + "w2"] + p[pre + "b2"]
        layers.append(
            {
                "x_in": x, "h1": h1, "ln1": ln1_cache, "qr": qr, "kr": kr, "v": v,
                "att": att, "ctx_flat": ctx_flat, "x_mid": x_mid, "h2": h2,
                "ln2": ln2_cache, "a1": a1, "g1": g1,
            }
        )
        x = x_out

    y_row, lnf_cache = _ln_forward(x[qpos : qpos + 1], p["lnf.g"], p["lnf.b"])
    y = y_row[0]
    logits = y @ p["head.w"] + p["head.b"]
    cache = {
        "p": p, "angles": angles, "qpos": qpos, "x_final": x,
        "layers": layers, "lnf": lnf_cache, "y": y, "logits": logits,
    }
    return logits, cache


def _cross_entropy(logits: np.ndarray, target: int):
    # shift by the max so exp never overflows for sane logits; logits near
    # the float cap still overflow the subtract, which the caller's finite
    # check turns into TrainingError, so intermediates stay quiet here
    with np.errstate(invalid="ignore", over="ignore"):
        m = float(logits.max())
        z = logits - m
        se = float(np.exp(z).sum())
        loss = m + math.log(se) - float(logits[target])
        probs = np.exp(z) / se
    return loss, probs


def loss_and_backward(params: dict, seq: AssembledSequence, target: int, cfg: ModelConfig):
    """Cross-entropy at the readout position and gradients for every block.

    Blocks with no path to the loss (the separator when disabled, embedding
    rows never used) come back exactly zero.
    """
    if not (0 <= target < cfg.vocab):
        raise ValidationError(f"target {target} outside vocab [0, {cfg.vocab})")
    logits, cache = forward(params, seq, cfg)
    loss, probs = _cross_entropy(logits, target)
    if not math.isfinite(loss):
        raise TrainingError(
            f"non-finite loss {loss}; max |logit| = {float(np.max(np.abs(logits)))}"
        )

    p = cache["p"]
    dt = cfg.np_dtype
    qpos = cache["qpos"]
    L = seq.tokens.shape[0]
    grads = {k: np.zeros_like(v) for k, v in params.items()}

    dlogits = probs.astype(dt, copy=True)
    dlogits[target] -= 1.0
    y = cache["y"]
    grads["head.w"] = np.outer(y, dlogits).astype(np.float64)
    grads["head.b"] = dlogits.astype(np.float64)
    dy = p["head.w"] @ dlogits

    dy_row, dg, db = _ln_backward(dy[None, :], p["lnf.g"], cache["lnf"])
    grads["lnf.g"] = dg.astype(np.float64).ravel()
    grads["lnf.b"] = db.astype(np.float64).ravel()
    dx = np.zeros((L, cfg.channels), dtype=dt)
    dx[qpos] = dy_row[0]

    heads, scale = cfg.heads, 1.0 / math.sqrt(cfg.head_dim)
    angles = cache["angles"]
    for i in reversed(range(cfg.layers)):
        pre = f"layer{i}."
        c = cache["layers"][i]
        # feed-forward block
        dg1w2 = dx  # gradient arriving at x_out flows to both residual branches
        grads[pre + "w2"] = (c["g1"].T @ dg1w2).astype(np.float64)
        grads[pre + "b2"] = dg1w2.sum(axis=0).astype(np.float64)
        dg1 = dg1w2 @ p[pre + "w2"].T
        da1 = dg1 * _gelu_grad(c["a1"])
        grads[pre + "w1"] = (c["h2"].T @ da1).astype(np.float64)
        grads[pre + "b1"] = da1.sum(axis=0).astype(np.float64)
        dh2 = da1 @ p[pre + "w1"].T
        dx_mid, dg, db = _ln_backward(dh2, p[pre + "ln2.g"], c["ln2"])
        grads[pre + "ln2.g"] = dg.astype(np.float64)
        grads[pre + "ln2.b"] = db.astype(np.float64)
        dx_mid = dx_mid + dx

        # attention block
        datt_out = dx_mid
        grads[pre + "wo"] = (c["ctx_flat"].T @ datt_out).astype(np.float64)
        dctx_flat = datt_out @ p[pre + "wo"].T
        dctx = dctx_flat.reshape(L, heads, cfg.head_dim).transpose(1, 0, 2)
        datt = dctx @ c["v"].transpose(0, 2, 1)
        dv = c["att"].transpose(0, 2, 1) @ dctx
        dscores = c["att"] * (datt - (datt * c["att"]).sum(axis=-1, keepdims=True))
        dqr = (dscores @ c["kr"]) * scale
        dkr = (dscores.transpose(0, 2, 1) @ c["qr"]) * scale
        # rotation is orthogonal, so its transpose is rotation by -angles
        dq = apply_rope(dqr, -angles[None, :, :]).astype(dt, copy=False)
        dk = apply_rope(dkr, -angles[None, :, :]).astype(dt, copy=False)
        dq_flat = dq.transpose(1, 0, 2).reshape(L, cfg.channels)
        dk_flat = dk.transpose(1, 0, 2).reshape(L, cfg.channels)
        dv_flat = dv.transpose(1, 0, 2).reshape(L, cfg.channels)
        h1 = c["h1"]
        grads[pre + "wq"] = (h1.T @ dq_flat).astype(np.float64)
        grads[pre + "wk"] = (h1.T @ dk_flat).astype(np.float64)
        grads[pre + "wv"] = (h1.T @ dv_flat).astype(np.float64)
        dh1 = dq_flat @ p[pre + "wq"].T + dk_flat @ p[pre + "wk"].T + dv_flat @ p[pre + "wv"].T
        dx_in, dg, db = _ln_backward(dh1, p[pre + "ln1.g"], c["ln1"])
        grads[pre + "ln1.g"] = dg.astype(np.float64)
        grads[pre + "ln1.b"] = db.astype(np.float64)
        dx = dx_in + dx_mid

    # scatter into the embedding table and the shared separator; both entered
    # the sequence scaled by TOKEN_SCALE, so the chain rule scales back here
    dx64 = dx.astype(np.float64) * TOKEN_SCALE
    id_rows = [(m.token_id, i) for i, m in enumerate(seq.metas) if m.token_id is not None]
    if id_rows:
        ids = np.array([t for t, _ in id_rows], dtype=np.int64)
        rows = np.array([i for _, i in id_rows], dtype=np.int64)
        np.add.at(grads["embed"], ids, dx64[rows])
    for span in seq.layout:
        if span.kind == KIND_SEPARATOR:
            grads["sep"] += dx64[span.start : span.start + span.length]

    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in block {name}")
    return loss, grads


def loss_only(params: dict, seq: AssembledSequence, target: int, cfg: ModelConfig) -> float:
    """Loss with the sequence rebuilt from params (used by the FD checker)."""
    rebuilt = rebuild_tokens(params, seq, cfg)
    logits, _ = forward(params, rebuilt, cfg)
    return _cross_entropy(logits, target)[0]


# --- gradient checking ----------------------------------------------------------


def default_check_config() -> ModelConfig:
    """Small instance on which exhaustive finite differences finish quickly."""
    return ModelConfig(
        vocab=11,
        channels=12,
        head_dim=6,
        heads=2,
        layers=2,
        ff_mult=2,
        rope=RopeConfig(axes_dim=(2, 2, 2)),
        index_embed=IndexEmbedConfig(channels=12),
    )


def default_check_instance(cfg: Optional[ModelConfig] = None, seed: int = 1234):
    """(params, seq, target, cfg) for a representative two-image episode."""
    cfg = cfg if cfg is not None else default_check_config()
    rng = Rng(seed)
    params = init_params(cfg, rng.child(0))
    draw = rng.child(1)
    grids = [GridShape(1, 2, 2), GridShape(1, 2, 2)]
    image_ids = [
        np.array([draw.randint(cfg.vocab) for _ in range(g.token_count)]) for g in grids
    ]
    instruction = [draw.randint(cfg.vocab)]
    seq = build_sequence(params, cfg, image_ids, grids, instruction)
    target = draw.randint(cfg.vocab)
    return params, seq, target, cfg


def grad_check(
    params: dict,
    seq: AssembledSequence,
    target: int,
    cfg: ModelConfig,
    eps: float = 1e-5,
    threshold: float = 1e-4,
    corrupt_block: Optional[str] = None,
    fd_dtype: Optional[str] = None,
) -> dict:
    """Central finite differences against the analytic gradients, per block.

    corrupt_block scales one analytic block by 1.1 so the checker's own
    failure path can be exercised. Sequences must carry token ids: the token
    matrix is rebuilt under every perturbation so embedding and separator
    parameters see their full data path.

    fd_dtype picks the precision of the difference quotient independently of
    the model precision. In 32-bit mode the forward's own rounding noise is
    orders of magnitude above the loss change a small perturbation produces,
    so same-precision differences cannot resolve the derivative at all; the
    meaningful question is how far the 32-bit analytic gradients sit from the
    true derivative, answered by evaluating the quotient in float64.
    """
    if not eps > 0:
        raise ValidationError(f"eps must be > 0, got {eps}")
    params = {k: np.array(v, copy=True) for k, v in params.items()}
    _, grads = loss_and_backward(params, rebuild_tokens(params, seq, cfg), target, cfg)
    if corrupt_block is not None:
        if corrupt_block not in grads:
            raise ValidationError(f"unknown block {corrupt_block!r}")
        grads[corrupt_block] = grads[corrupt_block] * 1.1

    if fd_dtype is None or fd_dtype == cfg.dtype:
        fd_cfg, fd_params = cfg, params
    else:
        fd_cfg = replace(cfg, dtype=fd_dtype)
        fd_params = {k: v.astype(fd_cfg.np_dtype) for k, v in params.items()}

    report_blocks = {}
    worst_block, worst_err, worst_index = None, -1.0, -1
    for name, arr in fd_params.items():
        flat = arr.ravel()
        analytic = grads[name].ravel()
        rebuild_needed = name in ("embed", "sep")
        base_seq = seq if rebuild_needed else rebuild_tokens(fd_params, seq, fd_cfg)
        block_err, block_idx = 0.0, 0
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            lp = (
                loss_only(fd_params, seq, target, fd_cfg)
                if rebuild_needed
                else _cross_entropy(forward(fd_params, base_seq, fd_cfg)[0], target)[0]
            )
            flat[idx] = orig - eps
            lm = (
                loss_only(fd_params, seq, target, fd_cfg)
                if rebuild_needed
                else _cross_entropy(forward(fd_params, base_seq, fd_cfg)[0], target)[0]
            )
            flat[idx] = orig
            fd = (lp - lm) / (2.0 * eps)
            a = float(analytic[idx])
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-6)
            if err > block_err:
                block_err, block_idx = err, idx
        report_blocks[name] = {"max_rel_err": block_err, "worst_index": block_idx}
        if block_err > worst_err:
            worst_block, worst_err, worst_index = name, block_err, block_idx
    return {
        "eps": eps,
        "threshold": threshold,
        "blocks": report_blocks,
        "max_rel_err": worst_err,
        "worst_block": worst_block,
        "worst_index": worst_index,
        "passed": worst_err < threshold,
    }


# --- optimizer -------------------------------------------------------------------


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0  # decoupled; gains and biases are exempt


@dataclass
class OptState:
    step: int
    m: dict
    v: dict


def init_opt_state(params: dict) -> OptState:
    return OptState(
        step=0,
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
    )


def opt_step(params: dict, grads: dict, state: OptState, hyper: AdamHyper = AdamHyper()):
    """One bias-corrected adaptive-moment update; returns new (params, state)."""
    if set(params) != set(grads):
        raise ValidationError("gradient blocks do not match parameter blocks")
    t = state.step + 1
    bc1 = 1.0 - hyper.beta1**t
    bc2 = 1.0 - hyper.beta2**t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValidationError(f"gradient shape {g.shape} != param shape {p.shape} for {k}")
        # non-finite gradients flow into the update silently; the isfinite
        # check below is the single detection point, so mute the intermediates
        with np.errstate(invalid="ignore", over="ignore"):
            m = hyper.beta1 * state.m[k] + (1.0 - hyper.beta1) * g
            v = hyper.beta2 * state.v[k] + (1.0 - hyper.beta2) * (g * g)
            update = hyper.lr * (m / bc1) / (np.sqrt(v / bc2) + hyper.eps)
            if hyper.weight_decay != 0.0 and not k.endswith((".g", ".b", "b1", "b2")):
                update = update + (hyper.lr * hyper.weight_decay) * p
            p2 = p - update
        if not np.all(np.isfinite(p2)):
            raise TrainingError(f"non-finite update in block {k} at step {t}")
        new_p[k], new_m[k], new_v[k] = p2, m, v
    return new_p, OptState(step=t, m=new_m, v=new_v)


# --- checkpoints -----------------------------------------------------------------


def config_to_dict(cfg: ModelConfig) -> dict:
    return {
        "vocab": cfg.vocab,
        "channels": cfg.channels,
        "head_dim": cfg.head_dim,
        "heads": cfg.heads,
        "layers": cfg.layers,
        "ff_mult": cfg.ff_mult,
        "sep_width": cfg.sep_width,
        "rope": {"axes_dim": list(cfg.rope.axes_dim), "base": cfg.rope.base},
        "index_embed": {"tau": cfg.index_embed.tau, "channels": cfg.index_embed.channels},
        "use_rope": cfg.use_rope,
        "use_separator": cfg.use_separator,
        "use_index_embed": cfg.use_index_embed,
        "dtype": cfg.dtype,
    }


def config_from_dict(d: dict) -> ModelConfig:
    try:
        return ModelConfig(
            vocab=int(d["vocab"]),
            channels=int(d["channels"]),
            head_dim=int(d["head_dim"]),
            heads=int(d["heads"]),
            layers=int(d["layers"]),
            ff_mult=int(d["ff_mult"]),
            sep_width=int(d["sep_width"]),
            rope=RopeConfig(tuple(int(a) for a in d["rope"]["axes_dim"]), float(d["rope"]["base"])),
            index_embed=IndexEmbedConfig(
                tau=float(d["index_embed"]["tau"]), channels=int(d["index_embed"]["channels"])
            ),
            use_rope=bool(d["use_rope"]),
            use_separator=bool(d["use_separator"]),
            use_index_embed=bool(d["use_index_embed"]),
            dtype=str(d.get("dtype", "float64")),
        )
    except KeyError as exc:
        raise ValidationError(f"checkpoint config missing key {exc}") from exc


def _encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype=np.float64)
    return {
        "shape": list(a.shape),
        "data": base64.b64encode(a.astype("<f8").tobytes()).decode("ascii"),
    }


def _decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    flat = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    shape = tuple(int(s) for s in d["shape"])
    if flat.size != math.prod(shape):
        raise ValidationError(
            f"array payload holds {flat.size} values, shape {shape} needs {math.prod(shape)}"
        )
    return flat.reshape(shape)


def checkpoint_to_dict(cfg: ModelConfig, params: dict, opt_state: Optional[OptState] = None) -> dict:
    blob = {
        "version": 1,
        "config": config_to_dict(cfg),
        "params": {k: _encode_array(v) for k, v in params.items()},
    }
    if opt_state is not None:
        blob["opt_state"] = {
            "step": opt_state.step,
            "m": {k: _encode_array(v) for k, v in opt_state.m.items()},
            "v": {k: _encode_array(v) for k, v in opt_state.v.items()},
        }
    return blob


def checkpoint_from_dict(blob: dict):
    if blob.get("version") != 1:
        raise ValidationError(f"unsupported checkpoint version {blob.get('version')!r}")
    cfg = config_from_dict(blob["config"])
    params = {k: _decode_array(v) for k, v in blob["params"].items()}
    expected = param_shapes(cfg)
    if set(params) != set(expected):
        raise ValidationError("checkpoint parameter blocks do not match its config")
    for k, shape in expected.items():
        if params[k].shape != shape:
            raise ValidationError(f"checkpoint block {k} has shape {params[k].shape}, want {shape}")
    state = None
    if "opt_state" in blob:
        s = blob["opt_state"]
        state = OptState(
            step=int(s["step"]),
            m={k: _decode_array(v) for k, v in s["m"].items()},
            v={k: _decode_array(v) for k, v in s["v"].items()},
        )
    return cfg, params, state


def save_checkpoint(path, cfg: ModelConfig, params: dict, opt_state: Optional[OptState] = None):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(checkpoint_to_dict(cfg, params, opt_state), fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        return checkpoint_from_dict(json.load(fh))
