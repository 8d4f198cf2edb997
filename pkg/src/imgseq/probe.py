"""Synthetic image-identity probe.

Each episode hides one distinctive payload token at a random cell of every
image and asks, through a single ordinal instruction token, for the payload
of one specific image. Image contents alone cannot answer (payload cells are
randomized and the ids are drawn fresh per episode), so above-chance accuracy
certifies that the model resolves *which image is which* inside the fused
sequence.

The experiment trains the same tiny attention model under four encoding
configurations (rotary positions only, plus separator, plus index embedding,
plus both) on 2-4-image episodes, then evaluates held-out episodes both in
distribution (2-4 images) and extrapolated (5-6 images, never trained on).
All randomness runs through per-(seed, counter) child streams, so reruns are
bit-identical and every configuration sees the same episode stream and the
same evaluation sets for a given seed.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import GridShape, Rng, TrainingError, ValidationError
from .tinymodel import (
    AdamHyper,
    ModelConfig,
    build_sequence,
    forward,
    init_opt_state,
    init_params,
    loss_and_backward,
    opt_step,
    param_shapes,
)

__all__ = [
    "ABLATION_GRID",
    "EVAL_SETS",
    "ProbeSpec",
    "ProbeEpisode",
    "ProbeResult",
    "gen_episode",
    "evaluate",
    "run_single",
    "curriculum_counts",
    "run_ablation",
    "run_extrapolation",
    "default_probe_model",
    "metrics_csv_text",
    "write_metrics_csv",
    "summary_from_rows",
    "curves_to_jsonable",
    "probe_spec_to_dict",
    "probe_spec_from_dict",
]

# (name, use_separator, use_index_embed); rotary positions stay on everywhere
ABLATION_GRID = (
    ("rope_only", False, False),
    ("rope_sep", True, False),
    ("rope_index", False, True),
    ("full", True, True),
)

EVAL_SETS = ("in_dist", "extrapolated")

CSV_HEADER = "config,seed,eval_set,episodes,correct,accuracy,status"


@dataclass(frozen=True)
class ProbeSpec:
    """Task and budget for the probe experiment.

    The vocabulary splits into three contiguous regions: filler ids
    [0, filler_count), payload ids [filler_count, filler_count+payload_count),
    and ordinal ids [vocab-ordinal_count, vocab). Instructions use ordinal
    ids only, so they can never leak the payload.

    eval_target_max caps the instruction ordinal during evaluation at the
    largest ordinal seen in training (by default max(train_counts)); on 5-6
    image episodes the extra images act as distractors while the question
    itself stays inside the trained instruction set, isolating identity
    resolution from the unrelated problem of never-trained ordinal tokens.

    curriculum phases the training counts (smallest count only for the first
    fifth of the steps, the two smallest for the second fifth, the full pool
    afterwards). Ordinal binding learned on small counts first transfers to
    larger ones; without the phasing, runs vary wildly in how much the model
    leans on count-specific shortcuts.
    """

    vocab: int = 64
    grid: GridShape = GridShape(1, 3, 3)
    payload_count: int = 28
    ordinal_count: int = 8
    train_counts: Tuple[int, ...] = (2, 3, 4)
    eval_in_counts: Tuple[int, ...] = (2, 3, 4)
    eval_ex_counts: Tuple[int, ...] = (5, 6)
    steps: int = 3000
    episodes_per_step: int = 16
    eval_episodes: int = 200
    seeds: Tuple[int, ...] = (1, 2, 3, 4, 5)
    eval_target_max: int = 0  # 0 means max(train_counts)
    curriculum: bool = True
    curve_every: int = 50

    def __post_init__(self):
        object.__setattr__(self, "grid", GridShape(*self.grid) if not isinstance(self.grid, GridShape) else self.grid)
        for name in ("train_counts", "eval_in_counts", "eval_ex_counts", "seeds"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.eval_target_max == 0:
            object.__setattr__(self, "eval_target_max", max(self.train_counts))
        counts = self.train_counts + self.eval_in_counts + self.eval_ex_counts
        if not counts or min(counts) < 2:
            raise ValidationError("every image count must be >= 2")
        if self.payload_count < max(counts):
            raise ValidationError(
                f"payload region of {self.payload_count} ids cannot give "
                f"{max(counts)} images distinct payloads"
            )
        if self.ordinal_count < max(counts):
            raise ValidationError(
                f"ordinal region of {self.ordinal_count} ids cannot address {max(counts)} images"
            )
        if self.filler_count < 1:
            raise ValidationError(
                f"vocab {self.vocab} leaves no filler ids after "
                f"{self.payload_count} payloads and {self.ordinal_count} ordinals"
            )
        if min(self.eval_ex_counts) <= max(self.train_counts):
            raise ValidationError(
                f"extrapolated counts {self.eval_ex_counts} must strictly exceed "
                f"training max {max(self.train_counts)}"
            )
        if not (1 <= self.eval_target_max <= self.ordinal_count):
            raise ValidationError(
                f"eval_target_max {self.eval_target_max} outside [1, {self.ordinal_count}]"
            )
        if self.steps < 1 or self.episodes_per_step < 1 or self.eval_episodes < 1:
            raise ValidationError("steps, episodes_per_step and eval_episodes must be >= 1")
        if self.curve_every < 1:
            raise ValidationError(f"curve_every must be >= 1, got {self.curve_every}")
        if len(set(self.seeds)) != len(self.seeds) or not self.seeds:
            raise ValidationError("seeds must be non-empty and distinct")

    @property
    def filler_count(self) -> int:
        return self.vocab - self.payload_count - self.ordinal_count

    @property
    def payload_lo(self) -> int:
        return self.filler_count

    @property
    def ordinal_lo(self) -> int:
        return self.vocab - self.ordinal_count


@dataclass(frozen=True)
class ProbeEpisode:
    """One retrieval question: images as token-id grids plus the instruction."""

    image_ids: Tuple[np.ndarray, ...]
    grids: Tuple[GridShape, ...]
    instruction: Tuple[int, ...]
    target_ordinal: int  # 0-based image index the instruction refers to
    label: int  # payload token id of that image


@dataclass
class ProbeResult:
    rows: List[dict]
    curves: Dict[str, List[Tuple[int, float]]]
    wall_clock_s: float
    checkpoints: Dict[Tuple[str, int], dict]


def gen_episode(
    rng: Rng, spec: ProbeSpec, num_images: int, target_max: Optional[int] = None
) -> ProbeEpisode:
    """Draw one episode from rng; identical rng state gives identical episode.

    Draw order is frozen: payload ids (without replacement), then per image
    the payload cell followed by one filler per cell (the payload overwrites
    its cell), then the target ordinal. target_max, when given, caps which
    ordinals can be asked about; images beyond it still appear as distractors.
    """
    if num_images < 2:
        raise ValidationError(f"episodes need >= 2 images, got {num_images}")
    if num_images > spec.payload_count or num_images > spec.ordinal_count:
        raise ValidationError(
            f"{num_images} images exceed the payload/ordinal regions of the vocab"
        )
    payloads = rng.sample_without_replacement(
        range(spec.payload_lo, spec.payload_lo + spec.payload_count), num_images
    )
    cells = spec.grid.token_count
    image_ids = []
    for j in range(num_images):
        cell = rng.randint(cells)
        ids = np.array([rng.randint(spec.filler_count) for _ in range(cells)], dtype=np.int64)
        ids[cell] = payloads[j]
        image_ids.append(ids)
    hi = num_images if target_max is None else min(num_images, target_max)
    target = rng.randint(hi)
    return ProbeEpisode(
        image_ids=tuple(image_ids),
        grids=(spec.grid,) * num_images,
        instruction=(spec.ordinal_lo + target,),
        target_ordinal=target,
        label=int(payloads[target]),
    )


def default_probe_model(spec: ProbeSpec) -> ModelConfig:
    return ModelConfig(vocab=spec.vocab)


def curriculum_counts(step: int, total_steps: int, counts: Sequence[int]) -> Tuple[int, ...]:
    """Image-count pool for one 1-based training step.

    First fifth of the steps: smallest count only. Second fifth: two smallest.
    After that: the whole pool. With fewer than three counts the phases
    collapse onto the prefixes that exist.
    """
    ordered = tuple(sorted(counts))
    if step <= total_steps // 5:
        return ordered[:1]
    if step <= 2 * (total_steps // 5):
        return ordered[:2]
    return ordered


def _config_flags(name: str) -> Tuple[bool, bool]:
    for n, sep, idx in ABLATION_GRID:
        if n == name:
            return sep, idx
    raise ValidationError(f"unknown config {name!r}; expected one of "
                          f"{[n for n, _, _ in ABLATION_GRID]}")


def _model_for(name: str, base: ModelConfig) -> ModelConfig:
    sep, idx = _config_flags(name)
    return replace(base, use_rope=True, use_separator=sep, use_index_embed=idx)


def _eval_episodes(spec: ProbeSpec, seed: int, eval_set: str) -> List[ProbeEpisode]:
    """Held-out episodes for one seed; shared verbatim by all four configs."""
    if eval_set == "in_dist":
        counts, stream = spec.eval_in_counts, 2
    elif eval_set == "extrapolated":
        counts, stream = spec.eval_ex_counts, 3
    else:
        raise ValidationError(f"unknown eval set {eval_set!r}")
    root = Rng(seed)
    return [
        gen_episode(
            root.child(stream, i),
            spec,
            counts[i % len(counts)],
            target_max=spec.eval_target_max,
        )
        for i in range(spec.eval_episodes)
    ]


def evaluate(params: dict, cfg: ModelConfig, episodes: Sequence[ProbeEpisode]) -> Tuple[int, int]:
    """(correct, total) under greedy argmax readout; no parameter updates."""
    correct = 0
    for ep in episodes:
        seq = build_sequence(params, cfg, ep.image_ids, ep.grids, list(ep.instruction))
        logits, _ = forward(params, seq, cfg)
        if int(np.argmax(logits)) == ep.label:
            correct += 1
    return correct, len(episodes)


def run_single(spec: ProbeSpec, config_name: str, seed: int, base: ModelConfig):
    """Train one (config, seed) run and evaluate both held-out sets.

    Stream layout under Rng(seed): child(0) initializes parameters, child(1, i)
    generates training episode i (count drawn first from the step's curriculum
    pool, then the episode), and child(2, i)/child(3, i) generate the
    evaluation sets. Configs differ only in their encoding flags, so a given
    seed pits all four against identical data. A non-finite update ends the
    run with status "failed" instead of crashing; its evaluation rows then
    report zero episodes.
    """
    cfg = _model_for(config_name, base)
    root = Rng(seed)
    params = init_params(cfg, root.child(0))
    opt = init_opt_state(params)
    hyper = AdamHyper()
    curve: List[Tuple[int, float]] = []
    status = "ok"
    counter = 0
    try:
        for step in range(1, spec.steps + 1):
            pool = (
                curriculum_counts(step, spec.steps, spec.train_counts)
                if spec.curriculum
                else spec.train_counts
            )
            gsum = {k: np.zeros_like(v) for k, v in params.items()}
            loss_sum = 0.0
            for _ in range(spec.episodes_per_step):
                ep_rng = root.child(1, counter)
                counter += 1
                count = pool[ep_rng.randint(len(pool))]
                ep = gen_episode(ep_rng, spec, count)
                seq = build_sequence(params, cfg, ep.image_ids, ep.grids, list(ep.instruction))
                loss, grads = loss_and_backward(params, seq, ep.label, cfg)
                loss_sum += loss
                for k in gsum:
                    gsum[k] += grads[k]
            for k in gsum:
                gsum[k] /= spec.episodes_per_step
            params, opt = opt_step(params, gsum, opt, hyper)
            if step == 1 or step == spec.steps or step % spec.curve_every == 0:
                curve.append((step, loss_sum / spec.episodes_per_step))
    except TrainingError:
        status = "failed"

    rows = []
    for eval_set in EVAL_SETS:
        if status == "ok":
            correct, total = evaluate(params, cfg, _eval_episodes(spec, seed, eval_set))
            acc = correct / total
        else:
            correct, total, acc = 0, 0, 0.0
        rows.append(
            {
                "config": config_name,
                "seed": seed,
                "eval_set": eval_set,
                "episodes": total,
                "correct": correct,
                "accuracy": acc,
                "status": status,
            }
        )
    return rows, curve, params


def _run_job(args):
    spec, name, seed, base = args
    rows, curve, params = run_single(spec, name, seed, base)
    return name, seed, rows, curve, params


def _worker_count(workers: Optional[int]) -> int:
    if workers is None:
        workers = int(os.environ.get("IMGSEQ_WORKERS", "1"))
    if workers < 1:
        raise ValidationError(f"worker count must be >= 1, got {workers}")
    return workers


def run_ablation(
    spec: ProbeSpec,
    base: Optional[ModelConfig] = None,
    workers: Optional[int] = None,
    configs: Optional[Sequence[str]] = None,
) -> ProbeResult:
    """Train every (config, seed) pair and gather both evaluation sets.

    Runs are independent, so they fan out over processes when workers > 1
    (IMGSEQ_WORKERS supplies the default); results are reassembled in the
    fixed (config, seed, eval_set) order either way, making the output
    byte-stable regardless of scheduling.
    """
    base = base if base is not None else default_probe_model(spec)
    if base.vocab != spec.vocab:
        raise ValidationError(f"model vocab {base.vocab} != spec vocab {spec.vocab}")
    names = list(configs) if configs is not None else [n for n, _, _ in ABLATION_GRID]
    for n in names:
        _config_flags(n)
    jobs = [(spec, n, s, base) for n in names for s in spec.seeds]
    t0 = time.monotonic()
    nworkers = _worker_count(workers)
    if nworkers > 1:
        with ProcessPoolExecutor(max_workers=nworkers) as pool:
            outs = list(pool.map(_run_job, jobs))
    else:
        outs = [_run_job(j) for j in jobs]
    wall = time.monotonic() - t0

    by_key = {(n, s): (rows, curve, params) for n, s, rows, curve, params in outs}
    rows: List[dict] = []
    curves: Dict[str, List[Tuple[int, float]]] = {}
    checkpoints: Dict[Tuple[str, int], dict] = {}
    for n in names:
        for s in spec.seeds:
            r, curve, params = by_key[(n, s)]
            rows.extend(r)
            curves[f"{n}/{s}"] = curve
            checkpoints[(n, s)] = params
    return ProbeResult(rows=rows, curves=curves, wall_clock_s=wall, checkpoints=checkpoints)


def run_extrapolation(
    spec: ProbeSpec,
    checkpoints: Dict[Tuple[str, int], dict],
    base: Optional[ModelConfig] = None,
) -> List[dict]:
    """Evaluate trained checkpoints on the extrapolated counts only.

    No parameter ever updates here; each episode's index embeddings are
    normalized by that episode's own image count, which is what lets models
    trained on 2-4 images address positions inside 5-6-image sequences.
    """
    base = base if base is not None else default_probe_model(spec)
    rows = []
    for (name, seed) in sorted(checkpoints, key=lambda k: ([n for n, _, _ in ABLATION_GRID].index(k[0]), k[1])):
        cfg = _model_for(name, base)
        params = checkpoints[(name, seed)]
        expected = param_shapes(cfg)
        if set(params) != set(expected):
            raise ValidationError(f"checkpoint blocks do not match model for {name}/{seed}")
        for k, shape in expected.items():
            if tuple(params[k].shape) != shape:
                raise ValidationError(
                    f"checkpoint block {k} has shape {params[k].shape}, model needs {shape}"
                )
        episodes = _eval_episodes(spec, seed, "extrapolated")
        assert all(len(ep.image_ids) in spec.eval_ex_counts for ep in episodes)
        correct, total = evaluate(params, cfg, episodes)
        rows.append(
            {
                "config": name,
                "seed": seed,
                "eval_set": "extrapolated",
                "episodes": total,
                "correct": correct,
                "accuracy": correct / total,
                "status": "ok",
            }
        )
    return rows


# --- result serialization ----------------------------------------------------------


def _row_sort_key(row: dict):
    order = [n for n, _, _ in ABLATION_GRID]
    cfg_i = order.index(row["config"]) if row["config"] in order else len(order)
    return (cfg_i, row["seed"], EVAL_SETS.index(row["eval_set"]))


def metrics_csv_text(rows: Sequence[dict]) -> str:
    """Fixed-header CSV; accuracy uses the 17-digit float form, rows sorted."""
    lines = [CSV_HEADER]
    for row in sorted(rows, key=_row_sort_key):
        acc = format(float(row["accuracy"]), ".17g")
        lines.append(
            f'{row["config"]},{row["seed"]},{row["eval_set"]},'
            f'{row["episodes"]},{row["correct"]},{acc},{row["status"]}'
        )
    return "\n".join(lines) + "\n"


def write_metrics_csv(rows: Sequence[dict], path) -> str:
    text = metrics_csv_text(rows)
    with open(path, "w", encoding="ascii", newline="") as fh:
        fh.write(text)
    return text


def summary_from_rows(rows: Sequence[dict]) -> dict:
    """Per (config, eval_set): mean/min/max accuracy over seeds with ok status."""
    cells: Dict[Tuple[str, str], List[float]] = {}
    failures: Dict[Tuple[str, str], int] = {}
    for row in rows:
        key = (row["config"], row["eval_set"])
        if row["status"] == "ok":
            cells.setdefault(key, []).append(float(row["accuracy"]))
        else:
            failures[key] = failures.get(key, 0) + 1
    out: dict = {}
    for (config, eval_set), accs in sorted(cells.items()):
        out.setdefault(config, {})[eval_set] = {
            "mean": sum(accs) / len(accs),
            "min": min(accs),
            "max": max(accs),
            "seeds": len(accs),
            "failed": failures.get((config, eval_set), 0),
        }
    for (config, eval_set), n in sorted(failures.items()):
        out.setdefault(config, {}).setdefault(
            eval_set, {"mean": 0.0, "min": 0.0, "max": 0.0, "seeds": 0, "failed": n}
        )
    return out


def curves_to_jsonable(curves: Dict[str, List[Tuple[int, float]]]) -> dict:
    return {k: [[int(s), float(l)] for s, l in v] for k, v in curves.items()}


# --- spec (de)serialization ---------------------------------------------------------


def probe_spec_to_dict(spec: ProbeSpec) -> dict:
    return {
        "vocab": spec.vocab,
        "grid": [spec.grid.frames, spec.grid.height, spec.grid.width],
        "payload_count": spec.payload_count,
        "ordinal_count": spec.ordinal_count,
        "train_counts": list(spec.train_counts),
        "eval_in_counts": list(spec.eval_in_counts),
        "eval_ex_counts": list(spec.eval_ex_counts),
        "steps": spec.steps,
        "episodes_per_step": spec.episodes_per_step,
        "eval_episodes": spec.eval_episodes,
        "seeds": list(spec.seeds),
        "eval_target_max": spec.eval_target_max,
        "curriculum": spec.curriculum,
        "curve_every": spec.curve_every,
    }


def probe_spec_from_dict(d: dict) -> ProbeSpec:
    if not isinstance(d, dict):
        raise ValidationError(f"probe spec must be an object, got {type(d).__name__}")
    known = set(probe_spec_to_dict(ProbeSpec()))
    unknown = set(d) - known
    if unknown:
        raise ValidationError(f"unknown probe spec keys: {sorted(unknown)}")
    kwargs = dict(d)
    if "grid" in kwargs:
        g = kwargs["grid"]
        if not (isinstance(g, (list, tuple)) and len(g) == 3):
            raise ValidationError(f"grid must be a [frames, height, width] triple, got {g!r}")
        kwargs["grid"] = GridShape(*(int(v) for v in g))
    for name in ("train_counts", "eval_in_counts", "eval_ex_counts", "seeds"):
        if name in kwargs:
            kwargs[name] = tuple(int(v) for v in kwargs[name])
    return ProbeSpec(**kwargs)
