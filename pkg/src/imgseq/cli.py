"""Command-line entry point.

Subcommands: dump-rope (frequency table JSON), dump-index (index-embedding
table JSON), assemble (sequence report from an assembly spec), gradcheck
(finite-difference verification of the hand-derived gradients), probe (the
ablation/extrapolation experiment), verify (digest check of a run directory).

Settings resolve in three layers: built-in defaults, then the --config file,
then explicit flags. All outputs are canonical JSON or fixed-layout CSV, so
reruns with identical inputs and seeds are byte-identical; the run manifest
records the tool version, resolved config, seeds, and input/output digests
(wall-clock time lives only in the manifest, never in metrics files).

Exit codes: 0 success, 1 assertion or property failure, 2 bad input,
3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

from . import __version__
from .assembler import parse_assembly_spec, realize_assembly, sequence_report
from .canonical import canonical_json, sha256_bytes, sha256_file, write_canonical_json
from .core import ConfigError, TrainingError, ValidationError
from .index_embed import IndexEmbedConfig, embedding_table
from .mrope import RopeConfig, freq_table_dump
from .probe import (
    curves_to_jsonable,
    metrics_csv_text,
    probe_spec_from_dict,
    probe_spec_to_dict,
    run_ablation,
    summary_from_rows,
)
from .tinymodel import default_check_config, default_check_instance, grad_check

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_BAD_INPUT = 2
EXIT_IO = 3

MANIFEST_NAME = "manifest.json"


class _CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _load_json(path: str):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise _CliError(EXIT_BAD_INPUT, f"cannot read {path}: {e}")
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise _CliError(EXIT_BAD_INPUT, f"malformed JSON in {path}: {e}")


def _expect_keys(d: dict, allowed: set, what: str):
    if not isinstance(d, dict):
        raise _CliError(EXIT_BAD_INPUT, f"{what} must be a JSON object")
    unknown = set(d) - allowed
    if unknown:
        raise _CliError(EXIT_BAD_INPUT, f"unknown {what} keys: {sorted(unknown)}")


def _emit(text: str, out_path):
    """Write text to out_path, or stdout when no path was given."""
    if out_path is None:
        sys.stdout.write(text)
        return
    try:
        with open(out_path, "w", encoding="ascii", newline="") as fh:
            fh.write(text)
    except OSError as e:
        raise _CliError(EXIT_IO, f"cannot write {out_path}: {e}")


def cmd_dump_rope(args) -> int:
    cfg_kwargs = {}
    if args.config:
        raw = _load_json(args.config)
        _expect_keys(raw, {"axes_dim", "base"}, "rope config")
        if "axes_dim" in raw:
            cfg_kwargs["axes_dim"] = tuple(int(v) for v in raw["axes_dim"])
        if "base" in raw:
            cfg_kwargs["base"] = float(raw["base"])
    cfg = RopeConfig(**cfg_kwargs)
    _emit(canonical_json(freq_table_dump(cfg)), args.out)
    return EXIT_OK


def cmd_dump_index(args) -> int:
    n, cfg_kwargs = 64, {}
    if args.config:
        raw = _load_json(args.config)
        _expect_keys(raw, {"n", "tau", "channels"}, "index config")
        n = int(raw.get("n", n))
        if "tau" in raw:
            cfg_kwargs["tau"] = float(raw["tau"])
        if "channels" in raw:
            cfg_kwargs["channels"] = int(raw["channels"])
    if args.n is not None:
        n = args.n
    cfg = IndexEmbedConfig(**cfg_kwargs)
    table = embedding_table(n, cfg)
    blob = {
        "n": n,
        "tau": cfg.tau,
        "channels": cfg.channels,
        "rows": table,
    }
    _emit(canonical_json(blob), args.out)
    return EXIT_OK


def cmd_assemble(args) -> int:
    if not args.config:
        raise _CliError(EXIT_BAD_INPUT, "assemble requires --config with an assembly spec")
    spec = parse_assembly_spec(_load_json(args.config))
    if args.seed is not None:
        from dataclasses import replace

        spec = replace(spec, seed=args.seed)
    seq = realize_assembly(spec)
    _emit(canonical_json(sequence_report(seq)), args.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    settings = {
        "dtype": "float64",
        "eps": 1e-5,
        "threshold": None,
        "corrupt_block": None,
        "seed": 1234,
    }
    if args.config:
        raw = _load_json(args.config)
        _expect_keys(raw, set(settings), "gradcheck config")
        settings.update(raw)
    if args.dtype:
        settings["dtype"] = args.dtype
    if args.eps is not None:
        settings["eps"] = args.eps
    if args.threshold is not None:
        settings["threshold"] = args.threshold
    if args.corrupt:
        settings["corrupt_block"] = args.corrupt
    if args.seed is not None:
        settings["seed"] = args.seed

    from dataclasses import replace

    cfg = default_check_config()
    fd_dtype = None
    if settings["dtype"] == "float32":
        # 32-bit forward noise swamps same-precision differences, so the
        # quotient runs in float64 and the threshold relaxes to 1e-2
        cfg = replace(cfg, dtype="float32")
        fd_dtype = "float64"
        if settings["threshold"] is None:
            settings["threshold"] = 1e-2
    elif settings["dtype"] != "float64":
        raise _CliError(EXIT_BAD_INPUT, f"dtype must be float64 or float32, got {settings['dtype']!r}")
    if settings["threshold"] is None:
        settings["threshold"] = 1e-4

    params, seq, target, cfg = default_check_instance(cfg, seed=int(settings["seed"]))
    report = grad_check(
        params,
        seq,
        target,
        cfg,
        eps=float(settings["eps"]),
        threshold=float(settings["threshold"]),
        corrupt_block=settings["corrupt_block"],
        fd_dtype=fd_dtype,
    )
    verdict = "PASS" if report["passed"] else "FAIL"
    print(
        f"{verdict} max_rel_err={report['max_rel_err']:.6e} "
        f"worst_block={report['worst_block']} threshold={report['threshold']:g} "
        f"eps={report['eps']:g} dtype={settings['dtype']}"
    )
    return EXIT_OK if report["passed"] else EXIT_FAILURE


def cmd_probe(args) -> int:
    if not args.config:
        raise _CliError(EXIT_BAD_INPUT, "probe requires --config with a probe spec")
    raw = _load_json(args.config)
    spec = probe_spec_from_dict(raw)
    if args.seed is not None:
        from dataclasses import replace

        spec = replace(spec, seeds=(args.seed,))
    out_dir = args.out or "probe_out"
    try:
        os.makedirs(out_dir, exist_ok=True)
        probe_canary = os.path.join(out_dir, ".write_test")
        with open(probe_canary, "w") as fh:
            fh.write("")
        os.remove(probe_canary)
    except OSError as e:
        raise _CliError(EXIT_IO, f"output directory {out_dir} is not writable: {e}")

    result = run_ablation(spec, workers=args.workers)
    outputs = {}
    csv_path = os.path.join(out_dir, "metrics.csv")
    with open(csv_path, "w", encoding="ascii", newline="") as fh:
        fh.write(metrics_csv_text(result.rows))
    outputs["metrics.csv"] = sha256_file(csv_path)
    summary_path = os.path.join(out_dir, "summary.json")
    write_canonical_json(summary_from_rows(result.rows), summary_path)
    outputs["summary.json"] = sha256_file(summary_path)
    curves_path = os.path.join(out_dir, "curves.json")
    write_canonical_json(curves_to_jsonable(result.curves), curves_path)
    outputs["curves.json"] = sha256_file(curves_path)

    manifest = {
        "version": __version__,
        "command": "probe",
        "config": probe_spec_to_dict(spec),
        "seeds": list(spec.seeds),
        "inputs": {os.path.basename(args.config): sha256_file(args.config)},
        "outputs": outputs,
        "wall_clock_s": result.wall_clock_s,
    }
    write_canonical_json(manifest, os.path.join(out_dir, MANIFEST_NAME))
    for cfg_name, cell in sorted(summary_from_rows(result.rows).items()):
        for eval_set, stats in sorted(cell.items()):
            print(f"{cfg_name} {eval_set}: mean={stats['mean']:.4f} min={stats['min']:.4f} max={stats['max']:.4f}")
    print(f"wrote {out_dir}/metrics.csv, summary.json, curves.json, {MANIFEST_NAME}")
    return EXIT_OK


def cmd_verify(args) -> int:
    out_dir = args.dir
    manifest_path = os.path.join(out_dir, MANIFEST_NAME)
    if not os.path.exists(manifest_path):
        raise _CliError(EXIT_BAD_INPUT, f"no manifest in {out_dir}")
    manifest = _load_json(manifest_path)
    outputs = manifest.get("outputs")
    if not isinstance(outputs, dict):
        raise _CliError(EXIT_BAD_INPUT, f"manifest in {out_dir} has no outputs table")
    mismatches = []
    for name, digest in sorted(outputs.items()):
        path = os.path.join(out_dir, name)
        if not os.path.exists(path):
            mismatches.append(f"{name}: missing")
        elif sha256_file(path) != digest:
            mismatches.append(f"{name}: digest mismatch")
    if mismatches:
        for m in mismatches:
            print(m, file=sys.stderr)
        return EXIT_FAILURE
    print("ok")
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="imgseq", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("dump-rope", help="write the rotary frequency table as canonical JSON")
    d.add_argument("--config", help="JSON file with axes_dim and/or base")
    d.add_argument("--out", help="output path (default stdout)")
    d.set_defaults(func=cmd_dump_rope)

    di = sub.add_parser("dump-index", help="write the image-index embedding table as canonical JSON")
    di.add_argument("--config", help="JSON file with n, tau and/or channels")
    di.add_argument("--out", help="output path (default stdout)")
    di.add_argument("--n", type=int, help="image count (rows); wins over config")
    di.set_defaults(func=cmd_dump_index)

    a = sub.add_parser("assemble", help="assemble a sequence from a spec file and report its layout")
    a.add_argument("--config", help="assembly spec JSON file")
    a.add_argument("--out", help="output path (default stdout)")
    a.add_argument("--seed", type=int, help="draw seed; wins over the spec file")
    a.set_defaults(func=cmd_assemble)

    g = sub.add_parser("gradcheck", help="finite-difference check of the hand-derived gradients")
    g.add_argument("--config", help="JSON file with dtype/eps/threshold/corrupt_block/seed")
    g.add_argument("--dtype", choices=("float64", "float32"), help="model precision")
    g.add_argument("--eps", type=float, help="finite-difference step")
    g.add_argument("--threshold", type=float, help="max relative error to pass")
    g.add_argument("--corrupt", metavar="BLOCK", help="scale one analytic block by 1.1 (must FAIL)")
    g.add_argument("--seed", type=int, help="instance seed")
    g.set_defaults(func=cmd_gradcheck)

    pr = sub.add_parser("probe", help="run the ablation/extrapolation experiment")
    pr.add_argument("--config", help="probe spec JSON file")
    pr.add_argument("--out", help="output directory (created if missing)")
    pr.add_argument("--seed", type=int, help="replace the spec's seed list with this one seed")
    pr.add_argument("--workers", type=int, help="parallel runs (default IMGSEQ_WORKERS or 1)")
    pr.set_defaults(func=cmd_probe)

    v = sub.add_parser("verify", help="check a run directory against its manifest digests")
    v.add_argument("dir", help="run directory containing manifest.json")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (ValidationError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except TrainingError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
