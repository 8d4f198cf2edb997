"""Byte-stable JSON serialization and digest helpers.

Golden files and run manifests are compared byte for byte, including across
platforms and reimplementations, so the writer must be fully deterministic:

* object keys sorted lexicographically;
* floats rendered with ``format(x, ".17g")``; 17 significant decimal digits
  uniquely identify every IEEE-754 double, and the ``g`` form drops trailing
  zeros so the text is unambiguous and stable (``0.01`` stays ``0.01``,
  integral floats render without a decimal point);
* strings escaped to pure ASCII;
* two-space indentation, one trailing newline;
* NaN and infinities rejected outright (they have no canonical JSON form).

``json.loads`` reads the output back; 17 significant digits guarantee the
parsed doubles are bit-identical to the originals.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from .core import ValidationError

__all__ = [
    "canonical_json",
    "write_canonical_json",
    "sha256_bytes",
    "sha256_file",
]


def _format_float(x: float) -> str:
    if x != x or x in (float("inf"), float("-inf")):
        raise ValidationError(f"non-finite float {x!r} has no canonical JSON form")
    return format(x, ".17g")


def _render(obj, out: list, indent: int) -> None:
    pad = "  " * indent
    if obj is None:
        out.append("null")
    elif isinstance(obj, bool):
        out.append("true" if obj else "false")
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        out.append(_format_float(float(obj)))
    elif isinstance(obj, str):
        out.append(json.dumps(obj, ensure_ascii=True))
    elif isinstance(obj, np.ndarray):
        _render(obj.tolist(), out, indent)
    elif isinstance(obj, (list, tuple)):
        if not obj:
            out.append("[]")
            return
        out.append("[\n")
        inner = "  " * (indent + 1)
        for i, item in enumerate(obj):
            out.append(inner)
            _render(item, out, indent + 1)
            out.append(",\n" if i + 1 < len(obj) else "\n")
        out.append(pad + "]")
    elif isinstance(obj, dict):
        if not obj:
            out.append("{}")
            return
        keys = list(obj.keys())
        for k in keys:
            if not isinstance(k, str):
                raise ValidationError(f"object keys must be strings, got {type(k).__name__}")
        keys.sort()
        out.append("{\n")
        inner = "  " * (indent + 1)
        for i, k in enumerate(keys):
            out.append(inner + json.dumps(k, ensure_ascii=True) + ": ")
            _render(obj[k], out, indent + 1)
            out.append(",\n" if i + 1 < len(keys) else "\n")
        out.append(pad + "}")
    else:
        raise ValidationError(f"type {type(obj).__name__} is not serializable")


def canonical_json(obj) -> str:
    """Deterministic JSON text for obj, with one trailing newline."""
    out: list = []
    _render(obj, out, 0)
    out.append("\n")
    return "".join(out)


def write_canonical_json(obj, path) -> str:
    """Write canonical JSON to path (newline-terminated) and return the text."""
    text = canonical_json(obj)
    with open(path, "w", encoding="ascii", newline="") as fh:
        fh.write(text)
    return text


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
