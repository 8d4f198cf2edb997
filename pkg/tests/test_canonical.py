"""Byte-stability of the JSON writer and the digest helpers."""

import json

import numpy as np
import pytest

from imgseq.canonical import canonical_json, sha256_bytes, sha256_file, write_canonical_json
from imgseq.core import Rng, ValidationError


class TestCanonicalJson:
    def test_keys_sorted(self):
        a = canonical_json({"b": 1, "a": 2, "c": 3})
        b = canonical_json({"c": 3, "a": 2, "b": 1})
        assert a == b
        assert a.index('"a"') < a.index('"b"') < a.index('"c"')

    def test_trailing_newline(self):
        assert canonical_json({}).endswith("}\n")
        assert canonical_json([1]).endswith("]\n")

    def test_float_17_digits(self):
        assert canonical_json(0.01) == "0.01\n"
        assert canonical_json(1.0) == "1\n"
        assert canonical_json(1 / 3) == "0.33333333333333331\n"

    def test_scalars(self):
        assert canonical_json(None) == "null\n"
        assert canonical_json(True) == "true\n"
        assert canonical_json(False) == "false\n"
        assert canonical_json(7) == "7\n"
        assert canonical_json("hi") == '"hi"\n'

    def test_string_escaping_ascii(self):
        text = canonical_json({"k": 'a"b\\c\ndé'})
        assert "é" not in text
        assert json.loads(text) == {"k": 'a"b\\c\ndé'}

    def test_numpy_types(self):
        obj = {"a": np.float64(0.5), "b": np.int64(3), "c": np.arange(4).reshape(2, 2)}
        parsed = json.loads(canonical_json(obj))
        assert parsed == {"a": 0.5, "b": 3, "c": [[0, 1], [2, 3]]}

    def test_round_trip_bit_exact_floats(self):
        rng = Rng(99)
        vals = [rng.normals(1)[0] * 10.0 ** rng.randint(11) for _ in range(500)]
        parsed = json.loads(canonical_json(vals))
        assert all(p == v for p, v in zip(parsed, vals))

    def test_nan_inf_rejected(self):
        for bad in (float("nan"), float("inf"), float("-inf")):
            with pytest.raises(ValidationError):
                canonical_json({"x": bad})

    def test_non_string_keys_rejected(self):
        with pytest.raises(ValidationError):
            canonical_json({1: "a"})

    def test_unserializable_rejected(self):
        with pytest.raises(ValidationError):
            canonical_json({"x": object()})

    def test_nested_layout_stable(self):
        obj = {"outer": {"list": [1, {"deep": 0.25}], "empty": [], "none": None}}
        assert canonical_json(obj) == canonical_json(obj)
        reparsed = json.loads(canonical_json(obj))
        assert canonical_json(reparsed) == canonical_json(obj)

    def test_tuple_renders_as_array(self):
        assert canonical_json((1, 2)) == canonical_json([1, 2])


class TestDigests:
    def test_sha256_bytes_known_value(self):
        # sha256("") is a published constant
        assert (
            sha256_bytes(b"")
            == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        )

    def test_file_digest_matches_bytes(self, tmp_path):
        p = tmp_path / "t.json"
        text = write_canonical_json({"z": 1, "a": [0.5, None]}, p)
        assert p.read_bytes() == text.encode("ascii")
        assert sha256_file(p) == sha256_bytes(text.encode("ascii"))

    def test_write_is_idempotent(self, tmp_path):
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        obj = {"cfg": {"tau": 10000.0, "channels": 32}, "rows": [[1.5, 2.5]]}
        write_canonical_json(obj, p1)
        write_canonical_json(obj, p2)
        assert p1.read_bytes() == p2.read_bytes()
