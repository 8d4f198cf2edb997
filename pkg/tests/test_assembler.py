import numpy as np
import pytest

from imgseq.assembler import (
    AssembledSequence,
    AssemblySpec,
    SeparatorToken,
    Span,
    assemble,
    assign_positions,
    expected_length,
    init_separator,
    parse_assembly_spec,
    realize_assembly,
    recover_images,
    render_report,
    sequence_report,
)
from imgseq.core import GridShape, LatentImage, Rng, ValidationError, validate_sequence
from imgseq.index_embed import IndexEmbedConfig


def make_images(grids, channels=6, seed=3):
    rng = Rng(seed)
    return [
        LatentImage(j, g, channels, rng.child(j).normal_matrix((g.token_count, channels)))
        for j, g in enumerate(grids, start=1)
    ]


def make_sep(channels=6, width=1, seed=9):
    return init_separator(channels, width=width, rng=Rng(seed))


ICFG6 = IndexEmbedConfig(channels=6)


class TestAssembleLayout:
    def test_two_images_d1_no_text(self):
        images = make_images([GridShape(1, 2, 2), GridShape(1, 2, 2)])
        seq = assemble(images, make_sep(), ICFG6)
        assert seq.length == 10
        got = [(s.kind, s.image_index, s.start, s.length) for s in seq.layout]
        assert got == [
            ("image", 1, 0, 4),
            ("separator", 1, 4, 1),
            ("image", 2, 5, 4),
            ("separator", 2, 9, 1),
        ]
        assert validate_sequence(seq) is None

    def test_single_image(self):
        images = make_images([GridShape(2, 3, 3)])
        seq = assemble(images, make_sep(), ICFG6)
        assert seq.length == 2 * 3 * 3 + 1

    def test_mixed_grids_width2_layout_oracle(self):
        grids = [GridShape(1, 2, 2), GridShape(1, 1, 3), GridShape(1, 3, 1)]
        images = make_images(grids)
        seq = assemble(images, make_sep(width=2), ICFG6)
        assert seq.length == 4 + 3 + 3 + 6 == 16
        # oracle: walk the pattern img,sep,img,sep,img,sep with explicit sizes
        expected = []
        cursor = 0
        for j, size in ((1, 4), (2, 3), (3, 1 * 3 * 1)):
            expected.append(("image", j, cursor, size))
            cursor += size
            expected.append(("separator", j, cursor, 2))
            cursor += 2
        got = [(s.kind, s.image_index, s.start, s.length) for s in seq.layout]
        assert got == expected
        assert validate_sequence(seq) is None

    def test_text_appended_last(self):
        images = make_images([GridShape(1, 2, 2)])
        text = Rng(40).normal_matrix((3, 6))
        seq = assemble(images, make_sep(), ICFG6, text)
        assert seq.length == 4 + 1 + 3
        assert seq.layout[-1].kind == "text"
        assert seq.layout[-1].start == 5
        assert [m.position for m in seq.metas[5:]] == [0, 1, 2]
        assert validate_sequence(seq) is None

    def test_no_trailing_separator(self):
        images = make_images([GridShape(1, 2, 2)] * 3)
        seq = assemble(images, make_sep(), ICFG6, trailing_separator=False)
        assert seq.length == 12 + 2
        assert sum(1 for s in seq.layout if s.kind == "separator") == 2
        assert validate_sequence(seq) is None

    def test_separator_disabled(self):
        images = make_images([GridShape(1, 2, 2)] * 2)
        seq = assemble(images, None, ICFG6, use_separator=False)
        assert seq.length == 8
        assert all(s.kind == "image" for s in seq.layout)
        assert validate_sequence(seq) is None

    def test_length_law_random_specs(self):
        rng = Rng(77)
        for _ in range(60):
            n = 1 + rng.randint(5)
            grids = [
                GridShape(1 + rng.randint(2), 1 + rng.randint(3), 1 + rng.randint(3))
                for _ in range(n)
            ]
            width = 1 + rng.randint(2)
            trailing = rng.randint(2) == 1
            use_sep = rng.randint(2) == 1
            text_len = rng.randint(4)
            images = make_images(grids, seed=rng.randint(10**6))
            text = None if text_len == 0 else Rng(5).normal_matrix((text_len, 6))
            seq = assemble(
                images,
                make_sep(width=width) if use_sep else None,
                ICFG6,
                text,
                use_separator=use_sep,
                trailing_separator=trailing,
            )
            want = expected_length(
                [g.token_count for g in grids], width if use_sep else 0, use_sep, trailing, text_len
            )
            assert seq.length == want
            assert validate_sequence(seq) is None


class TestAssembleValues:
    def test_separator_spans_share_values(self):
        sep = make_sep()
        images = make_images([GridShape(1, 2, 2)] * 3)
        seq = assemble(images, sep, ICFG6)
        for s in seq.layout:
            if s.kind == "separator":
                np.testing.assert_array_equal(seq.tokens[s.start : s.start + s.length], sep.values)

    def test_mutating_separator_changes_every_span_on_reassembly(self):
        sep = make_sep()
        images = make_images([GridShape(1, 2, 2)] * 3)
        sep.values[0, 0] = 123.0
        seq = assemble(images, sep, ICFG6)
        sep_rows = [seq.tokens[s.start] for s in seq.layout if s.kind == "separator"]
        assert len(sep_rows) == 3
        for row in sep_rows:
            assert row[0] == 123.0

    def test_text_bitwise_untouched(self):
        images = make_images([GridShape(1, 2, 2)] * 2)
        text = Rng(41).normal_matrix((4, 6))
        seq = assemble(images, make_sep(), ICFG6, text)
        span = seq.layout[-1]
        np.testing.assert_array_equal(seq.tokens[span.start : span.start + span.length], text)

    def test_image_tokens_shifted_by_index_embedding(self):
        from imgseq.index_embed import index_embedding

        images = make_images([GridShape(1, 2, 2)] * 2)
        seq = assemble(images, make_sep(), ICFG6)
        e1 = index_embedding(1, 2, ICFG6).values
        np.testing.assert_array_equal(seq.tokens[0], images[0].data[0] + e1)

    def test_index_embed_disabled_keeps_tokens(self):
        images = make_images([GridShape(1, 2, 2)] * 2)
        seq = assemble(images, make_sep(), ICFG6, use_index_embed=False)
        np.testing.assert_array_equal(seq.tokens[0:4], images[0].data)
        assert not np.any(seq.embed_residue)

    def test_round_trip_exact(self):
        rng = Rng(88)
        for _ in range(60):
            n = 1 + rng.randint(4)
            grids = [GridShape(1, 1 + rng.randint(3), 1 + rng.randint(3)) for _ in range(n)]
            images = make_images(grids, seed=rng.randint(10**6))
            seq = assemble(images, make_sep(width=1 + rng.randint(2)), ICFG6)
            back = recover_images(seq)
            assert set(back) == set(range(1, n + 1))
            for img in images:
                np.testing.assert_array_equal(back[img.image_index], img.data)

    def test_tokens_frozen(self):
        seq = assemble(make_images([GridShape(1, 1, 2)]), make_sep(), ICFG6)
        with pytest.raises(ValueError):
            seq.tokens[0, 0] = 1.0


class TestAssembleErrors:
    def test_empty_image_list(self):
        with pytest.raises(ValidationError):
            assemble([], make_sep(), ICFG6)

    def test_non_contiguous_indices(self):
        g = GridShape(1, 1, 2)
        rng = Rng(1)
        imgs = [
            LatentImage(1, g, 6, rng.normal_matrix((2, 6))),
            LatentImage(3, g, 6, rng.normal_matrix((2, 6))),
        ]
        with pytest.raises(ValidationError):
            assemble(imgs, make_sep(), ICFG6)

    def test_out_of_order_indices(self):
        g = GridShape(1, 1, 2)
        rng = Rng(1)
        imgs = [
            LatentImage(2, g, 6, rng.normal_matrix((2, 6))),
            LatentImage(1, g, 6, rng.normal_matrix((2, 6))),
        ]
        with pytest.raises(ValidationError):
            assemble(imgs, make_sep(), ICFG6)

    def test_channel_mismatch(self):
        g = GridShape(1, 1, 2)
        rng = Rng(1)
        imgs = [
            LatentImage(1, g, 6, rng.normal_matrix((2, 6))),
            LatentImage(2, g, 4, rng.normal_matrix((2, 4))),
        ]
        with pytest.raises(ValidationError):
            assemble(imgs, make_sep(), ICFG6)

    def test_separator_channel_mismatch(self):
        with pytest.raises(ValidationError):
            assemble(make_images([GridShape(1, 1, 2)]), make_sep(channels=4), ICFG6)

    def test_missing_separator(self):
        with pytest.raises(ValidationError):
            assemble(make_images([GridShape(1, 1, 2)]), None, ICFG6)

    def test_text_channel_mismatch(self):
        with pytest.raises(ValidationError):
            assemble(make_images([GridShape(1, 1, 2)]), make_sep(), ICFG6, np.zeros((2, 5)))

    def test_index_config_mismatch(self):
        with pytest.raises(ValidationError):
            assemble(make_images([GridShape(1, 1, 2)]), make_sep(), IndexEmbedConfig(channels=8))

    def test_bad_policy(self):
        with pytest.raises(ValidationError):
            assemble(make_images([GridShape(1, 1, 2)]), make_sep(), ICFG6, sep_position_policy="left")

    def test_separator_shape_checked(self):
        with pytest.raises(ValidationError):
            SeparatorToken(width=2, channels=6, values=np.zeros((1, 6)))
        with pytest.raises(ValidationError):
            SeparatorToken(width=1, channels=6, values=np.full((1, 6), np.nan))


class TestPositions:
    def test_image_positions(self):
        images = make_images([GridShape(1, 2, 2)] * 3)
        seq = assemble(images, make_sep(), ICFG6)
        pos = assign_positions(seq)
        # image 1 cell (0,1,1) is sequence row 3
        np.testing.assert_array_equal(pos.coords[3], (0, 1, 1))
        # image 3 starts at row 10 (4+1+4+1); its cell (0,0,0) sits at frame 2
        np.testing.assert_array_equal(pos.coords[10], (2, 0, 0))
        assert bool(pos.rotate[3]) and bool(pos.rotate[10])

    def test_multi_frame_image_offsets(self):
        images = make_images([GridShape(2, 1, 2)])
        seq = assemble(images, make_sep(), ICFG6)
        pos = assign_positions(seq)
        np.testing.assert_array_equal(pos.coords[:4], [(0, 0, 0), (0, 0, 1), (1, 0, 0), (1, 0, 1)])

    def test_separator_neutral_policy(self):
        images = make_images([GridShape(1, 2, 2)] * 2)
        seq = assemble(images, make_sep(), ICFG6)
        pos = assign_positions(seq)
        # separator after image 2 is row 9, carries (1,0,0), rotation suppressed
        np.testing.assert_array_equal(pos.coords[9], (1, 0, 0))
        assert not pos.rotate[9]
        assert not pos.rotate[4]

    def test_separator_inherit_policy(self):
        images = make_images([GridShape(1, 2, 2)] * 2)
        seq = assemble(images, make_sep(), ICFG6, sep_position_policy="inherit")
        pos = assign_positions(seq)
        np.testing.assert_array_equal(pos.coords[9], (1, 0, 0))
        assert bool(pos.rotate[9])

    def test_text_positions_past_all_frames(self):
        images = make_images([GridShape(1, 2, 2)] * 2)
        text = Rng(42).normal_matrix((3, 6))
        seq = assemble(images, make_sep(), ICFG6, text)
        pos = assign_positions(seq)
        np.testing.assert_array_equal(pos.coords[10:], [(3, 0, 0), (3, 0, 1), (3, 0, 2)])
        assert pos.rotate[10:].all()


class TestTokenIds:
    def test_ids_recorded_in_metas(self):
        images = make_images([GridShape(1, 1, 2)] * 2)
        seq = assemble(
            images,
            make_sep(),
            ICFG6,
            Rng(2).normal_matrix((2, 6)),
            image_token_ids=[[10, 11], [12, 13]],
            text_token_ids=[3, 4],
        )
        ids = [m.token_id for m in seq.metas]
        assert ids == [10, 11, None, 12, 13, None, 3, 4]

    def test_id_length_checked(self):
        images = make_images([GridShape(1, 1, 2)] * 2)
        with pytest.raises(ValidationError):
            assemble(images, make_sep(), ICFG6, image_token_ids=[[1, 2]])
        with pytest.raises(ValidationError):
            assemble(images, make_sep(), ICFG6, Rng(2).normal_matrix((2, 6)), text_token_ids=[1])


class TestReport:
    def test_report_contents(self):
        images = make_images([GridShape(1, 2, 2)] * 2)
        seq = assemble(images, make_sep(), ICFG6)
        rep = sequence_report(seq)
        assert rep["image_count"] == 2
        assert rep["length"] == 10
        assert sum(1 for s in rep["spans"] if s["kind"] == "separator") == 2
        assert rep["use_index_embed"] is True
        assert len(rep["positions"]) == 10
        assert len(rep["rotated"]) == 10

    def test_report_flags_off(self):
        images = make_images([GridShape(1, 2, 2)] * 2)
        seq = assemble(images, make_sep(), ICFG6, use_index_embed=False)
        rep = sequence_report(seq)
        assert rep["use_index_embed"] is False
        assert "index_embed: off" in render_report(rep)

    def test_five_images_five_separators(self):
        images = make_images([GridShape(1, 1, 2)] * 5)
        seq = assemble(images, make_sep(), ICFG6)
        rep = sequence_report(seq)
        assert rep["image_count"] == 5
        assert sum(1 for s in rep["spans"] if s["kind"] == "separator") == 5

    def test_render_lists_spans(self):
        images = make_images([GridShape(1, 2, 2)])
        txt = render_report(sequence_report(assemble(images, make_sep(), ICFG6)))
        assert "image 1" in txt
        assert "sep after image 1" in txt


class TestValidateSequenceRejects:
    def test_detects_span_gap(self):
        seq = assemble(make_images([GridShape(1, 2, 2)] * 2), make_sep(), ICFG6)
        broken = list(seq.layout)
        broken[1] = Span("separator", 1, 5, 1)
        seq2 = AssembledSequence(**{**seq.__dict__, "layout": broken})
        assert validate_sequence(seq2) is not None

    def test_detects_kind_mismatch(self):
        seq = assemble(make_images([GridShape(1, 2, 2)] * 2), make_sep(), ICFG6)
        broken = list(seq.layout)
        broken[1] = Span("image", 1, 4, 1)
        seq2 = AssembledSequence(**{**seq.__dict__, "layout": broken})
        assert validate_sequence(seq2) is not None

    def test_detects_missing_separator_span(self):
        seq = assemble(make_images([GridShape(1, 2, 2)]), make_sep(), ICFG6)
        seq2 = AssembledSequence(**{**seq.__dict__, "trailing_separator": False})
        assert validate_sequence(seq2) is not None


class TestAssemblySpec:
    def test_parse_round_trip(self):
        spec = parse_assembly_spec(
            {"grids": [[1, 2, 2], [1, 1, 3]], "channels": 6, "sep_width": 2, "text_len": 3}
        )
        assert spec.grids == (GridShape(1, 2, 2), GridShape(1, 1, 3))
        assert spec.sep_width == 2
        seq = realize_assembly(spec)
        assert seq.length == 4 + 2 + 3 + 2 + 3
        assert validate_sequence(seq) is None

    def test_parse_rejects_unknown_keys(self):
        with pytest.raises(ValidationError):
            parse_assembly_spec({"grids": [[1, 1, 1]], "channels": 4, "bogus": 1})

    def test_parse_rejects_bad_grid(self):
        with pytest.raises(ValidationError):
            parse_assembly_spec({"grids": [[1, 1]], "channels": 4})
        with pytest.raises(ValidationError):
            parse_assembly_spec({"grids": [[0, 1, 1]], "channels": 4})

    def test_parse_requires_object(self):
        with pytest.raises(ValidationError):
            parse_assembly_spec([1, 2])

    def test_realize_deterministic(self):
        spec = parse_assembly_spec({"grids": [[1, 2, 2], [1, 2, 2]], "channels": 6, "seed": 5})
        a = realize_assembly(spec)
        b = realize_assembly(spec)
        np.testing.assert_array_equal(a.tokens, b.tokens)

    def test_realize_without_separator(self):
        spec = parse_assembly_spec(
            {"grids": [[1, 2, 2]], "channels": 6, "use_separator": False}
        )
        seq = realize_assembly(spec)
        assert seq.length == 4
