import logging
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gaitgci.cil import AttentionMaps
from gaitgci.data_synth import (
    DatasetSpec,
    confounder_overlap,
    gallery_probe,
    generate,
    layout,
    load_silhouette_dir,
    marker_rule_accuracy,
    read_pgm,
    split,
    write_dataset,
    write_pgm,
)
from gaitgci.errors import DatasetError, RegionOverlapError, ShapeError
from gaitgci.tensor_core import make_rng

from oracles import overlap_loops

SMALL = DatasetSpec(train_per_class=4, test_per_class=3, frames=3)


def test_generate_is_reproducible():
    a, b = generate(SMALL), generate(SMALL)
    assert all(np.array_equal(x.sequence, y.sequence) and x.label == y.label for x, y in zip(a, b))
    c = generate(replace(SMALL, seed=1))
    assert any(not np.array_equal(x.sequence, y.sequence) for x, y in zip(a, c))


def test_record_contents():
    recs = generate(SMALL)
    assert len(recs) == SMALL.num_classes * (SMALL.train_per_class + SMALL.test_per_class)
    for r in recs:
        assert r.sequence.shape == (3, 1, 32, 24)
        assert r.sequence.min() >= 0 and r.sequence.max() <= 1
        assert set(np.unique(r.confounder_mask)) <= {0.0, 1.0}


def test_mask_marks_exactly_the_marker_pixels():
    spec = SMALL
    lay = layout(spec)
    for r in generate(spec):
        np.testing.assert_array_equal(r.confounder_mask, lay.slot_mask(r.marker))
        # marker pixels are lit in every frame and nothing else lies outside the signal box
        outside = 1 - lay.signal_mask()
        for frame in r.sequence[:, 0]:
            np.testing.assert_array_equal(frame * outside, r.confounder_mask)


def test_regions_are_disjoint():
    lay = layout(DatasetSpec())
    assert np.sum(lay.signal_mask() * lay.marker_region()) == 0


def test_overlapping_signal_box_is_rejected():
    with pytest.raises(RegionOverlapError, match="signal.*marker"):
        layout(replace(SMALL, signal_box=(1, 1, 20, 20)))
    with pytest.raises(RegionOverlapError, match="marker"):
        layout(replace(SMALL, width=6, marker_size=3))


def test_spec_preconditions():
    for bad in (dict(num_classes=1), dict(frames=1), dict(train_corr=1.5)):
        with pytest.raises(DatasetError):
            generate(replace(SMALL, **bad))


def test_perfect_correlation_marker_rule_is_exact():
    spec = replace(SMALL, train_corr=1.0, test_corr=1.0)
    recs = generate(spec)
    assert marker_rule_accuracy(recs, spec) == 1.0


def test_decorrelated_marker_rule_is_at_chance():
    spec = DatasetSpec(num_classes=4, train_per_class=1, test_per_class=200, frames=2)
    test = split(generate(spec), "test")
    acc = marker_rule_accuracy(test, spec)
    n, p = len(test), 1 / 4
    assert abs(acc - p) <= 3 * math.sqrt(p * (1 - p) / n)


def test_split_hygiene_and_balance():
    recs = generate(SMALL)
    hashes = {s: {r.content_hash() for r in split(recs, s)} for s in ("train", "test")}
    assert not hashes["train"] & hashes["test"]
    for s, per in (("train", 4), ("test", 3)):
        labs = [r.label for r in split(recs, s)]
        assert all(labs.count(c) == per for c in range(SMALL.num_classes))


def test_gallery_is_first_sequence_per_identity():
    g, p = gallery_probe(split(generate(SMALL), "test"))
    assert [r.label for r in g] == [0, 1, 2, 3] and len(p) == 8
    assert all(r.name.endswith("-00") for r in g)


# ---------------------------------------------------------------- overlap


def test_overlap_uniform_attention_is_area_ratio():
    mask = np.zeros((10, 10))
    mask[:1] = 1
    assert confounder_overlap(np.full((2, 5, 5), 0.3), mask) == pytest.approx(0.10, abs=1e-15)


def test_overlap_inside_mask_is_one():
    mask = np.zeros((8, 8))
    mask[:4, :4] = 1
    maps = np.zeros((1, 2, 2))
    maps[0, 0, 0] = 0.9
    assert confounder_overlap(maps, mask) == 1.0


def test_overlap_matches_loop_oracle():
    rng = make_rng(3)
    maps = rng.random((3, 4, 3))
    mask = (rng.random((32, 24)) < 0.2).astype(float)
    assert abs(confounder_overlap(AttentionMaps("factual", maps), mask) - overlap_loops(maps, mask)) <= 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3))
def test_overlap_scale_invariant(seed, c):
    rng = make_rng(seed)
    maps = rng.random((2, 4, 3)) + 1e-3
    mask = (rng.random((16, 12)) < 0.3).astype(float)
    a, b = confounder_overlap(maps, mask), confounder_overlap(c * maps, mask)
    assert abs(a - b) <= 1e-12 and 0 <= a <= 1


def test_overlap_errors():
    with pytest.raises(ValueError):
        confounder_overlap(np.zeros((1, 2, 2)), np.ones((4, 4)))
    with pytest.raises(ShapeError):
        confounder_overlap(np.ones((1, 8, 8)), np.ones((4, 4)))


# ---------------------------------------------------------------- files


def _write_seq(root, ident, cond, view, frames):
    d = root / ident / cond / view
    d.mkdir(parents=True)
    for i, f in enumerate(frames):
        write_pgm(d / f"{i:03d}.pgm", f)
    return d


def test_pgm_roundtrip(tmp_path):
    img = make_rng(4).integers(0, 256, (5, 7)).astype(np.uint8)
    write_pgm(tmp_path / "a.pgm", img)
    np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), img)
    (tmp_path / "c.pgm").write_bytes(b"P5\n# comment\n2 1\n255\n\x00\xff")
    np.testing.assert_array_equal(read_pgm(tmp_path / "c.pgm"), [[0, 255]])


def test_loader_single_sequence(tmp_path):
    _write_seq(tmp_path, "001", "nm-01", "090", [np.full((8, 6), 255, np.uint8)] * 30)
    recs = load_silhouette_dir(tmp_path)
    assert len(recs) == 1 and recs[0].sequence.shape == (30, 1, 8, 6)
    assert np.all(recs[0].sequence == 1.0) and recs[0].label == 1
    assert np.all(recs[0].confounder_mask == 0)


def test_loader_thresholds_at_128(tmp_path):
    _write_seq(tmp_path, "a", "c", "v", [np.array([[127, 128]], np.uint8)])
    np.testing.assert_array_equal(load_silhouette_dir(tmp_path)[0].sequence[0, 0], [[0.0, 1.0]])


def test_loader_sorts_frames_lexicographically(tmp_path):
    d = tmp_path / "x" / "c" / "v"
    d.mkdir(parents=True)
    write_pgm(d / "b.pgm", np.full((2, 2), 255, np.uint8))
    write_pgm(d / "a.pgm", np.zeros((2, 2), np.uint8))
    seq = load_silhouette_dir(tmp_path)[0].sequence
    assert seq[0].max() == 0 and seq[1].min() == 1


def test_loader_rejects_mixed_sizes(tmp_path):
    _write_seq(tmp_path, "1", "c", "v", [np.zeros((64, 64), np.uint8), np.zeros((64, 44), np.uint8)])
    with pytest.raises(DatasetError, match="64x44"):
        load_silhouette_dir(tmp_path)


def test_loader_skips_short_sequences(tmp_path, caplog):
    _write_seq(tmp_path, "1", "c", "short", [np.zeros((4, 4), np.uint8)] * 2)
    _write_seq(tmp_path, "1", "c", "long", [np.zeros((4, 4), np.uint8)] * 5)
    with caplog.at_level(logging.WARNING):
        recs = load_silhouette_dir(tmp_path, min_frames=3)
    assert len(recs) == 1 and "short" in caplog.text


def test_loader_errors(tmp_path):
    with pytest.raises(DatasetError):
        load_silhouette_dir(tmp_path)
    d = _write_seq(tmp_path, "1", "c", "v", [np.zeros((4, 4), np.uint8)])
    bad = d / "001.pgm"
    bad.write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(DatasetError, match="001.pgm"):
        load_silhouette_dir(tmp_path)


def test_written_dataset_reloads_with_masks(tmp_path):
    recs = generate(SMALL)
    rows = write_dataset(recs, tmp_path)
    assert len(rows) == len(recs)
    manifest = (tmp_path / "manifest.txt").read_text().splitlines()
    assert len(manifest) == len(recs) + 1 and manifest[1].split("\t")[2] == "train"
    train = load_silhouette_dir(tmp_path / "train", split="train")
    src = split(recs, "train")
    assert len(train) == len(src)
    for a, b in zip(train, src):
        assert a.label == b.label
        np.testing.assert_array_equal(a.sequence, b.sequence)
        np.testing.assert_array_equal(a.confounder_mask, b.confounder_mask)
