import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tinytrack.dataset import (ATTRIBUTE_NAMES, AttributeVector, BoundingBox, DatasetManifest, SequenceLoadError,
                               SequenceRecord, ValidationError, average_absolute_size, average_relative_size,
                               dataset_stats, format_groundtruth, is_tiny, load_manifest, load_sequence,
                               parse_groundtruth, split_manifest, write_sequence)


def constant_seq(w, h, image=(640, 480), n=5, name="s"):
    return SequenceRecord.from_boxes(name, [(1, 1, w, h)] * n, image)


def frames_seq(n, name):
    return SequenceRecord.from_boxes(name, [(0, 0, 4, 4)] * n, (32, 32))


# -- boxes and files ---------------------------------------------------------------


def test_groundtruth_line_round_trip():
    line = "12.34,5.60,7.00,8.00"
    box = BoundingBox.parse(line)
    assert (box.x, box.y, box.w, box.h) == (12.34, 5.60, 7.00, 8.00)
    assert box.format() == line


@given(st.lists(st.tuples(st.integers(0, 99999), st.integers(0, 99999), st.integers(1, 99999),
                          st.integers(1, 99999)), min_size=1, max_size=20))
def test_groundtruth_file_round_trip_is_byte_identical(cents):
    text = "".join(",".join(f"{v / 100:.2f}" for v in row) + "\n" for row in cents)
    assert format_groundtruth(parse_groundtruth(text)) == text


def test_format_keeps_extra_precision():
    assert BoundingBox.parse(BoundingBox(1.125, 2, 3, 4).format()) == BoundingBox(1.125, 2, 3, 4)


@pytest.mark.parametrize("vals", [(0, 0, 0, 1), (0, 0, 1, -1), (float("nan"), 0, 1, 1), (0, float("inf"), 1, 1)])
def test_bad_boxes_rejected(vals):
    with pytest.raises(ValueError):
        BoundingBox(*vals)


def test_attribute_vector_order_and_arity():
    v = AttributeVector.parse("1,0,0,0,0,0,0,0,0,0,0,1")
    assert v.active() == ["SV", "LI"]
    assert v.format() == "1,0,0,0,0,0,0,0,0,0,0,1"
    assert len(ATTRIBUTE_NAMES) == 12
    with pytest.raises(ValueError, match="expected 12"):
        AttributeVector.parse(",".join(["0"] * 11))


def write_good(root, name, n=3):
    rec = SequenceRecord.from_boxes(name, [(1.5, 2.25, 5, 6)] * n, (40, 30), "bird",
                                    AttributeVector.from_flags([1] + [0] * 11))
    frames = np.zeros((n, 30, 40, 3), dtype=np.uint8)
    return write_sequence(root, rec, frames)


def test_load_manifest_two_good_sequences(tmp_path):
    write_good(tmp_path, "a")
    write_good(tmp_path, "b", n=4)
    m = load_manifest(tmp_path)
    assert m.names() == ["a", "b"]
    assert m.errors == []
    assert len(m["b"]) == 4
    assert m["a"].class_label == "bird"
    assert m["a"].attributes.SV
    assert m["a"].load_frame(0).shape == (30, 40, 3)


def test_load_manifest_reports_bad_sequences(tmp_path):
    write_good(tmp_path, "good")
    bad = write_good(tmp_path, "bad_attrs")
    (bad / "attributes.txt").write_text(",".join(["0"] * 11) + "\n")
    missing = write_good(tmp_path, "missing")
    (missing / "meta.txt").unlink()
    short = write_good(tmp_path, "short")
    (short / "groundtruth.txt").write_text("1.00,1.00,2.00,2.00\n")
    m = load_manifest(tmp_path)
    assert m.names() == ["good"]
    errs = {e.sequence: e for e in m.errors}
    assert set(errs) == {"bad_attrs", "missing", "short"}
    assert "12" in str(errs["bad_attrs"]) and "bad_attrs" in str(errs["bad_attrs"])
    assert isinstance(errs["short"], ValidationError)
    assert not isinstance(errs["missing"], ValidationError)


def test_box_outside_image_is_validation_error(tmp_path):
    d = write_good(tmp_path, "oob")
    (d / "groundtruth.txt").write_text("38.00,1.00,5.00,5.00\n" * 3)
    with pytest.raises(ValidationError):
        load_sequence(d)


def test_missing_file_is_load_error(tmp_path):
    d = write_good(tmp_path, "x")
    (d / "groundtruth.txt").unlink()
    with pytest.raises(SequenceLoadError, match="groundtruth"):
        load_sequence(d)


def test_duplicate_names_rejected():
    with pytest.raises(ValueError):
        DatasetManifest([frames_seq(2, "a"), frames_seq(3, "a")])


# -- tiny-object test ------------------------------------------------------------------


def test_average_absolute_size():
    assert average_absolute_size(constant_seq(16, 16)) == 256.0
    two = SequenceRecord.from_boxes("t", [(0, 0, 10, 10), (0, 0, 30, 30)], (640, 480))
    assert average_absolute_size(two) == 500.0
    assert average_absolute_size(constant_seq(22, 22, n=1)) == 484.0


def test_average_relative_size():
    assert average_relative_size(constant_seq(16, 16)) == pytest.approx(256 / 307200, rel=1e-15)
    assert average_relative_size(SequenceRecord.from_boxes("f", [(0, 0, 100, 50)], (100, 50))) == 1.0
    assert average_relative_size(constant_seq(10, 10, image=(100, 100))) == 0.01


def test_is_tiny_examples():
    assert is_tiny(constant_seq(16, 16))
    assert not is_tiny(constant_seq(22, 22, image=(4000, 4000)))
    assert not is_tiny(constant_seq(5, 5, image=(40, 40)))
    assert not is_tiny(constant_seq(10, 10, image=(100, 100)))


@settings(max_examples=60)
@given(st.lists(st.tuples(st.floats(1, 60), st.floats(1, 60)), min_size=1, max_size=8), st.floats(0.05, 1.0))
def test_is_tiny_monotone_under_shrinking(sizes, factor):
    big = SequenceRecord.from_boxes("b", [(0, 0, w, h) for w, h in sizes], (200, 150))
    small = SequenceRecord.from_boxes("s", [(0, 0, w * factor, h * factor) for w, h in sizes], (200, 150))
    assert not (is_tiny(big) and not is_tiny(small))


# -- statistics ---------------------------------------------------------------------------


def test_stats_single_and_pair():
    s = dataset_stats([frames_seq(100, "a")])
    assert (s.min_frames, s.max_frames, s.avg_frames_display, s.total_frames) == (100, 100, 100, 100)
    s = dataset_stats([frames_seq(10, "a"), frames_seq(20, "b")])
    assert s.avg_frames == 15 and s.total_frames == 30


def test_stats_summary_for_434_videos():
    # 434 videos, shortest 21, longest 4632, 217,650 frames -> avg 501.498
    counts = [21, 4632] + [493] * 432
    counts[2] += 217650 - sum(counts)
    seqs = [frames_seq(n, f"v{i:03d}") for i, n in enumerate(counts)]
    s = dataset_stats(seqs)
    assert s.num_sequences == 434
    assert (s.min_frames, s.max_frames) == (21, 4632)
    assert s.avg_frames_display == 501
    assert s.total_frames_display == "217.7K"


@settings(max_examples=30)
@given(st.lists(st.integers(1, 40), min_size=1, max_size=12))
def test_stats_total_equals_recount(counts):
    seqs = [frames_seq(n, f"v{i}") for i, n in enumerate(counts)]
    s = dataset_stats(seqs)
    recount = 0
    for seq in seqs:
        for _ in seq.annotations:
            recount += 1
    assert s.total_frames == recount
    assert s.min_frames == min(counts) and s.max_frames == max(counts)


def test_stats_counts_attributes_and_classes():
    a = SequenceRecord.from_boxes("a", [(0, 0, 4, 4)], (32, 32), "car", AttributeVector(SV=True, LI=True))
    b = SequenceRecord.from_boxes("b", [(0, 0, 4, 4)], (32, 32), "car", AttributeVector(SV=True))
    s = dataset_stats([a, b])
    assert s.attribute_counts["SV"] == 2 and s.attribute_counts["LI"] == 1 and s.attribute_counts["FM"] == 0
    assert s.class_histogram == {"car": 2}


# -- splits ----------------------------------------------------------------------------------


def manifest_of(n):
    return DatasetManifest([frames_seq(1, f"v{i:03d}") for i in range(n)])


def test_split_165_of_434():
    m = manifest_of(434)
    split = split_manifest(m, m.names()[:260], 165, seed=3)
    tags = list(split.split_tags.values())
    assert tags.count("test") == 165 and tags.count("train") == 269
    assert all(split.split_tags[n] == "train" for n in m.names()[260:])


def test_split_zero_and_determinism():
    m = manifest_of(20)
    assert set(split_manifest(m, m.names(), 0, 1).split_tags.values()) == {"train"}
    assert split_manifest(m, m.names(), 7, 5).split_tags == split_manifest(m, m.names(), 7, 5).split_tags


def test_split_errors():
    m = manifest_of(5)
    with pytest.raises(ValueError):
        split_manifest(m, m.names()[:2], 3, 0)
    with pytest.raises(ValueError):
        split_manifest(m, ["nope"], 1, 0)


@settings(max_examples=30)
@given(st.integers(1, 30), st.data())
def test_split_partitions(n, data):
    m = manifest_of(n)
    pool = data.draw(st.lists(st.sampled_from(m.names()), unique=True))
    k = data.draw(st.integers(0, len(pool)))
    split = split_manifest(m, pool, k, data.draw(st.integers(0, 1000)))
    test = {s.name for s in split.subset("test")}
    train = {s.name for s in split.subset("train")}
    assert test | train == set(m.names()) and not test & train
    assert len(test) == k and test <= set(pool)
