import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pixeldefend.data import (
    LabeledDataset,
    clip_linf,
    denormalize,
    desk_corpus,
    generate_shapes,
    load_dataset,
    load_idx,
    normalize,
    save_dataset,
    write_idx,
)
from pixeldefend.errors import ConfigurationError, ConsistencyError, DimensionError, FormatError


def test_generate_is_deterministic():
    a = generate_shapes(7, 3, 16, 4)
    b = generate_shapes(7, 3, 16, 4)
    assert np.array_equal(a.images, b.images)
    assert np.array_equal(a.labels, b.labels)
    assert a.images.tobytes() == b.images.tobytes()


def test_generate_range_and_shape():
    d = generate_shapes(1, 200, 16, 8)
    assert d.images.shape == (200, 16, 16, 1)
    assert d.images.min() >= 0 and d.images.max() <= 255
    assert d.levels == 256


def test_class_histogram_uniform():
    d = generate_shapes(3, 4000, 16, 4)
    counts = np.bincount(d.labels, minlength=4)
    assert np.all(np.abs(counts / 4000 - 0.25) <= 0.03)


def test_seeds_differ():
    assert not np.array_equal(generate_shapes(1, 5).images, generate_shapes(2, 5).images)


def test_small_side_rejected():
    with pytest.raises(ConfigurationError):
        generate_shapes(0, 3, side=7)
    with pytest.raises(ConfigurationError):
        generate_shapes(0, 3, n_classes=9)


def test_desk_corpus_splits():
    c = desk_corpus(0, train=40, validation=10, test=20)
    assert [len(c[s]) for s in ("train", "validation", "test")] == [40, 10, 20]
    assert c["validation"].split == "validation"
    assert not np.array_equal(c["train"].images[:10], c["test"].images[:10])


def _write_idx_bytes(path, magic, dims, payload):
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{len(dims)}I", *dims))
        fh.write(bytes(payload))


class TestIdx:
    def test_hand_crafted_fixture(self, tmp_path):
        img, lab = tmp_path / "img", tmp_path / "lab"
        _write_idx_bytes(img, 0x00000803, (2, 2, 2), [0, 1, 254, 255, 10, 20, 30, 40])
        _write_idx_bytes(lab, 0x00000801, (2,), [3, 7])
        d = load_idx(img, lab)
        assert d.images.shape == (2, 2, 2, 1)
        assert d.images[0, :, :, 0].tolist() == [[0, 1], [254, 255]]
        assert d.images[1, :, :, 0].tolist() == [[10, 20], [30, 40]]
        assert d.labels.tolist() == [3, 7]

    def test_wrong_label_magic(self, tmp_path):
        img, lab = tmp_path / "img", tmp_path / "lab"
        _write_idx_bytes(img, 0x00000803, (1, 2, 2), [0, 0, 0, 0])
        _write_idx_bytes(lab, 0x00000803, (1, 1, 1), [0])
        with pytest.raises(FormatError):
            load_idx(img, lab)

    def test_empty_file(self, tmp_path):
        img, lab = tmp_path / "img", tmp_path / "lab"
        img.write_bytes(b"")
        _write_idx_bytes(lab, 0x00000801, (0,), [])
        with pytest.raises(FormatError):
            load_idx(img, lab)

    def test_truncated(self, tmp_path):
        img, lab = tmp_path / "img", tmp_path / "lab"
        _write_idx_bytes(img, 0x00000803, (2, 2, 2), [1, 2, 3])
        _write_idx_bytes(lab, 0x00000801, (2,), [0, 1])
        with pytest.raises(FormatError):
            load_idx(img, lab)

    def test_count_mismatch(self, tmp_path):
        img, lab = tmp_path / "img", tmp_path / "lab"
        _write_idx_bytes(img, 0x00000803, (2, 1, 1), [1, 2])
        _write_idx_bytes(lab, 0x00000801, (3,), [0, 1, 2])
        with pytest.raises(ConsistencyError):
            load_idx(img, lab)

    def test_write_read_round_trip(self, tmp_path):
        d = generate_shapes(5, 6, 8, 3)
        write_idx(tmp_path / "i", tmp_path / "l", d)
        back = load_idx(tmp_path / "i", tmp_path / "l")
        assert np.array_equal(back.images, d.images)
        assert np.array_equal(back.labels, d.labels)


def test_dataset_cache_round_trip(tmp_path):
    d = generate_shapes(9, 10, 8, 2, split="test")
    save_dataset(tmp_path / "d.ptk", d)
    back = load_dataset(tmp_path / "d.ptk")
    assert np.array_equal(back.images, d.images)
    assert back.split == "test" and back.seed == 9 and back.levels == 256 and back.n_classes == 2


def test_dataset_length_mismatch():
    with pytest.raises(ConsistencyError):
        LabeledDataset(np.zeros((2, 4, 4, 1), dtype=np.int64), np.zeros(3, dtype=np.int64))


class TestClip:
    def test_upper_clamp(self):
        assert clip_linf(np.array([30]), np.array([3]), 8) == 11

    def test_domain_floor(self):
        assert clip_linf(np.array([0]), np.array([3]), 8) == 0

    def test_eps_zero_is_anchor(self):
        rng = np.random.default_rng(0)
        a, c = rng.integers(0, 256, 50), rng.integers(0, 256, 50)
        assert np.array_equal(clip_linf(c, a, 0), a)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            clip_linf(np.zeros(3), np.zeros(4), 1)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.tuples(st.integers(-300, 600), st.integers(0, 255)), min_size=1, max_size=30),
           st.integers(0, 300))
    def test_idempotent_and_bounded(self, pairs, eps):
        c = np.array([p[0] for p in pairs])
        a = np.array([p[1] for p in pairs])
        once = clip_linf(c, a, eps)
        assert np.array_equal(clip_linf(once, a, eps), once)
        assert np.abs(once - a).max() <= eps
        assert once.min() >= 0 and once.max() <= 255


def test_normalize_values():
    assert normalize(0) == 0.0
    assert normalize(255) == 1.0
    assert normalize(51) == pytest.approx(0.2, abs=1e-15)


def test_normalize_round_trip_exhaustive():
    levels = np.arange(256)
    assert np.array_equal(denormalize(normalize(levels)), levels)
