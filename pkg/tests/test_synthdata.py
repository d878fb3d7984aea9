import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from miaod.synthdata import (DatasetError, SceneObject, SceneSpec, decode_pgm, encode_pgm,
                             generate_dataset, load_dataset, persist_roundtrip, render_scene,
                             save_dataset)


def test_generation_is_deterministic():
    a = generate_dataset(SceneSpec(), 10, 7)
    b = generate_dataset(SceneSpec(), 10, 7)
    assert a == b
    assert all(x.pixels.tobytes() == y.pixels.tobytes() for x, y in zip(a, b))


def test_subset_regenerates_identically():
    full = generate_dataset(SceneSpec(), 12, 3)
    from miaod.synthdata import generate_sample
    assert generate_sample(SceneSpec(), 3, 9) == full[9]


def test_default_benchmark_class_balance():
    spec = SceneSpec()
    samples = generate_dataset(spec, 600, 1)
    assert len(samples) == 600
    per_class = np.sum([s.image_labels for s in samples], axis=0)
    # each class must appear in at least count / (2C) images
    assert np.all(per_class >= 600 / (2 * spec.num_classes)), per_class


def test_zero_count_rejected():
    with pytest.raises(ValueError):
        generate_dataset(SceneSpec(), 0, 1)


def test_unsatisfiable_placement_names_sample():
    spec = SceneSpec(image_size=16, objects_per_image=(3, 3), object_size=(8, 8),
                     min_center_separation=20.0)
    with pytest.raises(DatasetError, match="sample 0"):
        generate_dataset(spec, 1, 0)


@pytest.mark.parametrize("bad", [dict(classes=()), dict(object_size=(0, 4)),
                                 dict(object_size=(8, 100)), dict(foreground_intensity=(0.5, 1.2))])
def test_spec_validation(bad):
    with pytest.raises(ValueError):
        SceneSpec(**bad)


class TestRender:
    def test_empty_scene_is_noise(self):
        img = render_scene([], SceneSpec(), np.random.default_rng(0))
        assert img.shape == (64, 64)
        assert img.min() >= 0 and img.max() <= 1
        assert img.std() > 0

    def test_square_pixel_count(self):
        spec = SceneSpec(noise_std=0.0)
        img = render_scene([SceneObject(0, 10, 20, 8, 0.8)], spec, np.random.default_rng(0))
        assert np.count_nonzero(img == 0.8) == 64
        assert np.all(img[20:28, 10:18] == 0.8)

    @pytest.mark.parametrize("size", [8, 10, 12, 14, 16])
    def test_disc_area(self, size):
        spec = SceneSpec(noise_std=0.0)
        img = render_scene([SceneObject(1, 5, 5, size, 0.9)], spec, np.random.default_rng(0))
        r = size / 2
        assert abs(np.count_nonzero(img == 0.9) - math.pi * r * r) <= 0.15 * math.pi * r * r

    def test_cross_bar_width(self):
        spec = SceneSpec(noise_std=0.0)
        img = render_scene([SceneObject(2, 0, 0, 16, 0.7)], spec, np.random.default_rng(0))
        fg = img == 0.7
        # two orthogonal bars of width 4 over a 16 px extent
        assert np.count_nonzero(fg) == 2 * 16 * 4 - 4 * 4
        assert fg[8, :16].all() and fg[:16, 8].all()

    def test_later_objects_overdraw(self):
        spec = SceneSpec(noise_std=0.0)
        img = render_scene([SceneObject(0, 0, 0, 10, 0.6), SceneObject(0, 4, 4, 10, 0.9)],
                           spec, np.random.default_rng(0))
        assert img[5, 5] == 0.9 and img[1, 1] == 0.6

    def test_out_of_bounds_object(self):
        with pytest.raises(ValueError):
            render_scene([SceneObject(0, 60, 0, 8, 0.7)], SceneSpec(), np.random.default_rng(0))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 500))
def test_sample_invariants(seed, index):
    from miaod.synthdata import generate_sample
    spec = SceneSpec()
    s = generate_sample(spec, seed, index)
    assert np.all((s.pixels >= 0) & (s.pixels <= 1)) and np.all(np.isfinite(s.pixels))
    b = s.gt_boxes
    assert np.all(b[:, 0] >= 0) and np.all(b[:, 1] >= 0)
    assert np.all(b[:, 2] <= 64) and np.all(b[:, 3] <= 64)
    assert np.all(b[:, 2] > b[:, 0]) and np.all(b[:, 3] > b[:, 1])
    expected = np.zeros(spec.num_classes)
    expected[s.gt_classes] = 1
    np.testing.assert_array_equal(s.image_labels, expected)
    centers = (b[:, :2] + b[:, 2:]) / 2
    for i in range(len(centers)):
        for j in range(i):
            assert np.hypot(*(centers[i] - centers[j])) >= spec.min_center_separation


class TestPersistence:
    def test_pgm_roundtrip(self):
        pixels = generate_dataset(SceneSpec(), 1, 0)[0].pixels
        assert np.array_equal(decode_pgm(encode_pgm(pixels)), pixels)

    def test_roundtrip_equality(self, tmp_path):
        samples = generate_dataset(SceneSpec(), 10, 5)
        assert persist_roundtrip(samples, tmp_path) == samples

    def test_missing_blob_names_id(self, tmp_path):
        samples = generate_dataset(SceneSpec(), 10, 5)
        save_dataset(samples, tmp_path, SceneSpec(), 5)
        (tmp_path / "img_train-00004.pgm").unlink()
        with pytest.raises(DatasetError, match="train-00004"):
            load_dataset(tmp_path)

    def test_edited_count(self, tmp_path):
        samples = generate_dataset(SceneSpec(), 10, 5)
        save_dataset(samples, tmp_path, SceneSpec(), 5)
        manifest = tmp_path / "manifest.txt"
        manifest.write_text(manifest.read_text().replace("count 10", "count 9"))
        with pytest.raises(DatasetError, match="count|checksum"):
            load_dataset(tmp_path)

    def test_tampered_pixels(self, tmp_path):
        samples = generate_dataset(SceneSpec(), 3, 5)
        save_dataset(samples, tmp_path, SceneSpec(), 5)
        path = tmp_path / "img_train-00001.pgm"
        blob = bytearray(path.read_bytes())
        blob[-1] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(DatasetError, match="train-00001"):
            load_dataset(tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetError, match="manifest"):
            load_dataset(tmp_path)

    def test_checksum_is_stable(self, tmp_path):
        samples = generate_dataset(SceneSpec(), 4, 2)
        a = save_dataset(samples, tmp_path / "a", SceneSpec(), 2)
        b = save_dataset(generate_dataset(SceneSpec(), 4, 2), tmp_path / "b", SceneSpec(), 2)
        assert a == b
        loaded = load_dataset(tmp_path / "a")
        assert loaded.spec == SceneSpec() and loaded.seed == 2 and loaded.checksum == a
