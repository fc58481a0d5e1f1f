"""Tests for IDX ingestion, contamination, splits, and synthetic data."""

import gzip
import struct

import numpy as np
import pytest

from itsr import data


def make_idx_pair(tmp_path, pixels, labels, rows, cols, gz=False, name="fix"):
    """Hand-assemble an IDX image/label pair byte by byte."""
    count = len(labels)
    img_bytes = struct.pack(">IIII", 0x00000803, count, rows, cols) + bytes(pixels)
    lbl_bytes = struct.pack(">II", 0x00000801, count) + bytes(labels)
    suffix = ".gz" if gz else ""
    img_path = tmp_path / f"{name}-images-idx3-ubyte{suffix}"
    lbl_path = tmp_path / f"{name}-labels-idx1-ubyte{suffix}"
    if gz:
        img_path.write_bytes(gzip.compress(img_bytes))
        lbl_path.write_bytes(gzip.compress(lbl_bytes))
    else:
        img_path.write_bytes(img_bytes)
        lbl_path.write_bytes(lbl_bytes)
    return img_path, lbl_path


class TestReadIdx:
    def test_two_image_fixture_exact_values(self, tmp_path):
        # 2 images of 2x2: known byte values, 255 must scale to exactly 1.0.
        pixels = [0, 128, 255, 64, 10, 20, 30, 40]
        img, lbl = make_idx_pair(tmp_path, pixels, [3, 7], 2, 2)
        ds = data.read_idx(img, lbl)
        assert ds.images.shape == (2, 4)
        np.testing.assert_allclose(ds.images[0], np.array([0, 128, 255, 64]) / 255.0)
        assert ds.images[0, 2] == 1.0
        np.testing.assert_array_equal(ds.labels, [3, 7])

    def test_header_layout_matches_hex_dump(self, tmp_path):
        # Independent check of the on-disk layout: magic, count, rows, cols
        # as consecutive big-endian u32 words.
        img, lbl = make_idx_pair(tmp_path, [255], [9], 1, 1)
        raw = img.read_bytes()
        assert raw[:4].hex() == "00000803"
        assert raw[4:8].hex() == "00000001"
        assert raw[8:12].hex() == "00000001"
        assert raw[12:16].hex() == "00000001"
        assert lbl.read_bytes()[:4].hex() == "00000801"

    def test_gzip_transparent(self, tmp_path):
        img, lbl = make_idx_pair(tmp_path, [0, 255, 128, 1], [1], 2, 2, gz=True)
        ds = data.read_idx(img, lbl)
        assert ds.images.shape == (1, 4)
        assert ds.images[0, 1] == 1.0

    def test_wrong_image_magic_rejected(self, tmp_path):
        img, lbl = make_idx_pair(tmp_path, [0], [1], 1, 1)
        raw = bytearray(img.read_bytes())
        raw[3] = 0x99
        img.write_bytes(bytes(raw))
        with pytest.raises(data.IdxFormatError, match="magic"):
            data.read_idx(img, lbl)

    def test_wrong_label_magic_rejected(self, tmp_path):
        img, lbl = make_idx_pair(tmp_path, [0], [1], 1, 1)
        raw = bytearray(lbl.read_bytes())
        raw[3] = 0x42
        lbl.write_bytes(bytes(raw))
        with pytest.raises(data.IdxFormatError, match="magic"):
            data.read_idx(img, lbl)

    def test_truncated_payload_rejected(self, tmp_path):
        img, lbl = make_idx_pair(tmp_path, [0, 1, 2, 3], [5], 2, 2)
        img.write_bytes(img.read_bytes()[:-2])
        with pytest.raises(data.IdxFormatError, match="truncated"):
            data.read_idx(img, lbl)

    def test_count_mismatch_rejected(self, tmp_path):
        img, _ = make_idx_pair(tmp_path, [0, 1, 2, 3, 4, 5, 6, 7], [1, 2], 2, 2, name="a")
        _, lbl = make_idx_pair(tmp_path, [0, 1, 2, 3], [1], 2, 2, name="b")
        with pytest.raises(data.IdxFormatError, match="disagree"):
            data.read_idx(img, lbl)

    def test_roundtrip_reproduces_bytes(self, tmp_path):
        rng = np.random.default_rng(0)
        pixels = list(rng.integers(0, 256, size=3 * 6))
        img, lbl = make_idx_pair(tmp_path, pixels, [0, 1, 2], 2, 3)
        ds = data.read_idx(img, lbl)
        img2 = tmp_path / "rt-images"
        lbl2 = tmp_path / "rt-labels"
        data.write_idx(ds, img2, lbl2, 2, 3)
        assert img2.read_bytes() == img.read_bytes()
        assert lbl2.read_bytes() == lbl.read_bytes()


class TestContamination:
    def _tenclass_dataset(self, per_class=700, pixels=4):
        rng = np.random.default_rng(1)
        n = per_class * 10
        images = rng.uniform(size=(n, pixels))
        labels = np.repeat(np.arange(10), per_class)
        return data.ImageDataset(images, labels)

    def test_alpha_zero_gives_pure_normal_set(self):
        ds = self._tenclass_dataset()
        spec = data.ContaminationSpec(0, 2, 0.0, 100)
        train, mask = data.build_contaminated_train(ds, spec, np.random.default_rng(0))
        assert len(train) == 100
        assert not mask.any()
        assert (train.labels == 0).all()

    def test_sizing_rule_matches_arithmetic(self):
        # n_normal=6000 at alpha=5% -> round(0.05*6000/0.95) = 316 anomalies.
        spec = data.ContaminationSpec(0, 2, 0.05, 6000)
        assert spec.n_anomaly == 316
        total = 6000 + 316
        assert abs(316 / total - 0.05) <= 1.0 / total

    def test_contamination_fraction_within_one_sample(self):
        for alpha in (0.05, 0.01, 0.10):
            for n_normal in (200, 1000, 5999):
                spec = data.ContaminationSpec(0, 1, alpha, n_normal)
                total = n_normal + spec.n_anomaly
                assert abs(spec.n_anomaly / total - alpha) <= 1.0 / total

    def test_seed_determinism(self):
        ds = self._tenclass_dataset()
        spec = data.ContaminationSpec(0, 2, 0.05, 300)
        a, am = data.build_contaminated_train(ds, spec, np.random.default_rng(7))
        b, bm = data.build_contaminated_train(ds, spec, np.random.default_rng(7))
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(am, bm)

    def test_insufficient_population_rejected(self):
        ds = self._tenclass_dataset(per_class=50)
        with pytest.raises(ValueError, match="only"):
            data.build_contaminated_train(ds, data.ContaminationSpec(0, 2, 0.05, 100),
                                          np.random.default_rng(0))

    def test_mask_marks_exactly_the_anomaly_class(self):
        ds = self._tenclass_dataset()
        spec = data.ContaminationSpec(3, 8, 0.05, 400)
        train, mask = data.build_contaminated_train(ds, spec, np.random.default_rng(3))
        np.testing.assert_array_equal(mask, train.labels == 8)
        assert mask.sum() == spec.n_anomaly

    def test_invalid_specs_rejected(self):
        with pytest.raises(ValueError):
            data.ContaminationSpec(1, 1, 0.05, 10)
        with pytest.raises(ValueError):
            data.ContaminationSpec(0, 1, 1.0, 10)
        with pytest.raises(ValueError):
            data.ContaminationSpec(0, 1, -0.1, 10)


class TestTestSplits:
    def _test_dataset(self):
        rng = np.random.default_rng(2)
        labels = np.repeat(np.arange(10), 100)
        return data.ImageDataset(rng.uniform(size=(1000, 4)), labels)

    def test_observed_and_unobserved_composition(self):
        split = data.build_test_splits(self._test_dataset(), 0, 2)
        assert len(split.observed) == 200
        assert set(np.unique(split.observed.labels)) == {0, 2}
        assert len(split.unobserved) == 900
        assert 2 not in set(np.unique(split.unobserved.labels))
        # 1:8 normals to anomalies in the unobserved split for 10 classes.
        anomalies = data.is_anomaly(split.unobserved, 0)
        assert anomalies.sum() == 800

    def test_observed_anomalies_disjoint_from_unobserved_classes(self):
        split = data.build_test_splits(self._test_dataset(), 0, 2)
        observed_anoms = set(split.observed.labels[data.is_anomaly(split.observed, 0)])
        unobserved_anoms = set(split.unobserved.labels[data.is_anomaly(split.unobserved, 0)])
        assert observed_anoms.isdisjoint(unobserved_anoms)

    def test_missing_class_rejected(self):
        ds = self._test_dataset()
        with pytest.raises(ValueError, match="missing class"):
            data.build_test_splits(ds, 0, 77)

    def test_two_class_data_has_no_unobserved_split(self):
        rng = np.random.default_rng(3)
        ds = data.ImageDataset(rng.uniform(size=(20, 4)),
                               np.array([0] * 10 + [1] * 10))
        split = data.build_test_splits(ds, 0, 1)
        assert split.unobserved is None
        assert len(split.observed) == 20


class TestSynthBlobs:
    def test_separated_classes_are_nearest_neighbor_separable(self):
        ds = data.synth_blobs(40, 40, separation=1.0, image_side=10,
                              rng=np.random.default_rng(5))
        # 1-NN leave-one-out on pixels must be perfect for well-separated blobs.
        d2 = np.square(ds.images[:, None, :] - ds.images[None, :, :]).sum(axis=2)
        np.fill_diagonal(d2, np.inf)
        nearest = d2.argmin(axis=1)
        assert (ds.labels[nearest] == ds.labels).all()

    def test_single_class_when_no_anomalies(self):
        ds = data.synth_blobs(10, 0, separation=1.0, image_side=8,
                              rng=np.random.default_rng(0))
        assert set(np.unique(ds.labels)) == {0}

    def test_pixel_range_clipped(self):
        ds = data.synth_blobs(30, 30, separation=1.0, image_side=6,
                              rng=np.random.default_rng(1), noise=0.5)
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0

    def test_seeded_determinism(self):
        a = data.synth_blobs(5, 5, 0.8, 7, np.random.default_rng(9))
        b = data.synth_blobs(5, 5, 0.8, 7, np.random.default_rng(9))
        np.testing.assert_array_equal(a.images, b.images)

    def test_image_side_validated(self):
        with pytest.raises(ValueError):
            data.synth_blobs(2, 2, 1.0, 1, np.random.default_rng(0))
