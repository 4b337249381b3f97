"""Dataset constructors, IDX ingestion, and kernel cache round trips."""

import struct

import numpy as np
import pytest

from ntkreg._kernelmatrix import KernelMatrix
from ntkreg.data import (
    DataSet,
    Provenance,
    dataset_digest,
    load_kernel,
    load_mnist_binary,
    make_kernel_cache,
    save_kernel,
    split_dataset,
    synth_sphere,
)
from ntkreg.errors import (
    DataFormatError,
    EmptyDatasetError,
    StaleCacheError,
    ValidationError,
)


def write_idx_pair(tmp_path, labels, rng, rows=28, cols=28, image_magic=0x803, label_magic=0x801):
    """Assemble IDX files byte by byte, independent of the loader under test."""
    labels = np.asarray(labels, dtype=np.uint8)
    n = labels.size
    pixels = rng.integers(1, 256, size=(n, rows * cols), endpoint=False).astype(np.uint8)
    image_path = tmp_path / "images.idx"
    label_path = tmp_path / "labels.idx"
    with open(image_path, "wb") as f:
        f.write(struct.pack(">IIII", image_magic, n, rows, cols))
        f.write(pixels.tobytes())
    with open(label_path, "wb") as f:
        f.write(struct.pack(">II", label_magic, n))
        f.write(labels.tobytes())
    return image_path, label_path, pixels


class TestMnistLoader:
    def test_shape_and_label_contract(self, tmp_path):
        rng = np.random.default_rng(0)
        labels = np.array([5, 8, 3, 5, 8, 8, 5, 1, 8, 5])
        images, lab, _ = write_idx_pair(tmp_path, labels, rng)
        ds = load_mnist_binary(images, lab, 5, 8, limit=6)
        assert ds.n == 6
        assert ds.d == 28 * 28
        assert set(np.unique(ds.clean_labels)) <= {1.0, -1.0}
        assert np.array_equal(ds.clean_labels, ds.noisy_labels)
        norms = np.linalg.norm(ds.inputs, axis=1)
        assert np.max(np.abs(norms - 1.0)) <= 1e-12

    def test_same_class_rejected(self, tmp_path):
        rng = np.random.default_rng(1)
        images, lab, _ = write_idx_pair(tmp_path, [5, 8, 5, 8], rng)
        with pytest.raises(ValidationError):
            load_mnist_binary(images, lab, 5, 5)

    def test_byte_level_reread_oracle(self, tmp_path):
        # Re-parse the files with plain struct/frombuffer and replay the
        # selection rule; the loader must agree example by example.
        rng = np.random.default_rng(2)
        raw_labels = np.array([9, 5, 8, 8, 5, 0, 5, 8, 2, 5, 8, 5], dtype=np.uint8)
        images, lab, pixels = write_idx_pair(tmp_path, raw_labels, rng)
        ds = load_mnist_binary(images, lab, 5, 8, limit=10)

        buf = open(lab, "rb").read()
        magic, count = struct.unpack(">II", buf[:8])
        oracle_labels = np.frombuffer(buf[8 : 8 + count], dtype=np.uint8)
        keep = np.flatnonzero((oracle_labels == 5) | (oracle_labels == 8))[:10]
        assert ds.n == keep.size
        expected_sign = np.where(oracle_labels[keep] == 5, 1.0, -1.0)
        assert np.array_equal(ds.clean_labels, expected_sign)

        ibuf = open(images, "rb").read()
        _, icount, r, c = struct.unpack(">IIII", ibuf[:16])
        oracle_pixels = np.frombuffer(ibuf[16:], dtype=np.uint8).reshape(icount, r * c)
        for row, raw_idx in enumerate(keep):
            raw = oracle_pixels[raw_idx].astype(np.float64) / 255.0
            raw /= np.linalg.norm(raw)
            assert np.allclose(ds.inputs[row], raw, rtol=0, atol=1e-15)

    def test_bad_magic(self, tmp_path):
        rng = np.random.default_rng(3)
        images, lab, _ = write_idx_pair(tmp_path, [5, 8], rng, image_magic=0x123)
        with pytest.raises(DataFormatError):
            load_mnist_binary(images, lab, 5, 8)

    def test_truncated_pixels(self, tmp_path):
        rng = np.random.default_rng(4)
        images, lab, _ = write_idx_pair(tmp_path, [5, 8, 5], rng)
        data = open(images, "rb").read()
        with open(images, "wb") as f:
            f.write(data[:-100])
        with pytest.raises(DataFormatError):
            load_mnist_binary(images, lab, 5, 8)

    def test_too_few_usable_examples(self, tmp_path):
        rng = np.random.default_rng(5)
        images, lab, _ = write_idx_pair(tmp_path, [1, 2, 3, 5], rng)
        with pytest.raises(EmptyDatasetError):
            load_mnist_binary(images, lab, 5, 8)

    def test_deterministic(self, tmp_path):
        rng = np.random.default_rng(6)
        images, lab, _ = write_idx_pair(tmp_path, [5, 8, 5, 8, 8], rng)
        a = load_mnist_binary(images, lab, 5, 8)
        b = load_mnist_binary(images, lab, 5, 8)
        assert np.array_equal(a.inputs, b.inputs)
        assert np.array_equal(a.clean_labels, b.clean_labels)


class TestSynthSphere:
    def test_determinism_and_norms(self):
        a = synth_sphere(4, 3, "linear-sign", seed=7)
        b = synth_sphere(4, 3, "linear-sign", seed=7)
        assert np.array_equal(a.inputs, b.inputs)
        assert np.array_equal(a.clean_labels, b.clean_labels)
        assert np.max(np.abs(np.linalg.norm(a.inputs, axis=1) - 1.0)) <= 1e-12

    def test_label_balance(self):
        # Monte-Carlo frequency oracle: sgn(w.x) on the sphere is a fair coin.
        ds = synth_sphere(1000, 10, "linear-sign", seed=1)
        positives = int(np.sum(ds.clean_labels == 1.0))
        assert 450 <= positives <= 550

    def test_smooth_targets_clamped(self):
        for seed in range(5):
            ds = synth_sphere(200, 6, "smooth-poly", seed=seed)
            assert ds.task == "regression"
            assert ds.clean_labels.min() >= -1.0
            assert ds.clean_labels.max() <= 1.0

    def test_preconditions(self):
        with pytest.raises(ValidationError):
            synth_sphere(0, 3, "linear-sign", seed=0)
        with pytest.raises(ValidationError):
            synth_sphere(5, 1, "linear-sign", seed=0)
        with pytest.raises(ValidationError):
            synth_sphere(5, 3, "no-such-target", seed=0)


class TestDataSetInvariants:
    def test_rejects_nonfinite_inputs(self):
        x = np.eye(3)
        x[0, 0] = np.nan
        with pytest.raises(ValidationError):
            DataSet(x, np.ones(3), np.ones(3), "binary")

    def test_rejects_bad_binary_labels(self):
        with pytest.raises(ValidationError):
            DataSet(np.eye(3), np.array([1.0, 0.5, -1.0]), np.ones(3), "binary")

    def test_rejects_unnormalized_when_flagged(self):
        with pytest.raises(ValidationError):
            DataSet(2.0 * np.eye(3), np.ones(3), np.ones(3), "binary")
        # and accepts them when the flag is off
        DataSet(2.0 * np.eye(3), np.ones(3), np.ones(3), "binary", normalized=False)

    def test_multiclass_label_range(self):
        x = np.eye(4)
        DataSet(x, np.array([1, 2, 3, 3]), np.array([1, 2, 3, 3]), "multiclass", num_classes=3)
        with pytest.raises(ValidationError):
            DataSet(x, np.array([0, 2, 3, 3]), np.array([1, 2, 3, 3]), "multiclass", num_classes=3)

    def test_split(self):
        ds = synth_sphere(10, 4, "linear-sign", seed=0)
        train, test = split_dataset(ds, 7)
        assert train.n == 7 and test.n == 3
        assert np.array_equal(np.vstack([train.inputs, test.inputs]), ds.inputs)
        with pytest.raises(ValidationError):
            split_dataset(ds, 10)


class TestKernelCache:
    def make_cache(self, n=3, seed=0):
        ds = synth_sphere(n, 4, "linear-sign", seed=seed)
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((n, n))
        values = a @ a.T + n * np.eye(n)
        values = np.triu(values) + np.triu(values, 1).T
        matrix = KernelMatrix.from_values(values)
        return ds, make_kernel_cache(matrix, Provenance(kind="analytic", depth=2), ds)

    def test_round_trip_bit_exact(self, tmp_path):
        ds, cache = self.make_cache()
        path = tmp_path / "k.ntkk"
        save_kernel(cache, path)
        loaded = load_kernel(path, ds)
        assert np.array_equal(loaded.matrix.values, cache.matrix.values)
        assert loaded.provenance.kind == "analytic"
        assert loaded.input_digest == cache.input_digest

    def test_digest_rejects_single_bit_change(self, tmp_path):
        ds, cache = self.make_cache()
        path = tmp_path / "k.ntkk"
        save_kernel(cache, path)
        perturbed_inputs = ds.inputs.copy()
        perturbed_inputs[0, 0] = np.nextafter(perturbed_inputs[0, 0], 1.0)
        perturbed = DataSet(
            perturbed_inputs, ds.clean_labels, ds.noisy_labels, ds.task, normalized=False
        )
        with pytest.raises(StaleCacheError):
            load_kernel(path, perturbed)

    def test_truncated_file(self, tmp_path):
        ds, cache = self.make_cache()
        path = tmp_path / "k.ntkk"
        save_kernel(cache, path)
        data = open(path, "rb").read()
        with open(path, "wb") as f:
            f.write(data[:50])
        with pytest.raises(DataFormatError):
            load_kernel(path, ds)

    def test_bad_magic(self, tmp_path):
        ds, cache = self.make_cache()
        path = tmp_path / "k.ntkk"
        save_kernel(cache, path)
        data = bytearray(open(path, "rb").read())
        data[0] = ord("X")
        with open(path, "wb") as f:
            f.write(bytes(data))
        with pytest.raises(DataFormatError):
            load_kernel(path, ds)

    def test_digest_is_content_hash(self):
        ds = synth_sphere(5, 3, "linear-sign", seed=1)
        same = synth_sphere(5, 3, "linear-sign", seed=1)
        other = synth_sphere(5, 3, "linear-sign", seed=2)
        assert dataset_digest(ds) == dataset_digest(same)
        assert dataset_digest(ds) != dataset_digest(other)
