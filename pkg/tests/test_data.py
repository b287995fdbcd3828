import gzip
import struct

import numpy as np
import pytest
import torch

from semcom_backdoor.data import (
    IngestionError,
    default_target,
    generate_synthetic,
    ingest_dataset,
    load_cifar10,
    load_mnist,
    read_idx,
    synthetic_symbol,
)


def write_idx(path, array):
    array = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">I", 0x0800 | array.ndim)
    header += struct.pack(">" + "I" * array.ndim, *array.shape)
    with open(path, "wb") as f:
        f.write(header + array.tobytes())


class TestIdxParser:
    def test_roundtrip(self, tmp_path):
        data = np.arange(2 * 28 * 28, dtype=np.uint8).reshape(2, 28, 28)
        write_idx(tmp_path / "file.idx", data)
        assert np.array_equal(read_idx(str(tmp_path / "file.idx")), data)

    def test_gzip_supported(self, tmp_path):
        data = np.arange(12, dtype=np.uint8).reshape(3, 4)
        header = struct.pack(">I", 0x0802) + struct.pack(">II", 3, 4)
        with gzip.open(tmp_path / "f.gz", "wb") as f:
            f.write(header + data.tobytes())
        assert np.array_equal(read_idx(str(tmp_path / "f.gz")), data)

    def test_bad_magic_rejected(self, tmp_path):
        (tmp_path / "bad.idx").write_bytes(b"\xff\xff\xff\xff" + b"\x00" * 16)
        with pytest.raises(IngestionError, match="magic"):
            read_idx(str(tmp_path / "bad.idx"))

    def test_truncated_payload_rejected(self, tmp_path):
        header = struct.pack(">I", 0x0801) + struct.pack(">I", 100)
        (tmp_path / "short.idx").write_bytes(header + b"\x00" * 10)
        with pytest.raises(IngestionError, match="size"):
            read_idx(str(tmp_path / "short.idx"))


class TestMnistContract:
    def make_fixture(self, tmp_path, n=20):
        rng = np.random.default_rng(0)
        images = rng.integers(0, 256, size=(n, 28, 28), dtype=np.uint8)
        labels = rng.integers(0, 10, size=n, dtype=np.uint8)
        write_idx(tmp_path / "train-images-idx3-ubyte", images)
        write_idx(tmp_path / "train-labels-idx1-ubyte", labels)
        return images, labels

    def test_loads_and_scales(self, tmp_path):
        images, labels = self.make_fixture(tmp_path)
        symbols, got = load_mnist(str(tmp_path))
        assert symbols.shape == (20, 28, 28, 1)
        assert symbols.min() >= 0.0 and symbols.max() <= 1.0
        assert np.array_equal(got, labels.astype(np.int64))

    def test_missing_files_reports_checksums(self, tmp_path):
        with pytest.raises(IngestionError, match="md5"):
            load_mnist(str(tmp_path))

    def test_count_mismatch_rejected(self, tmp_path):
        self.make_fixture(tmp_path)
        write_idx(tmp_path / "train-labels-idx1-ubyte",
                  np.zeros(5, dtype=np.uint8))
        with pytest.raises(IngestionError, match="counts"):
            load_mnist(str(tmp_path))

    def test_ingest_subset(self, tmp_path):
        self.make_fixture(tmp_path)
        d_t, d_r = ingest_dataset("mnist", 10, seed=7, data_dir=str(tmp_path))
        assert len(d_t) == 10
        assert d_t.symbol_shape == (28, 28, 1)
        assert torch.equal(d_t.symbols, d_r.symbols)


class TestCifarContract:
    def test_loads_binary_batches(self, tmp_path):
        rng = np.random.default_rng(1)
        records = np.concatenate(
            [rng.integers(0, 256, size=(4, 3073), dtype=np.uint8)]
        )
        records[:, 0] = [0, 1, 2, 3]
        (tmp_path / "data_batch_1.bin").write_bytes(records.tobytes())
        symbols, labels = load_cifar10(str(tmp_path))
        assert symbols.shape == (4, 32, 32, 3)
        assert labels.tolist() == [0, 1, 2, 3]

    def test_missing_batches_rejected(self, tmp_path):
        with pytest.raises(IngestionError, match="data_batch"):
            load_cifar10(str(tmp_path))

    def test_bad_record_size_rejected(self, tmp_path):
        (tmp_path / "data_batch_1.bin").write_bytes(b"\x00" * 100)
        with pytest.raises(IngestionError, match="multiple"):
            load_cifar10(str(tmp_path))


class TestSynthetic:
    def test_shapes_and_range(self):
        symbols, labels = generate_synthetic(50, seed=3)
        assert symbols.shape == (50, 28, 28, 1)
        assert symbols.min() >= 0.0 and symbols.max() <= 1.0
        assert set(labels.tolist()) <= set(range(10))

    def test_deterministic(self):
        a, la = generate_synthetic(30, seed=9)
        b, lb = generate_synthetic(30, seed=9)
        assert np.array_equal(a, b) and np.array_equal(la, lb)

    def test_all_labels_draw_distinct_patterns(self):
        rng = np.random.default_rng(0)
        imgs = [synthetic_symbol(np.random.default_rng(5), k) for k in range(10)]
        flat = [i.tobytes() for i in imgs]
        assert len(set(flat)) == 10

    def test_bad_label_rejected(self):
        with pytest.raises(ValueError):
            synthetic_symbol(np.random.default_rng(0), 10)


class TestIngest:
    def test_synthetic_pairs_identical(self):
        d_t, d_r = ingest_dataset("synthetic", 100, seed=1)
        assert len(d_t) == 100
        assert torch.equal(d_t.symbols, d_r.symbols)
        d_r.symbols[0] += 0.5
        assert not torch.equal(d_t.symbols[0], d_r.symbols[0])

    def test_same_seed_same_subset(self):
        a, _ = ingest_dataset("synthetic", 40, seed=2)
        b, _ = ingest_dataset("synthetic", 40, seed=2)
        assert torch.equal(a.symbols, b.symbols)

    def test_unknown_dataset(self):
        with pytest.raises(IngestionError):
            ingest_dataset("imagenet", 10, seed=0)

    def test_bad_subset_size(self):
        with pytest.raises(IngestionError):
            ingest_dataset("synthetic", 0, seed=0)

    def test_default_target_prefers_label(self):
        d_t, _ = ingest_dataset("synthetic", 200, seed=4)
        target = default_target(d_t, label=5)
        hits = torch.nonzero(d_t.labels == 5).flatten()
        assert torch.equal(target, d_t.symbols[hits[0]])
