import json
import struct
import zlib

import numpy as np
import pytest

from quantkan.data import (CKPT_MAGIC, RINGS_XOR, TWO_GAUSSIANS, Dataset,
                           cast_to_storage_precision, load_checkpoint,
                           load_mnist_idx, make_synthetic, save_checkpoint)
from quantkan.errors import CheckpointError, ConfigError, ParseError
from quantkan.layers import BasisConfig, build_kan_mlp
from quantkan.qat import wrap_model
from quantkan.quantizers import parse_bit_config
from quantkan.tensor import Rng, Tensor


def write_idx_fixture(tmp_path, pixels, labels, image_magic=2051,
                      label_magic=2049, truncate_pixels=0):
    pixels = np.asarray(pixels, dtype=np.uint8)
    n, rows, cols = pixels.shape
    img_path = tmp_path / "images-idx3-ubyte"
    raw = struct.pack(">iiii", image_magic, n, rows, cols) + pixels.tobytes()
    if truncate_pixels:
        raw = raw[:-truncate_pixels]
    img_path.write_bytes(raw)
    lab_path = tmp_path / "labels-idx1-ubyte"
    lab_path.write_bytes(struct.pack(">ii", label_magic, len(labels))
                         + bytes(labels))
    return str(img_path), str(lab_path)


class TestIdxParsing:
    def test_hand_built_fixture_recovers_exact_pixels(self, tmp_path):
        pixels = np.array([[[0, 255], [128, 64]], [[1, 2], [3, 4]]])
        img, lab = write_idx_fixture(tmp_path, pixels, [7, 3])
        ds = load_mnist_idx(img, lab, normalization=(0.0, 1.0))
        expected = pixels.reshape(2, 4).astype(np.float64) / 255.0
        assert np.array_equal(ds.images, expected)
        assert ds.labels.tolist() == [7, 3]

    def test_wrong_label_magic_rejected(self, tmp_path):
        pixels = np.zeros((2, 2, 2), dtype=np.uint8)
        img, lab = write_idx_fixture(tmp_path, pixels, [0, 1],
                                     label_magic=2051)
        with pytest.raises(ParseError, match="magic"):
            load_mnist_idx(img, lab)

    def test_wrong_image_magic_rejected(self, tmp_path):
        pixels = np.zeros((2, 2, 2), dtype=np.uint8)
        img, lab = write_idx_fixture(tmp_path, pixels, [0, 1],
                                     image_magic=2049)
        with pytest.raises(ParseError, match="magic"):
            load_mnist_idx(img, lab)

    def test_truncated_payload_reports_offset(self, tmp_path):
        pixels = np.zeros((2, 2, 2), dtype=np.uint8)
        img, lab = write_idx_fixture(tmp_path, pixels, [0, 1],
                                     truncate_pixels=3)
        with pytest.raises(ParseError, match="byte offset"):
            load_mnist_idx(img, lab)

    def test_count_mismatch_rejected(self, tmp_path):
        pixels = np.zeros((2, 2, 2), dtype=np.uint8)
        img, lab = write_idx_fixture(tmp_path, pixels, [0, 1, 2])
        with pytest.raises(ParseError, match="mismatch"):
            load_mnist_idx(img, lab)

    def test_train_stats_standardize_train_split(self, tmp_path):
        rng = Rng(0)
        pixels = rng.integers(0, 256, (50, 3, 3)).astype(np.uint8)
        img, lab = write_idx_fixture(tmp_path, pixels,
                                     list(rng.integers(0, 10, (50,))))
        ds = load_mnist_idx(img, lab)
        assert abs(ds.images.mean()) < 1e-12
        assert abs(ds.images.std() - 1.0) < 1e-12

    def test_test_split_reuses_train_normalization(self, tmp_path):
        pixels = np.full((4, 2, 2), 100, dtype=np.uint8)
        img, lab = write_idx_fixture(tmp_path, pixels, [0, 1, 0, 1])
        ds = load_mnist_idx(img, lab, normalization=(0.25, 0.5), split="test")
        expected = (100 / 255.0 - 0.25) / 0.5
        assert np.allclose(ds.images, expected)
        assert ds.normalization == (0.25, 0.5)


def linear_probe_accuracy(data: Dataset) -> float:
    """Closed-form mean-difference probe (LDA direction, midpoint threshold)."""
    x0 = data.images[data.labels == 0]
    x1 = data.images[data.labels == 1]
    w = x1.mean(axis=0) - x0.mean(axis=0)
    b = -0.5 * w @ (x0.mean(axis=0) + x1.mean(axis=0))
    pred = (data.images @ w + b > 0).astype(np.int64)
    return float((pred == data.labels).mean())


class TestSynthetic:
    def test_two_gaussians_linearly_separable(self):
        data = make_synthetic(TWO_GAUSSIANS, 1000, Rng(0))
        assert linear_probe_accuracy(data) >= 0.99

    def test_same_seed_identical(self):
        a = make_synthetic(TWO_GAUSSIANS, 100, Rng(5))
        b = make_synthetic(TWO_GAUSSIANS, 100, Rng(5))
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)

    def test_rings_defeat_linear_probes(self):
        data = make_synthetic(RINGS_XOR, 1000, Rng(1))
        assert linear_probe_accuracy(data) <= 0.60
        rng = Rng(2)
        best = 0.0
        for _ in range(200):
            w = rng.normal((2,))
            proj = data.images @ w
            # optimal threshold for this direction, brute-forced
            order = np.argsort(proj)
            labels = data.labels[order]
            ones_left = np.cumsum(labels)
            total_ones = ones_left[-1]
            zeros_left = np.arange(1, len(labels) + 1) - ones_left
            acc_pos = (zeros_left + (total_ones - ones_left)) / len(labels)
            best = max(best, float(acc_pos.max()), float(1 - acc_pos.min()))
        assert best <= 0.60

    def test_minimum_size_enforced(self):
        with pytest.raises(ConfigError):
            make_synthetic(TWO_GAUSSIANS, 1, Rng(0))


class TestCheckpoint:
    def make_model(self):
        return build_kan_mlp([4, 6, 3], BasisConfig("bspline"), Rng(3))

    def test_round_trip_logits_bit_identical(self, tmp_path):
        model = self.make_model()
        path = str(tmp_path / "model.qkpt")
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        x = Tensor(Rng(4).uniform((16, 4), -1, 1))
        reference = cast_to_storage_precision(self.make_model())
        assert np.array_equal(loaded.forward(x).data, reference.forward(x).data)
        # a second round trip is exact (already at storage precision)
        path2 = str(tmp_path / "model2.qkpt")
        save_checkpoint(loaded, path2)
        again = load_checkpoint(path2)
        assert np.array_equal(loaded.forward(x).data, again.forward(x).data)

    def test_round_trip_preserves_quantizer_states(self, tmp_path):
        model = self.make_model()
        wrapped = wrap_model(model, "lsq", parse_bit_config("w4a4"), Rng(0))
        x = Tensor(Rng(5).uniform((8, 4), -1, 1))
        wrapped.forward(x)  # initialize activation quantizers
        path = str(tmp_path / "qat.qkpt")
        save_checkpoint(wrapped, path)
        loaded = load_checkpoint(path)
        cast_to_storage_precision(wrapped)
        assert np.array_equal(loaded.forward(x).data, wrapped.forward(x).data)
        for got, ref in zip(loaded.quant_states(), wrapped.quant_states()):
            assert got.method == ref.method and got.bits == ref.bits
            if ref.s is not None:
                assert np.array_equal(got.s.data, ref.s.data)

    def test_corrupted_payload_byte_rejected(self, tmp_path):
        model = self.make_model()
        path = str(tmp_path / "model.qkpt")
        save_checkpoint(model, path)
        blob = bytearray(open(path, "rb").read())
        blob[-1] ^= 0xFF
        open(path, "wb").write(blob)
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(path)

    def test_future_major_version_refused(self, tmp_path):
        manifest = json.dumps({"format_version": [2, 0], "tensors": []}).encode()
        path = tmp_path / "future.qkpt"
        path.write_bytes(CKPT_MAGIC + struct.pack("<Q", len(manifest)) + manifest)
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(str(path))

    def test_missing_tensor_named(self, tmp_path):
        model = self.make_model()
        path = str(tmp_path / "model.qkpt")
        save_checkpoint(model, path)
        blob = bytearray(open(path, "rb").read())
        header_len = struct.unpack("<Q", blob[8:16])[0]
        manifest = json.loads(blob[16:16 + header_len].decode())
        manifest["tensors"] = [t for t in manifest["tensors"]
                               if t["name"] != "layer1.W_s"]
        new_header = json.dumps(manifest, sort_keys=True).encode()
        rebuilt = (bytes(blob[:8]) + struct.pack("<Q", len(new_header))
                   + new_header + bytes(blob[16 + header_len:]))
        open(path, "wb").write(rebuilt)
        with pytest.raises(CheckpointError, match="layer1.W_s"):
            load_checkpoint(path)

    def test_tensor_hashes_preserved(self, tmp_path):
        model = self.make_model()
        path = str(tmp_path / "model.qkpt")
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        cast_to_storage_precision(model)
        for a, b in zip(model.parameters(), loaded.parameters()):
            assert zlib.crc32(a.data.tobytes()) == zlib.crc32(b.data.tobytes())
