import struct

import numpy as np
import pytest

from mosa.dataio import (CHECKPOINT_MAGIC, DATASET_MAGIC, Dataset, augment_batch,
                         gen_synthetic, load_checkpoint, load_dataset,
                         parse_config_text, save_checkpoint, save_dataset)
from mosa.errors import (ConfigError, CorruptionError, DataError, FormatError,
                         TruncatedFileError, VersionError)
from mosa.rng import Rng


def small_sets(difficulty=1.0, seed=0):
    return gen_synthetic(classes=3, train_per_class=5, val_per_class=2,
                         channels=2, height=8, width=8,
                         difficulty=difficulty, seed=seed)


class TestDatasetFormat:
    def test_roundtrip_bit_identical(self, tmp_path):
        train, _ = small_sets()
        p1, p2 = tmp_path / "a.mosa-data", tmp_path / "b.mosa-data"
        save_dataset(p1, train)
        loaded = load_dataset(p1)
        save_dataset(p2, loaded)
        assert p1.read_bytes() == p2.read_bytes()
        assert np.array_equal(loaded.images, train.images)
        assert np.array_equal(loaded.labels, train.labels)

    def test_header_layout_golden(self, tmp_path):
        ds = Dataset(images=np.zeros((2, 1, 2, 2)), labels=np.array([0, 1]), num_classes=2)
        path = tmp_path / "golden.mosa-data"
        save_dataset(path, ds)
        raw = path.read_bytes()
        assert raw[:4] == DATASET_MAGIC
        assert struct.unpack_from("<IIHHHH", raw, 4) == (1, 2, 1, 2, 2, 2)
        assert len(raw) == 20 + 2 * (2 + 4 * 4)
        # first sample: label 0 then four zero float32 pixels
        assert raw[20:22] == b"\x00\x00"
        assert raw[22:38] == b"\x00" * 16

    def test_same_seed_identical_files(self, tmp_path):
        pa, pb = tmp_path / "a", tmp_path / "b"
        save_dataset(pa, small_sets(seed=5)[0])
        save_dataset(pb, small_sets(seed=5)[0])
        assert pa.read_bytes() == pb.read_bytes()

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="nowhere.mosa-data"):
            load_dataset(tmp_path / "nowhere.mosa-data")

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad"
        save_dataset(path, small_sets()[0])
        raw = bytearray(path.read_bytes())
        raw[:4] = b"JUNK"
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            load_dataset(path)

    def test_future_version_rejected(self, tmp_path):
        path = tmp_path / "future"
        save_dataset(path, small_sets()[0])
        raw = bytearray(path.read_bytes())
        struct.pack_into("<I", raw, 4, 2)
        path.write_bytes(bytes(raw))
        with pytest.raises(VersionError):
            load_dataset(path)

    def test_truncation_rejected(self, tmp_path):
        path = tmp_path / "short"
        save_dataset(path, small_sets()[0])
        raw = path.read_bytes()
        path.write_bytes(raw[:-3])
        with pytest.raises(TruncatedFileError):
            load_dataset(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        path = tmp_path / "long"
        save_dataset(path, small_sets()[0])
        path.write_bytes(path.read_bytes() + b"x")
        with pytest.raises(FormatError):
            load_dataset(path)


class TestCheckpointFormat:
    def payload(self):
        rng = Rng(3)
        config = {"epochs": "5", "method": "mosa", "merged": "false"}
        tensors = {"w": np.asarray(rng.normal((3, 4))), "b": np.asarray(rng.normal((4,)))}
        masks = {"w.mask.0": (np.asarray(rng.uniform((3, 4))) > 0.5).astype(np.float64)}
        return config, tensors, masks

    def test_roundtrip_bit_identical(self, tmp_path):
        config, tensors, masks = self.payload()
        p1, p2 = tmp_path / "a.mosa-ckpt", tmp_path / "b.mosa-ckpt"
        save_checkpoint(p1, config, tensors, masks)
        c2, t2, m2 = load_checkpoint(p1)
        save_checkpoint(p2, c2, t2, m2)
        assert p1.read_bytes() == p2.read_bytes()
        assert c2 == config
        assert all(np.array_equal(t2[k], tensors[k]) for k in tensors)
        assert all(np.array_equal(m2[k], masks[k]) for k in masks)

    def test_flipped_payload_byte_fails_crc(self, tmp_path):
        config, tensors, masks = self.payload()
        path = tmp_path / "c.mosa-ckpt"
        save_checkpoint(path, config, tensors, masks)
        raw = bytearray(path.read_bytes())
        raw[len(raw) // 2] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(CorruptionError):
            load_checkpoint(path)

    def test_truncation_is_length_error(self, tmp_path):
        config, tensors, masks = self.payload()
        path = tmp_path / "d.mosa-ckpt"
        save_checkpoint(path, config, tensors, masks)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(TruncatedFileError):
            load_checkpoint(path)

    def test_future_version_is_version_error(self, tmp_path):
        config, tensors, masks = self.payload()
        path = tmp_path / "e.mosa-ckpt"
        save_checkpoint(path, config, tensors, masks)
        raw = bytearray(path.read_bytes())
        struct.pack_into("<I", raw, 4, 2)
        path.write_bytes(bytes(raw))
        with pytest.raises(VersionError):
            load_checkpoint(path)

    def test_magic_checked(self, tmp_path):
        path = tmp_path / "f.mosa-ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(FormatError):
            load_checkpoint(path)
        assert CHECKPOINT_MAGIC == b"MSCK"

    def test_mask_bitmap_layout(self, tmp_path):
        # single 1x9 mask 101000001 -> little-bit-first bytes 0x05, 0x01
        mask = np.array([[1, 0, 1, 0, 0, 0, 0, 0, 1]], dtype=np.float64)
        path = tmp_path / "g.mosa-ckpt"
        save_checkpoint(path, {}, {}, {"m": mask})
        raw = path.read_bytes()
        idx = raw.find(b"m", 16) + 1
        rank, rows, cols = struct.unpack_from("<3I", raw, idx)
        assert (rank, rows, cols) == (2, 1, 9)
        assert raw[idx + 12:idx + 14] == bytes([0x05, 0x01])


class TestConfigText:
    def test_parse_key_values_with_comments(self):
        text = "# comment\nepochs = 5\nmethod=mosa  # trailing\n\n"
        assert parse_config_text(text) == {"epochs": "5", "method": "mosa"}

    def test_malformed_line(self):
        with pytest.raises(ConfigError):
            parse_config_text("not a pair\n")


class TestSyntheticData:
    def test_determinism(self):
        a_train, a_val = small_sets(seed=9)
        b_train, b_val = small_sets(seed=9)
        assert np.array_equal(a_train.images, b_train.images)
        assert np.array_equal(a_val.images, b_val.images)

    def test_train_val_disjoint(self):
        train, val = small_sets(seed=10)
        assert not np.array_equal(train.images[0], val.images[0])

    def test_min_classes(self):
        with pytest.raises(ConfigError):
            gen_synthetic(classes=1)

    def test_difficulty_zero_linearly_separable(self):
        train, val = gen_synthetic(classes=5, train_per_class=20, val_per_class=10,
                                   channels=2, height=8, width=8,
                                   difficulty=0.0, seed=11)
        x = train.images.reshape(len(train), -1)
        onehot = np.eye(5)[train.labels]
        w, *_ = np.linalg.lstsq(np.hstack([x, np.ones((len(x), 1))]), onehot, rcond=None)
        xv = val.images.reshape(len(val), -1)
        pred = np.argmax(np.hstack([xv, np.ones((len(xv), 1))]) @ w, axis=1)
        assert (pred == val.labels).mean() >= 0.99

    def test_difficulty_scales_corruption(self):
        easy, _ = small_sets(difficulty=0.0, seed=12)
        hard, _ = small_sets(difficulty=1.5, seed=12)
        # same class twice: identical when clean, different when corrupted
        assert np.array_equal(easy.images[0], easy.images[1])
        assert not np.array_equal(hard.images[0], hard.images[1])

    def test_float32_quantized(self):
        train, _ = small_sets(seed=13)
        assert np.array_equal(train.images, train.images.astype(np.float32).astype(np.float64))


class TestAugment:
    def test_shape_and_determinism(self):
        train, _ = small_sets(seed=14)
        a = augment_batch(train.images, Rng(15))
        b = augment_batch(train.images, Rng(15))
        assert a.shape == train.images.shape
        assert np.array_equal(a, b)

    def test_flip_flag(self):
        train, _ = small_sets(seed=16)
        flipped = augment_batch(train.images, Rng(17), min_scale=1.0, allow_flip=True)
        plain = augment_batch(train.images, Rng(17), min_scale=1.0, allow_flip=False)
        assert not np.array_equal(flipped, plain)
