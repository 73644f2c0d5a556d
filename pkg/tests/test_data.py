import struct

import numpy as np
import pytest

from se_explain import data as D
from se_explain.data import DataParseError, DatasetSplit


def cifar_records(labels, rng):
    images = rng.integers(0, 256, (len(labels), 3, 32, 32), dtype=np.uint8)
    return DatasetSplit(images, np.asarray(labels, np.int64), "train", 10)


def read_first_record(path):
    """Minimal stand-alone reader: label byte and first pixel bytes."""
    with open(path, "rb") as fh:
        head = fh.read(9)
    return head[0], list(head[1:9])


class TestCifar:
    def test_two_record_round_trip(self, tmp_path, rng):
        split = cifar_records([3, 7], rng)
        blob = bytearray()
        for i in range(2):
            blob.append(int(split.labels[i]))
            for c in range(3):
                blob += split.images[i, c].tobytes()
        (tmp_path / "b.bin").write_bytes(bytes(blob))
        parsed = D.parse_cifar10(tmp_path / "b.bin")
        assert parsed.labels.tolist() == [3, 7]
        assert parsed.images.tobytes() == split.images.tobytes()

    def test_serialize_round_trip(self, tmp_path, rng):
        split = cifar_records(rng.integers(0, 10, 20), rng)
        (tmp_path / "b.bin").write_bytes(D.serialize_cifar(split))
        parsed = D.parse_cifar10([tmp_path / "b.bin"])
        np.testing.assert_array_equal(parsed.images, split.images)
        np.testing.assert_array_equal(parsed.labels, split.labels)

    def test_pixel_layout(self, tmp_path):
        rec = bytearray(3073)
        rec[0] = 1
        rec[1 + 1024 + 32 * 2 + 5] = 200  # green plane, row 2, column 5
        (tmp_path / "b.bin").write_bytes(bytes(rec))
        img = D.parse_cifar10(tmp_path / "b.bin")[0]
        assert img.label == 1
        assert img.pixels[1, 2, 5] == pytest.approx(200 / 255)
        assert img.pixels.sum() == pytest.approx(200 / 255)

    def test_truncated_first_record(self, tmp_path, rng):
        blob = D.serialize_cifar(cifar_records([1], rng))[:3072]
        (tmp_path / "t.bin").write_bytes(blob)
        with pytest.raises(DataParseError) as exc:
            D.parse_cifar10(tmp_path / "t.bin")
        assert exc.value.record == 0 and exc.value.offset == 0

    def test_truncated_later_record(self, tmp_path, rng):
        blob = D.serialize_cifar(cifar_records([1, 2, 3], rng))[:-10]
        (tmp_path / "t.bin").write_bytes(blob)
        with pytest.raises(DataParseError) as exc:
            D.parse_cifar10(tmp_path / "t.bin")
        assert exc.value.record == 2 and exc.value.offset == 2 * 3073

    def test_label_out_of_range(self, tmp_path, rng):
        blob = bytearray(D.serialize_cifar(cifar_records([1, 2], rng)))
        blob[3073] = 10
        (tmp_path / "l.bin").write_bytes(bytes(blob))
        with pytest.raises(DataParseError) as exc:
            D.parse_cifar10(tmp_path / "l.bin")
        assert exc.value.offset == 3073 and exc.value.record == 1

    def test_strict_batch_size(self, tmp_path, rng):
        (tmp_path / "s.bin").write_bytes(D.serialize_cifar(cifar_records([1], rng)))
        with pytest.raises(DataParseError, match="30730000"):
            D.parse_cifar10(tmp_path / "s.bin", strict=True)

    def test_empty_file(self, tmp_path):
        (tmp_path / "e.bin").write_bytes(b"")
        with pytest.raises(DataParseError):
            D.parse_cifar10(tmp_path / "e.bin")

    def test_cifar100_fine_label(self, tmp_path):
        rec = bytearray(3074)
        rec[0], rec[1] = 4, 77
        (tmp_path / "c.bin").write_bytes(bytes(rec))
        split = D.parse_cifar100(tmp_path / "c.bin")
        assert split.labels.tolist() == [77] and split.num_classes == 100

    def test_load_dataset_dir(self, cifar_dir):
        train = D.load_dataset("cifar10", cifar_dir, "train")
        test = D.load_dataset("cifar10", cifar_dir, "test")
        assert len(train) == 500 and len(test) == 40
        assert train.image_shape == (3, 32, 32)

    def test_missing_dir(self, tmp_path):
        with pytest.raises(D.DatasetNotFound):
            D.load_dataset("cifar10", tmp_path, "train")

    def test_env_default(self, cifar_dir, monkeypatch):
        monkeypatch.setenv(D.DATA_DIR_ENV, str(cifar_dir))
        assert len(D.load_dataset("cifar10", split="test")) == 40

    def test_official_test_batch(self):
        try:
            path = D._locate(D.default_data_dir(), D.CIFAR10_SUBDIR, ["test_batch.bin"])[0]
        except D.DatasetNotFound:
            pytest.skip("CIFAR-10 binaries not available")
        label, pixels = read_first_record(path)
        split = D.parse_cifar10(path, "test", strict=True)
        assert len(split) == 10_000
        assert split.labels[0] == label == 3
        assert split.images[0].reshape(-1)[:8].tolist() == pixels

    @pytest.mark.parametrize("seed", range(3))
    def test_fuzz_structured_errors(self, tmp_path, seed):
        r = np.random.default_rng(seed)
        blob = D.serialize_cifar(cifar_records(r.integers(0, 10, 3), r))
        for k in range(200):
            buf = bytearray(blob[:r.integers(0, len(blob) + 1)])
            for pos in r.integers(0, max(len(buf), 1), 3):
                if buf:
                    buf[pos] = r.integers(0, 256)
            (tmp_path / "f.bin").write_bytes(bytes(buf))
            try:
                split = D.parse_cifar10(tmp_path / "f.bin")
            except DataParseError:
                continue
            assert split.labels.max() < 10


def idx_pair(tmp_path, split):
    images, labels = D.serialize_idx(split)
    (tmp_path / "i.idx").write_bytes(images)
    (tmp_path / "l.idx").write_bytes(labels)
    return tmp_path / "i.idx", tmp_path / "l.idx"


class TestIdx:
    def test_single_image_round_trip(self, tmp_path, rng):
        split = DatasetSplit(rng.integers(0, 256, (1, 1, 28, 28), dtype=np.uint8), np.array([5]), "train", 10)
        parsed = D.parse_mnist_idx(*idx_pair(tmp_path, split))
        assert parsed.images.tobytes() == split.images.tobytes() and parsed.labels.tolist() == [5]

    def test_header_layout(self, tmp_path, rng):
        split = DatasetSplit(np.zeros((2, 1, 3, 4), np.uint8), np.array([1, 2]), "train", 10)
        ipath, lpath = idx_pair(tmp_path, split)
        assert struct.unpack(">IIII", ipath.read_bytes()[:16]) == (0x803, 2, 3, 4)
        assert struct.unpack(">II", lpath.read_bytes()[:8]) == (0x801, 2)

    def test_swapped_files(self, tmp_path, rng):
        split = DatasetSplit(np.zeros((2, 1, 3, 3), np.uint8), np.array([1, 2]), "train", 10)
        ipath, lpath = idx_pair(tmp_path, split)
        with pytest.raises(DataParseError, match="magic"):
            D.parse_mnist_idx(lpath, ipath)

    def test_count_mismatch(self, tmp_path):
        split = DatasetSplit(np.zeros((2, 1, 3, 3), np.uint8), np.array([1, 2]), "train", 10)
        ipath, lpath = idx_pair(tmp_path, split)
        lpath.write_bytes(struct.pack(">II", 0x801, 3) + b"\x01\x02\x03")
        with pytest.raises(DataParseError, match="2 images but 3 labels"):
            D.parse_mnist_idx(ipath, lpath)

    def test_truncated_images(self, tmp_path):
        split = DatasetSplit(np.zeros((2, 1, 3, 3), np.uint8), np.array([1, 2]), "train", 10)
        ipath, lpath = idx_pair(tmp_path, split)
        ipath.write_bytes(ipath.read_bytes()[:-1])
        with pytest.raises(DataParseError):
            D.parse_mnist_idx(ipath, lpath)

    def test_fuzz(self, tmp_path, rng):
        split = DatasetSplit(rng.integers(0, 256, (3, 1, 4, 4), dtype=np.uint8), np.array([0, 4, 9]), "t", 10)
        images, labels = D.serialize_idx(split)
        for _ in range(300):
            bufs = []
            for blob in (images, labels):
                b = bytearray(blob[:rng.integers(0, len(blob) + 1)])
                if b and rng.random() < 0.5:
                    b[rng.integers(0, len(b))] = rng.integers(0, 256)
                bufs.append(bytes(b))
            (tmp_path / "i.idx").write_bytes(bufs[0])
            (tmp_path / "l.idx").write_bytes(bufs[1])
            try:
                D.parse_mnist_idx(tmp_path / "i.idx", tmp_path / "l.idx")
            except DataParseError:
                pass


class TestAugment:
    def test_flip_involution(self, rng):
        img = rng.random((3, 8, 8))
        once = D.augment(img, rng, flip=True, offset=(4, 4))
        np.testing.assert_array_equal(D.augment(once, rng, flip=True, offset=(4, 4)), img)

    def test_centre_crop_identity(self, rng):
        img = rng.random((3, 8, 8))
        np.testing.assert_array_equal(D.augment(img, rng, flip=False, offset=(4, 4)), img)

    def test_flip_preserves_mean(self, rng):
        img = rng.random((3, 32, 32))
        assert D.hflip(img).sum() == img[..., ::-1].sum()

    def test_crop_mean_within_five_percent(self, rng):
        ratios = []
        for _ in range(1000):
            img = rng.random((3, 32, 32))
            ratios.append(D.augment(img, rng).mean() / img.mean())
        assert np.all(np.abs(np.array(ratios) - 1) <= 0.05)

    def test_shape_preserved(self, rng):
        imgs = rng.random((5, 3, 12, 12)).astype(np.float32)
        out = D.augment_batch(imgs, rng)
        assert out.shape == imgs.shape and out.dtype == imgs.dtype

    def test_batch_matches_single(self):
        imgs = np.random.default_rng(0).random((4, 3, 8, 8))
        out = D.augment_batch(imgs, np.random.default_rng(9))
        r = np.random.default_rng(9)
        flips = r.random(4) < 0.5
        offsets = r.integers(0, 9, size=(4, 2))
        for i in range(4):
            np.testing.assert_array_equal(out[i], D.augment(imgs[i], None, flip=flips[i], offset=offsets[i]))


class TestNormalize:
    def test_identity_stats(self, rng):
        img = rng.random((3, 4, 4))
        np.testing.assert_array_equal(D.normalize(img, [0, 0, 0], [1, 1, 1]), img)

    def test_constant_image(self):
        out = D.normalize(np.full((3, 2, 2), 0.5), [0.1, 0.2, 0.3], [0.5, 0.5, 0.5])
        for c in range(3):
            assert np.unique(out[c]).size == 1

    def test_round_trip(self, rng):
        img = rng.random((2, 3, 5, 5))
        mean, std = rng.random(3), rng.uniform(0.1, 1, 3)
        np.testing.assert_allclose(D.denormalize(D.normalize(img, mean, std), mean, std), img, atol=1e-6)

    def test_rejects_zero_std(self):
        with pytest.raises(ValueError):
            D.normalize(np.zeros((1, 2, 2)), [0], [0])

    def test_channel_stats(self, rng):
        split = DatasetSplit(rng.integers(0, 256, (6, 3, 4, 4), dtype=np.uint8), np.zeros(6), "train", 10)
        mean, std = split.channel_stats()
        px = split.images.astype(np.float64) / 255
        np.testing.assert_allclose(mean, px.mean(axis=(0, 2, 3)), atol=1e-12)
        np.testing.assert_allclose(std, px.std(axis=(0, 2, 3)), atol=1e-9)


class TestSynthetic:
    def test_deterministic(self):
        a, b = D.synthetic_shapes(10, seed=3), D.synthetic_shapes(10, seed=3)
        assert a.images.tobytes() == b.images.tobytes()

    def test_labels_in_range(self):
        s = D.synthetic_shapes(50, seed=1, num_classes=4, size=16)
        assert s.labels.max() < 4 and s.image_shape == (3, 16, 16)
