"""MWDS 資料集容器與 PPM 匯出"""

import struct

import numpy as np
import pytest

from app.core.exceptions import DatasetIOError
from app.services.dataset_store import dataset_store, filter_split, read_ppm, write_ppm
from app.services.weather_synth import make_dataset, make_hybrid_set


class TestContainer:
    def test_header_and_first_sample_layout(self, tiny_dataset):
        blob = dataset_store.encode(tiny_dataset[:2])
        assert blob[:4] == b"MWDS"
        assert struct.unpack_from("<IQ", blob, 4) == (1, 2)
        seed, mask, severity, split = struct.unpack_from("<QBfB", blob, 16)
        first = tiny_dataset[0]
        assert seed == first.seed
        assert mask == 1 << first.label
        assert severity == pytest.approx(first.severity)
        assert split == {"train": 0, "val": 1, "test": 2}[first.split]
        ndim, = struct.unpack_from("<B", blob, 16 + 14)
        assert ndim == 3
        assert struct.unpack_from("<3Q", blob, 16 + 15) == first.clean.shape

    def test_decode_restores_samples(self, tiny_dataset):
        decoded = dataset_store.decode(dataset_store.encode(tiny_dataset))
        assert len(decoded) == len(tiny_dataset)
        for a, b in zip(decoded, tiny_dataset):
            assert (a.seed, a.classes, a.split) == (b.seed, b.classes, b.split)
            np.testing.assert_array_equal(a.degraded, b.degraded)

    def test_same_seed_gives_byte_identical_file(self, tiny_config, tmp_path):
        first = dataset_store.write(tmp_path / "a.mwds", make_dataset(tiny_config.data, show_progress=False))
        second = dataset_store.write(tmp_path / "b.mwds", make_dataset(tiny_config.data, show_progress=False))
        assert first.read_bytes() == second.read_bytes()

    def test_hybrid_classes_decode_in_ascending_order(self):
        hybrids = make_hybrid_set(2, 16, 16, seed=3)
        decoded = dataset_store.decode(dataset_store.encode(hybrids))
        assert [s.classes for s in decoded] == [[1, 2], [1, 2]]

    def test_bad_magic(self, tiny_dataset):
        blob = bytearray(dataset_store.encode(tiny_dataset[:1]))
        blob[:4] = b"XXXX"
        with pytest.raises(DatasetIOError, match="MWDS"):
            dataset_store.decode(bytes(blob))

    def test_truncated_and_trailing(self, tiny_dataset):
        blob = dataset_store.encode(tiny_dataset[:1])
        with pytest.raises(DatasetIOError, match="截斷"):
            dataset_store.decode(blob[:-5])
        with pytest.raises(DatasetIOError):
            dataset_store.decode(blob + b"\x00")

    def test_io_error_names_path(self, tmp_path):
        missing = tmp_path / "nope.mwds"
        with pytest.raises(DatasetIOError, match="nope.mwds"):
            dataset_store.read(missing)
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(DatasetIOError, match="file"):
            dataset_store.write(blocker / "sub" / "set.mwds", [])

    def test_filter_split(self, tiny_dataset):
        assert len(filter_split(tiny_dataset, "test")) == 3
        assert len(filter_split(tiny_dataset, None)) == 30


class TestPPM:
    def test_write_then_read_is_8bit_quantized(self, tmp_path, rng):
        image = rng.uniform(size=(3, 5, 7)).astype(np.float32)
        path = write_ppm(tmp_path / "img.ppm", image)
        assert path.read_bytes().startswith(b"P6\n7 5\n255\n")
        back = read_ppm(path)
        assert back.shape == (3, 5, 7)
        assert np.abs(back - image).max() <= 0.5 / 255 + 1e-6

    def test_comment_in_header(self, tmp_path):
        path = tmp_path / "c.ppm"
        path.write_bytes(b"P6\n# made by hand\n1 1\n255\n" + bytes([255, 0, 128]))
        np.testing.assert_allclose(read_ppm(path)[:, 0, 0], [1.0, 0.0, 128 / 255])

    def test_rejects_other_formats(self, tmp_path):
        path = tmp_path / "p3.ppm"
        path.write_bytes(b"P3\n1 1\n255\n0 0 0\n")
        with pytest.raises(DatasetIOError):
            read_ppm(path)

    def test_rejects_non_rgb(self, tmp_path):
        with pytest.raises(DatasetIOError):
            write_ppm(tmp_path / "g.ppm", np.zeros((1, 4, 4)))
