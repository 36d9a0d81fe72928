import struct

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from conftest import TINY, TINY_GAP, random_model
from services.errors import ArtifactFormatError, DatasetValidationError
from services.file_processor import (
    crc32_bytes,
    decode_dataset,
    decode_model,
    encode_dataset,
    encode_model,
    file_crc32,
    load_model,
    save_model,
)
from services.vit_net import parameter_shapes

DATASET_HEADER = 32


def _with_crc(body: bytes) -> bytes:
    return body + struct.pack("<I", crc32_bytes(body))


class TestModelFile:

    @pytest.mark.parametrize("config", [TINY, TINY_GAP])
    def test_decode_restores_model_exactly(self, config):
        model = random_model(config, seed=2)
        back = decode_model(encode_model(model))
        assert back.config == config
        for name in parameter_shapes(config):
            assert_array_equal(back[name], model[name])

    def test_encoding_is_deterministic(self, tiny_model):
        assert encode_model(tiny_model) == encode_model(tiny_model)

    def test_magic_and_trailer(self, tiny_model):
        data = encode_model(tiny_model)
        assert data[:4] == b"TGRV"
        assert struct.unpack("<I", data[-4:])[0] == crc32_bytes(data[:-4])

    def test_corruption_is_detected(self, tiny_model):
        data = bytearray(encode_model(tiny_model))
        data[100] ^= 0xFF
        with pytest.raises(ArtifactFormatError, match="checksum"):
            decode_model(bytes(data))

    def test_bad_magic(self, tiny_model):
        data = encode_model(tiny_model)
        with pytest.raises(ArtifactFormatError, match="magic"):
            decode_model(_with_crc(b"XXXX" + data[4:-4]))

    def test_truncated_body_reports_offset(self, tiny_model):
        body = encode_model(tiny_model)[:-4]
        with pytest.raises(ArtifactFormatError, match="byte offset"):
            decode_model(_with_crc(body[:-40]))

    def test_save_returns_file_crc(self, tiny_model, tmp_path):
        path = tmp_path / "m.tgrv"
        crc = save_model(tiny_model, path)
        assert crc == file_crc32(path)
        assert_array_equal(load_model(path)["head.weight"], tiny_model["head.weight"])

    def test_checksum_tells_models_apart(self, tmp_path):
        crcs = []
        for seed in (1, 2):
            path = tmp_path / f"m{seed}.tgrv"
            crcs.append(save_model(random_model(TINY, seed=seed), path))
            assert crcs[-1] == file_crc32(path) == struct.unpack("<I", path.read_bytes()[-4:])[0]
        assert crcs[0] != crcs[1]

    def test_other_files_use_whole_content(self, tmp_path):
        path = tmp_path / "notes.cfg"
        path.write_bytes(b"TGRVx")
        assert file_crc32(path) == crc32_bytes(b"TGRVx")


class TestDatasetFile:

    def _sample(self, n=3):
        rng = np.random.Generator(np.random.PCG64(0))
        return rng.uniform(size=(n, 2, 4, 4)), np.arange(n) % 3

    def test_decode_restores_dataset(self):
        images, labels = self._sample()
        got_images, got_labels, num_classes = decode_dataset(encode_dataset(images, labels, 3))
        assert_array_equal(got_images, images)
        assert_array_equal(got_labels, labels)
        assert num_classes == 3

    def test_empty_dataset(self):
        images, labels, k = decode_dataset(encode_dataset(np.zeros((0, 1, 2, 2)), np.zeros(0, dtype=int), 2))
        assert images.shape == (0, 1, 2, 2) and labels.shape == (0,) and k == 2

    def test_encode_rejects_bad_labels(self):
        images, _ = self._sample()
        with pytest.raises(DatasetValidationError):
            encode_dataset(images, np.array([0, 1, 3]), 3)

    def test_truncation_reports_offset(self):
        images, labels = self._sample()
        data = encode_dataset(images, labels, 3)
        with pytest.raises(ArtifactFormatError) as err:
            decode_dataset(data[:50])
        assert err.value.offset == DATASET_HEADER

    def test_label_overflow_reports_offset(self):
        images, labels = self._sample()
        body = bytearray(encode_dataset(images, labels, 3)[:-4])
        label_start = DATASET_HEADER + images.size * 8
        struct.pack_into("<H", body, label_start + 2, 7)
        with pytest.raises(DatasetValidationError, match=f"byte offset {label_start + 2}"):
            decode_dataset(_with_crc(bytes(body)))

    def test_checksum_mismatch(self):
        images, labels = self._sample()
        data = bytearray(encode_dataset(images, labels, 3))
        data[40] ^= 0x01
        with pytest.raises(ArtifactFormatError, match="checksum"):
            decode_dataset(bytes(data))
