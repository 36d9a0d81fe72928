"""Binary artifact codecs for trained models (``TGRV``) and datasets (``TGRD``).

Model file, all integers little-endian::

    b"TGRV"  u32 version
    u32 image_size, patch_size, in_channels, embed_dim, num_heads, depth,
        num_classes, use_class_token   f64 mlp_ratio
    u32 parameter count
    per parameter (canonical order of vit_net.parameter_shapes):
        u32 name length, UTF-8 name, u32 rank, u64 dims[rank], f64 payload
    u32 CRC32 of every preceding byte

Dataset file::

    b"TGRD"  u32 version  u64 num_images  u32 C, H, W  u32 num_classes
    f64 pixels (num_images x C x H x W)   u16 labels (num_images)
    u32 CRC32 of every preceding byte
"""
import logging
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from services.errors import ArtifactFormatError, DatasetValidationError
from services.vit_net import ViTConfig, ViTModel, parameter_shapes

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"TGRV"
DATASET_MAGIC = b"TGRD"
FORMAT_VERSION = 1

_CONFIG_INTS = ("image_size", "patch_size", "in_channels", "embed_dim", "num_heads", "depth", "num_classes")


def crc32_bytes(payload: bytes) -> int:
    return zlib.crc32(payload) & 0xFFFFFFFF


def artifact_crc32(payload: bytes) -> int:
    """Checksum that tells artifacts apart.

    TGRV and TGRD files end in the CRC32 of their body, and the CRC32 of a body
    followed by its own CRC32 is one constant for every file. Those files report
    the stored body checksum; anything else reports the CRC32 of all its bytes.
    """
    if len(payload) >= 8 and payload[:4] in (MODEL_MAGIC, DATASET_MAGIC):
        return crc32_bytes(payload[:-4])
    return crc32_bytes(payload)


def file_crc32(path) -> int:
    return artifact_crc32(Path(path).read_bytes())


class _Reader:
    """Cursor over a byte buffer that reports truncation with the byte offset"""

    def __init__(self, data: bytes, what: str):
        self.data = data
        self.what = what
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise ArtifactFormatError(f"truncated {self.what}: need {n} more bytes", offset=self.offset)
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def array(self, dtype: str, count: int):
        raw = self.take(np.dtype(dtype).itemsize * count)
        return np.frombuffer(raw, dtype=dtype, count=count)


def _split_checksum(data: bytes, what: str) -> bytes:
    if len(data) < 4:
        raise ArtifactFormatError(f"truncated {what}: missing checksum", offset=len(data))
    body, (stored,) = data[:-4], struct.unpack("<I", data[-4:])
    actual = crc32_bytes(body)
    if stored != actual:
        raise ArtifactFormatError(f"{what} checksum mismatch: stored {stored:08x}, computed {actual:08x}",
                                  offset=len(body))
    return body


def _check_magic(reader: _Reader, magic: bytes):
    found = reader.take(4)
    if found != magic:
        raise ArtifactFormatError(f"bad magic {found!r}, expected {magic!r}", offset=0)
    (version,) = reader.unpack("I")
    if version != FORMAT_VERSION:
        raise ArtifactFormatError(f"unsupported {reader.what} version {version}", offset=4)


def write_atomic(path, payload: bytes):
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def encode_model(model: ViTModel) -> bytes:
    cfg = model.config
    parts = [MODEL_MAGIC, struct.pack("<I", FORMAT_VERSION)]
    parts.append(struct.pack("<" + "I" * len(_CONFIG_INTS), *(getattr(cfg, n) for n in _CONFIG_INTS)))
    parts.append(struct.pack("<Id", int(cfg.use_class_token), cfg.mlp_ratio))
    params = model.parameters
    parts.append(struct.pack("<I", len(params)))
    for name, shape in parameter_shapes(cfg).items():
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", len(shape)))
        parts.append(struct.pack("<" + "Q" * len(shape), *shape))
        parts.append(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", crc32_bytes(body))


def decode_model(data: bytes) -> ViTModel:
    body = _split_checksum(data, "model file")
    reader = _Reader(body, "model file")
    _check_magic(reader, MODEL_MAGIC)
    ints = reader.unpack("I" * len(_CONFIG_INTS))
    use_cls, mlp_ratio = reader.unpack("Id")
    config = ViTConfig(**dict(zip(_CONFIG_INTS, ints)), mlp_ratio=mlp_ratio, use_class_token=bool(use_cls))
    expected = parameter_shapes(config)
    (count,) = reader.unpack("I")
    if count != len(expected):
        raise ArtifactFormatError(f"model declares {count} parameters, config needs {len(expected)}",
                                  offset=reader.offset - 4)
    params = {}
    for expected_name, expected_shape in expected.items():
        start = reader.offset
        (name_len,) = reader.unpack("I")
        name = reader.take(name_len).decode("utf-8")
        (rank,) = reader.unpack("I")
        shape = reader.unpack("Q" * rank)
        if name != expected_name or tuple(shape) != expected_shape:
            raise ArtifactFormatError(
                f"parameter {name} {tuple(shape)} where {expected_name} {expected_shape} was expected",
                offset=start,
            )
        params[name] = reader.array("<f8", int(np.prod(shape, dtype=np.int64))).reshape(shape)
    if reader.offset != len(body):
        raise ArtifactFormatError("trailing bytes after parameters", offset=reader.offset)
    return ViTModel(config, params)


def save_model(model: ViTModel, path) -> int:
    """Write the model file; returns its body CRC32"""
    payload = encode_model(model)
    write_atomic(path, payload)
    logger.info(f"Saved model {model!r} to {path}")
    return artifact_crc32(payload)


def load_model(path) -> ViTModel:
    model = decode_model(Path(path).read_bytes())
    logger.info(f"Loaded model {model!r} from {path}")
    return model


def encode_dataset(images, labels, num_classes: int) -> bytes:
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if images.ndim != 4:
        raise DatasetValidationError(f"images must be N x C x H x W, got shape {images.shape}")
    n, c, h, w = images.shape
    if labels.shape != (n,):
        raise DatasetValidationError(f"{labels.shape[0] if labels.ndim else 0} labels for {n} images")
    if not 0 < num_classes <= 0xFFFF:
        raise DatasetValidationError(f"num_classes {num_classes} does not fit the u16 label encoding")
    if n and (labels.min() < 0 or labels.max() >= num_classes):
        raise DatasetValidationError(f"labels must lie in 0..{num_classes - 1}")
    body = b"".join([
        DATASET_MAGIC,
        struct.pack("<IQIIII", FORMAT_VERSION, n, c, h, w, num_classes),
        np.ascontiguousarray(images, dtype="<f8").tobytes(),
        np.ascontiguousarray(labels, dtype="<u2").tobytes(),
    ])
    return body + struct.pack("<I", crc32_bytes(body))


def decode_dataset(data: bytes):
    """Parse dataset bytes into (images, labels, num_classes)"""
    reader = _Reader(data, "dataset file")
    _check_magic(reader, DATASET_MAGIC)
    n, c, h, w, num_classes = reader.unpack("QIIII")
    images = reader.array("<f8", n * c * h * w).reshape(n, c, h, w)
    label_offset = reader.offset
    labels = reader.array("<u2", n).astype(np.int64)
    reader.take(4)
    if reader.offset != len(data):
        raise ArtifactFormatError("trailing bytes after checksum", offset=reader.offset)
    _split_checksum(data, "dataset file")
    if n and int(labels.max()) >= num_classes:
        bad = int(np.argmax(labels >= num_classes))
        raise DatasetValidationError(
            f"label {int(labels[bad])} of image {bad} is not below num_classes {num_classes} "
            f"(byte offset {label_offset + 2 * bad})"
        )
    return np.array(images), labels, int(num_classes)
