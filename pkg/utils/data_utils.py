"""Binary file formats (FLTL checkpoints, IDX datasets) and CSV output helpers."""

import logging
import struct
from pathlib import Path

import numpy as np

from autodiff import Layout, ParameterVector, Segment
from errors import DataFormatError, LayoutMismatchError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"FLTL"
CHECKPOINT_VERSION = 1
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


# FLTL checkpoints: little-endian throughout.
#   magic "FLTL" | version u32 | d u64 | segment count u32
#   per segment: name length u32 | UTF-8 name | offset u64 | rank u32 | dims u64 x rank
#   d float64 values


def encode_checkpoint(params: ParameterVector) -> bytes:
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<IQI", CHECKPOINT_VERSION, params.size, len(params.layout.segments)),
    ]
    for segment in params.layout.segments:
        name = segment.name.encode("utf-8")
        parts.append(struct.pack("<I", len(name)))
        parts.append(name)
        parts.append(struct.pack("<QI", segment.offset, len(segment.shape)))
        parts.append(struct.pack(f"<{len(segment.shape)}Q", *segment.shape))
    parts.append(params.values.astype("<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, payload, source):
        self.payload = payload
        self.source = source
        self.pos = 0

    def take(self, count):
        if self.pos + count > len(self.payload):
            raise DataFormatError(f"{self.source}: truncated at byte {self.pos}")
        chunk = self.payload[self.pos:self.pos + count]
        self.pos += count
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(payload: bytes, source="<bytes>") -> ParameterVector:
    reader = _Reader(payload, source)
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise DataFormatError(f"{source}: not a FLTL checkpoint")
    version, d, count = reader.unpack("<IQI")
    if version != CHECKPOINT_VERSION:
        raise DataFormatError(f"{source}: unsupported checkpoint version {version}")
    segments = []
    for _ in range(count):
        (name_length,) = reader.unpack("<I")
        try:
            name = reader.take(name_length).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DataFormatError(f"{source}: segment name is not UTF-8") from exc
        offset, rank = reader.unpack("<QI")
        dims = reader.unpack(f"<{rank}Q")
        segments.append(Segment(name, offset, tuple(dims)))
    try:
        layout = Layout(tuple(segments))
    except LayoutMismatchError as exc:
        raise DataFormatError(f"{source}: bad segment table: {exc}") from exc
    if layout.size != d:
        raise DataFormatError(f"{source}: segments cover {layout.size} values, header says {d}")
    values = np.frombuffer(reader.take(8 * d), dtype="<f8")
    if reader.pos != len(payload):
        raise DataFormatError(f"{source}: {len(payload) - reader.pos} trailing bytes")
    return ParameterVector(values.astype(np.float64), layout)


def save_checkpoint(path, params: ParameterVector) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(params))
    logger.debug("wrote checkpoint %s (d=%d)", path, params.size)
    return path


def load_checkpoint(path) -> ParameterVector:
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"checkpoint {path} does not exist")
    return decode_checkpoint(path.read_bytes(), source=str(path))


# IDX: big-endian magic (0x00000803 images, 0x00000801 labels), u32 dims, then unsigned bytes.


def _read_idx(path, magic, rank):
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"IDX file {path} does not exist")
    reader = _Reader(path.read_bytes(), str(path))
    (found,) = reader.unpack(">I")
    if found != magic:
        raise DataFormatError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = reader.unpack(f">{rank}I")
    count = int(np.prod(dims))
    data = np.frombuffer(reader.take(count), dtype=np.uint8).reshape(dims)
    return data


def read_idx_pair(images_path, labels_path):
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"{images.shape[0]} images in {images_path} but {labels.shape[0]} labels in {labels_path}"
        )
    return images, labels


def _as_bytes(values, what) -> np.ndarray:
    values = np.asarray(values)
    if values.size and (np.any(values < 0) or np.any(values > 255) or np.any(values != np.floor(values))):
        raise DataFormatError(f"IDX {what} must be integers in [0, 255]")
    return values.astype(np.uint8)


def write_idx_pair(images_path, labels_path, images, labels) -> None:
    images = _as_bytes(images, "pixels")
    labels = _as_bytes(labels, "labels")
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">4I", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, labels.shape[0]) + labels.tobytes())


def write_csv(frame, path) -> Path:
    """Write a DataFrame as CSV with shortest round-trip floats and empty NaN cells."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, na_rep="", lineterminator="\n")
    logger.info("wrote %s (%d rows)", path, len(frame))
    return path
