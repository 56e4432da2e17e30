"""Binary tensor files for phase images and heatmaps.

Layout: 16-byte little-endian header (4-byte magic, u32 height, u32 width,
u32 dtype tag) followed by row-major float32 pixels. Phase images use the
``PHZ1`` magic and heatmaps ``HMP1``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

PHASE_MAGIC = b"PHZ1"
HEATMAP_MAGIC = b"HMP1"
DTYPE_FLOAT32 = 1

_HEADER = struct.Struct("<4sIII")
# float32 neighbours of +-pi that still satisfy -pi <= p < pi in float64.
_F32_PI_LOW = np.nextafter(np.float32(-np.pi), np.float32(0))
_F32_PI_HIGH = np.nextafter(np.float32(np.pi), np.float32(0))


class TensorFileError(ValueError):
    pass


def write_tensor(path: str | Path, array: np.ndarray, magic: bytes = PHASE_MAGIC) -> None:
    array = np.asarray(array)
    if magic == PHASE_MAGIC:
        array = np.clip(array.astype("<f4"), _F32_PI_LOW, _F32_PI_HIGH)
    array = array.astype("<f4")
    if array.ndim != 2:
        raise TensorFileError(f"expected a 2-D array, got shape {array.shape}")
    height, width = array.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(magic, height, width, DTYPE_FLOAT32))
        fh.write(np.ascontiguousarray(array).tobytes(order="C"))


def read_tensor(path: str | Path, magic: bytes | None = PHASE_MAGIC) -> np.ndarray:
    """Read a tensor file; ``magic=None`` accepts either known magic."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise TensorFileError(f"{path}: truncated header")
    file_magic, height, width, dtype = _HEADER.unpack_from(data)
    allowed = (PHASE_MAGIC, HEATMAP_MAGIC) if magic is None else (magic,)
    if file_magic not in allowed:
        raise TensorFileError(f"{path}: bad magic {file_magic!r}")
    if dtype != DTYPE_FLOAT32:
        raise TensorFileError(f"{path}: unsupported dtype tag {dtype}")
    expected = _HEADER.size + 4 * height * width
    if len(data) != expected:
        raise TensorFileError(f"{path}: expected {expected} bytes, found {len(data)}")
    pixels = np.frombuffer(data, dtype="<f4", offset=_HEADER.size)
    return pixels.reshape(height, width).astype(np.float32)


def write_heatmap(path: str | Path, heatmap: np.ndarray) -> None:
    write_tensor(path, heatmap, magic=HEATMAP_MAGIC)


def read_heatmap(path: str | Path) -> np.ndarray:
    return read_tensor(path, magic=HEATMAP_MAGIC)


def phase_to_uint8(pixels: np.ndarray) -> np.ndarray:
    scaled = (np.asarray(pixels, dtype=np.float64) + np.pi) / (2 * np.pi) * 255.0
    return np.clip(np.round(scaled), 0, 255).astype(np.uint8)


def write_preview(path: str | Path, pixels: np.ndarray) -> None:
    Image.fromarray(phase_to_uint8(pixels), mode="L").save(path, format="PNG")
