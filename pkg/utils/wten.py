"""
WTEN tensor container
magic "WTEN", u16 version, u32 count, then per tensor:
u16 name length, UTF-8 name, u8 dtype (0 = f32), u8 ndim, ndim x u32 dims,
little-endian f32 payload
"""

import struct
from typing import Dict, Mapping

import numpy as np

MAGIC = b"WTEN"
VERSION = 1
DTYPE_F32 = 0


class WtenFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<HI", VERSION, len(tensors))]
    for name, array in tensors.items():
        array = np.ascontiguousarray(array, dtype="<f4")
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<BB", DTYPE_F32, array.ndim))
        chunks.append(np.asarray(array.shape, dtype="<u4").tobytes())
        chunks.append(array.tobytes())
    return b"".join(chunks)


def _take(buffer: bytes, offset: int, count: int, what: str) -> bytes:
    if offset + count > len(buffer):
        raise WtenFormatError(f"truncated file while reading {what} ({count} bytes needed)", offset)
    return buffer[offset:offset + count]


def decode(buffer: bytes) -> Dict[str, np.ndarray]:
    if _take(buffer, 0, 4, "magic") != MAGIC:
        raise WtenFormatError(f"bad magic {buffer[:4]!r}", 0)
    version, count = struct.unpack("<HI", _take(buffer, 4, 6, "header"))
    if version != VERSION:
        raise WtenFormatError(f"unsupported version {version}", 4)

    tensors: Dict[str, np.ndarray] = {}
    offset = 10
    for _ in range(count):
        (name_len,) = struct.unpack("<H", _take(buffer, offset, 2, "name length"))
        offset += 2
        try:
            name = _take(buffer, offset, name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise WtenFormatError("tensor name is not valid UTF-8", offset)
        offset += name_len
        dtype, ndim = struct.unpack("<BB", _take(buffer, offset, 2, "dtype/ndim"))
        if dtype != DTYPE_F32:
            raise WtenFormatError(f"unknown dtype code {dtype} for '{name}'", offset)
        offset += 2
        dims = np.frombuffer(_take(buffer, offset, 4 * ndim, "dims"), dtype="<u4")
        if np.any(dims == 0):
            raise WtenFormatError(f"zero-sized dimension {tuple(dims)} for '{name}'", offset)
        offset += 4 * ndim
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        payload = _take(buffer, offset, nbytes, f"payload of '{name}'")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(tuple(int(d) for d in dims)).copy()
        offset += nbytes
    if offset != len(buffer):
        raise WtenFormatError(f"{len(buffer) - offset} trailing bytes after {count} tensors", offset)
    return tensors


def write_wten(path, tensors: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(encode(tensors))


def read_wten(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as f:
        return decode(f.read())
