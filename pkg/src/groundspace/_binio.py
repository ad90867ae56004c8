"""Little-endian binary container shared by the GEMB/GPRJ/GSEQ formats.

Layout common to the family: a 4-byte magic, a u8 version, format-specific
header fields, a payload of packed little-endian floats, and a trailing u32
CRC32 of the payload. Everything is little-endian regardless of platform.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .errors import IoFailure, MalformedHeader, ShapeMismatch

F32_LE = np.dtype("<f4")
F64_LE = np.dtype("<f8")


def read_file(path) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc


def write_file(path, blob: bytes) -> None:
    try:
        with open(path, "wb") as fh:
            fh.write(blob)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def check_magic(blob: bytes, magic: bytes, path) -> None:
    if len(blob) < len(magic) or blob[: len(magic)] != magic:
        raise MalformedHeader(
            f"{path}: expected magic {magic!r} at byte offset 0, "
            f"found {blob[:len(magic)]!r}"
        )


def unpack_header(blob: bytes, fmt: str, offset: int, path) -> tuple:
    """Unpack a struct format at ``offset``, rejecting truncated files."""
    size = struct.calcsize(fmt)
    if len(blob) < offset + size:
        raise MalformedHeader(
            f"{path}: header truncated at byte offset {len(blob)} "
            f"(need {offset + size} bytes)"
        )
    return struct.unpack_from(fmt, blob, offset)


def check_payload(blob: bytes, offset: int, expected_len: int, path) -> bytes:
    """Validate payload length and trailing CRC32; return the payload bytes."""
    want = offset + expected_len + 4
    if len(blob) != want:
        raise ShapeMismatch(
            f"{path}: payload of {expected_len} bytes at offset {offset} plus "
            f"4-byte checksum implies file size {want}, actual {len(blob)}"
        )
    payload = blob[offset : offset + expected_len]
    (crc_stored,) = struct.unpack_from("<I", blob, offset + expected_len)
    crc_actual = zlib.crc32(payload) & 0xFFFFFFFF
    if crc_stored != crc_actual:
        raise MalformedHeader(
            f"{path}: CRC32 mismatch at byte offset {offset + expected_len} "
            f"(stored {crc_stored:#010x}, computed {crc_actual:#010x})"
        )
    return payload


def pack_tensors(tensors, dtype: np.dtype) -> bytes:
    """Concatenate tensors row-major as little-endian floats."""
    parts = [np.ascontiguousarray(t, dtype=dtype).tobytes() for t in tensors]
    return b"".join(parts)


def unpack_tensors(payload: bytes, shapes, dtype: np.dtype, path):
    """Split a payload into arrays of the given shapes. Inverse of pack_tensors."""
    itemsize = dtype.itemsize
    out = []
    offset = 0
    for shape in shapes:
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * itemsize
        if offset + nbytes > len(payload):
            raise ShapeMismatch(
                f"{path}: tensor of shape {tuple(shape)} overruns payload "
                f"at byte offset {offset}"
            )
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=offset)
        out.append(arr.reshape(shape).astype(dtype.newbyteorder("="), copy=True))
        offset += nbytes
    return out


def finish(header: bytes, payload: bytes) -> bytes:
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    return header + payload + struct.pack("<I", crc)
