"""Binary container used for episode datasets and policy checkpoints.

Layout (all integers little-endian)::

    magic      4 bytes   b"PPD1" (episodes) or b"PPC1" (checkpoints)
    version    uint32
    hdr_len    uint32
    header     hdr_len bytes of UTF-8 JSON (sorted keys)
    payload    raw little-endian floats, dtype named in the header
    crc32      uint32 over every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1

EPISODE_MAGIC = b"PPD1"
CHECKPOINT_MAGIC = b"PPC1"


class StorageError(Exception):
    """Base class for container read failures."""


class VersionMismatchError(StorageError):
    pass


class TruncatedFileError(StorageError):
    pass


class ChecksumError(StorageError):
    pass


class BadMagicError(StorageError):
    pass


def dumps_header(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_container(path, magic: bytes, header: dict, arrays: list[np.ndarray], dtype: str = "<f4") -> None:
    header = dict(header, payload_dtype=dtype)
    hdr = dumps_header(header)
    body = bytearray()
    body += magic
    body += struct.pack("<II", FORMAT_VERSION, len(hdr))
    body += hdr
    for arr in arrays:
        body += np.ascontiguousarray(arr, dtype=dtype).tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(bytes(body))


def read_container(path, magic: bytes) -> tuple[dict, np.ndarray]:
    """Return (header, flat payload array). Raises a StorageError subclass on any defect."""
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes is shorter than the fixed preamble")
    if raw[:4] != magic:
        raise BadMagicError(f"{path}: expected magic {magic!r}, found {raw[:4]!r}")
    version, hdr_len = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: container version {version}, reader supports {FORMAT_VERSION}")
    if 12 + hdr_len + 4 > len(raw):
        raise TruncatedFileError(f"{path}: header runs past end of file")
    try:
        header = json.loads(raw[12 : 12 + hdr_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        # a damaged header is indistinguishable from a bit flip; report via checksum if it fails
        (stored,) = struct.unpack("<I", raw[-4:])
        if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != stored:
            raise ChecksumError(f"{path}: CRC32 mismatch") from exc
        raise StorageError(f"{path}: unreadable header") from exc
    dtype = np.dtype(header["payload_dtype"])
    expected = int(header["payload_count"]) * dtype.itemsize
    available = len(raw) - 12 - hdr_len - 4
    if available < expected:
        raise TruncatedFileError(f"{path}: payload has {available} bytes, header promises {expected}")
    if available > expected:
        raise StorageError(f"{path}: {available - expected} unexpected trailing bytes")
    (stored,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != stored:
        raise ChecksumError(f"{path}: CRC32 mismatch")
    payload = np.frombuffer(raw, dtype=dtype, count=int(header["payload_count"]), offset=12 + hdr_len)
    return header, payload.copy()
