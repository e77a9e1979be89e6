"""EPDS: a small checksummed container for named float64 arrays.

Layout (little-endian)::

    b"EPDS"  u32 version
    u32 meta_len  meta_json[meta_len]  u32 crc32(meta_json)
    records until end of file:
        u32 name_len  name[name_len]  u32 rank  u64 dims[rank]
        f64 data[prod(dims)]
        u32 crc32(record bytes from name_len through data)

Metadata is JSON with sorted keys, so identical content gives identical
bytes. There is no record count: every byte after the header belongs to a
checksummed record, so any single corrupted byte is detected.
"""
from __future__ import annotations

import json
import math
import struct
import zlib

import numpy as np

from .exceptions import BadMagic, ChecksumMismatch, TruncatedFile, VersionMismatch

MAGIC = b"EPDS"
VERSION = 1


def encode(meta: dict, arrays: dict) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<I", VERSION)
    mb = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out += struct.pack("<I", len(mb)) + mb + struct.pack("<I", zlib.crc32(mb))
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        rec = struct.pack("<I", len(nb)) + nb + struct.pack("<I", arr.ndim)
        rec += struct.pack(f"<{arr.ndim}Q", *arr.shape) + arr.tobytes()
        out += rec + struct.pack("<I", zlib.crc32(rec))
    return bytes(out)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise TruncatedFile(f"file ends inside {what} at byte {self.pos}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def decode(buf: bytes, with_offsets: bool = False):
    """Parse a container; returns ``(meta, arrays)`` (plus record offsets)."""
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise BadMagic("not an EPDS file")
    version = r.u32("version")
    if version != VERSION:
        raise VersionMismatch(f"EPDS version {version}, expected {VERSION}")
    start = r.pos
    mlen = r.u32("metadata length")
    mb = r.take(mlen, "metadata")
    if r.u32("metadata checksum") != zlib.crc32(mb):
        raise ChecksumMismatch("metadata checksum mismatch", offset=start)
    meta = json.loads(mb.decode("utf-8"))
    arrays, offsets = {}, {}
    while r.pos < len(buf):
        start = r.pos
        nlen = r.u32("array name length")
        raw_name = r.take(nlen, "array name")
        rank = r.u32("array rank")
        shape = struct.unpack(f"<{rank}Q", r.take(8 * rank, "array dims"))
        data = r.take(8 * math.prod(shape), "array data")
        rec = buf[start:r.pos]
        if r.u32("array checksum") != zlib.crc32(rec):
            shown = raw_name[:64].decode("utf-8", errors="replace")
            raise ChecksumMismatch(f"array '{shown}' checksum mismatch", offset=start)
        name = raw_name.decode("utf-8")
        arrays[name] = np.frombuffer(data, dtype="<f8").reshape(shape).copy()
        offsets[name] = start
    if with_offsets:
        return meta, arrays, offsets
    return meta, arrays


def write(path, meta: dict, arrays: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(meta, arrays))


def read(path, with_offsets: bool = False):
    with open(path, "rb") as fh:
        return decode(fh.read(), with_offsets=with_offsets)
