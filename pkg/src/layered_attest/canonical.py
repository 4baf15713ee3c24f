"""Length-prefixed binary encoding shared by blobs, quotes and evidence bundles.

Every field is written as a 4-byte big-endian length followed by its bytes.
Integers are fixed-width big-endian, digests are their raw 32 bytes.
"""

from __future__ import annotations

import struct

from .digest_core import Digest

BLOB_MAGIC = b"ATB1"
BUNDLE_MAGIC = b"AEB1"


class DecodeError(ValueError):
    pass


class Writer:
    def __init__(self) -> None:
        self._parts: list[bytes] = []

    def raw(self, data: bytes) -> Writer:
        self._parts.append(struct.pack(">I", len(data)) + data)
        return self

    def text(self, s: str) -> Writer:
        return self.raw(s.encode("utf-8"))

    def u8(self, n: int) -> Writer:
        return self.raw(struct.pack(">B", n))

    def u32(self, n: int) -> Writer:
        return self.raw(struct.pack(">I", n))

    def digest(self, d: Digest) -> Writer:
        return self.raw(d.value)

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    def __init__(self, data: bytes) -> None:
        self._data = data
        self._pos = 0

    def raw(self) -> bytes:
        if self._pos + 4 > len(self._data):
            raise DecodeError("truncated length prefix")
        (n,) = struct.unpack_from(">I", self._data, self._pos)
        start = self._pos + 4
        if start + n > len(self._data):
            raise DecodeError("truncated field")
        self._pos = start + n
        return self._data[start : start + n]

    def text(self) -> str:
        try:
            return self.raw().decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError("field is not UTF-8") from exc

    def u8(self) -> int:
        b = self.raw()
        if len(b) != 1:
            raise DecodeError("bad u8 width")
        return b[0]

    def u32(self) -> int:
        b = self.raw()
        if len(b) != 4:
            raise DecodeError("bad u32 width")
        return struct.unpack(">I", b)[0]

    def digest(self) -> Digest:
        b = self.raw()
        if len(b) != 32:
            raise DecodeError("bad digest width")
        return Digest(b)

    def at_end(self) -> bool:
        return self._pos == len(self._data)

    def expect_end(self) -> None:
        if not self.at_end():
            raise DecodeError("trailing bytes")


def strip_magic(data: bytes, magic: bytes) -> bytes:
    if data[: len(magic)] != magic:
        raise DecodeError(f"missing magic {magic!r}")
    return data[len(magic) :]
