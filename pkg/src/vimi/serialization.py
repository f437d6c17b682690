"""Little-endian binary framing shared by the on-disk formats.

Every file is: 9-byte magic, u32 version, payload, trailing u32 CRC32 of
all preceding bytes (zlib polynomial).
"""

from __future__ import annotations

import struct
import zlib


class CorruptFileError(Exception):
    """Magic, checksum, or structural mismatch while reading a framed file."""


class FrameWriter:
    """Accumulates a framed payload and finishes it with a CRC32 trailer."""

    def __init__(self, magic: bytes, version: int):
        if len(magic) != 9:
            raise ValueError(f"magic must be 9 bytes, got {len(magic)}")
        self._buf = bytearray(magic)
        self.write_u32(version)

    def write_u32(self, value: int) -> None:
        self._buf += struct.pack("<I", value)

    def write_u64(self, value: int) -> None:
        self._buf += struct.pack("<Q", value)

    def write_f64(self, value: float) -> None:
        self._buf += struct.pack("<d", value)

    def write_f32(self, value: float) -> None:
        self._buf += struct.pack("<f", value)

    def write_bytes(self, data: bytes) -> None:
        self._buf += data

    def write_str(self, text: str) -> None:
        raw = text.encode("utf-8")
        self.write_u32(len(raw))
        self._buf += raw

    def finish(self) -> bytes:
        """Return the complete frame, CRC32 trailer included."""
        crc = zlib.crc32(bytes(self._buf)) & 0xFFFFFFFF
        return bytes(self._buf) + struct.pack("<I", crc)


class FrameReader:
    """Validates magic/version/CRC up front, then reads fields in order."""

    def __init__(self, data: bytes, magic: bytes, expect_version: int | None = None):
        if len(data) < 9 + 4 + 4:
            raise CorruptFileError("file too short to be a valid frame")
        if data[:9] != magic:
            raise CorruptFileError(f"bad magic: expected {magic!r}, got {data[:9]!r}")
        (stored_crc,) = struct.unpack("<I", data[-4:])
        actual_crc = zlib.crc32(data[:-4]) & 0xFFFFFFFF
        if stored_crc != actual_crc:
            raise CorruptFileError(
                f"checksum mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}"
            )
        self._data = data[:-4]
        self._pos = 9
        self.version = self.read_u32()
        if expect_version is not None and self.version != expect_version:
            raise CorruptFileError(f"unsupported version {self.version}")

    def _take(self, n: int) -> bytes:
        if self._pos + n > len(self._data):
            raise CorruptFileError("truncated frame")
        out = self._data[self._pos : self._pos + n]
        self._pos += n
        return out

    def read_u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def read_u64(self) -> int:
        return struct.unpack("<Q", self._take(8))[0]

    def read_f64(self) -> float:
        return struct.unpack("<d", self._take(8))[0]

    def read_f32(self) -> float:
        return struct.unpack("<f", self._take(4))[0]

    def read_bytes(self, n: int) -> bytes:
        return self._take(n)

    def read_str(self) -> str:
        n = self.read_u32()
        return self._take(n).decode("utf-8")

    def at_end(self) -> bool:
        return self._pos == len(self._data)
