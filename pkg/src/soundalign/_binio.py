"""Little-endian binary reading with offset-aware errors, and atomic writes."""

from __future__ import annotations

import os
import struct
import tempfile

from .errors import FormatError


class Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated while reading {what}: need {n} bytes, "
                              f"{len(self.data) - self.pos} left", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def _unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))[0]

    def u8(self, what: str) -> int:
        return self._unpack("<B", what)

    def u16(self, what: str) -> int:
        return self._unpack("<H", what)

    def u32(self, what: str) -> int:
        return self._unpack("<I", what)

    def u64(self, what: str) -> int:
        return self._unpack("<Q", what)

    def at_end(self) -> bool:
        return self.pos == len(self.data)


def atomic_write(path, write_fn, mode: str = "wb") -> None:
    """Write via a temp file in the target directory, then rename over ``path``."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, mode) as f:
            write_fn(f)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
