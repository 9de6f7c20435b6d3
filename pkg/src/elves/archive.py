"""The ``.elvs`` container.

Layout (all integers little-endian)::

    "ELVS" | u16 format version | u8 backend id | u8 reserved
    index section
    payload sections ...

Every section is framed as ``u8 codec | u64 stored length | u64 raw length |
stored bytes | u32 CRC32C(stored bytes)``.  Codec 0 means the bytes are
stored as-is, codec 1 that the archive's backend compressed them; the
writer falls back to codec 0 whenever the backend does not shrink a
section.  The index is JSON describing models, layers and the offset of
every payload section relative to the end of the index section.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import crc32c

from .backends import Backend, get_backend
from .errors import CorruptionError

MAGIC = b"ELVS"
FORMAT_VERSION = 1
CODEC_STORED = 0
CODEC_BACKEND = 1

_FILE_HEADER = struct.Struct("<4sHBB")
_SECTION_HEAD = struct.Struct("<BQQ")
_CRC = struct.Struct("<I")
SECTION_OVERHEAD = _SECTION_HEAD.size + _CRC.size


def frame_section(raw: bytes, backend: Backend) -> bytes:
    raw = bytes(raw)
    codec, stored = CODEC_STORED, raw
    if backend.id != 0 and raw:
        packed = backend.compress(raw)
        if len(packed) < len(raw):
            codec, stored = CODEC_BACKEND, packed
    return b"".join([_SECTION_HEAD.pack(codec, len(stored), len(raw)), stored, _CRC.pack(crc32c.crc32c(stored))])


def unframe_section(framed: bytes, backend: Backend, where: str | None = None) -> bytes:
    if len(framed) < SECTION_OVERHEAD:
        raise CorruptionError("section frame truncated", where=where)
    codec, stored_len, raw_len = _SECTION_HEAD.unpack_from(framed, 0)
    if len(framed) != SECTION_OVERHEAD + stored_len:
        raise CorruptionError(
            f"section is {len(framed)} bytes, frame declares {SECTION_OVERHEAD + stored_len}", where=where
        )
    stored = framed[_SECTION_HEAD.size : _SECTION_HEAD.size + stored_len]
    (crc,) = _CRC.unpack_from(framed, _SECTION_HEAD.size + stored_len)
    if crc32c.crc32c(stored) != crc:
        raise CorruptionError("CRC32C mismatch", where=where)
    if codec == CODEC_STORED:
        raw = bytes(stored)
    elif codec == CODEC_BACKEND:
        try:
            raw = backend.decompress(bytes(stored))
        except Exception as e:
            raise CorruptionError(f"{backend.name} could not decode section: {e}", stage="final", where=where) from e
    else:
        raise CorruptionError(f"unknown section codec {codec}", where=where)
    if len(raw) != raw_len:
        raise CorruptionError(f"section decodes to {len(raw)} bytes, expected {raw_len}", where=where)
    return raw


class ArchiveWriter:
    """Single-writer archive builder.

    Payload sections are spooled to a temporary file next to the target;
    :meth:`finish` writes header and index, appends the payload and renames
    into place, so an interrupted run never leaves a partial archive.
    """

    def __init__(self, path: str | os.PathLike, backend: Backend):
        self.path = Path(path)
        self.backend = backend
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._spool = tempfile.TemporaryFile(dir=self.path.parent)
        self._offsets: list[tuple[int, int]] = []
        self._pos = 0

    def add(self, framed: bytes) -> int:
        self._spool.write(framed)
        self._offsets.append((self._pos, len(framed)))
        self._pos += len(framed)
        return len(self._offsets) - 1

    def finish(self, index: dict) -> int:
        index = dict(index, sections=self._offsets)
        head = _FILE_HEADER.pack(MAGIC, FORMAT_VERSION, self.backend.id, 0)
        framed_index = frame_section(json.dumps(index, separators=(",", ":")).encode(), self.backend)
        fd, tmp = tempfile.mkstemp(prefix=f".{self.path.name}.", suffix=".tmp", dir=self.path.parent)
        try:
            with os.fdopen(fd, "wb") as out:
                out.write(head)
                out.write(framed_index)
                self._spool.seek(0)
                while chunk := self._spool.read(1 << 24):
                    out.write(chunk)
            os.replace(tmp, self.path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        finally:
            self._spool.close()
        return len(head) + len(framed_index) + self._pos

    def abort(self) -> None:
        self._spool.close()


class ArchiveReader:
    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        self._f = open(self.path, "rb")
        self.size = os.fstat(self._f.fileno()).st_size
        head = self._f.read(_FILE_HEADER.size)
        if len(head) < _FILE_HEADER.size:
            raise CorruptionError("file header truncated", where="header")
        magic, version, backend_id, _ = _FILE_HEADER.unpack(head)
        if magic != MAGIC:
            raise CorruptionError("not an ELVS archive (bad magic)", where="header")
        if version != FORMAT_VERSION:
            raise CorruptionError(f"unsupported format version {version}", where="header")
        self.backend = get_backend(backend_id)
        framed = self._read_framed(_FILE_HEADER.size, "index")
        try:
            self.index = json.loads(unframe_section(framed, self.backend, "index"))
        except json.JSONDecodeError as e:
            raise CorruptionError(f"index is not JSON: {e}", where="index") from e
        self.payload_start = _FILE_HEADER.size + len(framed)

    def _read_framed(self, offset: int, where: str) -> bytes:
        self._f.seek(offset)
        head = self._f.read(_SECTION_HEAD.size)
        if len(head) < _SECTION_HEAD.size:
            raise CorruptionError("section header beyond end of archive", where=where)
        _, stored_len, _ = _SECTION_HEAD.unpack(head)
        rest = self._f.read(stored_len + _CRC.size)
        if len(rest) < stored_len + _CRC.size:
            raise CorruptionError("section truncated (archive ends early)", where=where)
        return head + rest

    def section(self, sid: int, where: str | None = None) -> bytes:
        where = where or f"section {sid}"
        try:
            offset, length = self.index["sections"][sid]
        except (IndexError, KeyError, TypeError, ValueError):
            raise CorruptionError(f"no section {sid} in index", where=where) from None
        start = self.payload_start + offset
        if start + length > self.size:
            raise CorruptionError(
                f"section {sid} needs bytes up to {start + length}, archive has {self.size}", where=where
            )
        framed = self._read_framed(start, where)
        if len(framed) != length:
            raise CorruptionError(f"section {sid} length disagrees with index", where=where)
        return unframe_section(framed, self.backend, where)

    def close(self) -> None:
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
