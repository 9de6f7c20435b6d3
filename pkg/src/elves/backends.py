"""Pluggable lossless final stage.

Each backend has a stable one-byte id recorded in the archive header.
``store`` (identity) is always present; ``zstd`` is the default.
"""

from __future__ import annotations

import lzma
import zlib
from dataclasses import dataclass
from typing import Callable

from .errors import CorruptionError, UnsupportedBackendError

ZSTD_LEVEL = 3


@dataclass(frozen=True)
class Backend:
    name: str
    id: int
    compress: Callable[[bytes], bytes]
    decompress: Callable[[bytes], bytes]


def _zstd_pair():
    import zstandard

    def compress(data: bytes) -> bytes:
        return zstandard.ZstdCompressor(level=ZSTD_LEVEL).compress(data)

    def decompress(data: bytes) -> bytes:
        return zstandard.ZstdDecompressor().decompress(data)

    return compress, decompress


_FACTORIES: dict[str, tuple[int, Callable[[], tuple]]] = {
    "store": (0, lambda: (bytes, bytes)),
    "zlib": (1, lambda: (lambda d: zlib.compress(d, 6), zlib.decompress)),
    "lzma": (2, lambda: (lzma.compress, lzma.decompress)),
    "zstd": (3, _zstd_pair),
}
_BY_ID = {bid: name for name, (bid, _) in _FACTORIES.items()}
DEFAULT_BACKEND = "zstd"
_cache: dict[str, Backend] = {}


def available_backends() -> list[str]:
    out = []
    for name in _FACTORIES:
        try:
            get_backend(name)
        except UnsupportedBackendError:
            continue
        out.append(name)
    return out


def get_backend(key: str | int) -> Backend:
    """Look a backend up by name or archive id."""
    name = _BY_ID.get(key) if isinstance(key, int) else key
    if name not in _FACTORIES:
        raise UnsupportedBackendError(f"unknown final-stage backend {key!r}")
    if name not in _cache:
        bid, factory = _FACTORIES[name]
        try:
            compress, decompress = factory()
        except ImportError as e:
            raise UnsupportedBackendError(f"backend {name!r} unavailable: {e}") from e
        _cache[name] = Backend(name, bid, compress, decompress)
    return _cache[name]


def final_stage(data: bytes, backend: str | int = DEFAULT_BACKEND) -> bytes:
    return get_backend(backend).compress(bytes(data))


def final_stage_inverse(data: bytes, backend: str | int = DEFAULT_BACKEND) -> bytes:
    b = get_backend(backend)
    try:
        return b.decompress(bytes(data))
    except Exception as e:  # backend libraries raise their own error types
        raise CorruptionError(f"{b.name} could not decode section: {e}", stage="final") from e
