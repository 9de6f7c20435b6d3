"""MSB-first bit packing.

``BitWriter``/``BitReader`` handle one field at a time.  ``pack_bits`` and
``unpack_fixed`` do the same job for whole numpy arrays of codes: every code
is placed at its bit offset inside big-endian 64-bit words, which keeps the
codecs vectorised.  Both produce the same byte layout, zero-padded to a
whole byte.
"""

from __future__ import annotations

import numpy as np

from .errors import EndOfStream

_U64 = np.uint64
_CHUNK = 1 << 20


class BitWriter:
    def __init__(self) -> None:
        self._buf = bytearray()
        self._acc = 0
        self._nacc = 0
        self.bit_length = 0

    def write_bits(self, value: int, width: int) -> None:
        if not 1 <= width <= 64:
            raise ValueError(f"width must be in 1..64, got {width}")
        if value < 0 or value >> width:
            raise ValueError(f"value {value} does not fit in {width} bits")
        self._acc = (self._acc << width) | value
        self._nacc += width
        self.bit_length += width
        if self._nacc >= 64:
            nbytes, rem = divmod(self._nacc, 8)
            self._buf += (self._acc >> rem).to_bytes(nbytes, "big")
            self._acc &= (1 << rem) - 1
            self._nacc = rem

    def getvalue(self) -> bytes:
        """Bytes written so far; the last byte is padded with zero bits."""
        tail = b""
        if self._nacc:
            pad = -self._nacc % 8
            tail = (self._acc << pad).to_bytes((self._nacc + pad) // 8, "big")
        return bytes(self._buf) + tail


class BitReader:
    def __init__(self, data: bytes, bit_length: int | None = None, start: int = 0) -> None:
        self._data = bytes(data)
        self.limit = 8 * len(self._data) if bit_length is None else bit_length
        if self.limit > 8 * len(self._data):
            raise ValueError("bit_length exceeds buffer")
        self.pos = start

    @property
    def remaining(self) -> int:
        return self.limit - self.pos

    def read_bits(self, width: int) -> int:
        if not 1 <= width <= 64:
            raise ValueError(f"width must be in 1..64, got {width}")
        end = self.pos + width
        if end > self.limit:
            raise EndOfStream(f"need {width} bits at bit {self.pos}, only {self.remaining} left")
        lo, hi = self.pos >> 3, (end + 7) >> 3
        word = int.from_bytes(self._data[lo:hi], "big")
        self.pos = end
        return (word >> (8 * hi - end)) & ((1 << width) - 1)


def _as_words(data: bytes) -> np.ndarray:
    """Big-endian 64-bit words of ``data`` with one spare zero word at the end."""
    padded = bytes(data) + bytes(-len(data) % 8 + 8)
    return np.frombuffer(padded, dtype=">u8").astype(_U64)


def pack_bits(values: np.ndarray, widths) -> tuple[bytes, int]:
    """Concatenate ``values[i]`` written in ``widths[i]`` bits each (MSB first).

    ``widths`` is a scalar or an array matching ``values``; every width must
    be in 1..64 and every value must fit.  Returns the padded bytes and the
    logical bit length.
    """
    values = np.asarray(values, dtype=_U64).ravel()
    n = values.size
    if np.ndim(widths) == 0 and int(widths) % 8 == 0 and 8 <= int(widths) <= 64:
        nb = int(widths) // 8
        return values.astype(">u8").view(np.uint8).reshape(-1, 8)[:, 8 - nb :].tobytes(), n * 8 * nb
    w = np.broadcast_to(np.asarray(widths, dtype=np.int64), (n,))
    if n and (w.min() < 1 or w.max() > 64):
        raise ValueError("widths must be in 1..64")
    ends = np.cumsum(w)
    total = int(ends[-1]) if n else 0
    words = np.zeros(total // 64 + 2, dtype=_U64)
    for lo in range(0, n, _CHUNK):
        hi = min(n, lo + _CHUNK)
        v = values[lo:hi]
        ww = w[lo:hi]
        end = ends[lo:hi]
        start = end - ww
        idx = start >> 6
        within = start & 63
        spill = within + ww - 64  # > 0 when the code crosses into the next word
        fits = spill <= 0
        head = np.where(fits, v << np.where(fits, -spill, 0).astype(_U64), v >> np.where(fits, 0, spill).astype(_U64))
        _or_sorted(words, idx, head)
        sp = ~fits
        if sp.any():
            tail = v[sp] << (64 - spill[sp]).astype(_U64)
            _or_sorted(words, idx[sp] + 1, tail)
    data = words.astype(">u8").tobytes()[: (total + 7) // 8]
    return data, total


def _or_sorted(words: np.ndarray, idx: np.ndarray, parts: np.ndarray) -> None:
    # parts never share bits, so summing within a word is the same as OR-ing
    if idx.size == 0:
        return
    first = np.flatnonzero(np.r_[True, idx[1:] != idx[:-1]])
    words[idx[first]] |= np.add.reduceat(parts, first)


def unpack_fixed(data: bytes, count: int, width: int, start_bit: int = 0) -> np.ndarray:
    """Read ``count`` codes of ``width`` bits starting at ``start_bit``."""
    if not 1 <= width <= 64:
        raise ValueError("width must be in 1..64")
    if start_bit + count * width > 8 * len(data):
        raise EndOfStream(f"{count} x {width}-bit codes need more than {len(data)} bytes")
    out = np.empty(count, dtype=_U64)
    if count == 0:
        return out
    if width % 8 == 0 and start_bit % 8 == 0:
        nb = width // 8
        raw = np.frombuffer(data, dtype=np.uint8, count=count * nb, offset=start_bit // 8).reshape(count, nb)
        wide = np.zeros((count, 8), dtype=np.uint8)
        wide[:, 8 - nb :] = raw
        return wide.view(">u8").ravel().astype(_U64)
    words = _as_words(data)
    for lo in range(0, count, _CHUNK):
        hi = min(count, lo + _CHUNK)
        start = start_bit + np.arange(lo, hi, dtype=np.int64) * width
        out[lo:hi] = read_fields(words, start, width)
    return out


def read_fields(words: np.ndarray, start: np.ndarray, width) -> np.ndarray:
    """Vectorised field extraction from words produced by :func:`_as_words`."""
    width = np.asarray(width, dtype=np.int64)
    idx = start >> 6
    within = (start & 63).astype(_U64)
    w = np.broadcast_to(width, start.shape).astype(_U64)
    first = words[idx] << within  # left-align the field
    second = np.where(within > 0, words[idx + 1] >> (np.uint64(64) - np.maximum(within, np.uint64(1))), np.uint64(0))
    aligned = first | second
    return np.where(w == 64, aligned, aligned >> (np.uint64(64) - np.minimum(w, np.uint64(63))))


def unpack_bits(data: bytes, bit_length: int) -> np.ndarray:
    """Individual bits as a ``uint8`` array of 0/1."""
    return np.unpackbits(np.frombuffer(data, dtype=np.uint8), count=bit_length)
