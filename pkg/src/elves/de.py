"""Distance encoding (DE): per-parameter length-distance dictionary coding.

The stream is split into a *distinct array* (parameters stored verbatim) and
a *distance bitmap*.  Every parameter contributes a flag bit to the bitmap:
``0`` means "next value of the distinct array", ``1`` is followed by a 5-bit
field ``L`` and an ``L``-bit back-distance ``D`` to the most recent earlier
parameter with the same bit pattern.  ``L`` is always the minimal bit length
of ``D``, so ``D`` ranges over 1 .. 2**31 - 1.

Wire layout: ``u32 param_count``, ``u64 bitmap bit length``, bitmap bytes
(zero padded), then the distinct array as raw little-endian values.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .bitstream import pack_bits, unpack_bits
from .errors import CorruptionError
from .model_store import F16, F32, F64, Dtype

L_BITS = 5
MAX_DISTANCE = (1 << 31) - 1
_HEADER = struct.Struct("<IQ")


@dataclass(frozen=True)
class LengthDistancePair:
    length: int
    distance: int

    @classmethod
    def for_distance(cls, distance: int) -> "LengthDistancePair":
        if not 1 <= distance <= MAX_DISTANCE:
            raise ValueError(f"distance {distance} outside 1..{MAX_DISTANCE}")
        return cls(distance.bit_length(), distance)

    @property
    def record(self) -> tuple[int, int]:
        """``(value, width)`` of the bitmap record: flag 1, L, then D."""
        width = 1 + L_BITS + self.length
        return (1 << (L_BITS + self.length)) | (self.length << self.length) | self.distance, width


@dataclass
class DeStream:
    dtype: Dtype
    param_count: int
    bitmap: bytes
    bitmap_bits: int
    distinct: bytes

    @property
    def distinct_count(self) -> int:
        return len(self.distinct) // self.dtype.itemsize

    @property
    def payload_bits(self) -> int:
        """Logical size: bitmap bits plus the distinct array, no header or padding."""
        return self.bitmap_bits + 8 * len(self.distinct)

    def to_bytes(self) -> bytes:
        return _HEADER.pack(self.param_count, self.bitmap_bits) + self.bitmap + self.distinct

    @classmethod
    def from_bytes(cls, data: bytes, dtype: Dtype, where: str | None = None) -> "DeStream":
        data = bytes(data)
        if len(data) < _HEADER.size:
            raise CorruptionError("stream header truncated", stage="de", where=where)
        count, nbits = _HEADER.unpack_from(data, 0)
        bm_end = _HEADER.size + (nbits + 7) // 8
        if bm_end > len(data):
            raise CorruptionError("bitmap truncated", stage="de", where=where)
        distinct = data[bm_end:]
        if len(distinct) % dtype.itemsize:
            raise CorruptionError("distinct array is not a whole number of values", stage="de", where=where)
        return cls(dtype, count, data[_HEADER.size : bm_end], nbits, distinct)


def _dtype_of(params: np.ndarray, dtype: Dtype | None) -> tuple[np.ndarray, Dtype]:
    if dtype is not None:
        return np.asarray(params, dtype=dtype.np_float).ravel(), dtype
    params = np.asarray(params).ravel()
    return params, {2: F16, 4: F32, 8: F64}[params.dtype.itemsize]


def back_references(bits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Distance to the most recent earlier equal element (0 where none).

    Returns ``(dup_mask, distance)``; occurrences more than
    :data:`MAX_DISTANCE` apart are not duplicates.
    """
    n = bits.size
    if bits.dtype.itemsize <= 4 and n < 1 << 32:
        # one uint64 key per element (pattern, position): a plain sort is
        # much faster than a stable argsort and yields the same order
        key = np.sort((bits.astype(np.uint64) << np.uint64(32)) | np.arange(n, dtype=np.uint64))
        order = (key & np.uint64(0xFFFFFFFF)).astype(np.int64)
        sorted_bits = key >> np.uint64(32)
    else:
        order = np.argsort(bits, kind="stable")
        sorted_bits = bits[order]
    same = sorted_bits[1:] == sorted_bits[:-1]
    prev = np.full(n, -1, dtype=np.int64)
    prev[order[1:][same]] = order[:-1][same]
    distance = np.arange(n, dtype=np.int64) - prev
    dup = (prev >= 0) & (distance <= MAX_DISTANCE)
    return dup, np.where(dup, distance, 0)


def bit_lengths(d: np.ndarray) -> np.ndarray:
    # frexp exponent equals the bit length for positive integers < 2**53
    return np.where(d > 0, np.frexp(d.astype(np.float64))[1], 0).astype(np.int64)


def de_compress(params: np.ndarray, dtype: Dtype | None = None) -> DeStream:
    params, dtype = _dtype_of(params, dtype)
    bits = params.view(dtype.np_uint)
    dup, dist = back_references(bits)
    lens = bit_lengths(dist)
    widths = np.where(dup, 1 + L_BITS + lens, 1)
    records = np.where(
        dup,
        (np.uint64(1) << (L_BITS + lens).astype(np.uint64)) | (lens.astype(np.uint64) << lens.astype(np.uint64))
        | dist.astype(np.uint64),
        np.uint64(0),
    )
    bitmap, nbits = pack_bits(records, widths)
    return DeStream(dtype, bits.size, bitmap, nbits, bits[~dup].tobytes())


def parse_bitmap(stream: DeStream, where: str | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Positions and distances of every duplicate record, in stream order."""
    n = stream.param_count
    nbits = stream.bitmap_bits
    data = stream.bitmap + bytes(8)
    ones = np.flatnonzero(unpack_bits(stream.bitmap, nbits))
    frombytes = int.from_bytes
    positions: list[int] = []
    distances: list[int] = []
    pos = rec = 0
    while rec < n:
        if pos < nbits and (data[pos >> 3] >> (7 - (pos & 7))) & 1:
            hi = pos >> 3
            window = frombytes(data[hi : hi + 8], "big")
            shift = 58 - (pos & 7)
            length = (window >> shift) & 31
            if length == 0:
                raise CorruptionError(f"record {rec}: L field is 0", stage="de", where=where)
            end = pos + 6 + length
            if end > nbits:
                raise CorruptionError(f"record {rec}: distance runs past end of bitmap", stage="de", where=where)
            distance = (window >> (shift - length)) & ((1 << length) - 1)
            if distance == 0 or distance > rec:
                raise CorruptionError(
                    f"record {rec}: distance {distance} points before the start of the stream", stage="de", where=where
                )
            positions.append(rec)
            distances.append(distance)
            rec += 1
            pos = end
            continue
        if pos >= nbits:
            raise CorruptionError(f"bitmap ends after {rec} of {n} records", stage="de", where=where)
        k = int(np.searchsorted(ones, pos))
        nxt = int(ones[k]) if k < ones.size else nbits
        run = min(nxt - pos, n - rec)
        rec += run
        pos += run
    if pos != nbits:
        raise CorruptionError(f"{nbits - pos} unused bits after last record", stage="de", where=where)
    return np.asarray(positions, dtype=np.int64), np.asarray(distances, dtype=np.int64)


def de_decompress(stream: DeStream, where: str | None = None) -> np.ndarray:
    dtype = stream.dtype
    n = stream.param_count
    dup_pos, dup_dist = parse_bitmap(stream, where)
    if n - dup_pos.size != stream.distinct_count:
        raise CorruptionError(
            f"{n - dup_pos.size} distinct records but {stream.distinct_count} distinct values", stage="de", where=where
        )
    src = np.arange(n, dtype=np.int64)
    src[dup_pos] = dup_pos - dup_dist
    # pointer jumping: every chain ends at a distinct position
    while True:
        nxt = src[src]
        if np.array_equal(nxt, src):
            break
        src = nxt
    full = np.zeros(n, dtype=dtype.np_uint)
    is_distinct = np.ones(n, dtype=bool)
    is_distinct[dup_pos] = False
    full[is_distinct] = np.frombuffer(stream.distinct, dtype=dtype.np_uint)
    return full[src].view(dtype.np_float)


def de_saving_report(params: np.ndarray, dtype: Dtype | None = None) -> dict[str, float]:
    """Storage saving with and without the flag/L metadata.

    ``theoretical`` charges each duplicate only its distance bits;
    ``practical`` is measured on the actual encoded stream (bitmap plus
    distinct array, without the fixed header).
    """
    params, dtype = _dtype_of(params, dtype)
    n = params.size
    if n == 0:
        return {"theoretical_saving_ratio": 0.0, "practical_saving_ratio": 0.0}
    original = n * dtype.bits
    dup, dist = back_references(params.view(dtype.np_uint))
    theoretical = (int(dup.sum()) * dtype.bits - int(bit_lengths(dist).sum())) / original
    practical = 1.0 - de_compress(params, dtype).payload_bits / original
    return {"theoretical_saving_ratio": theoretical, "practical_saving_ratio": practical}
