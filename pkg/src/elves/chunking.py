"""Chunk-level duplication and similarity analysis.

Fixed-size chunking, FastCDC content-defined chunking, and a cheap
similarity signature that hashes every N-th element of a unit.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from .model_store import ModelFile

GEAR_SEED = 0x6368756E6B  # b"chunk"
NORMALIZATION_LEVEL = 2
SAMPLE_STRIDE = 32
_M64 = (1 << 64) - 1


def _splitmix64(seed: int, count: int) -> list[int]:
    out = []
    state = seed
    for _ in range(count):
        state = (state + 0x9E3779B97F4A7C15) & _M64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
        out.append(z ^ (z >> 31))
    return out


# 256 random 64-bit gear values: SplitMix64 seeded with GEAR_SEED
GEAR = np.array(_splitmix64(GEAR_SEED, 256), dtype=np.uint64)


@dataclass(frozen=True)
class ChunkRecord:
    source: str
    offset: int
    length: int
    fingerprint: bytes


def _records(data, cuts: Iterable[int], source: str) -> list[ChunkRecord]:
    mv = memoryview(data)
    out = []
    start = 0
    for end in cuts:
        out.append(ChunkRecord(source, start, end - start, hashlib.sha256(mv[start:end]).digest()))
        start = end
    return out


def fsc_chunks(data, chunk_size: int, source: str = "") -> list[ChunkRecord]:
    if chunk_size <= 0:
        raise ValueError("chunk_size must be positive")
    n = len(data)
    return _records(data, [min(n, e) for e in range(chunk_size, n + chunk_size, chunk_size)], source)


def gear_hashes(data) -> np.ndarray:
    """Gear hash after every byte: ``sum(GEAR[b[i-j]] << j for j < 64)`` mod 2**64.

    Bits shifted past 64 drop out, so the hash is a function of the last 64
    bytes only; computed by doubling instead of a byte loop.
    """
    h = GEAR[np.frombuffer(data, dtype=np.uint8)]
    span = 1
    while span < 64:
        shifted = np.zeros_like(h)
        shifted[span:] = h[:-span] << np.uint64(span)
        h = h + shifted
        span *= 2
    return h


def _top_mask(bits: int) -> np.uint64:
    bits = max(1, min(63, bits))
    return np.uint64(((1 << bits) - 1) << (64 - bits))


def cdc_cuts(data, min_size: int = 128, avg_size: int = 4096, max_size: int = 128 * 1024) -> list[int]:
    """End offsets of FastCDC chunks (normalized chunking, level 2).

    A chunk of length ``l`` may end after byte ``i`` when the gear hash there
    has zero bits under the strict mask (``l < avg``) or the loose mask
    (``l >= avg``); it is forced to end at ``max_size``.
    """
    if not 0 < min_size <= avg_size <= max_size:
        raise ValueError("need 0 < min <= avg <= max")
    n = len(data)
    if n == 0:
        return []
    bits = int(round(np.log2(avg_size)))
    h = gear_hashes(data)
    strict = np.flatnonzero((h & _top_mask(bits + NORMALIZATION_LEVEL)) == 0) + 1
    loose = np.flatnonzero((h & _top_mask(bits - NORMALIZATION_LEVEL)) == 0) + 1
    cuts = []
    start = 0
    while n - start > min_size:
        lo, mid, hi = start + min_size, start + avg_size, min(n, start + max_size)
        end = None
        k = np.searchsorted(strict, lo)
        if k < strict.size and strict[k] < min(mid, hi + 1):
            end = int(strict[k])
        else:
            k = np.searchsorted(loose, max(lo, mid))
            if k < loose.size and loose[k] <= hi:
                end = int(loose[k])
        if end is None:
            end = hi
        cuts.append(end)
        start = end
    if start < n:
        cuts.append(n)
    return cuts


def cdc_chunks(
    data, min_size: int = 128, avg_size: int = 4096, max_size: int = 128 * 1024, source: str = ""
) -> list[ChunkRecord]:
    return _records(data, cdc_cuts(data, min_size, avg_size, max_size), source)


@dataclass(frozen=True)
class SimilaritySignature:
    digest: bytes
    stride: int


def similarity_signature(data, element_size: int = 1, stride: int = SAMPLE_STRIDE) -> SimilaritySignature:
    """SHA-256 over the elements at indices 0, stride, 2*stride, ...

    ``element_size`` is the parameter width for float data and 1 for raw
    bytes.  A trailing partial element is ignored.
    """
    buf = np.frombuffer(data, dtype=np.uint8)
    count = buf.size // element_size
    elems = buf[: count * element_size].reshape(count, element_size)
    return SimilaritySignature(hashlib.sha256(elems[::stride].tobytes()).digest(), stride)


# --- corpus reports ---------------------------------------------------------


@dataclass
class SizeRow:
    dtype: str
    total_size: int = 0
    matched_size: int = 0

    @property
    def pct(self) -> float:
        return 100.0 * self.matched_size / self.total_size if self.total_size else 0.0

    def as_dict(self) -> dict:
        return {"dtype": self.dtype, "total_size": self.total_size, "size": self.matched_size, "pct": self.pct}


def iter_layers(models: Sequence[ModelFile]) -> Iterator[tuple[str, int, memoryview]]:
    """``(dtype name, sampling element size, bytes)`` of every layer."""
    for m in models:
        for t in m.manifest.tensors:
            yield t.dtype.name, t.dtype.itemsize if t.dtype.is_float else 1, m.tensor_bytes(t)


def split_units(data, granularity) -> list[tuple[int, int]]:
    """``(offset, length)`` units for a granularity spec.

    ``"layer"``; an int for fixed-size chunks; ``("cdc", min, avg, max)``.
    """
    n = len(data)
    if granularity == "layer":
        return [(0, n)] if n else []
    if isinstance(granularity, int):
        return [(o, min(granularity, n - o)) for o in range(0, n, granularity)]
    if isinstance(granularity, tuple) and granularity[0] == "cdc":
        cuts = cdc_cuts(data, *granularity[1:])
        return [(b, e - b) for b, e in zip([0] + cuts[:-1], cuts)]
    raise ValueError(f"unknown granularity {granularity!r}")


def _report(models, granularity, key) -> list[SizeRow]:
    rows: dict[str, SizeRow] = {}
    overall = SizeRow("Overall")
    seen: set[bytes] = set()
    for dtype, elem, data in iter_layers(models):
        for off, length in split_units(data, granularity):
            k = key(data[off : off + length], elem)
            repeated = k in seen
            seen.add(k)
            for row in (rows.setdefault(dtype, SizeRow(dtype)), overall):
                row.total_size += length
                if repeated:
                    row.matched_size += length
    return [rows[k] for k in sorted(rows)] + [overall]


def chunk_dup_report(models: Sequence[ModelFile], granularity=4096) -> list[SizeRow]:
    """Bytes of chunks whose fingerprint already occurred earlier in the corpus."""
    return _report(models, granularity, lambda unit, elem: hashlib.sha256(unit).digest())


def similarity_report(models: Sequence[ModelFile], granularity="layer", stride: int = SAMPLE_STRIDE) -> list[SizeRow]:
    """Bytes of units whose similarity signature already occurred earlier."""
    return _report(models, granularity, lambda unit, elem: similarity_signature(unit, elem, stride).digest)
