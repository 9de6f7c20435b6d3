"""Exponent-less float encoding (ELF).

A parameter ``p`` in (-1, 1) is mapped to ``p' = 1 + |p|`` in [1, 2).  Every
value in that interval carries the same biased exponent, so only the sign of
``p`` and the mantissa of ``p'`` need to be kept: 11, 24 or 53 bits for
F16, F32 and F64.  Decoding re-inserts the bias exponent and subtracts 1,
which is exact, so the only loss is the rounding of ``1 + |p|`` (at most
half an ulp of 1, i.e. 2**-11, 2**-24, 2**-53).

Values outside (-1, 1), non-finite values, and the few values just below 1
whose ``1 + |p|`` rounds up to 2.0 go to an exception table verbatim.
"""

from __future__ import annotations

import struct
from concurrent.futures import Executor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .bitstream import pack_bits, unpack_fixed
from .errors import CorruptionError, EndOfStream
from .model_store import F16, F32, F64, Dtype


class FloatLayout(NamedTuple):
    exponent_bits: int
    mantissa_bits: int
    bias: int


LAYOUTS = {
    "F16": FloatLayout(5, 10, 15),
    "F32": FloatLayout(8, 23, 127),
    "F64": FloatLayout(11, 52, 1023),
}

DEFAULT_BLOCK_SIZE = 1 << 22
_HEADER = struct.Struct("<IIQ")


def layout(dtype: Dtype) -> FloatLayout:
    try:
        return LAYOUTS[dtype.name]
    except KeyError:
        raise TypeError(f"ELF supports F16/F32/F64, not {dtype}") from None


def code_width(dtype: Dtype) -> int:
    return 1 + layout(dtype).mantissa_bits


def error_bound(dtype: Dtype) -> float:
    """Largest absolute error of an encode/decode roundtrip."""
    return 2.0 ** -(layout(dtype).mantissa_bits + 1)


@dataclass(frozen=True)
class FloatDecomposition:
    """Sign, biased exponent and mantissa fields of one IEEE 754 value."""

    dtype: Dtype
    sign: int
    exponent: int
    mantissa: int

    @classmethod
    def of(cls, p, dtype: Dtype) -> "FloatDecomposition":
        lay = layout(dtype)
        bits = int(np.asarray(p, dtype=dtype.np_float).reshape(1).view(dtype.np_uint)[0])
        m = bits & ((1 << lay.mantissa_bits) - 1)
        e = (bits >> lay.mantissa_bits) & ((1 << lay.exponent_bits) - 1)
        return cls(dtype, bits >> (dtype.bits - 1), e, m)

    @property
    def bits(self) -> int:
        lay = layout(self.dtype)
        return (self.sign << (self.dtype.bits - 1)) | (self.exponent << lay.mantissa_bits) | self.mantissa

    @property
    def value(self):
        return np.array([self.bits], dtype=self.dtype.np_uint).view(self.dtype.np_float)[0]


class ElfCode(NamedTuple):
    sign: int
    mantissa: int
    dtype: Dtype

    @property
    def width(self) -> int:
        return code_width(self.dtype)

    @property
    def packed(self) -> int:
        """The code as one integer: sign bit followed by the mantissa."""
        return (self.sign << layout(self.dtype).mantissa_bits) | self.mantissa


def encode_array(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised transform.  Returns ``(codes, in_range)``.

    ``codes`` holds the packed sign+mantissa for every element (meaningless
    where ``in_range`` is False).  The addition ``1 + |p|`` runs in the
    array's own float type, i.e. round-to-nearest-even at its precision.
    """
    values = np.asarray(values)
    ft = values.dtype
    if ft.kind != "f":
        raise TypeError("encode_array needs a float array")
    dtype = {2: F16, 4: F32, 8: F64}[ft.itemsize]
    lay = layout(dtype)
    ut = np.dtype(f"u{ft.itemsize}")
    mag = np.abs(values)
    with np.errstate(invalid="ignore", over="ignore"):
        shifted = ft.type(1) + mag
        in_range = (mag < 1) & (shifted < 2)
    sign = (values.view(ut) >> ut.type(dtype.bits - 1)).astype(np.uint64)
    mant = (shifted.view(ut) & ut.type((1 << lay.mantissa_bits) - 1)).astype(np.uint64)
    return (sign << np.uint64(lay.mantissa_bits)) | mant, in_range


def decode_array(codes: np.ndarray, dtype: Dtype) -> np.ndarray:
    """Vectorised restore, returned as the dtype's unsigned bit patterns."""
    lay = layout(dtype)
    ut = dtype.np_uint
    codes = np.asarray(codes, dtype=np.uint64)
    mbits = np.uint64(lay.mantissa_bits)
    mant = codes & np.uint64((1 << lay.mantissa_bits) - 1)
    sign = codes >> mbits
    shifted = ((np.uint64(lay.bias) << mbits) | mant).astype(ut).view(dtype.np_float)
    frac = shifted - dtype.np_float.type(1)  # exact: shifted is in [1, 2)
    return frac.view(ut) | (sign.astype(ut) << ut.type(dtype.bits - 1))


def elf_transform(p, dtype: Dtype) -> ElfCode | None:
    """Code for one parameter, or ``None`` if it must go to the exception table."""
    arr = np.asarray([p], dtype=dtype.np_float)
    codes, ok = encode_array(arr)
    if not ok[0]:
        return None
    c = int(codes[0])
    mbits = layout(dtype).mantissa_bits
    return ElfCode(c >> mbits, c & ((1 << mbits) - 1), dtype)


def elf_restore(code: ElfCode, dtype: Dtype | None = None):
    dtype = dtype or code.dtype
    bits = decode_array(np.array([code.packed], dtype=np.uint64), dtype)
    return bits.view(dtype.np_float)[0]


# --- LEB128 ---------------------------------------------------------------


def _leb128_small(values) -> bytes:
    out = bytearray()
    for v in values:
        while v >= 0x80:
            out.append((v & 0x7F) | 0x80)
            v >>= 7
        out.append(v)
    return bytes(out)


def leb128_encode(values: np.ndarray) -> bytes:
    values = np.asarray(values, dtype=np.uint64)
    if values.size < 64:  # numpy setup costs more than the loop here
        return _leb128_small(values.tolist())
    nbytes = np.ones(values.size, dtype=np.int64)
    for k in range(1, 10):
        nbytes += values >= np.uint64(1 << (7 * k))
    ends = np.cumsum(nbytes)
    rec = np.repeat(np.arange(values.size), nbytes)
    k = np.arange(int(ends[-1])) - (ends - nbytes)[rec]
    out = (values[rec] >> (7 * k).astype(np.uint64)) & np.uint64(0x7F)
    out |= np.where(k < nbytes[rec] - 1, np.uint64(0x80), np.uint64(0))
    return out.astype(np.uint8).tobytes()


def leb128_decode(data, count: int, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode ``count`` values starting at ``offset``; returns ``(values, end)``."""
    if count == 0:
        return np.empty(0, dtype=np.uint64), offset
    buf = np.frombuffer(data, dtype=np.uint8, count=min(len(data) - offset, 10 * count), offset=offset)
    term = np.flatnonzero(buf < 0x80)
    if term.size < count:
        raise EndOfStream("LEB128 sequence truncated")
    term = term[:count]
    lengths = np.diff(np.r_[-1, term])
    if lengths.max() > 10:
        raise CorruptionError("LEB128 value longer than 10 bytes", stage="elf")
    end = int(term[-1]) + 1
    b = buf[:end].astype(np.uint64) & np.uint64(0x7F)
    starts = np.r_[0, term[:-1] + 1]
    k = np.arange(end) - np.repeat(starts, lengths)
    vals = np.add.reduceat(b << (7 * k).astype(np.uint64), starts)
    return vals, offset + end


# --- blocks ---------------------------------------------------------------


@dataclass
class ElfBlock:
    dtype: Dtype
    param_count: int
    code_bytes: bytes
    bit_length: int
    exc_positions: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    exc_values: bytes = b""  # raw little-endian bit patterns, original width

    @property
    def exception_count(self) -> int:
        return int(self.exc_positions.size)

    def to_bytes(self) -> bytes:
        deltas = np.diff(self.exc_positions.astype(np.int64), prepend=0).astype(np.uint64)
        return b"".join(
            [
                _HEADER.pack(self.param_count, self.exception_count, self.bit_length),
                leb128_encode(deltas),
                self.exc_values,
                self.code_bytes,
            ]
        )

    @classmethod
    def from_bytes(cls, data: bytes, dtype: Dtype, where: str | None = None) -> "ElfBlock":
        data = bytes(data)
        if len(data) < _HEADER.size:
            raise CorruptionError("block header truncated", stage="elf", where=where)
        count, nexc, nbits = _HEADER.unpack_from(data, 0)
        width = code_width(dtype)
        if nexc > count or nbits != (count - nexc) * width:
            raise CorruptionError(
                f"inconsistent header: {count} params, {nexc} exceptions, {nbits} bits", stage="elf", where=where
            )
        try:
            deltas, pos = leb128_decode(data, nexc, _HEADER.size)
        except EndOfStream as e:
            raise CorruptionError(f"exception table truncated ({e})", stage="elf", where=where) from None
        if nexc and (deltas[1:] == 0).any():
            raise CorruptionError("exception positions not strictly increasing", stage="elf", where=where)
        positions = np.cumsum(deltas.astype(np.int64))
        if nexc and positions[-1] >= count:
            raise CorruptionError("exception position past end of block", stage="elf", where=where)
        exc_end = pos + nexc * dtype.itemsize
        code_len = (nbits + 7) // 8
        if len(data) != exc_end + code_len:
            raise CorruptionError(
                f"block is {len(data)} bytes, header implies {exc_end + code_len}", stage="elf", where=where
            )
        return cls(dtype, count, data[exc_end:], nbits, positions, data[pos:exc_end])


def elf_compress_block(params: np.ndarray, dtype: Dtype | None = None) -> ElfBlock:
    params = np.asarray(params, dtype=dtype.np_float if dtype is not None else None).ravel()
    dtype = {2: F16, 4: F32, 8: F64}[params.dtype.itemsize]
    codes, ok = encode_array(params)
    exc = np.flatnonzero(~ok)
    code_bytes, nbits = pack_bits(codes[ok], code_width(dtype))
    return ElfBlock(dtype, params.size, code_bytes, nbits, exc, params[exc].tobytes())


def elf_decompress_block(block: ElfBlock) -> np.ndarray:
    dtype = block.dtype
    n_codes = block.param_count - block.exception_count
    try:
        codes = unpack_fixed(block.code_bytes, n_codes, code_width(dtype))
    except EndOfStream as e:
        raise CorruptionError(f"code payload truncated ({e})", stage="elf") from None
    if len(block.exc_values) != block.exception_count * dtype.itemsize:
        raise CorruptionError("exception values truncated", stage="elf")
    out = np.empty(block.param_count, dtype=dtype.np_uint)
    keep = np.ones(block.param_count, dtype=bool)
    keep[block.exc_positions] = False
    out[keep] = decode_array(codes, dtype)
    out[block.exc_positions] = np.frombuffer(block.exc_values, dtype=dtype.np_uint)
    return out.view(dtype.np_float)


def compress_stream(
    values: np.ndarray, block_size: int = DEFAULT_BLOCK_SIZE, executor: Executor | None = None
) -> list[bytes]:
    """Serialized blocks of ``block_size`` parameters each (last may be short)."""
    values = np.asarray(values)
    pieces = [values[i : i + block_size] for i in range(0, values.size, block_size)]
    mapper = executor.map if executor is not None else map
    return list(mapper(_compress_piece, pieces))


def _compress_piece(piece: np.ndarray) -> bytes:
    return elf_compress_block(piece).to_bytes()


def decompress_stream(blocks: list[bytes], dtype: Dtype, executor: Executor | None = None) -> np.ndarray:
    mapper = executor.map if executor is not None else map
    parts = list(mapper(_decompress_piece, blocks, [dtype] * len(blocks)))
    return np.concatenate(parts) if parts else np.empty(0, dtype=dtype.np_float)


def _decompress_piece(data: bytes, dtype: Dtype) -> np.ndarray:
    return elf_decompress_block(ElfBlock.from_bytes(data, dtype))
