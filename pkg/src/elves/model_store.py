"""Reading and writing model tensor files in the safetensors layout.

A file is ``u64`` little-endian header length ``N``, ``N`` bytes of UTF-8
JSON mapping tensor name to ``{"dtype", "shape", "data_offsets"}`` (plus an
optional ``"__metadata__"`` string map), then the raw little-endian tensor
data.  ``data_offsets`` are relative to the first byte after the header.
"""

from __future__ import annotations

import json
import mmap
import os
import struct
import tempfile
from dataclasses import dataclass, field
from math import prod
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import HeaderParseError, OverlapError, UnknownDtypeError

METADATA_KEY = "__metadata__"


@dataclass(frozen=True)
class Dtype:
    """Element type of a tensor: its header string and byte width."""

    name: str
    itemsize: int
    known: bool = True

    @property
    def is_float(self) -> bool:
        return self.known and self.name in _FLOAT_NAMES

    @property
    def bits(self) -> int:
        return 8 * self.itemsize

    @property
    def np_float(self) -> np.dtype:
        """Little-endian numpy float dtype (floating dtypes only)."""
        if not self.is_float:
            raise TypeError(f"{self.name} is not a floating dtype")
        return np.dtype(f"<f{self.itemsize}")

    @property
    def np_uint(self) -> np.dtype:
        """Little-endian unsigned integer dtype of the same width."""
        return np.dtype(f"<u{self.itemsize}")

    def __str__(self) -> str:
        return self.name


F16 = Dtype("F16", 2)
F32 = Dtype("F32", 4)
F64 = Dtype("F64", 8)
U8 = Dtype("U8", 1)
I64 = Dtype("I64", 8)
BOOL = Dtype("BOOL", 1)

KNOWN_DTYPES = {d.name: d for d in (F16, F32, F64, U8, I64, BOOL)}
FLOAT_DTYPES = (F16, F32, F64)
_FLOAT_NAMES = frozenset(d.name for d in FLOAT_DTYPES)

_NUMPY_TO_DTYPE = {
    np.dtype("float16"): F16,
    np.dtype("float32"): F32,
    np.dtype("float64"): F64,
    np.dtype("uint8"): U8,
    np.dtype("int64"): I64,
    np.dtype("bool"): BOOL,
}


def other_dtype(name: str, itemsize: int) -> Dtype:
    """Dtype for a header string outside the known set, with a fixed width."""
    return Dtype(name, itemsize, known=False)


def dtype_from_numpy(dt: np.dtype) -> Dtype:
    dt = np.dtype(dt).newbyteorder("=")
    try:
        return _NUMPY_TO_DTYPE[dt]
    except KeyError:
        raise TypeError(f"no tensor dtype for numpy {dt}") from None


def parse_dtype(name: str, data_len: int, numel: int) -> Dtype:
    """Map a header dtype string to a :class:`Dtype`.

    Unknown strings are accepted only when the element width can be inferred
    from the byte extent, i.e. the tensor is non-empty and ``data_len`` is a
    positive multiple of its element count.
    """
    if name in KNOWN_DTYPES:
        return KNOWN_DTYPES[name]
    if numel > 0 and data_len > 0 and data_len % numel == 0:
        return other_dtype(name, data_len // numel)
    raise UnknownDtypeError(f"unknown dtype {name!r} with no inferable width")


@dataclass(frozen=True)
class TensorMeta:
    name: str
    dtype: Dtype
    shape: tuple[int, ...]
    data_offset: int
    data_len: int

    @property
    def numel(self) -> int:
        return prod(self.shape)

    @property
    def end(self) -> int:
        return self.data_offset + self.data_len


@dataclass
class ModelManifest:
    """Structure of one model file.

    ``raw_header`` keeps the exact header bytes a file was loaded from so
    that rewriting it is byte-exact; it is ignored whenever it no longer
    describes ``tensors``.
    """

    model_id: str
    tensors: list[TensorMeta]
    total_bytes: int
    metadata: dict[str, str] | None = None
    raw_header: bytes | None = field(default=None, compare=False, repr=False)

    def tensor(self, name: str) -> TensorMeta:
        for t in self.tensors:
            if t.name == name:
                return t
        raise KeyError(name)

    @property
    def data_bytes(self) -> int:
        return sum(t.data_len for t in self.tensors)

    @property
    def header_size(self) -> int:
        return len(self.raw_header) if self.raw_header is not None else len(encode_header(self))

    @property
    def data_region(self) -> int:
        """Bytes after the header, including any bytes no tensor covers."""
        return self.total_bytes - 8 - self.header_size


def _reject_duplicate_keys(pairs):
    out = {}
    for k, v in pairs:
        if k in out:
            raise HeaderParseError(f"duplicate key {k!r} in header")
        out[k] = v
    return out


def _is_index(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool) and x >= 0


def parse_header(raw: bytes, data_size: int) -> tuple[list[TensorMeta], dict[str, str] | None]:
    """Validate header JSON against a data region of ``data_size`` bytes."""
    try:
        obj = json.loads(raw.decode("utf-8"), object_pairs_hook=_reject_duplicate_keys)
    except (UnicodeDecodeError, json.JSONDecodeError, RecursionError) as e:
        raise HeaderParseError(f"header is not valid JSON: {e}") from e
    if not isinstance(obj, dict):
        raise HeaderParseError("header JSON is not an object")

    metadata = None
    tensors: list[TensorMeta] = []
    for name, entry in obj.items():
        if name == METADATA_KEY:
            if not isinstance(entry, dict) or not all(
                isinstance(k, str) and isinstance(v, str) for k, v in entry.items()
            ):
                raise HeaderParseError("__metadata__ must map strings to strings")
            metadata = dict(entry)
            continue
        if not isinstance(entry, dict):
            raise HeaderParseError(f"entry for {name!r} is not an object")
        dtype_s = entry.get("dtype")
        shape = entry.get("shape")
        offsets = entry.get("data_offsets")
        if not isinstance(dtype_s, str):
            raise HeaderParseError(f"{name!r}: missing dtype")
        if not isinstance(shape, list) or not all(_is_index(d) for d in shape):
            raise HeaderParseError(f"{name!r}: shape must be a list of non-negative ints")
        if not (isinstance(offsets, list) and len(offsets) == 2 and all(_is_index(o) for o in offsets)):
            raise HeaderParseError(f"{name!r}: data_offsets must be [begin, end]")
        begin, end = offsets
        if end < begin:
            raise HeaderParseError(f"{name!r}: data_offsets end before begin")
        if end > data_size:
            raise HeaderParseError(f"{name!r}: extent [{begin},{end}) beyond end of file")
        numel = prod(shape)
        dtype = parse_dtype(dtype_s, end - begin, numel)
        if numel * dtype.itemsize != end - begin:
            raise HeaderParseError(
                f"{name!r}: {end - begin} bytes for {numel} x {dtype.itemsize}-byte elements"
            )
        tensors.append(TensorMeta(name, dtype, tuple(shape), begin, end - begin))

    check_overlap(tensors)
    return tensors, metadata


def check_overlap(tensors: Iterable[TensorMeta]) -> None:
    spans = sorted((t.data_offset, t.end, t.name) for t in tensors if t.data_len > 0)
    for (b0, e0, n0), (b1, e1, n1) in zip(spans, spans[1:]):
        if b1 < e0:
            raise OverlapError(f"tensors {n0!r} [{b0},{e0}) and {n1!r} [{b1},{e1}) overlap")


def encode_header(manifest: ModelManifest) -> bytes:
    """Canonical header for ``manifest``: compact JSON, space-padded to 8 bytes."""
    obj: dict = {}
    if manifest.metadata is not None:
        obj[METADATA_KEY] = manifest.metadata
    for t in manifest.tensors:
        obj[t.name] = {
            "dtype": t.dtype.name,
            "shape": list(t.shape),
            "data_offsets": [t.data_offset, t.end],
        }
    raw = json.dumps(obj, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    return raw + b" " * (-len(raw) % 8)


def _header_describes(raw: bytes, manifest: ModelManifest) -> bool:
    try:
        tensors, metadata = parse_header(raw, 1 << 62)
    except HeaderParseError:
        return False
    return tensors == list(manifest.tensors) and metadata == manifest.metadata


class ModelFile:
    """Read-only view of a parsed model file.

    Backed by an mmap (or an in-memory buffer), so several workers can read
    tensors from one instance concurrently.
    """

    def __init__(self, manifest: ModelManifest, buf, data_start: int, path: Path | None = None, mm=None):
        self.manifest = manifest
        self.path = path
        self._buf = memoryview(buf)
        self._data_start = data_start
        self._mmap = mm

    def close(self) -> None:
        self._buf.release()
        if self._mmap is not None:
            try:
                self._mmap.close()
            except BufferError:
                pass  # arrays still view the map; it is unmapped once they are gone
            self._mmap = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _meta(self, t: TensorMeta | str) -> TensorMeta:
        return self.manifest.tensor(t) if isinstance(t, str) else t

    def tensor_bytes(self, t: TensorMeta | str) -> memoryview:
        t = self._meta(t)
        start = self._data_start + t.data_offset
        return self._buf[start : start + t.data_len]

    def tensor_array(self, t: TensorMeta | str) -> np.ndarray:
        """Flat numpy view of a float tensor, or raw ``uint8`` for other dtypes."""
        t = self._meta(t)
        dt = t.dtype.np_float if t.dtype.is_float else np.dtype(np.uint8)
        return np.frombuffer(self.tensor_bytes(t), dtype=dt)

    def layers(self) -> dict[str, bytes]:
        return {t.name: bytes(self.tensor_bytes(t)) for t in self.manifest.tensors}

    def gap_bytes(self) -> bytes:
        """Bytes of the data region not covered by any tensor, in file order."""
        data = self._buf[self._data_start :]
        return b"".join(bytes(data[b:e]) for b, e in uncovered_ranges(self.manifest.tensors, len(data)))


def uncovered_ranges(tensors: Iterable[TensorMeta], data_size: int) -> list[tuple[int, int]]:
    out = []
    pos = 0
    for b, e in sorted((t.data_offset, t.end) for t in tensors if t.data_len):
        if b > pos:
            out.append((pos, b))
        pos = max(pos, e)
    if pos < data_size:
        out.append((pos, data_size))
    return out


def parse_model(buf, model_id: str = "model", path: Path | None = None, mm=None) -> ModelFile:
    """Parse an in-memory model file (bytes, bytearray, mmap...)."""
    size = len(buf)
    if size < 8:
        raise HeaderParseError("file too small for header length prefix")
    (n,) = struct.unpack_from("<Q", buf, 0)
    if n > size - 8:
        raise HeaderParseError(f"header length {n} extends beyond end of file ({size} bytes)")
    raw = bytes(buf[8 : 8 + n])
    tensors, metadata = parse_header(raw, size - 8 - n)
    manifest = ModelManifest(model_id, tensors, size, metadata, raw_header=raw)
    return ModelFile(manifest, buf, 8 + n, path=path, mm=mm)


def load_model(path: str | os.PathLike, model_id: str | None = None) -> ModelFile:
    path = Path(path)
    model_id = model_id if model_id is not None else path.stem
    with open(path, "rb") as f:
        size = os.fstat(f.fileno()).st_size
        if size == 0:
            raise HeaderParseError("empty file")
        mm = mmap.mmap(f.fileno(), 0, access=mmap.ACCESS_READ)
    try:
        return parse_model(mm, model_id, path=path, mm=mm)
    except BaseException:
        mm.close()
        raise


@dataclass
class FloatStream:
    """All parameters of one floating dtype, concatenated in manifest order."""

    dtype: Dtype
    values: np.ndarray
    extents: list[tuple[str, int, int]]  # (layer name, start, count)


def flatten_float_layers(model: ModelFile, names: Iterable[str] | None = None) -> dict[str, FloatStream]:
    """One 1-D stream per floating dtype, keyed by dtype name.

    ``names`` restricts flattening to a subset of layers (order still follows
    the manifest).  Non-float layers are skipped.
    """
    wanted = None if names is None else set(names)
    parts: dict[str, list[np.ndarray]] = {}
    extents: dict[str, list[tuple[str, int, int]]] = {}
    dtypes: dict[str, Dtype] = {}
    for t in model.manifest.tensors:
        if not t.dtype.is_float or (wanted is not None and t.name not in wanted):
            continue
        key = t.dtype.name
        dtypes[key] = t.dtype
        ext = extents.setdefault(key, [])
        start = ext[-1][1] + ext[-1][2] if ext else 0
        ext.append((t.name, start, t.numel))
        parts.setdefault(key, []).append(model.tensor_array(t))
    return {
        k: FloatStream(dtypes[k], np.concatenate(parts[k]) if parts[k] else np.empty(0, dtypes[k].np_float), extents[k])
        for k in parts
    }


def scatter_stream(values: np.ndarray, extents: Iterable[tuple[str, int, int]]) -> dict[str, bytes]:
    """Inverse of flattening: split a stream back into per-layer bytes."""
    values = np.ascontiguousarray(values)
    return {name: values[start : start + count].tobytes() for name, start, count in extents}


def _atomic_write(path: Path, chunks: Iterable) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            for c in chunks:
                f.write(c)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def write_model(
    path: str | os.PathLike,
    manifest: ModelManifest,
    layers: Mapping[str, bytes],
    gaps: bytes = b"",
) -> Path:
    """Write ``manifest`` and its layer payloads as a model file.

    The header is the manifest's original ``raw_header`` when that still
    describes the tensors, otherwise a canonical re-encoding in manifest
    order.  Bytes not covered by any tensor are filled from ``gaps`` (in
    file order), then zeros.
    """
    path = Path(path)
    check_overlap(manifest.tensors)
    header = manifest.raw_header
    if header is None or not _header_describes(header, manifest):
        header = encode_header(manifest)
        data_size = max((t.end for t in manifest.tensors), default=0)
    else:
        data_size = max(manifest.total_bytes - 8 - len(header), max((t.end for t in manifest.tensors), default=0))

    data = bytearray(data_size)
    for t in manifest.tensors:
        payload = layers[t.name]
        if len(payload) != t.data_len:
            raise ValueError(f"layer {t.name!r}: {len(payload)} bytes, manifest says {t.data_len}")
        data[t.data_offset : t.end] = payload
    if gaps:
        pos = 0
        for b, e in uncovered_ranges(manifest.tensors, data_size):
            take = gaps[pos : pos + (e - b)]
            data[b : b + len(take)] = take
            pos += len(take)
    _atomic_write(path, [struct.pack("<Q", len(header)), header, data])
    return path


def write_arrays(
    path: str | os.PathLike,
    arrays: Mapping[str, np.ndarray],
    metadata: dict[str, str] | None = None,
    model_id: str | None = None,
) -> ModelManifest:
    """Convenience writer for numpy arrays laid out contiguously in order."""
    tensors = []
    layers = {}
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dtype = dtype_from_numpy(arr.dtype)
        le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        layers[name] = le.tobytes()
        tensors.append(TensorMeta(name, dtype, tuple(arr.shape), offset, le.nbytes))
        offset += le.nbytes
    manifest = ModelManifest(model_id or Path(path).stem, tensors, 0, metadata)
    header = encode_header(manifest)
    manifest.total_bytes = 8 + len(header) + offset
    manifest.raw_header = header
    write_model(path, manifest, layers)
    return manifest
