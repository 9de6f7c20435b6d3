"""Three-stage corpus compression.

1. Layers whose SHA-256 digest occurs more than once in the corpus are
   stored once, losslessly, and referenced everywhere (``DEDUP_REF``).
2. The remaining float layers of each model are flattened into one stream
   per dtype and encoded both with DE and with ELF; the smaller output wins
   for the whole model, or ``RAW`` when neither beats the plain bytes.
   Other layers are kept ``RAW``.
3. Every section goes through the final lossless backend.

Work is distributed per model; the archive is assembled in corpus order, so
its bytes do not depend on the number of workers.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import Executor, ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import de as de_codec
from . import elf as elf_codec
from .archive import ArchiveReader, ArchiveWriter, frame_section
from .backends import DEFAULT_BACKEND, get_backend
from .dedup import dedup_scan
from .errors import CorruptionError
from .model_store import KNOWN_DTYPES, ModelManifest, flatten_float_layers, load_model, parse_header, scatter_stream, write_model

STAGES = ("HD", "DE", "ELF", "FINAL")
ALL_STAGES = frozenset(STAGES)
MODEL_SUFFIX = ".safetensors"


class MethodTag(str, Enum):
    DEDUP_REF = "DEDUP_REF"
    ELF = "ELF"
    DE = "DE"
    RAW = "RAW"


def select_stage2(de_size: int | None, elf_size: int | None, raw_size: int | None = None) -> MethodTag:
    """Pick the smaller stage-2 output; ties go to ELF.

    ``None`` marks a disabled candidate.  RAW wins when both candidates are
    strictly larger than ``raw_size`` (or both are disabled).
    """
    candidates = [(s, tag) for s, tag in ((elf_size, MethodTag.ELF), (de_size, MethodTag.DE)) if s is not None]
    if not candidates:
        return MethodTag.RAW
    size, tag = min(candidates, key=lambda c: c[0])  # min keeps the first (ELF) on ties
    if raw_size is not None and size > raw_size:
        return MethodTag.RAW
    return tag


@dataclass
class CompressOptions:
    stages: frozenset[str] = ALL_STAGES
    backend: str = DEFAULT_BACKEND
    block_size: int = elf_codec.DEFAULT_BLOCK_SIZE
    workers: int = 1
    paranoid: bool = False

    def __post_init__(self):
        self.stages = frozenset(s.upper() for s in self.stages)
        unknown = self.stages - ALL_STAGES
        if unknown:
            raise ValueError(f"unknown stages {sorted(unknown)}; choose from {STAGES}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.block_size < 1:
            raise ValueError("block_size must be positive")

    @property
    def effective_backend(self) -> str:
        return self.backend if "FINAL" in self.stages else "store"


def parse_stages(text: str) -> frozenset[str]:
    if text.strip().lower() in ("", "none", "raw"):
        return frozenset()
    if text.strip().lower() == "all":
        return ALL_STAGES
    return frozenset(p.strip().upper() for p in text.split(",") if p.strip())


def discover_models(inputs: Iterable[str | os.PathLike]) -> list[tuple[str, Path]]:
    """``(relative name, path)`` for every model file; directories are walked."""
    found: list[tuple[str, Path]] = []
    for inp in inputs:
        p = Path(inp)
        if p.is_dir():
            for f in sorted(p.rglob(f"*{MODEL_SUFFIX}")):
                if f.is_file():
                    found.append((f.relative_to(p).as_posix(), f))
        elif p.is_file():
            found.append((p.name, p))
        else:
            raise FileNotFoundError(f"no such model file or directory: {p}")
    names = [n for n, _ in found]
    if len(set(names)) != len(names):
        raise ValueError("two inputs map to the same relative model name")
    return found


# --- per-model work (runs in worker processes) ------------------------------


@dataclass
class _ModelTask:
    path: str
    name: str
    stage2: list[str]
    raw: list[str]
    store: list[str]
    stages: frozenset[str]
    block_size: int
    backend: str


@dataclass
class _StreamOut:
    dtype: str
    method: str
    count: int
    extents: list
    sections: list[bytes]


@dataclass
class _ModelOut:
    header: str
    total_bytes: int
    method: str | None
    sizes: dict
    streams: list[_StreamOut] = field(default_factory=list)
    raw: dict[str, bytes] = field(default_factory=dict)
    store: dict[str, bytes] = field(default_factory=dict)
    gaps: bytes | None = None

    @property
    def stored_bytes(self) -> int:
        return (
            sum(len(s) for st in self.streams for s in st.sections)
            + sum(map(len, self.raw.values()))
            + sum(map(len, self.store.values()))
            + len(self.gaps or b"")
        )


def _compress_model(task: _ModelTask) -> _ModelOut:
    backend = get_backend(task.backend)
    with load_model(task.path, task.name) as model:
        man = model.manifest
        streams = flatten_float_layers(model, task.stage2)
        raw_size = sum(man.tensor(n).data_len for n in task.stage2)
        elf_out = de_out = None
        if "ELF" in task.stages:
            elf_out = {k: elf_codec.compress_stream(s.values, task.block_size) for k, s in streams.items()}
        if "DE" in task.stages:
            de_out = {k: [de_codec.de_compress(s.values, s.dtype).to_bytes()] for k, s in streams.items()}
        sizes = {
            "raw": raw_size,
            "elf": None if elf_out is None else sum(len(b) for v in elf_out.values() for b in v),
            "de": None if de_out is None else sum(len(b) for v in de_out.values() for b in v),
        }
        method = None
        raw_layers = set(task.raw)
        store_layers = set(task.store)
        out = _ModelOut(man.raw_header.decode("utf-8"), man.total_bytes, None, sizes)
        if task.stage2:
            method = select_stage2(sizes["de"], sizes["elf"], raw_size)
            if method is MethodTag.RAW:
                raw_layers.update(task.stage2)
            else:
                chosen = elf_out if method is MethodTag.ELF else de_out
                for k, s in streams.items():
                    out.streams.append(
                        _StreamOut(k, method.value, int(s.values.size), s.extents, [frame_section(b, backend) for b in chosen[k]])
                    )
            out.method = method.value
        for t in man.tensors:
            if t.name in raw_layers:
                out.raw[t.name] = frame_section(model.tensor_bytes(t), backend)
            if t.name in store_layers:
                out.store[t.name] = frame_section(model.tensor_bytes(t), backend)
        gaps = model.gap_bytes()
        if gaps:
            out.gaps = frame_section(gaps, backend)
    return out


# --- corpus compression -----------------------------------------------------


@dataclass
class ModelSummary:
    name: str
    original_bytes: int
    stored_bytes: int
    method: str | None
    sizes: dict

    @property
    def cr(self) -> float:
        return self.original_bytes / self.stored_bytes if self.stored_bytes else float("inf")


@dataclass
class CorpusResult:
    archive: Path
    original_bytes: int
    archive_bytes: int
    models: list[ModelSummary]
    seconds: float = 0.0

    @property
    def cr(self) -> float:
        return self.original_bytes / self.archive_bytes

    @property
    def throughput_mb_s(self) -> float:
        return self.original_bytes / 1e6 / self.seconds if self.seconds else float("inf")


def _pool(workers: int) -> Executor | None:
    return ProcessPoolExecutor(max_workers=workers) if workers > 1 else None


def compress_corpus(
    inputs: Sequence[str | os.PathLike] | Sequence[tuple[str, Path]],
    out_path: str | os.PathLike,
    options: CompressOptions | None = None,
) -> CorpusResult:
    options = options or CompressOptions()
    t0 = time.perf_counter()
    sources = list(inputs)
    if sources and not isinstance(sources[0], tuple):
        sources = discover_models(sources)
    backend = get_backend(options.effective_backend)

    models = [load_model(p, name) for name, p in sources]
    try:
        tags: list[dict[str, tuple[MethodTag, int | None]]] = [{} for _ in models]
        tasks = []
        store_ids: dict[bytes, int] = {}
        store_fps: list[str] = []
        index = None
        if "HD" in options.stages:
            with ThreadPoolExecutor(max_workers=options.workers) as tp:
                index = dedup_scan(models, paranoid=options.paranoid, executor=tp)
        for mi, ((name, path), model) in enumerate(zip(sources, models)):
            stage2, raw, store = [], [], []
            entries = index.models[mi] if index is not None else [None] * len(model.manifest.tensors)
            for t, entry in zip(model.manifest.tensors, entries):
                if entry is not None and index.is_duplicated(entry.fingerprint):
                    fp = entry.fingerprint
                    if fp not in store_ids:
                        store_ids[fp] = len(store_ids)
                        store_fps.append(fp.hex())
                        store.append(t.name)
                    tags[mi][t.name] = (MethodTag.DEDUP_REF, store_ids[fp])
                elif t.dtype.is_float:
                    stage2.append(t.name)
                else:
                    raw.append(t.name)
            tasks.append(
                _ModelTask(str(path), name, stage2, raw, store, options.stages, options.block_size, backend.name)
            )
    finally:
        for m in models:
            m.close()

    writer = ArchiveWriter(out_path, backend)
    entries_out = []
    summaries = []
    store_sections: list[int | None] = [None] * len(store_fps)
    pool = _pool(options.workers)
    try:
        results = pool.map(_compress_model, tasks) if pool else map(_compress_model, tasks)
        for mi, ((name, _), task, res) in enumerate(zip(sources, tasks, results)):
            layer_refs = []
            for lname, framed in res.store.items():
                store_sections[tags[mi][lname][1]] = writer.add(framed)
            raw_sids = {lname: writer.add(framed) for lname, framed in res.raw.items()}
            streams = []
            for st in res.streams:
                streams.append(
                    {
                        "dtype": st.dtype,
                        "method": st.method,
                        "count": st.count,
                        "extents": st.extents,
                        "sections": [writer.add(s) for s in st.sections],
                    }
                )
            stream_of = {e[0]: st["dtype"] for st in streams for e in st["extents"]}
            header_tensors, _ = parse_header(res.header.encode("utf-8"), 1 << 62)
            for t in header_tensors:
                if t.name in tags[mi]:
                    layer_refs.append([t.name, MethodTag.DEDUP_REF.value, tags[mi][t.name][1]])
                elif t.name in raw_sids:
                    layer_refs.append([t.name, MethodTag.RAW.value, raw_sids[t.name]])
                else:
                    layer_refs.append([t.name, res.method, stream_of[t.name]])
            entries_out.append(
                {
                    "file": name,
                    "header": res.header,
                    "total_bytes": res.total_bytes,
                    "method": res.method,
                    "sizes": res.sizes,
                    "layers": layer_refs,
                    "streams": streams,
                    "gaps": writer.add(res.gaps) if res.gaps else None,
                }
            )
            summaries.append(ModelSummary(name, res.total_bytes, res.stored_bytes, res.method, res.sizes))
    except BaseException:
        writer.abort()
        raise
    finally:
        if pool:
            pool.shutdown()

    index_doc = {
        "format": 1,
        "stages": sorted(options.stages),
        "block_size": options.block_size,
        "fingerprints": store_fps,
        "store": store_sections,
        "models": entries_out,
    }
    size = writer.finish(index_doc)
    return CorpusResult(
        Path(out_path), sum(s.original_bytes for s in summaries), size, summaries, time.perf_counter() - t0
    )


# --- decompression -----------------------------------------------------------

_reader: ArchiveReader | None = None


def _init_reader(path: str) -> None:
    global _reader
    _reader = ArchiveReader(path)


def _stream_values(reader: ArchiveReader, model: str, st: dict) -> np.ndarray:
    dtype = KNOWN_DTYPES.get(st["dtype"])
    if dtype is None or not dtype.is_float:
        raise CorruptionError(f"stream dtype {st['dtype']!r} is not a float type", where=model)
    extents = st["extents"]

    def layer_at(param: int) -> str:
        for lname, start, count in extents:
            if start <= param < start + count:
                return lname
        return extents[-1][0] if extents else "?"

    if st["method"] == MethodTag.ELF.value:
        parts = []
        seen = 0
        for k, sid in enumerate(st["sections"]):
            where = f"{model} {st['dtype']} block {k} (layer {layer_at(seen)})"
            block = elf_codec.ElfBlock.from_bytes(reader.section(sid, where), dtype, where)
            parts.append(elf_codec.elf_decompress_block(block))
            seen += block.param_count
        values = np.concatenate(parts) if parts else np.empty(0, dtype.np_float)
    elif st["method"] == MethodTag.DE.value:
        where = f"{model} {st['dtype']} DE stream (layer {layer_at(0)})"
        (sid,) = st["sections"]
        values = de_codec.de_decompress(de_codec.DeStream.from_bytes(reader.section(sid, where), dtype, where), where)
    else:
        raise CorruptionError(f"unknown stream method {st['method']!r}", where=model)
    if values.size != st["count"]:
        raise CorruptionError(f"stream decodes to {values.size} params, expected {st['count']}", where=model)
    return values


def _decompress_model(entry: dict, out_dir: str, reader: ArchiveReader | None = None) -> str:
    reader = reader or _reader
    name = entry["file"]
    store = reader.index["store"]
    header = entry["header"].encode("utf-8")
    data_size = entry["total_bytes"] - 8 - len(header)
    tensors, metadata = parse_header(header, data_size)
    manifest = ModelManifest(name, tensors, entry["total_bytes"], metadata, raw_header=header)

    layers: dict[str, bytes] = {}
    for st in entry["streams"]:
        layers.update(scatter_stream(_stream_values(reader, name, st), st["extents"]))
    for lname, tag, ref in entry["layers"]:
        where = f"{name} layer {lname}"
        if tag == MethodTag.DEDUP_REF.value:
            if not isinstance(ref, int) or not 0 <= ref < len(store) or store[ref] is None:
                raise CorruptionError(f"dangling dedup reference {ref}", where=where)
            layers[lname] = reader.section(store[ref], where)
        elif tag == MethodTag.RAW.value:
            layers[lname] = reader.section(ref, where)
        elif lname not in layers:
            raise CorruptionError("layer missing from its stream", where=where)
    for t in tensors:
        if len(layers.get(t.name, b"")) != t.data_len:
            raise CorruptionError(f"layer restored to wrong size", where=f"{name} layer {t.name}")
    gaps = reader.section(entry["gaps"], f"{name} gaps") if entry.get("gaps") is not None else b""
    out = Path(out_dir) / name
    write_model(out, manifest, layers, gaps)
    return str(out)


def decompress_corpus(archive_path: str | os.PathLike, out_dir: str | os.PathLike, workers: int = 1) -> list[Path]:
    out_dir = Path(out_dir)
    with ArchiveReader(archive_path) as reader:
        entries = reader.index.get("models")
        if not isinstance(entries, list):
            raise CorruptionError("index has no model list", where="index")
        for e in entries:
            rel = Path(e["file"])
            if rel.is_absolute() or ".." in rel.parts:
                raise CorruptionError(f"unsafe model path {e['file']!r}", where="index")
        if workers > 1 and len(entries) > 1:
            with ProcessPoolExecutor(max_workers=workers, initializer=_init_reader, initargs=(str(archive_path),)) as pool:
                paths = list(pool.map(_decompress_model, entries, [str(out_dir)] * len(entries)))
        else:
            paths = [_decompress_model(e, str(out_dir), reader) for e in entries]
    return [Path(p) for p in paths]


# --- ablation ------------------------------------------------------------------


def ablation_run(
    inputs: Sequence[str | os.PathLike],
    configs: Sequence[Iterable[str]],
    work_dir: str | os.PathLike,
    backend: str = DEFAULT_BACKEND,
    workers: int = 1,
    block_size: int = elf_codec.DEFAULT_BLOCK_SIZE,
) -> list[dict]:
    """Compress the corpus once per stage set and tabulate compression ratios."""
    sources = discover_models(inputs)
    rows = []
    for stages in configs:
        stages = frozenset(s.upper() for s in stages)
        label = "+".join(s for s in STAGES if s in stages) or "RAW"
        opts = CompressOptions(stages=stages, backend=backend, workers=workers, block_size=block_size)
        res = compress_corpus(sources, Path(work_dir) / f"ablation-{label}.elvs", opts)
        rows.append(
            {
                "stages": label,
                "original_bytes": res.original_bytes,
                "archive_bytes": res.archive_bytes,
                "cr": res.cr,
                "per_model_cr": [m.cr for m in res.models],
            }
        )
    return rows


def inspect_archive(path: str | os.PathLike) -> dict:
    """Index summary: backend, stages and per-model methods."""
    with ArchiveReader(path) as r:
        return {
            "backend": r.backend.name,
            "stages": r.index.get("stages"),
            "models": [
                {"file": m["file"], "method": m["method"], "layers": {l[0]: l[1] for l in m["layers"]}}
                for m in r.index["models"]
            ],
        }


__all__ = [
    "ALL_STAGES",
    "CompressOptions",
    "CorpusResult",
    "MethodTag",
    "ablation_run",
    "compress_corpus",
    "decompress_corpus",
    "discover_models",
    "inspect_archive",
    "parse_stages",
    "select_stage2",
]
