"""Whole-layer deduplication by SHA-256 fingerprint."""

from __future__ import annotations

import hashlib
from concurrent.futures import Executor
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

from .model_store import ModelFile


def fingerprint_layer(data) -> bytes:
    """32-byte SHA-256 digest of a layer's raw bytes."""
    return hashlib.sha256(data).digest()


class EntryKind(str, Enum):
    UNIQUE = "UNIQUE"
    REF = "REF"


@dataclass(frozen=True)
class DedupEntry:
    layer: str
    kind: EntryKind
    fingerprint: bytes
    size: int
    dtype: str


@dataclass
class DedupIndex:
    """Fingerprint table plus, per model, how each layer is stored.

    ``stored`` maps a fingerprint to its stored-layer id (order of first
    occurrence) and ``origin`` to the ``(model index, layer name)`` that
    supplies its bytes.  ``occurrences`` counts every appearance.
    """

    stored: dict[bytes, int] = field(default_factory=dict)
    origin: dict[bytes, tuple[int, str]] = field(default_factory=dict)
    occurrences: dict[bytes, int] = field(default_factory=dict)
    models: list[list[DedupEntry]] = field(default_factory=list)

    def is_duplicated(self, fp: bytes) -> bool:
        return self.occurrences.get(fp, 0) > 1

    @property
    def unique_bytes(self) -> int:
        seen = set()
        total = 0
        for entries in self.models:
            for e in entries:
                if e.kind is EntryKind.UNIQUE and e.fingerprint not in seen:
                    seen.add(e.fingerprint)
                    total += e.size
        return total

    @property
    def duplicate_bytes(self) -> int:
        return sum(e.size for entries in self.models for e in entries if e.kind is EntryKind.REF)

    def to_json(self) -> dict:
        return {
            "fingerprints": [fp.hex() for fp in self.stored],
            "models": [[[e.layer, e.kind.value, self.stored[e.fingerprint]] for e in entries] for entries in self.models],
        }


class FingerprintCollision(Exception):
    """Paranoid mode found equal digests over different bytes."""


def fingerprint_models(models: Sequence[ModelFile], executor: Executor | None = None) -> list[list[bytes]]:
    """Digest of every layer, per model, in manifest order."""
    jobs = [(m, t) for m in models for t in m.manifest.tensors]
    mapper = executor.map if executor is not None else map
    digests = list(mapper(lambda job: fingerprint_layer(job[0].tensor_bytes(job[1])), jobs))
    out: list[list[bytes]] = []
    k = 0
    for m in models:
        n = len(m.manifest.tensors)
        out.append(digests[k : k + n])
        k += n
    return out


def dedup_scan(
    models: Sequence[ModelFile],
    fingerprints: list[list[bytes]] | None = None,
    paranoid: bool = False,
    executor: Executor | None = None,
) -> DedupIndex:
    """Scan models in order; first occurrence of a digest is UNIQUE, later ones REF."""
    if fingerprints is None:
        fingerprints = fingerprint_models(models, executor)
    index = DedupIndex()
    for mi, (model, fps) in enumerate(zip(models, fingerprints)):
        entries = []
        for t, fp in zip(model.manifest.tensors, fps):
            index.occurrences[fp] = index.occurrences.get(fp, 0) + 1
            if fp in index.stored:
                if paranoid:
                    om, oname = index.origin[fp]
                    if bytes(models[om].tensor_bytes(oname)) != bytes(model.tensor_bytes(t)):
                        raise FingerprintCollision(f"{model.manifest.model_id}/{t.name} vs {oname}")
                kind = EntryKind.REF
            else:
                index.stored[fp] = len(index.stored)
                index.origin[fp] = (mi, t.name)
                kind = EntryKind.UNIQUE
            entries.append(DedupEntry(t.name, kind, fp, t.data_len, t.dtype.name))
        index.models.append(entries)
    return index


@dataclass
class DupRow:
    dtype: str
    count: int = 0
    dup_count: int = 0
    total_size: int = 0
    dup_size: int = 0

    @property
    def dup_pct(self) -> float:
        return 100.0 * self.dup_count / self.count if self.count else 0.0

    @property
    def dup_size_pct(self) -> float:
        return 100.0 * self.dup_size / self.total_size if self.total_size else 0.0

    def as_dict(self) -> dict:
        return {
            "dtype": self.dtype,
            "count": self.count,
            "dup_pct": self.dup_pct,
            "total_size": self.total_size,
            "dup_size": self.dup_size,
            "dup_size_pct": self.dup_size_pct,
        }


def layer_dup_report(models: Sequence[ModelFile] | DedupIndex) -> list[DupRow]:
    """Per-dtype layer duplication, plus an ``Overall`` row last."""
    index = models if isinstance(models, DedupIndex) else dedup_scan(models)
    return _rows((e.dtype, e.size, e.kind is EntryKind.REF) for entries in index.models for e in entries)


def _rows(items: Iterable[tuple[str, int, bool]]) -> list[DupRow]:
    rows: dict[str, DupRow] = {}
    overall = DupRow("Overall")
    for dtype, size, is_dup in items:
        for row in (rows.setdefault(dtype, DupRow(dtype)), overall):
            row.count += 1
            row.total_size += size
            if is_dup:
                row.dup_count += 1
                row.dup_size += size
    return [rows[k] for k in sorted(rows)] + [overall]
