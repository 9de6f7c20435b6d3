"""Parameter statistics and reconstruction error reports."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import elf
from .errors import ManifestMismatchError
from .model_store import FLOAT_DTYPES, KNOWN_DTYPES, ModelFile


@dataclass
class ParamStats:
    """Counts of parameters in (-1, 0], (0, 1) and everywhere else.

    Zero and -0.0 fall in the left bucket; NaN and infinities are out of range.
    """

    nonpositive: int = 0
    positive: int = 0
    out_of_range: int = 0
    by_dtype: dict[str, int] = field(default_factory=dict)

    @property
    def count(self) -> int:
        return self.nonpositive + self.positive + self.out_of_range

    def fractions(self) -> dict[str, float]:
        n = self.count
        if n == 0:
            return {"(-1,0]": 0.0, "(0,1)": 0.0, "out": 0.0}
        return {"(-1,0]": self.nonpositive / n, "(0,1)": self.positive / n, "out": self.out_of_range / n}

    def __add__(self, other: "ParamStats") -> "ParamStats":
        by = dict(self.by_dtype)
        for k, v in other.by_dtype.items():
            by[k] = by.get(k, 0) + v
        return ParamStats(
            self.nonpositive + other.nonpositive,
            self.positive + other.positive,
            self.out_of_range + other.out_of_range,
            by,
        )


def param_value_histogram(values: np.ndarray, dtype_name: str | None = None) -> ParamStats:
    v = np.asarray(values).ravel()
    with np.errstate(invalid="ignore"):
        neg = int(np.count_nonzero((v > -1) & (v <= 0)))
        pos = int(np.count_nonzero((v > 0) & (v < 1)))
    name = dtype_name or v.dtype.name
    return ParamStats(neg, pos, v.size - neg - pos, {name: v.size} if v.size else {})


def model_histogram(model: ModelFile) -> ParamStats:
    total = ParamStats()
    for t in model.manifest.tensors:
        if t.dtype.is_float:
            total = total + param_value_histogram(model.tensor_array(t), t.dtype.name)
    return total


def duplicate_count(bits: np.ndarray) -> int:
    """Elements whose bit pattern occurs at least twice, counting every occurrence."""
    if bits.size == 0:
        return 0
    _, counts = np.unique(bits, return_counts=True)
    return int(counts[counts > 1].sum())


def param_duplication_ratio(values: np.ndarray) -> float:
    v = np.asarray(values).ravel()
    if v.size == 0:
        return 0.0
    bits = v.view(f"u{v.dtype.itemsize}")
    return duplicate_count(bits) / v.size


def model_duplication_ratio(model: ModelFile) -> float:
    """Duplication ratio over all float parameters of a model (per-dtype patterns)."""
    dup = total = 0
    for d in FLOAT_DTYPES:
        arrays = [model.tensor_array(t) for t in model.manifest.tensors if t.dtype == d]
        if arrays:
            v = np.concatenate(arrays)
            dup += duplicate_count(v.view(d.np_uint))
            total += v.size
    return dup / total if total else 0.0


@dataclass
class LayerError:
    name: str
    dtype: str
    count: int
    max_abs_error: float
    mean_abs_error: float
    exact_count: int

    @property
    def bit_exact(self) -> bool:
        return self.exact_count == self.count


@dataclass
class ErrorReport:
    model_id: str
    layers: list[LayerError]

    @property
    def max_abs_error(self) -> float:
        return max((l.max_abs_error for l in self.layers), default=0.0)

    def violations(self) -> list[LayerError]:
        """Float layers beyond the ELF bound and non-float layers that differ at all."""
        out = []
        for l in self.layers:
            if l.dtype in elf.LAYOUTS:
                if not l.max_abs_error <= elf.error_bound(KNOWN_DTYPES[l.dtype]):
                    out.append(l)
            elif not l.bit_exact:
                out.append(l)
        return out

    @property
    def ok(self) -> bool:
        return not self.violations()


def error_report(original: ModelFile, decompressed: ModelFile) -> ErrorReport:
    a, b = original.manifest, decompressed.manifest
    sig_a = [(t.name, t.dtype, t.shape) for t in a.tensors]
    sig_b = [(t.name, t.dtype, t.shape) for t in b.tensors]
    if sig_a != sig_b:
        raise ManifestMismatchError(f"{a.model_id}: tensor names/dtypes/shapes differ")
    layers = []
    for ta, tb in zip(a.tensors, b.tensors):
        if ta.dtype.is_float:
            x = original.tensor_array(ta)
            y = decompressed.tensor_array(tb)
            same = x.view(ta.dtype.np_uint) == y.view(ta.dtype.np_uint)
            with np.errstate(invalid="ignore", over="ignore"):
                diff = np.abs(x.astype(np.float64) - y.astype(np.float64))
            diff[same] = 0.0
            diff[np.isnan(diff)] = np.inf
            layers.append(
                LayerError(
                    ta.name,
                    ta.dtype.name,
                    x.size,
                    float(diff.max()) if x.size else 0.0,
                    float(diff.mean()) if x.size else 0.0,
                    int(same.sum()),
                )
            )
        else:
            xa = np.frombuffer(original.tensor_bytes(ta), dtype=np.uint8)
            xb = np.frombuffer(decompressed.tensor_bytes(tb), dtype=np.uint8)
            exact = int(np.count_nonzero(xa == xb))
            err = 0.0 if exact == xa.size else float("inf")
            layers.append(LayerError(ta.name, ta.dtype.name, xa.size, err, 0.0 if err == 0 else err, exact))
    return ErrorReport(a.model_id, layers)


def corpus_histogram(models: Sequence[ModelFile]) -> dict[str, ParamStats]:
    """Per-dtype value distribution plus an ``Overall`` entry."""
    out: dict[str, ParamStats] = {}
    for m in models:
        for t in m.manifest.tensors:
            if t.dtype.is_float:
                s = param_value_histogram(m.tensor_array(t), t.dtype.name)
                out[t.dtype.name] = out.get(t.dtype.name, ParamStats()) + s
    overall = ParamStats()
    for s in out.values():
        overall = overall + s
    out["Overall"] = overall
    return out
