"""Reproducible synthetic model corpora.

A corpus spec is a JSON object; every key is optional::

    {
      "seed": 0,
      "models": 8,                 # distinct models generated
      "copies": 1,                 # files written per distinct model
      "layers_per_model": 4,
      "params_per_layer": 65536,   # or [min, max]
      "dtypes": {"F32": 1.0},      # layer dtype mix (F16/F32/F64/U8/I64/BOOL)
      "in_range_fraction": 1.0,    # share of float params inside (-1, 1)
      "dup_fraction": 0.0,         # share of params copying an earlier param
      "mean_distance": 64,         # mean of the geometric copy distance
      "layer_dup_fraction": 0.0    # share of layers copying an earlier layer
    }
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .model_store import KNOWN_DTYPES, Dtype, write_arrays


@dataclass
class SynthSpec:
    seed: int = 0
    models: int = 8
    copies: int = 1
    layers_per_model: int = 4
    params_per_layer: int | list[int] = 65536
    dtypes: dict[str, float] = field(default_factory=lambda: {"F32": 1.0})
    in_range_fraction: float = 1.0
    dup_fraction: float = 0.0
    mean_distance: float = 64.0
    layer_dup_fraction: float = 0.0

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synth keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "SynthSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def in_range_limit(dtype: Dtype) -> float:
    """Largest magnitude whose ``1 + |p|`` stays below 2 in ``dtype``."""
    mbits = {"F16": 10, "F32": 23, "F64": 52}[dtype.name]
    return 1.0 - 2.0**-mbits


def float_params(
    rng: np.random.Generator,
    n: int,
    dtype: Dtype,
    in_range_fraction: float = 1.0,
    dup_fraction: float = 0.0,
    mean_distance: float = 64.0,
) -> np.ndarray:
    """Parameters with a controlled in-range share and copy structure.

    Fresh values are uniform in (-1, 1), or +-[1, 8) when out of range.
    A duplicated position copies the value ``d`` places back, ``d`` drawn
    from a geometric distribution with the given mean.
    """
    lim = in_range_limit(dtype)
    fresh = rng.uniform(-lim, lim, n)
    out = rng.random(n) >= in_range_fraction
    k = int(out.sum())
    fresh[out] = rng.uniform(1.0, 8.0, k) * rng.choice([-1.0, 1.0], k)
    fresh = fresh.astype(dtype.np_float)
    inside = ~out
    fresh[inside] = np.clip(fresh[inside], -lim, lim)
    if dup_fraction <= 0 or n < 2:
        return fresh
    src = np.arange(n, dtype=np.int64)
    dup = rng.random(n) < dup_fraction
    dup[0] = False
    dist = rng.geometric(min(1.0, 1.0 / max(mean_distance, 1.0)), n)
    src[dup] = np.maximum(src[dup] - dist[dup], 0)
    while True:
        nxt = src[src]
        if np.array_equal(nxt, src):
            break
        src = nxt
    return fresh[src]


def _layer(rng: np.random.Generator, spec: SynthSpec, dtype: Dtype, n: int) -> np.ndarray:
    if dtype.is_float:
        return float_params(rng, n, dtype, spec.in_range_fraction, spec.dup_fraction, spec.mean_distance)
    if dtype.name == "BOOL":
        return rng.random(n) < 0.5
    if dtype.name == "U8":
        return rng.integers(0, 256, n, dtype=np.uint8)
    return rng.integers(-(1 << 40), 1 << 40, n, dtype=np.int64)


def generate_corpus(spec: SynthSpec | dict, out_dir: str | os.PathLike) -> list[Path]:
    if isinstance(spec, dict):
        spec = SynthSpec.from_dict(spec)
    rng = np.random.default_rng(spec.seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = list(spec.dtypes)
    probs = np.array([spec.dtypes[k] for k in names], dtype=float)
    probs /= probs.sum()
    pool: list[np.ndarray] = []
    paths = []
    for mi in range(spec.models):
        arrays = {}
        for li in range(spec.layers_per_model):
            if pool and rng.random() < spec.layer_dup_fraction:
                arr = pool[int(rng.integers(len(pool)))]
            else:
                dtype = KNOWN_DTYPES[names[int(rng.choice(len(names), p=probs))]]
                if isinstance(spec.params_per_layer, int):
                    n = spec.params_per_layer
                else:
                    n = int(rng.integers(spec.params_per_layer[0], spec.params_per_layer[1] + 1))
                arr = _layer(rng, spec, dtype, n)
                pool.append(arr)
            arrays[f"layer{li}.weight"] = arr
        for c in range(spec.copies):
            suffix = f"-copy{c}" if spec.copies > 1 else ""
            p = out_dir / f"model{mi:04d}{suffix}.safetensors"
            write_arrays(p, arrays)
            paths.append(p)
    return paths
