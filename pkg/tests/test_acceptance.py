"""Acceptance criteria 1-11, each at its stated tolerance.

Run with ``pytest tests/test_acceptance.py -v``; a summary section prints one
PASS/FAIL line per criterion.  Criterion 10 builds a 1 GiB corpus
(``ELVES_BENCH_MB`` overrides the size for quick local runs, at the cost of
no longer meeting the criterion's corpus size).
"""

import math
import os
import time
from collections import Counter
from pathlib import Path

import numpy as np
import pytest

from conftest import raw_model_bytes
from elves import analyzer, chunking
from elves.archive import ArchiveReader
from elves.bitstream import BitWriter
from elves.de import DeStream, de_compress, de_decompress, de_saving_report
from elves.dedup import layer_dup_report
from elves.elf import ElfBlock, elf_compress_block, elf_decompress_block, error_bound
from elves.model_store import F16, F32, F64, KNOWN_DTYPES, flatten_float_layers, load_model, parse_model
from elves.pipeline import CompressOptions, MethodTag, compress_corpus, decompress_corpus, discover_models
from elves.synth import SynthSpec, float_params, generate_corpus

GOLDEN = Path(__file__).parent / "golden" / "de_distance_1000000.bin"
MANTISSA = {"F16": 10, "F32": 23, "F64": 52}


@pytest.fixture
def detail(record_property):
    return lambda text: record_property("detail", text)


# 1 ---------------------------------------------------------------------------


def _max_error(x: np.ndarray) -> tuple[float, int]:
    y = elf_decompress_block(elf_compress_block(x))
    exc = ~(np.abs(x) < 1)
    assert y[exc].tobytes() == x[exc].tobytes()
    with np.errstate(invalid="ignore"):
        err = np.abs(y.astype(np.float64) - x.astype(np.float64))
    err[exc] = 0.0
    return float(err.max()), int(np.count_nonzero(~(err <= error_bound(KNOWN_DTYPES[{2: "F16", 4: "F32", 8: "F64"}[x.itemsize]]))))


def test_c01_elf_error_bound(detail):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    f16 = np.arange(1 << 16, dtype=np.uint32).astype(np.uint16).view(np.float16)
    results = {"F16": _max_error(f16)}
    for dtype in (F32, F64):
        n = 10_000_000
        x = rng.uniform(-1, 1, n)
        x[: n // 2] *= 2.0 ** -rng.integers(0, 40, n // 2)  # small magnitudes too
        results[dtype.name] = _max_error(x.astype(dtype.np_float))
    secs = time.perf_counter() - t0
    violations = sum(v for _, v in results.values())
    detail(
        ", ".join(f"{k} max {e:.3g} (bound 2^{int(math.log2(error_bound(KNOWN_DTYPES[k])))})" for k, (e, _) in results.items())
        + f"; {violations} violations; {secs:.1f}s"
    )
    assert violations == 0
    assert all(e <= error_bound(KNOWN_DTYPES[k]) for k, (e, _) in results.items())
    assert secs < 60


# 2 ---------------------------------------------------------------------------


def test_c02_elf_size_law(tmp_path, detail):
    rng = np.random.default_rng(2)
    n = 1_000_000
    blk = elf_compress_block(float_params(rng, n, F32))
    assert blk.exception_count == 0
    payload_ok = len(blk.code_bytes) == math.ceil(24 * n / 8)

    d = tmp_path / "in"
    for i in range(4):
        arrays = {f"layer{j}": float_params(rng, n // 4, F32) for j in range(4)}
        from elves.model_store import write_arrays

        d.mkdir(exist_ok=True)
        write_arrays(d / f"m{i}.safetensors", arrays)
    res = compress_corpus([d], tmp_path / "elf.elvs", CompressOptions(stages={"ELF"}))
    rel = abs(res.cr - 4 / 3) / (4 / 3)
    detail(f"payload {len(blk.code_bytes)} B for 1e6 params (expect 3000000); ELF-only CR {res.cr:.4f} ({rel:.3%} from 4/3)")
    assert payload_ok
    assert rel <= 0.01


# 3 ---------------------------------------------------------------------------


def _random_block(rng):
    dtype = (F16, F32, F64)[int(rng.integers(3))]
    n = int(rng.integers(0, 48))
    kind = rng.integers(4)
    if kind == 0:
        x = rng.uniform(-1, 1, n)
    elif kind == 1:
        x = rng.uniform(-3, 3, n)
    elif kind == 2:
        x = rng.uniform(-1, 1, n) * 2.0 ** -rng.integers(0, 70, n)
    else:
        bits = rng.integers(0, 1 << 62, n, dtype=np.int64).astype(np.uint64) >> np.uint64(64 - dtype.bits)
        return bits.astype(dtype.np_uint).view(dtype.np_float)  # arbitrary patterns incl. NaN/Inf/subnormal
    return x.astype(dtype.np_float)


def test_c03_elf_idempotence(detail):
    rng = np.random.default_rng(3)
    bad = 0
    blocks = 100_000
    for _ in range(blocks):
        x = _random_block(rng)
        once = elf_compress_block(x).to_bytes()
        dtype = {2: F16, 4: F32, 8: F64}[x.itemsize]
        again = elf_compress_block(elf_decompress_block(ElfBlock.from_bytes(once, dtype))).to_bytes()
        bad += once != again
    detail(f"{blocks} random blocks, {bad} mismatches")
    assert bad == 0


# 4 ---------------------------------------------------------------------------

_SPECIALS = {
    d.name: np.array([np.nan, -np.nan, 0.0, -0.0, np.inf, -np.inf], dtype=d.np_float).view(d.np_uint)
    for d in (F16, F32, F64)
}


def _random_de_stream(rng):
    dtype = (F16, F32, F64)[int(rng.integers(3))]
    n = int(rng.integers(0, 64))
    pool = rng.integers(0, 1 << 62, int(rng.integers(1, 24)), dtype=np.int64).astype(np.uint64)
    pool = (pool >> np.uint64(64 - dtype.bits)).astype(dtype.np_uint)
    specials = _SPECIALS[dtype.name]
    pool = np.concatenate([pool, specials, specials ^ dtype.np_uint.type(1)])  # NaN payload variants
    return pool[rng.integers(0, pool.size, n)].view(dtype.np_float), dtype


def test_c04_de_lossless(detail):
    rng = np.random.default_rng(4)
    bad = 0
    streams = 100_000
    for _ in range(streams - 3):
        x, dtype = _random_de_stream(rng)
        back = de_decompress(DeStream.from_bytes(de_compress(x, dtype).to_bytes(), dtype))
        bad += back.tobytes() != x.tobytes()
    # long-distance cases: repeats 2^16 .. 2^22 positions apart
    for far in (1 << 16, (1 << 20) + 7, 1 << 22):
        x = np.arange(far + 3, dtype=np.float64)
        x[far:] = x[:3]
        x[0] = -0.0
        x[far] = -0.0
        back = de_decompress(de_compress(x))
        bad += back.tobytes() != x.tobytes()
    detail(f"{streams} streams (NaN payloads, -0.0, distances to 2^22), {bad} mismatches")
    assert bad == 0


# 5 ---------------------------------------------------------------------------


def test_c05_de_golden_vector(detail):
    x = np.arange(1_000_001, dtype=np.float32)
    x[1_000_000] = x[0]
    s = de_compress(x)
    record = s.bitmap[125_000:]
    golden = GOLDEN.read_bytes()
    bits = format(int.from_bytes(record, "big") >> 6, "026b")
    detail(f"record bits {bits[0]}|{bits[1:6]}|{bits[6:]} vs golden {golden.hex()}")
    assert s.bitmap_bits == 1_000_026 and s.bitmap[:125_000] == bytes(125_000)
    assert record == golden
    assert de_decompress(s).tobytes() == x.tobytes()


# 6 ---------------------------------------------------------------------------


def test_c06_de_high_duplication_saving(tmp_path, detail):
    spec = SynthSpec(seed=6, models=1, layers_per_model=4, params_per_layer=500_000, dup_fraction=0.995, mean_distance=1000)
    (path,) = generate_corpus(spec, tmp_path / "in")
    with load_model(path) as m:
        stream = flatten_float_layers(m)["F32"].values.copy()
    dup_ratio = analyzer.param_duplication_ratio(stream)
    r = de_saving_report(stream, F32)
    res = compress_corpus([path], tmp_path / "a.elvs", CompressOptions(stages={"HD", "DE", "ELF"}))
    detail(
        f"dup ratio {dup_ratio:.4f}; practical saving {r['practical_saving_ratio']:.2%} "
        f"(theoretical {r['theoretical_saving_ratio']:.2%}); pipeline picked {res.models[0].method}"
    )
    assert r["practical_saving_ratio"] >= 0.30
    assert res.models[0].method == MethodTag.DE.value


# 7 ---------------------------------------------------------------------------


def test_c07_dedup_k_copies(tmp_path, detail):
    k = 5
    spec = SynthSpec(seed=7, models=1, copies=k, layers_per_model=6, params_per_layer=[1000, 50_000],
                     dtypes={"F32": 3, "F16": 1, "I64": 1, "U8": 1})
    paths = generate_corpus(spec, tmp_path / "in")
    archive = tmp_path / "a.elvs"
    res = compress_corpus([tmp_path / "in"], archive)
    with load_model(paths[0]) as m0:
        one_model = m0.manifest.data_bytes
    with ArchiveReader(archive) as r:
        payload_raw = sum(len(r.section(sid)) for sid in range(len(r.index["sections"])))
        index_bytes = r.payload_start
    decompress_corpus(archive, tmp_path / "out")
    exact = all((tmp_path / "out" / p.name).read_bytes() == p.read_bytes() for p in paths)
    models = [load_model(p) for p in paths]
    try:
        overall = layer_dup_report(models)[-1]
    finally:
        for m in models:
            m.close()
    want = 100 * (k - 1) / k
    detail(
        f"k={k}: unique payload {payload_raw} B vs one model {one_model} B, archive {res.archive_bytes} B "
        f"(index {index_bytes} B); dup% {overall.dup_pct:.2f}/{overall.dup_size_pct:.2f} vs {want:.2f}; byte-exact {exact}"
    )
    assert payload_raw == one_model
    assert res.archive_bytes <= one_model + index_bytes + 64 * len(r.index["sections"])
    assert exact
    assert abs(overall.dup_pct - want) <= 0.1 and abs(overall.dup_size_pct - want) <= 0.1


# 8 ---------------------------------------------------------------------------


def _e2e_corpus(root: Path) -> Path:
    mix = {"F32": 4, "F16": 2, "F64": 1, "I64": 1, "U8": 1, "BOOL": 1}
    groups = {
        "plain": SynthSpec(seed=81, models=30, params_per_layer=[500, 30_000], dtypes=mix, in_range_fraction=0.97, dup_fraction=0.1),
        "dup": SynthSpec(seed=82, models=25, params_per_layer=[500, 30_000], dup_fraction=0.99, mean_distance=32),
        "oor": SynthSpec(seed=83, models=15, params_per_layer=[500, 30_000], dtypes={"F32": 1, "F64": 1}, in_range_fraction=0.3),
        "shared": SynthSpec(seed=84, models=10, copies=3, params_per_layer=[500, 30_000], dtypes=mix, layer_dup_fraction=0.3),
    }
    for name, spec in groups.items():
        generate_corpus(spec, root / name)
    return root


def test_c08_end_to_end(tmp_path, detail):
    t0 = time.perf_counter()
    src = _e2e_corpus(tmp_path / "in")
    names = [n for n, _ in discover_models([src])]
    r1 = compress_corpus([src], tmp_path / "w1.elvs", CompressOptions(workers=1))
    r8 = compress_corpus([src], tmp_path / "w8.elvs", CompressOptions(workers=8))
    identical = (tmp_path / "w1.elvs").read_bytes() == (tmp_path / "w8.elvs").read_bytes()
    decompress_corpus(tmp_path / "w8.elvs", tmp_path / "out", workers=8)
    float_bad = other_bad = 0
    for n in names:
        with load_model(src / n) as a, load_model(tmp_path / "out" / n) as b:
            for layer in analyzer.error_report(a, b).violations():
                if layer.dtype in MANTISSA:
                    float_bad += 1
                else:
                    other_bad += 1
    secs = time.perf_counter() - t0
    methods = Counter(m.method for m in r1.models)
    detail(
        f"{len(names)} models, CR {r1.cr:.3f}, methods {dict(methods)}; 1 vs 8 workers identical: {identical}; "
        f"violations float {float_bad} non-float {other_bad}; {secs:.0f}s"
    )
    assert len(names) == 100
    assert identical
    assert float_bad == 0 and other_bad == 0
    assert secs < 300


# 9 ---------------------------------------------------------------------------


def _leb_len(v: int) -> int:
    return max(1, -(-v.bit_length() // 7))


def _elf_size_oracle(x: np.ndarray, dtype, block_size: int) -> int:
    limit = 1 - 2.0 ** -(MANTISSA[dtype.name] + 1)  # 1+|p| rounds to 2 from here up
    width = 1 + MANTISSA[dtype.name]
    total = 0
    for b in range(0, x.size, block_size):
        piece = x[b : b + block_size].astype(np.float64)
        exc = [i for i, p in enumerate(piece) if not abs(p) < limit]
        deltas = [exc[0]] + [b - a for a, b in zip(exc, exc[1:])] if exc else []
        total += 16 + sum(_leb_len(v) for v in deltas) + len(exc) * dtype.itemsize
        total += -(-(piece.size - len(exc)) * width // 8)
    return total


def _de_size_oracle(x: np.ndarray, dtype) -> int:
    last: dict[int, int] = {}
    bits = distinct = 0
    for i, b in enumerate(x.view(dtype.np_uint).tolist()):
        if b in last:
            bits += 1 + 5 + (i - last[b]).bit_length()
        else:
            bits += 1
            distinct += 1
        last[b] = i
    return 12 + -(-bits // 8) + distinct * dtype.itemsize


def _expected(de: int, elf: int, raw: int) -> str:
    best, tag = (elf, "ELF") if elf <= de else (de, "DE")
    return "RAW" if best > raw else tag


def test_c09_selection_rule(tmp_path, make_model, detail):
    rng = np.random.default_rng(9)
    d = tmp_path / "in"
    # constructed: DE provably smaller (one repeated value), ELF provably smaller (all distinct, in range)
    make_model({"w": np.full(20_000, 0.375, np.float32)}, name="de_wins.safetensors", directory=d)
    make_model({"w": np.linspace(-0.9, 0.9, 20_000, dtype=np.float32)}, name="elf_wins.safetensors", directory=d)
    make_model({"w": np.linspace(2, 9, 20_000, dtype=np.float32)}, name="raw_wins.safetensors", directory=d)
    for i in range(60):
        arrays = {}
        for j in range(int(rng.integers(1, 4))):
            dt = (F16, F32, F64)[int(rng.integers(3))]
            arrays[f"l{j}"] = float_params(
                rng, int(rng.integers(1, 3000)), dt,
                in_range_fraction=float(rng.choice([1.0, 0.9, 0.5, 0.0])),
                dup_fraction=float(rng.choice([0.0, 0.5, 0.9, 0.999])),
                mean_distance=float(rng.choice([2, 50, 1000])),
            )
        make_model(arrays, name=f"rand{i:02d}.safetensors", directory=d)
    block = 1024
    res = compress_corpus([d], tmp_path / "a.elvs", CompressOptions(stages={"DE", "ELF"}, block_size=block))
    mismatches = []
    for m in res.models:
        with load_model(d / m.name) as mf:
            streams = flatten_float_layers(mf)
            raw = sum(t.data_len for t in mf.manifest.tensors)
        elf = sum(_elf_size_oracle(s.values, s.dtype, block) for s in streams.values())
        de = sum(_de_size_oracle(s.values, s.dtype) for s in streams.values())
        want = _expected(de, elf, raw)
        if (m.sizes["elf"], m.sizes["de"], m.sizes["raw"], m.method) != (elf, de, raw, want):
            mismatches.append(m.name)
    picks = {m.name: m.method for m in res.models if not m.name.startswith("rand")}
    detail(f"constructed picks {picks}; {len(res.models)} models vs size oracle, {len(mismatches)} mismatches")
    assert picks == {"de_wins.safetensors": "DE", "elf_wins.safetensors": "ELF", "raw_wins.safetensors": "RAW"}
    assert not mismatches


# 10 --------------------------------------------------------------------------


@pytest.mark.slow
def test_c10_throughput_scaling(tmp_path, detail):
    size_mb = int(os.environ.get("ELVES_BENCH_MB", "1024"))
    per_model = 16 * 2**20
    models = max(1, size_mb * 2**20 // per_model)
    spec = SynthSpec(seed=10, models=models, layers_per_model=4, params_per_layer=per_model // 16)
    generate_corpus(spec, tmp_path / "in")
    rates = {}
    for w in (1, 8):
        out = tmp_path / f"w{w}.elvs"
        res = compress_corpus([tmp_path / "in"], out, CompressOptions(workers=w))
        rates[w] = res.throughput_mb_s
        out.unlink()
    ratio = rates[8] / rates[1]
    detail(
        f"{models * per_model / 2**30:.2f} GiB corpus on {os.cpu_count()} CPU(s): 1 worker {rates[1]:.1f} MB/s, "
        f"8 workers {rates[8]:.1f} MB/s, speedup {ratio:.2f}x (need >= 4)"
    )
    assert ratio >= 4


# 11 --------------------------------------------------------------------------

_DT = {"F16": np.float16, "F32": np.float32, "F64": np.float64, "U8": np.uint8, "I64": np.int64, "BOOL": np.bool_}


def _random_small_corpus(rng):
    pool_vals = rng.uniform(-2, 2, 6)
    layers = []
    models = []
    for mi in range(int(rng.integers(1, 4))):
        header, data = {}, bytearray()
        for li in range(int(rng.integers(0, 5))):
            if layers and rng.random() < 0.25:
                name, arr = layers[int(rng.integers(len(layers)))]
            else:
                name = list(_DT)[int(rng.integers(len(_DT)))]
                n = int(rng.integers(0, 700))
                if name in ("U8", "I64", "BOOL"):
                    arr = rng.integers(0, 3, n).astype(_DT[name])
                else:
                    arr = pool_vals[rng.integers(0, 6, n)].astype(_DT[name])
                    if rng.random() < 0.3 and n:
                        arr[rng.integers(0, n, 3)] = [np.nan, -0.0, np.inf]
                if rng.random() < 0.3 and n > 8:
                    arr[n // 2 :] = np.resize(arr[: n // 2], n - n // 2)  # internal repeats
                layers.append((name, arr))
            raw = arr.tobytes()
            header[f"t{li}"] = {"dtype": name, "shape": [arr.size], "data_offsets": [len(data), len(data) + len(raw)]}
            data += raw
        models.append(parse_model(raw_model_bytes(header, bytes(data)), f"m{mi}"))
    return models


def _oracle_hist(models):
    out = {}
    for m in models:
        for t in m.manifest.tensors:
            if t.dtype.name not in MANTISSA:
                continue
            c = out.setdefault(t.dtype.name, [0, 0, 0])
            for v in m.tensor_array(t).tolist():
                if -1 < v <= 0:
                    c[0] += 1
                elif 0 < v < 1:
                    c[1] += 1
                else:
                    c[2] += 1
    return out


def _oracle_dup_ratio(m):
    patterns, total = Counter(), 0
    for t in m.manifest.tensors:
        if t.dtype.name in MANTISSA:
            a = m.tensor_array(t)
            patterns.update((t.dtype.name, a[i : i + 1].tobytes()) for i in range(a.size))
            total += a.size
    return sum(c for c in patterns.values() if c > 1) / total if total else 0.0


def _oracle_cuts(data: bytes, lo: int, avg: int, hi: int) -> list[int]:
    """Scalar FastCDC: running gear hash, strict mask below avg, loose mask above, forced cut at max."""
    gear = [int(g) for g in chunking.GEAR]
    h, hashes = 0, []
    for b in data:
        h = ((h << 1) + gear[b]) & ((1 << 64) - 1)
        hashes.append(h)
    bits = round(math.log2(avg))
    strict = ((1 << (bits + 2)) - 1) << (64 - bits - 2)
    loose = ((1 << (bits - 2)) - 1) << (64 - bits + 2)
    cuts, start, n = [], 0, len(data)
    while n - start > lo:
        end = min(n, start + hi)
        for i in range(start + lo - 1, min(n, start + hi)):
            length = i + 1 - start
            mask = strict if length < avg else loose
            if hashes[i] & mask == 0:
                end = i + 1
                break
        cuts.append(end)
        start = end
    if start < n:
        cuts.append(n)
    return cuts


def _oracle_units(data: bytes, g):
    if g == "layer":
        return [data] if data else []
    if isinstance(g, int):
        return [data[o : o + g] for o in range(0, len(data), g)]
    cuts = _oracle_cuts(data, *g[1:])
    return [data[a:b] for a, b in zip([0] + cuts[:-1], cuts)]


def _oracle_report(models, g, key):
    seen: list[bytes] = []
    out: dict[str, list[int]] = {}
    for m in models:
        for t in m.manifest.tensors:
            elem = t.dtype.itemsize if t.dtype.name in MANTISSA else 1
            for unit in _oracle_units(bytes(m.tensor_bytes(t)), g):
                k = key(unit, elem)
                hit = any(k == s for s in seen)  # pairwise against every earlier unit
                seen.append(k)
                for row in (out.setdefault(t.dtype.name, [0, 0]), out.setdefault("Overall", [0, 0])):
                    row[0] += len(unit)
                    row[1] += len(unit) * hit
    out.setdefault("Overall", [0, 0])
    return out


def _sampled(unit: bytes, elem: int, stride: int = 32) -> bytes:
    count = len(unit) // elem
    return b"".join(unit[i * elem : (i + 1) * elem] for i in range(0, count, stride))


def _as_table(rows):
    return {r.dtype: [r.total_size, r.matched_size] for r in rows}


def test_c11_analyzer_oracles(detail):
    rng = np.random.default_rng(11)
    grans = ["layer", 512, 64, ("cdc", 32, 128, 512), ("cdc", 128, 4096, 131072)]
    failures = Counter()
    corpora = 1000
    for _ in range(corpora):
        models = _random_small_corpus(rng)
        hist = {k: [s.nonpositive, s.positive, s.out_of_range] for k, s in analyzer.corpus_histogram(models).items() if k != "Overall"}
        failures["histogram"] += hist != _oracle_hist(models)
        failures["dup_ratio"] += any(analyzer.model_duplication_ratio(m) != _oracle_dup_ratio(m) for m in models)
        for g in grans:
            if g != "layer":
                failures["chunk_dup"] += _as_table(chunking.chunk_dup_report(models, g)) != _oracle_report(models, g, lambda u, e: u)
            failures["similarity"] += _as_table(chunking.similarity_report(models, g)) != _oracle_report(models, g, _sampled)
        for m in models:
            m.close()
    detail(f"{corpora} random corpora; mismatches {dict((k, failures[k]) for k in ('histogram', 'dup_ratio', 'chunk_dup', 'similarity'))}")
    assert sum(failures.values()) == 0
