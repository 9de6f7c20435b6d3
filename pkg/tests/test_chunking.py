import hashlib

import numpy as np
import pytest

from elves.chunking import (
    GEAR,
    cdc_chunks,
    cdc_cuts,
    chunk_dup_report,
    fsc_chunks,
    gear_hashes,
    similarity_report,
    similarity_signature,
    split_units,
)

MASK64 = (1 << 64) - 1


def test_fsc_extents():
    chunks = fsc_chunks(bytes(10_000), 4096)
    assert [(c.offset, c.length) for c in chunks] == [(0, 4096), (4096, 4096), (8192, 1808)]
    assert chunks[0].fingerprint == hashlib.sha256(bytes(4096)).digest()
    assert fsc_chunks(b"", 4096) == []
    assert all(c.length == 512 for c in fsc_chunks(bytes(4096), 512))


def test_gear_table_is_fixed():
    # SplitMix64 reference: first output for the seed
    z = (0x6368756E6B + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    assert int(GEAR[0]) == z ^ (z >> 31)
    assert GEAR.size == 256 and len(set(GEAR.tolist())) == 256


def test_gear_hash_matches_rolling_definition(rng):
    data = rng.integers(0, 256, 300, dtype=np.uint8).tobytes()
    h = 0
    want = []
    for b in data:
        h = ((h << 1) + int(GEAR[b])) & MASK64
        want.append(h)
    assert [int(x) for x in gear_hashes(data)] == want


def test_short_input_single_chunk(rng):
    data = rng.integers(0, 256, 100, dtype=np.uint8).tobytes()
    assert [(c.offset, c.length) for c in cdc_chunks(data)] == [(0, 100)]
    assert cdc_chunks(b"") == []


def test_cdc_sizes_and_determinism(rng):
    data = rng.integers(0, 256, 1 << 20, dtype=np.uint8).tobytes()
    a = cdc_chunks(data)
    assert a == cdc_chunks(bytes(data))
    sizes = [c.length for c in a]
    assert sum(sizes) == len(data)
    assert all(128 <= s <= 128 * 1024 for s in sizes[:-1])
    assert 1024 < np.mean(sizes) < 16384


def test_cdc_resynchronises(rng):
    b = rng.integers(0, 256, 200_000, dtype=np.uint8).tobytes()
    a = rng.integers(0, 256, 5000, dtype=np.uint8).tobytes()
    c = rng.integers(0, 256, 5000, dtype=np.uint8).tobytes()
    cuts_ab = {x - 5000 for x in cdc_cuts(a + b) if x > 5000}
    cuts_cb = {x - 5000 for x in cdc_cuts(c + b) if x > 5000}
    first_common = min(cuts_ab & cuts_cb)
    assert first_common <= 128 * 1024
    assert {x for x in cuts_ab if x >= first_common} == {x for x in cuts_cb if x >= first_common}


def test_cdc_max_size_forced_on_flat_input():
    cuts = cdc_cuts(bytes(300_000), 128, 4096, 8192)
    assert np.diff([0] + cuts).max() <= 8192


def test_signature_rules(rng):
    x = rng.random(1000).astype(np.float32)
    assert similarity_signature(x.tobytes(), 4) == similarity_signature(x.copy().tobytes(), 4)
    y = x.copy()
    y[1::32] += 1  # untouched at sampled indices 0, 32, 64, ...
    assert similarity_signature(y.tobytes(), 4) == similarity_signature(x.tobytes(), 4)
    z = x.copy()
    z[0] += 1
    assert similarity_signature(z.tobytes(), 4) != similarity_signature(x.tobytes(), 4)


def test_split_units():
    assert split_units(bytes(10), "layer") == [(0, 10)]
    assert split_units(b"", "layer") == []
    assert split_units(bytes(10), 4) == [(0, 4), (4, 4), (8, 2)]
    with pytest.raises(ValueError):
        split_units(bytes(10), "bogus")


def test_half_chunks_repeated(make_model, open_models, rng):
    uniq = rng.integers(0, 256, 512 * 8, dtype=np.uint8)
    blob = np.concatenate([uniq, uniq])
    (m,) = open_models([make_model({"u": blob})])
    rows = chunk_dup_report([m], 512)
    assert rows[-1].pct == 50.0


def test_all_unique_corpus(make_model, open_models, rng):
    models = open_models([make_model({"w": rng.random(4096).astype(np.float32)}) for _ in range(2)])
    for g in (512, 4096, ("cdc", 128, 4096, 131072)):
        assert chunk_dup_report(models, g)[-1].pct == 0.0
    assert similarity_report(models, "layer")[-1].pct == 0.0


def test_duplicates_are_a_subset_of_similar(make_model, open_models, rng):
    for _ in range(10):
        pool = [rng.integers(0, 4, 300).astype(np.float32) for _ in range(3)]
        paths = [make_model({f"l{j}": pool[int(rng.integers(3))] + (rng.random() < 0.3) for j in range(3)})]
        paths.append(make_model({"x": pool[0]}))
        models = open_models(paths)
        for g in ("layer", 4096, 512):
            dup = chunk_dup_report(models, g) if g != "layer" else chunk_dup_report(models, "layer")
            sim = similarity_report(models, g)
            assert sim[-1].matched_size >= dup[-1].matched_size
