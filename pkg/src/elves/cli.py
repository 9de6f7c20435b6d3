"""Command-line entry point: ``elves {compress,decompress,analyze,verify,bench}``.

Exit codes: 0 success, 1 verification found violations, 2 usage error,
3 corrupt input, 4 I/O error, 5 unsupported backend, 6 manifest mismatch.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import shutil
import sys
import tempfile
import time
from pathlib import Path

from . import analyzer, chunking, de
from .backends import DEFAULT_BACKEND, available_backends
from .dedup import layer_dup_report
from .elf import DEFAULT_BLOCK_SIZE
from .errors import ElvesError
from .model_store import load_model
from .pipeline import (
    CompressOptions,
    ablation_run,
    compress_corpus,
    decompress_corpus,
    discover_models,
    parse_stages,
)
from .synth import SynthSpec, generate_corpus

log = logging.getLogger("elves")

EXIT_VIOLATION = 1
EXIT_USAGE = 2
EXIT_IO = 4


def default_workers() -> int:
    env = os.environ.get("ELVES_WORKERS")
    if env:
        return int(env)
    return os.cpu_count() or 1


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _block_size(text: str) -> int:
    v = int(text)
    if v < 1 << 16 or v & (v - 1):
        raise argparse.ArgumentTypeError("block size must be a power of two >= 65536")
    return v


def _emit(rows: list[dict], fmt: str, out: str | None, title: str | None = None) -> None:
    if fmt == "json":
        text = json.dumps(rows, indent=2)
    else:
        buf = io.StringIO()
        if rows:
            w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
        text = buf.getvalue()
    if out:
        with open(out, "a" if title else "w") as f:
            if title:
                f.write(f"# {title}\n")
            f.write(text if text.endswith("\n") else text + "\n")
    else:
        if title:
            print(f"# {title}")
        print(text.rstrip("\n"))


def cmd_compress(args) -> int:
    opts = CompressOptions(
        stages=parse_stages(args.stages),
        backend=args.backend,
        block_size=args.block_size,
        workers=args.workers,
        paranoid=args.paranoid,
    )
    res = compress_corpus(args.inputs, args.output, opts)
    rows = [
        {"model": m.name, "method": m.method or "-", "original_bytes": m.original_bytes, "stored_bytes": m.stored_bytes, "cr": round(m.cr, 4)}
        for m in res.models
    ]
    if args.report:
        _emit(rows, args.format, args.report)
    print(
        f"compressed {len(res.models)} models: {res.original_bytes} -> {res.archive_bytes} bytes "
        f"(CR {res.cr:.4f}) in {res.seconds:.2f}s"
    )
    return 0


def cmd_decompress(args) -> int:
    paths = decompress_corpus(args.archive, args.output, args.workers)
    print(f"restored {len(paths)} models into {args.output}")
    return 0


def cmd_analyze(args) -> int:
    sources = discover_models(args.inputs)
    models = [load_model(p, name) for name, p in sources]
    everything = not any([args.histogram, args.dup_ratio, args.layer_dup, args.chunk_dup, args.similarity, args.de_saving])
    out = args.out
    if out:
        Path(out).write_text("")
    try:
        if everything or args.histogram:
            rows = []
            for k, s in analyzer.corpus_histogram(models).items():
                fr = s.fractions()
                rows.append({"dtype": k, "count": s.count, "frac_(-1,0]": fr["(-1,0]"], "frac_(0,1)": fr["(0,1)"], "frac_out": fr["out"]})
            _emit(rows, args.format, out, "parameter value distribution")
        if everything or args.dup_ratio:
            rows = [{"model": m.manifest.model_id, "dup_ratio": analyzer.model_duplication_ratio(m)} for m in models]
            _emit(rows, args.format, out, "parameter duplication ratio")
        if everything or args.layer_dup:
            _emit([r.as_dict() for r in layer_dup_report(models)], args.format, out, "layer duplication")
        if everything or args.chunk_dup:
            cols = {"fsc_4KB": 4096, "fsc_512B": 512, "cdc": ("cdc", 128, 4096, 128 * 1024)}
            _emit(_merge_rows({k: chunking.chunk_dup_report(models, g) for k, g in cols.items()}), args.format, out, "chunk duplication")
        if everything or args.similarity:
            cols = {"layer": "layer", "4KB": 4096, "512B": 512}
            _emit(_merge_rows({k: chunking.similarity_report(models, g) for k, g in cols.items()}), args.format, out, "similarity")
        if everything or args.de_saving:
            rows = []
            for m in models:
                for t in m.manifest.tensors:
                    if t.dtype.is_float:
                        r = de.de_saving_report(m.tensor_array(t), t.dtype)
                        rows.append({"model": m.manifest.model_id, "layer": t.name, **r})
            _emit(rows, args.format, out, "DE saving")
    finally:
        for m in models:
            m.close()
    return 0


def _merge_rows(reports: dict[str, list]) -> list[dict]:
    merged: dict[str, dict] = {}
    for col, rows in reports.items():
        for r in rows:
            row = merged.setdefault(r.dtype, {"dtype": r.dtype, "total_size": r.total_size})
            row[f"{col}_size"] = r.matched_size
            row[f"{col}_pct"] = r.pct
    return list(merged.values())


def verify_trees(original: str, restored: str) -> tuple[list[dict], int]:
    rows = []
    violations = 0
    for name, p in discover_models([original]):
        other = Path(restored) / name
        with load_model(p, name) as a, load_model(other, name) as b:
            rep = analyzer.error_report(a, b)
        bad = {l.name for l in rep.violations()}
        violations += len(bad)
        for l in rep.layers:
            rows.append(
                {
                    "model": name,
                    "layer": l.name,
                    "dtype": l.dtype,
                    "max_abs_error": l.max_abs_error,
                    "mean_abs_error": l.mean_abs_error,
                    "exact": l.exact_count,
                    "count": l.count,
                    "ok": l.name not in bad,
                }
            )
    return rows, violations


def cmd_verify(args) -> int:
    rows, violations = verify_trees(args.original, args.restored)
    if args.out or args.verbose:
        _emit(rows, args.format, args.out)
    worst = max((r["max_abs_error"] for r in rows), default=0.0)
    print(f"verified {len(rows)} layers: {violations} violations, max abs error {worst:.6g}")
    return EXIT_VIOLATION if violations else 0


def cmd_bench(args) -> int:
    tmp = Path(tempfile.mkdtemp(prefix="elves-bench-"))
    try:
        inputs = list(args.inputs)
        if args.synth:
            spec = SynthSpec.load(args.synth)
            generate_corpus(spec, tmp / "corpus")
            inputs.append(str(tmp / "corpus"))
        if not inputs:
            print("bench: give model paths or --synth SPEC", file=sys.stderr)
            return EXIT_USAGE
        stages = parse_stages(args.stages)
        if args.ablation:
            configs = [{"HD"}, {"HD", "DE"}, {"HD", "ELF"}, {"HD", "DE", "ELF"}, {"HD", "DE", "ELF", "FINAL"}]
            rows = ablation_run(inputs, configs, tmp, backend=args.backend, workers=args.workers_list[0])
            for r in rows:
                r.pop("per_model_cr")
            _emit(rows, args.format, args.out)
            return 0
        rows = bench_throughput(inputs, tmp, args.workers_list, stages, args.backend, args.block_size)
        _emit(rows, args.format, args.out)
        return 0
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


def bench_throughput(inputs, work_dir, workers_list, stages, backend=DEFAULT_BACKEND, block_size=DEFAULT_BLOCK_SIZE) -> list[dict]:
    """Wall-clock compress/decompress throughput, file I/O included."""
    rows = []
    for w in workers_list:
        archive = Path(work_dir) / f"bench-w{w}.elvs"
        opts = CompressOptions(stages=stages, backend=backend, workers=w, block_size=block_size)
        res = compress_corpus(inputs, archive, opts)
        t0 = time.perf_counter()
        decompress_corpus(archive, Path(work_dir) / f"restored-w{w}", w)
        dsec = time.perf_counter() - t0
        shutil.rmtree(Path(work_dir) / f"restored-w{w}", ignore_errors=True)
        rows.append(
            {
                "workers": w,
                "input_mb": res.original_bytes / 1e6,
                "cr": res.cr,
                "compress_s": res.seconds,
                "compress_mb_s": res.throughput_mb_s,
                "decompress_s": dsec,
                "decompress_mb_s": res.original_bytes / 1e6 / dsec if dsec else float("inf"),
            }
        )
        archive.unlink()
    return rows


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="elves", description="Compress pre-trained model tensor files.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, workers=True):
        if workers:
            sp.add_argument("--workers", type=_positive_int, default=None, help="worker processes (default: $ELVES_WORKERS or CPU count)")
        sp.add_argument("--format", choices=("csv", "json"), default="csv")

    c = sub.add_parser("compress", help="compress model files/directories into one archive")
    c.add_argument("inputs", nargs="+")
    c.add_argument("-o", "--output", required=True)
    c.add_argument("--stages", default="all", help="comma list of hd,de,elf,final (default all)")
    c.add_argument("--backend", default=DEFAULT_BACKEND, choices=available_backends())
    c.add_argument("--block-size", type=_block_size, default=DEFAULT_BLOCK_SIZE)
    c.add_argument("--paranoid", action="store_true", help="byte-compare layers whose digests match")
    c.add_argument("--report", help="write a per-model report here")
    common(c)
    c.set_defaults(func=cmd_compress)

    d = sub.add_parser("decompress", help="restore model files from an archive")
    d.add_argument("archive")
    d.add_argument("-o", "--output", required=True)
    common(d)
    d.set_defaults(func=cmd_decompress)

    a = sub.add_parser("analyze", help="compressibility statistics of a corpus")
    a.add_argument("inputs", nargs="+")
    a.add_argument("--histogram", action="store_true", help="parameter value distribution")
    a.add_argument("--dup-ratio", action="store_true", help="per-model parameter duplication ratio")
    a.add_argument("--layer-dup", action="store_true", help="layer duplication by dtype")
    a.add_argument("--chunk-dup", action="store_true", help="FSC 4KB/512B and CDC chunk duplication")
    a.add_argument("--similarity", action="store_true", help="sampled-hash similarity by granularity")
    a.add_argument("--de-saving", action="store_true", help="theoretical vs practical DE saving per layer")
    a.add_argument("--out")
    common(a, workers=False)
    a.set_defaults(func=cmd_analyze)

    v = sub.add_parser("verify", help="compare original and restored model trees")
    v.add_argument("original")
    v.add_argument("restored")
    v.add_argument("--out")
    common(v, workers=False)
    v.set_defaults(func=cmd_verify)

    b = sub.add_parser("bench", help="throughput or ablation benchmark")
    b.add_argument("inputs", nargs="*")
    b.add_argument("--synth", help="synthetic corpus spec (JSON)")
    b.add_argument("--workers", default=None, help="comma list of worker counts, e.g. 1,8")
    b.add_argument("--stages", default="all")
    b.add_argument("--backend", default=DEFAULT_BACKEND, choices=available_backends())
    b.add_argument("--block-size", type=_block_size, default=DEFAULT_BLOCK_SIZE)
    b.add_argument("--ablation", action="store_true", help="CR per stage combination instead of throughput")
    b.add_argument("--out")
    b.add_argument("--format", choices=("csv", "json"), default="csv")
    b.set_defaults(func=cmd_bench)
    return p


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else 0
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "bench":
        try:
            args.workers_list = [int(x) for x in args.workers.split(",")] if args.workers else [default_workers()]
        except ValueError:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        if any(w < 1 for w in args.workers_list):
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
    elif getattr(args, "workers", None) is None and hasattr(args, "workers"):
        args.workers = default_workers()
    try:
        return args.func(args)
    except ElvesError as e:
        print(f"elves {args.command}: {e}", file=sys.stderr)
        return e.exit_code
    except ValueError as e:
        print(f"elves {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"elves {args.command}: I/O error: {e}", file=sys.stderr)
        return EXIT_IO


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
