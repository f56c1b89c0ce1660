"""Command-line entry points.

Subcommands: build-bank (encode references into a memory bank plus
retrieval index), infer (chunked decoding with memory recall), cost
(format cost curves and the explicit-memory advantage interval), serve
(bank service over TCP), bench (decode throughput with and without
memory).  Reports print delimited rows to stdout, then a "---" line, then
key=value stats; cost and bench also render their figures to files when
--out-dir is given.

Exit codes: 0 success, 1 usage or configuration, 2 input/output, 3
incompatible artifact.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import tokenizer
from .bank import (
    MemoryBank,
    load_codebooks,
    quantize_memory,
    save_codebooks,
    storage_report,
)
from .config import ModelConfig
from .costmodel import (
    CostParams,
    cost_report,
    emit_curves,
    log_range,
)
from .engine import (
    Engine,
    EngineConfig,
    expected_retrievals,
    parse_engine_config,
)
from .errors import (
    CompatibilityError,
    ConfigError,
    FormatError,
    InputError,
    NotFoundError,
    NumericError,
    ProtocolError,
    ShapeError,
    StateError,
    TrainingError,
    TransportError,
    UsageError,
)
from .model import init_model, load_model, save_model
from .quantizer import QuantizerSpec, quantizer_train
from .retrieval import EMBED_DIM, NgramEmbedder, RetrievalIndex
from .service import BankClient, serve_bank
from .writer import MODE_APPROX, MODE_EXACT, write_memory

_USAGE_ERRORS = (UsageError, ConfigError, InputError, ShapeError, StateError,
                 TrainingError, NumericError)
_IO_ERRORS = (FormatError, NotFoundError, TransportError, ProtocolError)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_INCOMPATIBLE = 3


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage problems and 0 for --help.
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return args.func(args)
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CompatibilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except _IO_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except KeyboardInterrupt:
        return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="exmem",
        description="explicit-memory toolkit: bank building, inference, "
                    "cost analysis, serving, benchmarking")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-bank",
                       help="encode references into a bank and index")
    p.add_argument("--refs", required=True, help="UTF-8 text, one reference "
                   "document per line; long lines split into l_ref chunks")
    p.add_argument("--model", required=True, help="model file path")
    p.add_argument("--init-model", action="store_true",
                   help="create a fresh small model at --model first")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bank", required=True, help="output bank path")
    p.add_argument("--index", required=True, help="output index path")
    p.add_argument("--quantize", action="store_true",
                   help="store two-level quantizer codes instead of raw values")
    p.add_argument("--codebook", default=None,
                   help="output codebook path (required with --quantize)")
    p.add_argument("--select-mode", choices=[MODE_EXACT, MODE_APPROX],
                   default=MODE_EXACT)
    p.set_defaults(func=_cmd_build_bank)

    p = sub.add_parser("infer", help="generate tokens with memory recall")
    p.add_argument("--model", default=None)
    p.add_argument("--bank", default=None)
    p.add_argument("--index", default=None)
    p.add_argument("--codebook", default=None)
    p.add_argument("--config", default=None,
                   help="key = value engine configuration file")
    p.add_argument("--prefer-config", action="store_true",
                   help="let the configuration file override command flags")
    p.add_argument("--prompt", default=None)
    p.add_argument("--prompt-file", default=None)
    p.add_argument("--n-tokens", type=int, default=32)
    p.add_argument("--mode", choices=["warm", "cold"], default=None)
    p.add_argument("--select-mode", choices=[MODE_EXACT, MODE_APPROX],
                   default=MODE_EXACT)
    p.add_argument("--cache-capacity", type=int, default=None)
    p.add_argument("--chunk-size", type=int, default=None)
    p.add_argument("--n-refs", type=int, default=None)
    p.add_argument("--filter-threshold", type=float, default=None)
    p.add_argument("--remote", default=None, help="host:port of a bank service")
    p.add_argument("--tolerant", action="store_true",
                   help="continue without memories if the remote bank is down")
    p.add_argument("--no-memory", action="store_true",
                   help="ignore all memory artifacts; plain decoding")
    p.add_argument("--timeout", type=float, default=None)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("cost", help="knowledge-format cost curves")
    p.add_argument("--L", type=int, default=44)
    p.add_argument("--H", type=int, default=40)
    p.add_argument("--H-kv", type=int, default=8)
    p.add_argument("--d-h", type=int, default=80)
    p.add_argument("--W", type=int, default=3200)
    p.add_argument("--n-vocab", type=int, default=60416)
    p.add_argument("--L-mem", type=int, default=22)
    p.add_argument("--l-ref", type=int, default=128)
    p.add_argument("--l-chunk", type=int, default=64)
    p.add_argument("--l-mem", type=int, default=8)
    p.add_argument("--l-train", type=int, default=2048)
    p.add_argument("--n-start", type=float, default=1e-2)
    p.add_argument("--n-stop", type=float, default=1e5)
    p.add_argument("--points", type=int, default=121)
    p.add_argument("--out-dir", default=None,
                   help="also write cost_curves.csv and cost_curves.png here")
    p.set_defaults(func=_cmd_cost)

    p = sub.add_parser("serve", help="run the bank service")
    p.add_argument("--bank", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=7733)
    p.set_defaults(func=_cmd_serve)

    p = sub.add_parser("bench", help="decode throughput with/without memory")
    p.add_argument("--model", required=True)
    p.add_argument("--bank", default=None)
    p.add_argument("--index", default=None)
    p.add_argument("--codebook", default=None)
    p.add_argument("--prompt-len", type=int, default=64)
    p.add_argument("--n-tokens", type=int, default=64)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=["warm", "cold"], default="warm")
    p.add_argument("--chunk-size", type=int, default=None)
    p.add_argument("--retrievals-only", action="store_true",
                   help="print the session retrieval count and skip timing")
    p.add_argument("--out-dir", default=None,
                   help="also write bench_runs.csv and bench_runs.png here")
    p.set_defaults(func=_cmd_bench)

    return parser


def _print_stats(stats) -> None:
    print("---")
    for key, value in stats.items():
        if isinstance(value, float):
            print(f"{key}={value:.10g}")
        else:
            print(f"{key}={value}")


def _read_refs(path: str) -> str:
    raw = Path(path).read_bytes()
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: not valid UTF-8 at byte {exc.start}") from exc


def split_references(text: str, l_ref: int) -> list[list[int]]:
    """One reference per line; lines longer than l_ref tokens are split
    into consecutive l_ref-token references."""
    refs = []
    for line in text.splitlines():
        tokens = tokenizer.encode(line)
        for start in range(0, len(tokens), l_ref):
            piece = tokens[start:start + l_ref]
            if piece:
                refs.append(piece)
    return refs


# -- build-bank ---------------------------------------------------------


def _cmd_build_bank(args) -> int:
    if args.quantize and not args.codebook:
        raise UsageError("--quantize needs --codebook to store the codebooks")
    if args.init_model:
        model = init_model(ModelConfig.toy(), seed=args.seed)
        save_model(model, args.model)
    else:
        model = load_model(args.model)
    cfg = model.config

    text = _read_refs(args.refs)
    refs = split_references(text, cfg.l_ref)
    if not refs:
        raise InputError(f"{args.refs}: no reference tokens found")

    memories = [write_memory(model, tokens, mode=args.select_mode, ref_id=i)
                for i, tokens in enumerate(refs)]

    key_cb = value_cb = None
    if args.quantize:
        spec = (QuantizerSpec.reference() if cfg.d_h == 80
                else QuantizerSpec.desk(cfg.d_h))
        key_rows = np.concatenate([m.keys.reshape(-1, cfg.d_h) for m in memories])
        value_rows = np.concatenate([m.values.reshape(-1, cfg.d_h)
                                     for m in memories])
        key_cb = quantizer_train(key_rows, spec, seed=args.seed)
        value_cb = quantizer_train(value_rows, spec, seed=args.seed + 1)
        save_codebooks(args.codebook, key_cb, value_cb)

    bank = MemoryBank(cfg.hash(), quantized=args.quantize,
                      key_cb=key_cb, value_cb=value_cb)
    for mem in memories:
        bank.add(quantize_memory(mem, key_cb, value_cb) if args.quantize
                 else mem)
    bank.save(args.bank)

    embedder = NgramEmbedder(dim=EMBED_DIM)
    index = RetrievalIndex.build(enumerate(refs), embedder)
    index.save(args.index)

    report = storage_report(cfg, n_refs=len(refs), quantized=args.quantize)
    print(f"built bank with {len(refs)} references")
    stats = {
        "n_refs": len(refs),
        "quantized": int(args.quantize),
        "bank_bytes": Path(args.bank).stat().st_size,
        "index_bytes": Path(args.index).stat().st_size,
        "sparsity_factor": float(report.sparsity_factor),
        "compression_rate": float(report.compression_rate),
        "compound_factor": float(report.compound_factor),
    }
    if args.quantize:
        stats["codebook_bytes"] = Path(args.codebook).stat().st_size
        stats["quantizer_compression"] = key_cb.spec.compression_rate()
    _print_stats(stats)
    return EXIT_OK


# -- infer --------------------------------------------------------------


_FLAG_TO_FIELD = {
    "model": "model", "bank": "bank", "index": "index",
    "codebook": "codebook", "cache_capacity": "cache_capacity",
    "chunk_size": "chunk_size", "n_refs": "n_refs",
    "filter_threshold": "filter_threshold", "mode": "mode",
    "remote": "remote", "timeout": "timeout",
}


def _resolve_engine_config(args) -> EngineConfig:
    file_cfg = (parse_engine_config(args.config) if args.config
                else EngineConfig())
    defaults = EngineConfig()
    file_layer = {f.name: getattr(file_cfg, f.name) for f in fields(EngineConfig)
                  if getattr(file_cfg, f.name) != getattr(defaults, f.name)}
    flag_layer = {field: getattr(args, flag)
                  for flag, field in _FLAG_TO_FIELD.items()
                  if getattr(args, flag) is not None}
    if args.tolerant:
        flag_layer["tolerant"] = True
    layers = ([flag_layer, file_layer] if args.prefer_config
              else [file_layer, flag_layer])
    cfg = EngineConfig()
    for layer in layers:
        for key, value in layer.items():
            setattr(cfg, key, value)
    return cfg


def _load_artifacts(cfg: EngineConfig, no_memory: bool):
    if cfg.model is None:
        raise UsageError("a model is required (--model or model= in --config)")
    model = load_model(cfg.model)
    if no_memory:
        return model, None, None, None, None
    key_cb = value_cb = None
    if cfg.codebook:
        key_cb, value_cb = load_codebooks(cfg.codebook)
    bank = (MemoryBank.load(cfg.bank, expected_config_hash=model.config.hash(),
                            key_cb=key_cb, value_cb=value_cb)
            if cfg.bank else None)
    index = RetrievalIndex.load(cfg.index) if cfg.index else None
    remote = (BankClient(cfg.remote, key_codebook=key_cb,
                         value_codebook=value_cb, timeout=cfg.timeout)
              if cfg.remote else None)
    return model, bank, index, key_cb, remote


def _cmd_infer(args) -> int:
    if (args.prompt is None) == (args.prompt_file is None):
        raise UsageError("exactly one of --prompt or --prompt-file is required")
    cfg = _resolve_engine_config(args)
    model, bank, index, _, remote = _load_artifacts(cfg, args.no_memory)
    engine = Engine(model, bank=bank, index=index, remote_client=remote,
                    cache_capacity=cfg.cache_capacity, n_refs=cfg.n_refs,
                    chunk_size=cfg.chunk_size, mode=cfg.mode,
                    select_mode=args.select_mode,
                    filter_threshold=cfg.filter_threshold,
                    tolerant=cfg.tolerant)
    if args.prompt is not None:
        text = args.prompt
    else:
        text = Path(args.prompt_file).read_text(encoding="utf-8")
    prompt_tokens = tokenizer.encode(text)
    if not prompt_tokens:
        raise InputError("the prompt encodes to zero tokens")
    out_tokens = engine.generate(prompt_tokens, args.n_tokens)
    print(tokenizer.decode(out_tokens))
    _print_stats(engine.stats())
    return EXIT_OK


# -- cost ---------------------------------------------------------------


def _cmd_cost(args) -> int:
    params = CostParams(L=args.L, H=args.H, H_kv=args.H_kv, d_h=args.d_h,
                        W=args.W, n_vocab=args.n_vocab, L_mem=args.L_mem,
                        l_ref=args.l_ref, l_chunk=args.l_chunk,
                        l_mem=args.l_mem, l_train=args.l_train)
    params.validate()
    report = cost_report(params)
    n_values = log_range(args.n_start, args.n_stop, args.points)
    rows = emit_curves(params, n_values)

    lines = ["n,implicit_tflops,explicit_tflops,external_tflops,best"]
    for n, c_impl, c_expl, c_ext, best in rows:
        lines.append(f"{n:.6g},{c_impl:.6e},{c_expl:.6e},{c_ext:.6e},{best}")
    print("\n".join(lines))
    _print_stats({
        "write_implicit_tflops": report.write_implicit,
        "write_explicit_tflops": report.write_explicit,
        "write_external_tflops": report.write_external,
        "read_implicit_tflops": report.read_implicit,
        "read_explicit_tflops": report.read_explicit,
        "read_external_tflops": report.read_external,
        "n_lo": report.n_lo,
        "n_hi": report.n_hi,
    })

    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "cost_curves.csv").write_text("\n".join(lines) + "\n",
                                             encoding="utf-8")
        from .plots import save_cost_figure
        save_cost_figure(rows, (report.n_lo, report.n_hi),
                         out / "cost_curves.png")
    return EXIT_OK


# -- serve --------------------------------------------------------------


def _cmd_serve(args) -> int:
    bank = MemoryBank.load(args.bank)
    index = RetrievalIndex.load(args.index)
    server = serve_bank(bank, index, host=args.host, port=args.port)
    print(f"listening on {server.endpoint} "
          f"({len(bank)} memories, {len(index)} index entries)", flush=True)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return EXIT_OK


# -- bench --------------------------------------------------------------


@dataclass(frozen=True)
class BenchSummary:
    """Mean over all runs but the first; the first run pays one-time
    warmup costs (allocator, caches) and is discarded."""

    n_runs: int
    discarded: int
    mean_seconds: float
    min_seconds: float
    max_seconds: float


def summarize_runs(durations) -> BenchSummary:
    runs = [float(d) for d in durations]
    if len(runs) < 2:
        raise UsageError("need at least two runs; the first is discarded")
    if any(not np.isfinite(d) or d <= 0 for d in runs):
        raise InputError("run durations must be positive and finite")
    kept = runs[1:]
    return BenchSummary(n_runs=len(runs), discarded=1,
                        mean_seconds=sum(kept) / len(kept),
                        min_seconds=min(kept), max_seconds=max(kept))


def _cmd_bench(args) -> int:
    model = load_model(args.model)
    cfg = model.config
    chunk = args.chunk_size if args.chunk_size is not None else cfg.l_chunk
    if args.retrievals_only:
        count = expected_retrievals(args.prompt_len, args.n_tokens, chunk)
        print(f"session of {args.prompt_len} prompt + {args.n_tokens} "
              f"generated tokens at chunk {chunk}")
        _print_stats({"retrievals": count})
        return EXIT_OK

    rng = np.random.default_rng(args.seed)
    prompt = [int(t) for t in rng.integers(0, tokenizer.N_BYTE_TOKENS,
                                           size=args.prompt_len)]

    key_cb = value_cb = None
    if args.codebook:
        key_cb, value_cb = load_codebooks(args.codebook)
    bank = (MemoryBank.load(args.bank,
                            expected_config_hash=cfg.hash(),
                            key_cb=key_cb, value_cb=value_cb)
            if args.bank else None)
    index = RetrievalIndex.load(args.index) if args.index else None

    def run_once(with_memory: bool) -> float:
        engine = Engine(model, bank=bank if with_memory else None,
                        index=index if with_memory else None,
                        chunk_size=chunk, mode=args.mode)
        start = time.perf_counter()
        engine.generate(prompt, args.n_tokens)
        return time.perf_counter() - start

    has_memory = index is not None and len(index) > 0
    memory_runs = [run_once(True) for _ in range(args.repeats)] if has_memory \
        else None
    plain_runs = [run_once(False) for _ in range(args.repeats)]
    if memory_runs is None:
        memory_runs = list(plain_runs)

    lines = ["run,mode,seconds"]
    for i, d in enumerate(memory_runs):
        lines.append(f"{i},memory,{d:.6f}")
    for i, d in enumerate(plain_runs):
        lines.append(f"{i},plain,{d:.6f}")
    print("\n".join(lines))

    mem = summarize_runs(memory_runs)
    plain = summarize_runs(plain_runs)
    total_tokens = args.prompt_len + args.n_tokens
    mem_tps = total_tokens / mem.mean_seconds
    plain_tps = total_tokens / plain.mean_seconds
    _print_stats({
        "repeats": args.repeats,
        "discarded": mem.discarded,
        "memory_mean_s": mem.mean_seconds,
        "plain_mean_s": plain.mean_seconds,
        "memory_tokens_per_s": mem_tps,
        "plain_tokens_per_s": plain_tps,
        "throughput_ratio": mem_tps / plain_tps,
    })

    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench_runs.csv").write_text("\n".join(lines) + "\n",
                                            encoding="utf-8")
        from .plots import save_bench_figure
        save_bench_figure(memory_runs, plain_runs, out / "bench_runs.png")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
