"""Command-line entry point: ``kvprefetch <command> ...``.

Exit codes: 0 success, 2 validation error, 3 infeasible configuration, 4 IO.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import re
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import __version__
from .attention import evaluate_selector, generate_trace, parse_selector
from .errors import InfeasibleError, KvPrefetchError
from .flops import PRESETS, StrategyConfig, attn_flops, flops_table, get_preset, param_flops, total_flops
from .pipeline import (
    SCENARIOS,
    LatencyModel,
    PipelineConfig,
    filtered_bytes,
    get_scenario,
    min_bandwidth,
    pack_bytes,
    run_pipeline,
    verify_overlap,
)
from .predictor import RegressionConfig
from .selection import AttentionLayout
from .traceio import load_trace, save_trace

EXIT_OK, EXIT_VALIDATION, EXIT_INFEASIBLE, EXIT_IO = 0, 2, 3, 4
REPORT_SCHEMA = "overlap-report/1"
_SI = {"": 1, "k": 1e3, "K": 1e3, "M": 1e6, "G": 1e9, "T": 1e12}
_NUM = re.compile(r"^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*([kKMGT]?)\s*$")


def si_number(text: str) -> float:
    """``"1.5k"`` -> 1500.0; plain numbers pass through."""
    m = _NUM.match(str(text))
    if not m:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")
    return float(m.group(1)) * _SI[m.group(2)]


def si_int(text: str) -> int:
    value = si_number(text)
    if value != int(value):
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    return int(value)


def int_list(text: str) -> list[int]:
    return [si_int(x) for x in text.split(",") if x.strip()]


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    return int(os.environ.get("ASYNCSPADE_SEED", "0"))


def write_manifest(out: Path | None, command: str, config: dict, seed, outputs, started: float) -> Path | None:
    """Record the resolved inputs next to ``out``; rerunning them reproduces ``outputs``."""
    if out is None:
        return None
    path = Path(f"{out}.manifest.json")
    doc = {
        "tool": "kvprefetch",
        "version": __version__,
        "command": command,
        "config": config,
        "seed": seed,
        "outputs": [str(p) for p in outputs],
        "wall_clock_s": round(time.perf_counter() - started, 6),
    }
    path.write_text(json.dumps(doc, indent=1, sort_keys=True, default=str), encoding="utf-8")
    return path


# -- commands ----------------------------------------------------------------

def cmd_gen_trace(args) -> int:
    started = time.perf_counter()
    dims = args.dims
    if len(dims) != 4:
        raise KvPrefetchError("--dims needs B,Hq,Hkv,D")
    B, hq, hkv, D = dims
    seed = _seed(args)
    trace = generate_trace(AttentionLayout(hq, hkv, D), args.steps, args.alpha, args.sigma, seed,
                           batch=B, context=args.context, n_layers=args.layers)
    out = Path(args.out)
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True)
    paths = save_trace(trace, out)
    config = {"dims": dims, "steps": args.steps, "alpha": args.alpha, "sigma": args.sigma,
              "context": args.context, "layers": args.layers}
    write_manifest(out, "gen-trace", config, seed, paths, started)
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_predict_eval(args) -> int:
    started = time.perf_counter()
    seed = _seed(args)
    if args.trace:
        trace = load_trace(args.trace)
    else:
        B, hq, hkv, D = args.dims
        trace = generate_trace(AttentionLayout(hq, hkv, D), args.steps, args.alpha, args.sigma, seed,
                               batch=B, context=args.context)
    cfg = RegressionConfig(window=args.window)
    selectors = [parse_selector(s) for s in args.selectors.split(",")]

    def run(sel):
        return evaluate_selector(trace, sel, args.select, args.distances, layer=args.layer, cfg=cfg)

    with ThreadPoolExecutor(max_workers=args.threads) as pool:
        reports = list(pool.map(run, selectors))

    rows = []
    for rep in reports:
        rows += [(t, rep.selector, d, f"{o:.9f}") for t, d, o in rep.rows]
    for rep in reports:
        rows += [("mean", rep.selector, d, f"{m:.9f}") for d, m in rep.summary().items()]
    out = Path(args.out) if args.out else None
    fh = open(out, "w", newline="", encoding="utf-8") if out else sys.stdout
    try:
        fh.write(f"# schema: {REPORT_SCHEMA}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "selector", "distance", "overlap"])
        writer.writerows(rows)
    finally:
        if out:
            fh.close()
    if out:
        for rep in reports:
            for d, m in rep.summary().items():
                print(f"{rep.selector:>14}  d={d:<3d} mean overlap {m:.4f}")
        config = {"trace": args.trace, "select": args.select, "window": args.window,
                  "selectors": args.selectors, "distances": args.distances, "layer": args.layer}
        if not args.trace:
            config.update(dims=args.dims, steps=args.steps, alpha=args.alpha, sigma=args.sigma,
                          context=args.context)
        write_manifest(out, "predict-eval", config, seed, [out], started)
    return EXIT_OK


def _latency_value(text, base: float) -> float:
    # "2x" means a multiple of the inference latency, otherwise seconds
    text = str(text)
    if text.endswith("x"):
        return si_number(text[:-1]) * base
    return si_number(text)


def _pipeline_config(args) -> tuple[PipelineConfig, object]:
    reg = RegressionConfig(window=args.window)
    if args.preset:
        preset = get_scenario(args.preset)
        inf = preset.inference_ms * 1e-3
        cache_ms = None if args.cache_latency is None else _latency_value(args.cache_latency, inf) * 1e3
        cfg = preset.config(steps=args.steps, threshold=args.threshold, bandwidth=args.bandwidth,
                            launch_overhead=args.launch, element_width=args.element_width,
                            stall_policy=args.stall_policy, cache_ms=cache_ms, regression=reg)
        return cfg, preset
    for name in ("inference_latency",):
        if getattr(args, name) is None:
            raise KvPrefetchError(f"--{name.replace('_', '-')} is required without --preset")
    inf = args.inference_latency
    cache = 0.0 if args.cache_latency is None else _latency_value(args.cache_latency, inf)
    lat = LatencyModel(args.bandwidth if args.bandwidth is not None else 1e18, args.launch, inf, cache,
                       args.element_width)
    cfg = PipelineConfig(get_preset(args.model), args.batch, args.context, args.select, args.threshold,
                         args.pack, args.steps, lat, args.stall_policy, reg)
    return cfg, None


def cmd_simulate(args) -> int:
    started = time.perf_counter()
    cfg, preset = _pipeline_config(args)
    tl = run_pipeline(cfg)
    verdict = verify_overlap(tl, cfg)
    m = tl.metrics
    out = Path(args.out) if args.out else None
    if out:
        tl.to_json(out)
    print(f"TPOT             {m['tpot'] * 1e3:.6f} ms (ideal {cfg.ideal_tpot * 1e3:.6f} ms)")
    print(f"stall total      {m['stall_total'] * 1e3:.6f} ms (init stall {m['init_stall'] * 1e3:.3f} ms)")
    print(f"overlap fraction {m['overlap_fraction']:.6f}")
    print(f"fully overlapped {verdict['verdict']}; binding constraint: {verdict['binding'] or 'none'}")
    if out:
        config = {"preset": args.preset, "model": cfg.model.name, "batch": cfg.batch, "context": cfg.context,
                  "selected": cfg.selected, "threshold": cfg.threshold, "pack": cfg.pack_size,
                  "steps": cfg.steps, "stall_policy": cfg.stall_policy, "latency": vars(cfg.latency)}
        write_manifest(out, "simulate", config, None, [out], started)
    return EXIT_OK


def cmd_flops(args) -> int:
    model = get_preset(args.model)
    if args.all_strategies:
        doc = {"schema": "flops-report/1", "model": model.name, "T": args.T, "C": args.C, "P": args.P,
               "rows": flops_table(model, args.T, args.C, args.P)}
    else:
        s = StrategyConfig(args.strategy, args.T, args.C, args.P)
        doc = {"schema": "flops-report/1", "model": model.name, "strategy": s.kind, "T": args.T, "C": args.C,
               "P": args.P, "param": param_flops(model), "attn": attn_flops(model, s),
               "total": total_flops(model, s)}
    text = json.dumps(doc, indent=1)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_bandwidth(args) -> int:
    cfg, preset = _pipeline_config(args)
    first, last = cfg.packs[0]
    up = pack_bytes(cfg, last - first)
    down = filtered_bytes(cfg, last - first)
    bw = min_bandwidth(cfg)
    print(f"pack bytes inference->cache {up}")
    print(f"pack bytes cache->inference {down}")
    print(f"minimal bandwidth           {bw / 1e9:.4f} GB/s")
    if preset is not None:
        ref = preset.reference_bandwidth_gbps
        print(f"reference ({preset.name})   {ref:.2f} GB/s; relative difference {(bw / 1e9 - ref) / ref:+.2%}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------

def _add_trace_flags(p, dims_default="1,4,2,64"):
    p.add_argument("--dims", type=int_list, default=int_list(dims_default), help="B,Hq,Hkv,D")
    p.add_argument("--steps", type=si_int, default=256)
    p.add_argument("--alpha", type=float, default=0.95)
    p.add_argument("--sigma", type=float, default=0.05)
    p.add_argument("--context", type=si_int, default=2048, help="prefix tokens before decoding starts")
    p.add_argument("--seed", type=int, default=None, help="falls back to $ASYNCSPADE_SEED, then 0")


def _add_pipeline_flags(p):
    p.add_argument("--preset", choices=sorted(SCENARIOS), default=None)
    p.add_argument("--model", default="qwen3-8b", choices=sorted(PRESETS))
    p.add_argument("--batch", type=si_int, default=8)
    p.add_argument("--context", type=si_int, default=32768)
    p.add_argument("--select", "-C", type=si_int, default=2048)
    p.add_argument("--pack", type=si_int, default=6)
    p.add_argument("--inference-latency", type=si_number, default=None, help="seconds per pack")
    p.add_argument("--cache-latency", default=None, help="seconds per pack, or '<k>x' of the inference latency")
    p.add_argument("--bandwidth", type=si_number, default=None, help="bytes/s")
    p.add_argument("--launch", type=si_number, default=0.0, help="seconds per message")
    p.add_argument("--element-width", type=int, default=4, help="bytes per state element on the wire")
    p.add_argument("--steps", type=si_int, default=64)
    p.add_argument("--threshold", type=si_int, default=16)
    p.add_argument("--window", type=si_int, default=16)
    p.add_argument("--stall-policy", choices=("wait", "reuse-previous"), default="wait")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kvprefetch", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-trace", help="write a synthetic AR(1) decode trace")
    _add_trace_flags(p)
    p.add_argument("--layers", type=si_int, default=1)
    p.add_argument("--out", required=True, help="output path prefix")
    p.set_defaults(func=cmd_gen_trace)

    p = sub.add_parser("predict-eval", help="overlap of selectors with the true query's selection")
    p.add_argument("--trace", default=None, help="trace path prefix; omit for a synthetic trace")
    p.add_argument("--synthetic", action="store_true", help="(default when --trace is absent)")
    _add_trace_flags(p)
    p.add_argument("--select", "-C", type=si_int, default=256)
    p.add_argument("--window", type=si_int, default=16)
    p.add_argument("--selectors", default="oracle,last,assembled,single,random:0")
    p.add_argument("--distances", type=int_list, default=[1])
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--out", default=None, help="CSV path (stdout when omitted)")
    p.set_defaults(func=cmd_predict_eval)

    p = sub.add_parser("simulate", help="virtual-clock run of the two-worker pipeline")
    _add_pipeline_flags(p)
    p.add_argument("--out", default=None, help="timeline JSON path")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("flops", help="per-token decoding FLOPs")
    p.add_argument("--model", default="qwen3-8b")
    p.add_argument("--strategy", default="asyncspade", choices=("full", "tova", "quest", "asyncspade"))
    p.add_argument("-T", type=si_int, default=32768)
    p.add_argument("-C", type=si_int, default=2048)
    p.add_argument("-P", type=si_int, default=16)
    p.add_argument("--all-strategies", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("bandwidth", help="minimal bandwidth for full overlap")
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_bandwidth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (OSError, ) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (KvPrefetchError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
