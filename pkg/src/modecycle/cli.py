"""Command-line front end.

Tensor arguments accept either a FROSTT ``.tns`` path or an inline synthetic
spec like ``synth:200x150x100:nnz=50000:seed=7:skew=0.5``.

Exit codes: 0 success, 1 invariant or verification failure, 2 usage or parse
errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from .bench import (
    plan_report_dict,
    records_to_csv,
    run_bench,
    run_verification,
    tensor_stats,
)
from .coo import (
    CooTensor,
    FactorSet,
    FrosttParseError,
    parse_frostt,
    save_factor_set,
    synth_tensor,
    write_frostt,
)
from .cpals import CpalsConfig, cp_als
from .engine import (
    BufferOrderError,
    ShardOverflowError,
    TrafficCounters,
    mttkrp_mode,
    sweep_all_modes,
)
from .layout import InfeasibleParamsError, build_sharded, select_params, validate_plan
from .schedule import load_stats, schedule_super_shards

ENV_THREADS = "MODECYCLE_THREADS"


def _default_threads() -> int:
    env = os.environ.get(ENV_THREADS)
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def load_tensor(spec: str, dims=None) -> CooTensor:
    if spec.startswith("synth:"):
        parts = spec.split(":")
        sdims = tuple(int(x) for x in parts[1].split("x"))
        kw = {"nnz": 1000, "seed": 0, "skew": 0.0}
        for p in parts[2:]:
            key, _, val = p.partition("=")
            if key not in kw:
                raise FrosttParseError(f"unknown synth option {key!r}")
            kw[key] = float(val) if key == "skew" else int(val)
        return synth_tensor(sdims, kw["nnz"], kw["seed"], kw["skew"])
    return parse_frostt(spec, dims=dims)


def _parse_dims(text: str | None):
    return tuple(int(x) for x in text.split(",")) if text else None


def _partition_kwargs(args) -> dict:
    if args.shard_size:
        g_range = (args.shard_size, args.shard_size)
    else:
        g_range = (args.g_min, args.g_max)
    return dict(gamma=args.cache_bytes, theta=args.theta, g_range=g_range)


def _add_common(p: argparse.ArgumentParser, rank_default=16):
    p.add_argument("--threads", type=int, default=None,
                   help=f"worker threads (default: ${ENV_THREADS} or CPU count)")
    p.add_argument("--rank", type=int, default=rank_default)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shard-size", type=int, default=0,
                   help="fix the shard size g instead of searching")
    p.add_argument("--g-min", type=int, default=1024)
    p.add_argument("--g-max", type=int, default=32768)
    p.add_argument("--remap", choices=("slot", "cursor"), default="slot")
    p.add_argument("--theta", type=float, default=0.5)
    p.add_argument("--cache-bytes", type=int, default=32 * 2**20)
    p.add_argument("--out", choices=("json", "csv"), default="json")
    p.add_argument("--dims", type=str, default=None,
                   help="comma-separated dims override for .tns input")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="modecycle",
                                 description="sparse tensor CP-ALS toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", help="read a tensor and write normalized FROSTT text")
    p.add_argument("input")
    p.add_argument("output")
    _add_common(p)

    p = sub.add_parser("plan", help="select partition parameters and report the layout")
    p.add_argument("tensor")
    _add_common(p)

    p = sub.add_parser("schedule", help="greedy super-shard to thread assignment")
    p.add_argument("tensor")
    _add_common(p)

    p = sub.add_parser("stats", help="shape, density and index-usage histograms")
    p.add_argument("tensor")
    _add_common(p)

    p = sub.add_parser("mttkrp", help="run the parallel kernel for one mode or a sweep")
    p.add_argument("tensor")
    p.add_argument("--mode", type=int, default=None)
    p.add_argument("--sweep", action="store_true")
    p.add_argument("--ones", action="store_true", help="all-ones factors instead of random")
    p.add_argument("--dump", type=str, default=None, help="write result factors (binary)")
    _add_common(p)

    p = sub.add_parser("cpals", help="CP-ALS decomposition")
    p.add_argument("tensor")
    p.add_argument("--iters", type=int, default=50)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--dump", type=str, default=None)
    _add_common(p)

    p = sub.add_parser("bench", help="timed sweeps over rank/thread grids, CSV or JSON out")
    p.add_argument("tensor")
    p.add_argument("--ranks", type=str, default="16")
    p.add_argument("--threads-list", type=str, default="1")
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--split-remap-thread", action="store_true",
                   help="run compute and remap as separate passes (comparison mode)")
    p.add_argument("--output", type=str, default=None)
    p.add_argument("--time-preprocessing", action="store_true",
                   help="also report the layout build stages")
    _add_common(p)

    p = sub.add_parser("verify", help="run the full invariant gate on a tensor")
    p.add_argument("tensor")
    p.add_argument("--inject", choices=("shard-overflow",), default=None,
                   help=argparse.SUPPRESS)
    _add_common(p)

    return ap


def _emit(payload: dict, args) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def cmd_convert(args) -> int:
    tensor = load_tensor(args.input, dims=_parse_dims(args.dims))
    write_frostt(tensor, args.output)
    print(f"wrote {tensor.nnz} nonzeros, dims {list(tensor.dims)}, to {args.output}")
    return 0


def cmd_plan(args) -> int:
    tensor = load_tensor(args.tensor, dims=_parse_dims(args.dims))
    params = select_params(tensor.dims, tensor.nnz, args.threads, args.cache_bytes,
                           args.rank, theta=args.theta,
                           g_range=_partition_kwargs(args)["g_range"])
    _emit(plan_report_dict(tensor, params), args)
    return 0


def cmd_schedule(args) -> int:
    tensor = load_tensor(args.tensor, dims=_parse_dims(args.dims))
    params = select_params(tensor.dims, tensor.nnz, args.threads, args.cache_bytes,
                           args.rank, theta=args.theta,
                           g_range=_partition_kwargs(args)["g_range"])
    st = build_sharded(tensor, params)
    smap = schedule_super_shards(st.plan, args.threads)
    payload = {
        "nu": smap.nu,
        "modes": [
            {
                "mode": n,
                "threads": [list(lst) for lst in smap.assignments[n]],
                "loads": smap.thread_loads(n),
            }
            for n in range(smap.num_modes)
        ],
        "stats": load_stats(smap),
    }
    _emit(payload, args)
    return 0


def cmd_stats(args) -> int:
    tensor = load_tensor(args.tensor, dims=_parse_dims(args.dims))
    _emit(tensor_stats(tensor), args)
    return 0


def cmd_mttkrp(args) -> int:
    tensor = load_tensor(args.tensor, dims=_parse_dims(args.dims))
    params = select_params(tensor.dims, tensor.nnz, args.threads, args.cache_bytes,
                           args.rank, theta=args.theta,
                           g_range=_partition_kwargs(args)["g_range"])
    st = build_sharded(tensor, params)
    smap = schedule_super_shards(st.plan, args.threads)
    factors = (FactorSet.ones(tensor.dims, args.rank) if args.ones
               else FactorSet.random(tensor.dims, args.rank, args.seed))
    counters = TrafficCounters()
    t0 = time.perf_counter()
    if args.sweep or args.mode is None:
        mode_secs: list[float] = []
        result = sweep_all_modes(st, factors, smap, remap=args.remap,
                                 counters=counters, mode_seconds=mode_secs)
        payload = {"sweep": True, "mode_seconds": mode_secs}
        dump = result
    else:
        out = mttkrp_mode(st, factors, args.mode, smap, remap=args.remap,
                          counters=counters)
        payload = {"sweep": False, "mode": args.mode}
        dump = FactorSet((out,), np.ones(args.rank))
    payload.update({
        "seconds": time.perf_counter() - t0,
        "threads": args.threads,
        "remap": args.remap,
        "counters": counters.as_dict(),
    })
    if args.dump:
        save_factor_set(dump, args.dump)
        payload["dump"] = args.dump
    _emit(payload, args)
    return 0


def cmd_cpals(args) -> int:
    tensor = load_tensor(args.tensor, dims=_parse_dims(args.dims))
    config = CpalsConfig(
        rank=args.rank, max_iters=args.iters, tol=args.tol, seed=args.seed,
        nu=args.threads, remap=args.remap, gamma=args.cache_bytes,
        theta=args.theta, g_range=_partition_kwargs(args)["g_range"],
    )
    result = cp_als(tensor, config)
    payload = {
        "fit_history": result.fit_history,
        "final_fit": result.final_fit,
        "iterations": result.iterations,
        "converged": result.converged,
        "lambdas": [float(x) for x in result.factors.lambdas],
        "mode_seconds": result.mode_seconds,
        "counters": result.counters.as_dict(),
    }
    if args.dump:
        save_factor_set(result.factors, args.dump)
        payload["dump"] = args.dump
    _emit(payload, args)
    return 0


def cmd_bench(args) -> int:
    tensor = load_tensor(args.tensor, dims=_parse_dims(args.dims))
    prep: dict[str, float] = {}
    if args.time_preprocessing:
        from .layout import build_sharded as _build
        params = select_params(tensor.dims, tensor.nnz, args.threads,
                               args.cache_bytes, args.rank, theta=args.theta,
                               g_range=_partition_kwargs(args)["g_range"])
        t0 = time.perf_counter()
        _build(tensor, params)
        prep["layout_build_seconds"] = time.perf_counter() - t0
    records = run_bench(
        tensor,
        dataset=args.tensor,
        ranks=[int(x) for x in args.ranks.split(",")],
        thread_counts=[int(x) for x in args.threads_list.split(",")],
        reps=args.reps,
        remap=args.remap,
        split_remap=args.split_remap_thread,
        seed=args.seed,
        gamma=args.cache_bytes,
        theta=args.theta,
        g_range=_partition_kwargs(args)["g_range"],
    )
    if args.out == "csv":
        text = records_to_csv(records)
        if args.output:
            with open(args.output, "w") as fh:
                fh.write(text)
            print(f"wrote {len(records)} rows to {args.output}")
        else:
            sys.stdout.write(text)
    else:
        payload = {"records": [r.to_row() for r in records]}
        if prep:
            payload["preprocessing"] = prep
        _emit(payload, args)
    return 0


def cmd_verify(args) -> int:
    tensor = load_tensor(args.tensor, dims=_parse_dims(args.dims))
    ok, lines = run_verification(
        tensor, args.rank, args.threads, seed=args.seed,
        gamma=args.cache_bytes, theta=args.theta,
        g_range=_partition_kwargs(args)["g_range"], inject=args.inject,
    )
    for line in lines:
        print(line)
    print("VERIFY: " + ("all checks passed" if ok else "FAILURES detected"))
    return 0 if ok else 1


COMMANDS = {
    "convert": cmd_convert,
    "plan": cmd_plan,
    "schedule": cmd_schedule,
    "stats": cmd_stats,
    "mttkrp": cmd_mttkrp,
    "cpals": cmd_cpals,
    "bench": cmd_bench,
    "verify": cmd_verify,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "threads", None) is None:
        args.threads = _default_threads()
    try:
        return COMMANDS[args.command](args)
    except FrosttParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (InfeasibleParamsError, ShardOverflowError, BufferOrderError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
