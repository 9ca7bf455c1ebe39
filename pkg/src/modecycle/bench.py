"""Benchmark records, dataset statistics, and the all-in-one verification gate
behind the CLI."""

from __future__ import annotations

import csv
import io
import statistics
from dataclasses import dataclass, field

import numpy as np

from .coo import CooTensor, FactorSet, reference_mttkrp, save_factor_set
from .engine import ShardOverflowError, TrafficCounters, mttkrp_mode, sweep_all_modes
from .layout import (
    InfeasibleParamsError,
    PartitionParams,
    build_sharded,
    element_size_bits,
    select_params,
    validate_plan,
)
from .schedule import load_stats, schedule_super_shards

__all__ = [
    "BenchRecord",
    "run_bench",
    "records_to_csv",
    "tensor_stats",
    "plan_report_dict",
    "run_verification",
]

CSV_FIELDS = [
    "dataset", "n_modes", "nnz", "rank", "threads", "g", "m", "remap",
    "split_remap", "repeat", "sweep_seconds", "mode_seconds",
    "tensor_bytes_read", "factor_bytes_read", "output_bytes_written",
    "remap_bytes_written", "remap_ratio", "imbalance",
    "arith_intensity", "speedup_vs_1", "skipped",
]


@dataclass
class BenchRecord:
    dataset: str
    n_modes: int
    nnz: int
    rank: int
    threads: int
    g: int = 0
    m: tuple[int, ...] = ()
    remap: str = "slot"
    split_remap: bool = False
    repeat: str = "0"
    sweep_seconds: float = 0.0
    mode_seconds: tuple[float, ...] = ()
    counters: TrafficCounters = field(default_factory=TrafficCounters)
    imbalance: float = 0.0
    arith_intensity: float = 0.0
    speedup_vs_1: float | None = None
    skipped: str = ""

    def to_row(self) -> dict:
        return {
            "dataset": self.dataset,
            "n_modes": self.n_modes,
            "nnz": self.nnz,
            "rank": self.rank,
            "threads": self.threads,
            "g": self.g,
            "m": ";".join(str(x) for x in self.m),
            "remap": self.remap,
            "split_remap": int(self.split_remap),
            "repeat": self.repeat,
            "sweep_seconds": f"{self.sweep_seconds:.6f}",
            "mode_seconds": ";".join(f"{t:.6f}" for t in self.mode_seconds),
            "tensor_bytes_read": self.counters.tensor_bytes_read,
            "factor_bytes_read": self.counters.factor_bytes_read,
            "output_bytes_written": self.counters.output_bytes_written,
            "remap_bytes_written": self.counters.remap_bytes_written,
            "remap_ratio": f"{self.counters.remap_ratio():.6f}",
            "imbalance": f"{self.imbalance:.4f}",
            "arith_intensity": f"{self.arith_intensity:.6f}",
            "speedup_vs_1": "" if self.speedup_vs_1 is None else f"{self.speedup_vs_1:.3f}",
            "skipped": self.skipped,
        }


def model_flops_per_sweep(nnz: int, num_modes: int, rank: int) -> int:
    # one multiply + one add per rank entry per element per mode
    return 2 * nnz * num_modes * rank


def run_bench(
    tensor: CooTensor,
    dataset: str,
    ranks: list[int],
    thread_counts: list[int],
    reps: int = 3,
    remap: str = "slot",
    split_remap: bool = False,
    seed: int = 0,
    gamma: int = 32 * 2**20,
    theta: float = 0.5,
    g_range: tuple[int, int] = (1024, 32768),
) -> list[BenchRecord]:
    """One record per (rank, threads, repetition) plus a median summary row
    per configuration; timings cover the sweep only (parse and layout build
    excluded). Partition parameters are re-selected per thread count, and a
    configuration whose plan is infeasible becomes a skipped row."""
    records: list[BenchRecord] = []
    medians: dict[tuple[int, int], float] = {}
    for rank in ranks:
        for nu in thread_counts:
            base = dict(dataset=dataset, n_modes=tensor.num_modes,
                        nnz=tensor.nnz, rank=rank, threads=nu,
                        remap=remap, split_remap=split_remap)
            try:
                params = select_params(tensor.dims, tensor.nnz, nu, gamma, rank,
                                       theta=theta, g_range=g_range)
            except InfeasibleParamsError as exc:
                records.append(BenchRecord(**base, repeat="skipped", skipped=str(exc)))
                continue
            st = build_sharded(tensor, params)
            smap = schedule_super_shards(st.plan, nu)
            stats = load_stats(smap, include_block_cyclic=False)
            imbalance = max(m["imbalance"] for m in stats["modes"])
            factors = FactorSet.random(tensor.dims, rank, seed)
            sweep_times = []
            counters = TrafficCounters()
            for rep in range(reps):
                counters = TrafficCounters()
                mode_secs: list[float] = []
                sweep_all_modes(st, factors, smap, remap=remap,
                                counters=counters, mode_seconds=mode_secs,
                                split_remap=split_remap)
                total = sum(mode_secs)
                sweep_times.append(total)
                ai = model_flops_per_sweep(tensor.nnz, tensor.num_modes, rank) / counters.total_bytes()
                records.append(BenchRecord(
                    **base, g=params.g, m=params.m, repeat=str(rep),
                    sweep_seconds=total, mode_seconds=tuple(mode_secs),
                    counters=counters, imbalance=imbalance,
                    arith_intensity=ai,
                ))
            med = statistics.median(sweep_times)
            medians[(rank, nu)] = med
            records.append(BenchRecord(
                **base, g=params.g, m=params.m, repeat="median",
                sweep_seconds=med,
                counters=counters, imbalance=imbalance,
                arith_intensity=model_flops_per_sweep(
                    tensor.nnz, tensor.num_modes, rank) / counters.total_bytes(),
            ))
    for rec in records:
        if rec.repeat == "median":
            ref = medians.get((rec.rank, 1))
            if ref is not None and rec.sweep_seconds > 0:
                rec.speedup_vs_1 = ref / rec.sweep_seconds
    return records


def records_to_csv(records: list[BenchRecord]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS)
    writer.writeheader()
    for rec in records:
        writer.writerow(rec.to_row())
    return buf.getvalue()


def tensor_stats(tensor: CooTensor, bins: int = 64) -> dict:
    """Shape, density, and per-mode index-usage histograms (bucketed so wide
    modes stay printable; bucket counts always sum to nnz)."""
    hists = []
    for n, d in enumerate(tensor.dims):
        width = max(1, -(-d // bins))
        counts = np.bincount(tensor.subs[:, n] // width,
                             minlength=-(-d // width))
        hists.append({
            "mode": n,
            "bucket_width": int(width),
            "counts": [int(c) for c in counts],
        })
    return {
        "dims": list(tensor.dims),
        "nnz": tensor.nnz,
        "density": tensor.density,
        "histograms": hists,
    }


def plan_report_dict(tensor: CooTensor, params: PartitionParams) -> dict:
    """The `plan` command payload: per-mode geometry, fill histograms, cache
    slack with the actual shard counts, and the packed element size."""
    st = build_sharded(tensor, params)
    modes = []
    for n in range(tensor.num_modes):
        counts = st.plan.ss_counts[n]
        shard_sum = int(st.plan.ss_shard_counts[n].sum())
        fill_hist: dict[str, int] = {}
        for fill, cnt in zip(*np.unique(counts, return_counts=True)):
            fill_hist[str(int(fill))] = int(cnt)
        modes.append({
            "mode": n,
            "m": params.m[n],
            "k": params.k[n],
            "eq2_exact": params.eq2_exact[n],
            "divisibility_ok": params.divisibility_ok(n),
            "super_shard_fill_histogram": fill_hist,
            "shard_count": shard_sum,
            "cache_slack_bytes": params.cache_slack(n, shard_sum=shard_sum),
        })
    acc = st.accounting()
    return {
        "dims": list(tensor.dims),
        "nnz": tensor.nnz,
        "g": params.g,
        "threads": params.nu,
        "theta": params.theta,
        "cache_bytes": params.gamma,
        "element_bits_packed": element_size_bits(params),
        "element_bytes_in_memory": acc["element_bytes"],
        "buffer_bytes": acc["buffer_bytes"],
        "modes": modes,
    }


def _rel_close(a: np.ndarray, b: np.ndarray, rtol: float = 1e-10,
               atol: float = 1e-12) -> bool:
    return bool(np.all(np.abs(a - b) <= atol + rtol * np.maximum(np.abs(a), np.abs(b))))


def run_verification(
    tensor: CooTensor,
    rank: int,
    nu: int,
    seed: int = 0,
    gamma: int = 32 * 2**20,
    theta: float = 0.5,
    g_range: tuple[int, int] = (1024, 32768),
    inject: str | None = None,
) -> tuple[bool, list[str]]:
    """Full invariant gate: plan validity, schedule partition, oracle
    equivalence per mode for both remap strategies, counter exactness, and
    bitwise thread-invariance of slot-strategy sweeps."""
    lines: list[str] = []
    ok = True

    def check(name: str, passed: bool, detail: str = ""):
        nonlocal ok
        ok = ok and passed
        mark = "pass" if passed else "FAIL"
        lines.append(f"[{mark}] {name}" + (f" ({detail})" if detail and not passed else ""))

    plan_nu = max(nu, 8)  # one plan serving every tested thread count
    try:
        params = select_params(tensor.dims, tensor.nnz, plan_nu, gamma, rank,
                               theta=theta, g_range=g_range)
    except InfeasibleParamsError as exc:
        check("plan-feasible", False, str(exc))
        return False, lines
    check("plan-feasible", True)

    st = build_sharded(tensor, params)
    report = validate_plan(st, source=tensor)
    for c in report.checks:
        check(f"layout/{c.name}", c.passed, c.detail)

    smap = schedule_super_shards(st.plan, nu)
    for n in range(tensor.num_modes):
        seen = sorted(s for lst in smap.assignments[n] for s in lst)
        check(f"schedule/mode{n}-partition",
              seen == list(range(params.k[n])),
              "assignment is not a partition of the super-shards")

    factors = FactorSet.random(tensor.dims, rank, seed)

    if inject == "shard-overflow":
        sids, _, _ = st.active_arrays()
        nxt = 1 % tensor.num_modes
        sids[0, nxt] = (sids[0, nxt] + 1) % st.plan.total_shards(nxt)
        try:
            mttkrp_mode(st, factors, 0, smap, remap="cursor")
            check("engine/overflow-detected", False, "corrupted shard id went unnoticed")
        except ShardOverflowError as exc:
            check("engine/overflow-detected", True)
            lines.append(f"       injected fault raised: {exc}")
        return ok, lines

    for strategy in ("slot", "cursor"):
        stx = build_sharded(tensor, params)
        counters = TrafficCounters()
        for n in range(tensor.num_modes):
            got = mttkrp_mode(stx, factors, n, smap, remap=strategy,
                              counters=counters)
            want = reference_mttkrp(tensor, factors, n)
            check(f"engine/{strategy}-mode{n}-oracle", _rel_close(got, want))
            rep = validate_plan(stx, source=tensor)
            check(f"engine/{strategy}-mode{n}-remap", rep.passed,
                  (rep.first_failure().detail if rep.first_failure() else ""))
        eb = stx.element_nbytes
        nm = tensor.num_modes
        check(f"engine/{strategy}-counters",
              counters.tensor_bytes_read == nm * tensor.nnz * eb
              and counters.factor_bytes_read == nm * tensor.nnz * (nm - 1) * rank * 8
              and counters.remap_bytes_written == nm * tensor.nnz * eb,
              f"got {counters.as_dict()}")

    dumps = set()
    for workers in (1, 2, 4, 8):
        stx = build_sharded(tensor, params)
        wmap = schedule_super_shards(stx.plan, workers)
        result = sweep_all_modes(stx, factors, wmap, remap="slot")
        dumps.add(save_factor_set(result, None))
    check("engine/slot-thread-invariance", len(dumps) == 1,
          f"{len(dumps)} distinct factor dumps across thread counts")

    return ok, lines
