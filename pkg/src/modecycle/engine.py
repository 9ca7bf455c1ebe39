"""Parallel MTTKRP over a sharded tensor with inline remapping.

One mode's pass streams the active buffer shard by shard, accumulates each
element's rank-products into the output factor row, and immediately stores
the element at its slot in the next mode's shard order, so the following mode
reads an already-ordered tensor. Threads own disjoint super-shards (hence
disjoint output rows) and synchronize only at the end-of-mode barrier.

Two remap strategies exist. "cursor" reserves slots with an atomic fill
counter per destination shard, so within-shard element order depends on
thread timing. "slot" uses destination ranks precomputed at build time,
making every sweep bitwise reproducible regardless of thread count; it is
the default.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .coo import FactorSet
from .layout import ShardedTensor
from .schedule import ScheduleMap

__all__ = [
    "TrafficCounters",
    "RemapCursors",
    "ShardOverflowError",
    "BufferOrderError",
    "mttkrp_mode",
    "sweep_all_modes",
    "remap_store",
]

REMAP_STRATEGIES = ("slot", "cursor")


class ShardOverflowError(RuntimeError):
    """A destination shard received more elements than the plan assigns it."""


class BufferOrderError(ValueError):
    """The active buffer is not ordered for the requested mode/strategy."""


@dataclass
class TrafficCounters:
    """Model data-volume counters, accumulated per mode.

    Closed forms per mode: the whole tensor is read once and rewritten once
    by the remap (``nnz * element_bytes`` each); every element loads one
    ``rank``-wide row per input mode (``nnz * (N-1) * rank * 8``) and updates
    one output row (``nnz * rank * 8`` written).
    """

    tensor_bytes_read: int = 0
    factor_bytes_read: int = 0
    output_bytes_written: int = 0
    remap_bytes_written: int = 0

    def add_mode(self, nnz: int, num_modes: int, rank: int, element_bytes: int,
                 compute: bool = True, remap: bool = True) -> None:
        if compute:
            self.tensor_bytes_read += nnz * element_bytes
            self.factor_bytes_read += nnz * (num_modes - 1) * rank * 8
            self.output_bytes_written += nnz * rank * 8
        if remap:
            if not compute:
                self.tensor_bytes_read += nnz * element_bytes
            self.remap_bytes_written += nnz * element_bytes

    def total_bytes(self) -> int:
        return (self.tensor_bytes_read + self.factor_bytes_read
                + self.output_bytes_written + self.remap_bytes_written)

    def remap_ratio(self) -> float:
        other = (self.tensor_bytes_read + self.factor_bytes_read
                 + self.output_bytes_written)
        return self.remap_bytes_written / other if other else 0.0

    def as_dict(self) -> dict:
        return {
            "tensor_bytes_read": self.tensor_bytes_read,
            "factor_bytes_read": self.factor_bytes_read,
            "output_bytes_written": self.output_bytes_written,
            "remap_bytes_written": self.remap_bytes_written,
            "remap_ratio": self.remap_ratio(),
        }


@dataclass
class RemapCursors:
    """Fill records for the upcoming mode's shards: base element offset plus a
    running fill count per shard. The compiled kernel keeps its own counters;
    this mirror backs single-element use and tests."""

    base: np.ndarray   # (shards + 1,) element offsets
    fills: np.ndarray  # (shards,) int64

    @classmethod
    def for_mode(cls, st: ShardedTensor, mode: int) -> "RemapCursors":
        base = st.plan.shard_offsets[mode]
        return cls(base=base, fills=np.zeros(base.shape[0] - 1, dtype=np.int64))

    def planned_fill(self, shard: int) -> int:
        return int(self.base[shard + 1] - self.base[shard])

    def reserve(self, shard: int) -> int:
        if self.fills[shard] >= self.planned_fill(shard):
            raise ShardOverflowError(
                f"shard {shard} already holds its planned {self.planned_fill(shard)} elements"
            )
        slot = int(self.base[shard] + self.fills[shard])
        self.fills[shard] += 1
        return slot

    def complete(self) -> bool:
        return bool(np.array_equal(self.fills, np.diff(self.base)))


def remap_store(element_row: int, next_mode: int, cursors: RemapCursors,
                st: ShardedTensor) -> int:
    """Store one active-buffer element into its next-mode shard slot; returns
    the slot index. Python mirror of the kernel's remap step."""
    sids, idxs, vals = st.active_arrays()
    dst_sids, dst_idxs, dst_vals = st.back_arrays()
    shard = int(sids[element_row, next_mode])
    slot = cursors.reserve(shard)
    dst_sids[slot] = sids[element_row]
    dst_idxs[slot] = idxs[element_row]
    dst_vals[slot] = vals[element_row]
    return slot


def _worker_ranges(st: ShardedTensor, smap: ScheduleMap, mode: int,
                   workers: int) -> list[tuple[np.ndarray, np.ndarray]]:
    offs = st.plan.ss_elem_offsets[mode]
    counts = st.plan.ss_counts[mode]
    per_worker: list[list[int]] = [[] for _ in range(workers)]
    for t, ss_list in enumerate(smap.assignments[mode]):
        per_worker[t % workers].extend(ss_list)
    out = []
    for ss in per_worker:
        ss_arr = np.asarray(ss, dtype=np.int64)
        out.append((offs[ss_arr].astype(np.int64),
                    (offs[ss_arr] + counts[ss_arr]).astype(np.int64)))
    return out


def _stack_factors(factors: FactorSet) -> tuple[np.ndarray, np.ndarray]:
    foffs = np.zeros(factors.num_modes, dtype=np.int64)
    rows = 0
    for n, f in enumerate(factors.factors):
        foffs[n] = rows
        rows += f.shape[0]
    fstack = np.concatenate(factors.factors, axis=0)
    return np.ascontiguousarray(fstack), foffs


def mttkrp_mode(
    st: ShardedTensor,
    factors: FactorSet,
    mode: int,
    smap: ScheduleMap,
    workers: int | None = None,
    remap: str = "slot",
    counters: TrafficCounters | None = None,
    split_remap: bool = False,
    alloc_log: dict | None = None,
) -> np.ndarray:
    """Compute the output factor for ``mode`` and leave the tensor ordered for
    mode ``(mode + 1) % N``. The result matches the sequential reference up to
    floating-point reassociation across super-shards of the *input* ordering;
    for a fixed active-buffer order it is bitwise identical for any worker
    count."""
    plan, params = st.plan, st.params
    nmodes = st.num_modes
    if not 0 <= mode < nmodes:
        raise ValueError(f"mode {mode} out of range")
    if st.active_mode != mode:
        raise BufferOrderError(
            f"active buffer is ordered for mode {st.active_mode}, not {mode}")
    if smap.plan_signature != plan.signature():
        raise ValueError("schedule was built for a different plan")
    if smap.num_modes != nmodes:
        raise ValueError("schedule does not cover this tensor's modes")
    if remap not in REMAP_STRATEGIES:
        raise ValueError(f"unknown remap strategy {remap!r}")
    if remap == "slot" and not st.canonical:
        raise BufferOrderError(
            "deterministic-slot remap needs the canonical build order; this "
            "tensor was last remapped with the cursor strategy")
    factors.require_match(params.dims)

    rank = factors.rank
    next_mode = (mode + 1) % nmodes
    workers = smap.nu if workers is None else int(workers)
    if workers < 1:
        raise ValueError("need at least one worker")

    sids, idxs, vals = st.active_arrays()
    dst_sids, dst_idxs, dst_vals = st.back_arrays()
    fstack, foffs = _stack_factors(factors)
    out = np.zeros((params.dims[mode], rank))
    dest_base = plan.shard_offsets[next_mode]
    use_cursor = remap == "cursor"
    cursors = np.zeros(plan.total_shards(next_mode) if use_cursor else 0,
                       dtype=np.int64)
    dest_slots = st.slot_maps[mode] if not use_cursor else np.empty(0, dtype=np.int64)

    ranges = _worker_ranges(st, smap, mode, workers)
    if alloc_log is not None:
        alloc_log.clear()
        alloc_log.update({
            "output_factor": out.nbytes,
            "factor_stack": fstack.nbytes + foffs.nbytes,
            "cursors": cursors.nbytes,
            "worker_ranges": sum(a.nbytes + b.nbytes for a, b in ranges),
        })

    passes = [(True, True)] if not split_remap else [(True, False), (False, True)]
    errflag = np.zeros(1, dtype=np.int64)
    for do_compute, do_remap in passes:
        wcounts = [np.zeros(1, dtype=np.int64) for _ in range(workers)]

        def run(w):
            starts, ends = ranges[w]
            _kernels.mode_worker(
                sids, idxs, vals, dst_sids, dst_idxs, dst_vals,
                fstack, foffs, out, mode, next_mode,
                starts, ends, dest_base, cursors, dest_slots,
                use_cursor, do_compute, do_remap, errflag, wcounts[w],
            )

        if workers == 1:
            run(0)
        else:
            threads = [threading.Thread(target=run, args=(w,)) for w in range(workers)]
            for t in threads:
                t.start()
            for t in threads:          # the end-of-mode barrier
                t.join()

        processed = int(sum(int(c[0]) for c in wcounts))
        if processed != st.nnz:
            raise RuntimeError(
                f"workers processed {processed} of {st.nnz} elements")
        if counters is not None:
            counters.add_mode(st.nnz, nmodes, rank, st.element_nbytes,
                              compute=do_compute, remap=do_remap)

    if errflag[0] != 0:
        raise ShardOverflowError(
            f"destination shard {int(errflag[0]) - 1} of mode {next_mode} "
            "overflowed its planned fill")
    if use_cursor and not np.array_equal(cursors, np.diff(dest_base)):
        bad = int(np.argmax(cursors != np.diff(dest_base)))
        raise ShardOverflowError(
            f"destination shard {bad} of mode {next_mode} ended at fill "
            f"{int(cursors[bad])}, planned {int(np.diff(dest_base)[bad])}")

    st.swap(next_mode, still_canonical=not use_cursor)
    return out


def sweep_all_modes(
    st: ShardedTensor,
    factors: FactorSet,
    smap: ScheduleMap,
    workers: int | None = None,
    remap: str = "slot",
    counters: TrafficCounters | None = None,
    mode_seconds: list | None = None,
    split_remap: bool = False,
) -> FactorSet:
    """One pass over every mode, overwriting each factor with its raw MTTKRP
    output after that mode's barrier, so later modes consume updated factors."""
    import time

    working = list(factors.factors)
    lambdas = factors.lambdas.copy()
    for n in range(st.num_modes):
        current = FactorSet(tuple(working), lambdas)
        t0 = time.perf_counter()
        result = mttkrp_mode(st, current, n, smap, workers=workers, remap=remap,
                             counters=counters, split_remap=split_remap)
        if mode_seconds is not None:
            mode_seconds.append(time.perf_counter() - t0)
        working[n] = result
    return FactorSet(tuple(working), lambdas)
