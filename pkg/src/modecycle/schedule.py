"""Static assignment of super-shards to threads.

Load is measured in shards (each shard holds the same number of nonzeros, so
shard count tracks work). Per mode, super-shards are handed out largest-first
to the currently lightest thread; that greedy rule keeps the heaviest thread
within 4/3 of the best possible makespan, which an exhaustive solver verifies
on small instances.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Sequence

from .layout import PartitionPlan

__all__ = [
    "ScheduleMap",
    "schedule_super_shards",
    "optimal_makespan",
    "block_cyclic_loads",
    "load_stats",
    "InstanceTooLarge",
]


class InstanceTooLarge(ValueError):
    """Exhaustive makespan is only computed for small instances; use
    load_stats for diagnostics on real plans."""


@dataclass(frozen=True)
class ScheduleMap:
    """Per mode, per thread: the ordered super-shard lists plus the shard-count
    loads they imply. ``plan_signature`` ties a map to the plan it was built
    from so the engine can reject mismatched inputs."""

    nu: int
    assignments: tuple[tuple[tuple[int, ...], ...], ...]  # [mode][thread] -> ss ids
    ss_loads: tuple[tuple[int, ...], ...]                 # [mode][ss] -> shard count
    plan_signature: tuple

    @property
    def num_modes(self) -> int:
        return len(self.assignments)

    def thread_loads(self, mode: int) -> list[int]:
        loads = self.ss_loads[mode]
        return [sum(loads[s] for s in lst) for lst in self.assignments[mode]]

    def pointer_entries(self) -> int:
        """One scheduling pointer per super-shard per mode."""
        return sum(len(l) for mode in self.assignments for l in mode)


def _greedy(counts: Sequence[int], nu: int) -> list[list[int]]:
    order = sorted(range(len(counts)), key=lambda j: (-counts[j], j))
    heap = [(0, t) for t in range(nu)]
    heapq.heapify(heap)
    out: list[list[int]] = [[] for _ in range(nu)]
    for j in order:
        load, t = heapq.heappop(heap)
        out[t].append(j)
        heapq.heappush(heap, (load + counts[j], t))
    return out


def schedule_super_shards(plan: PartitionPlan, nu: int) -> ScheduleMap:
    """Greedy largest-first assignment for every mode. Ties: heavier-first by
    lower super-shard id, equal thread loads by lower thread id, so the same
    plan always yields the same map."""
    if nu < 1:
        raise ValueError("need at least one thread")
    assignments = []
    ss_loads = []
    for n in range(plan.num_modes):
        counts = [int(c) for c in plan.ss_shard_counts[n]]
        assignments.append(tuple(tuple(lst) for lst in _greedy(counts, nu)))
        ss_loads.append(tuple(counts))
    return ScheduleMap(
        nu=nu,
        assignments=tuple(assignments),
        ss_loads=tuple(ss_loads),
        plan_signature=plan.signature(),
    )


def optimal_makespan(counts: Sequence[int], nu: int) -> int:
    """Exact minimum over all assignments of the maximum thread load, by
    branch and bound. Guarded to small instances."""
    counts = [int(c) for c in counts]
    if len(counts) > 14 or nu > 4:
        raise InstanceTooLarge(
            f"{len(counts)} super-shards / {nu} threads exceeds the exhaustive "
            "limit (14 items, 4 threads); use load_stats diagnostics instead"
        )
    if nu < 1:
        raise ValueError("need at least one thread")
    items = sorted((c for c in counts if c > 0), reverse=True)
    if not items:
        return 0
    total = sum(items)
    lower = max(items[0], -(-total // nu))
    upper = max(sum(counts[j] for j in lst) for lst in _greedy(counts, nu))
    if upper <= lower:
        return lower

    def feasible(cap: int) -> bool:
        bins = [0] * nu

        def place(i: int) -> bool:
            if i == len(items):
                return True
            seen = set()
            for b in range(nu):
                if bins[b] in seen:
                    continue
                seen.add(bins[b])
                if bins[b] + items[i] <= cap:
                    bins[b] += items[i]
                    if place(i + 1):
                        return True
                    bins[b] -= items[i]
                if bins[b] == 0:
                    break  # later empty bins are symmetric
            return False

        return place(0)

    for cap in range(lower, upper):
        if feasible(cap):
            return cap
    return upper


def block_cyclic_loads(counts: Sequence[int], nu: int) -> list[int]:
    """Round-robin over the descending-sorted super-shards; the baseline the
    greedy rule is compared against."""
    order = sorted(range(len(counts)), key=lambda j: (-counts[j], j))
    loads = [0] * nu
    for i, j in enumerate(order):
        loads[i % nu] += counts[j]
    return loads


def load_stats(smap: ScheduleMap, include_block_cyclic: bool = True) -> dict:
    """Per-mode balance report: thread-load extrema, mean, and max/mean
    imbalance, optionally with the block-cyclic baseline's numbers."""
    modes = []
    for n in range(smap.num_modes):
        loads = smap.thread_loads(n)
        mean = sum(loads) / len(loads)
        entry = {
            "mode": n,
            "max_load": max(loads),
            "min_load": min(loads),
            "mean_load": mean,
            "imbalance": (max(loads) / mean) if mean > 0 else 1.0,
            "thread_loads": loads,
        }
        if include_block_cyclic:
            bc = block_cyclic_loads(smap.ss_loads[n], smap.nu)
            bc_mean = sum(bc) / len(bc)
            entry["block_cyclic_max_load"] = max(bc)
            entry["block_cyclic_imbalance"] = (max(bc) / bc_mean) if bc_mean > 0 else 1.0
        modes.append(entry)
    return {"nu": smap.nu, "modes": modes}
