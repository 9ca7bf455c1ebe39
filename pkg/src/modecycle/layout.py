"""Partitioned tensor layout.

Each mode's index range is cut into ``k_n`` intervals of ``m_n`` indices; the
nonzeros incident on one interval form a super-shard, and each super-shard is
cut into shards of ``g`` nonzeros. Every element carries one flat shard id per
mode, which is all the compute engine needs to stream the tensor in shard
order for the current mode while scattering elements into their next-mode
shard slots.

Parameter selection balances two constraints: the per-mode super-shard count
must divide evenly among threads, and the working set of one concurrently
active super-shard per thread (interval's worth of output factor rows, one
shard of elements, plus the per-shard remap cursors) must fit in the cache
fraction reserved for it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import morton
from .coo import CooTensor

__all__ = [
    "InfeasibleParamsError",
    "PartitionParams",
    "PartitionPlan",
    "ShardedTensor",
    "select_params",
    "build_sharded",
    "element_size_bits",
    "validate_plan",
    "PlanReport",
    "CheckResult",
]


class InfeasibleParamsError(ValueError):
    """No (m, g) pair satisfies the divisibility and cache constraints."""


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def _ceil_log2(x: int) -> int:
    if x < 1:
        raise ValueError("log2 of non-positive value")
    return (x - 1).bit_length()


@dataclass(frozen=True)
class PartitionParams:
    """Chosen partitioning for one tensor shape.

    ``m[n]`` is the interval width (output rows per super-shard), ``k[n]`` the
    stored super-shard count (``m[n] * k[n] >= dims[n]``; trailing intervals
    may be empty when exact divisibility is unattainable), ``g`` the shard
    size in nonzeros. ``alpha``, ``beta``, ``sigma`` are the byte sizes of one
    factor element, one tensor element, and one remap cursor; ``theta`` is the
    fraction of the ``gamma``-byte cache granted to the modeled working set.
    """

    dims: tuple[int, ...]
    nnz: int
    m: tuple[int, ...]
    k: tuple[int, ...]
    g: int
    nu: int
    gamma: int
    theta: float
    rank: int
    alpha: int
    beta: int
    sigma: int
    eq2_exact: tuple[bool, ...] = ()

    def __post_init__(self):
        if not self.eq2_exact:
            object.__setattr__(
                self,
                "eq2_exact",
                tuple(_ceil_div(d, mm) == kk for d, mm, kk in zip(self.dims, self.m, self.k)),
            )
        for n, (d, mm, kk) in enumerate(zip(self.dims, self.m, self.k)):
            if mm < 1 or kk < 1:
                raise ValueError(f"mode {n}: m and k must be positive")
            if mm * kk < d:
                raise ValueError(f"mode {n}: intervals cover only {mm * kk} of {d} indices")
        if not (0.0 < self.theta < 1.0):
            raise ValueError("theta must lie in (0, 1)")

    @property
    def num_modes(self) -> int:
        return len(self.dims)

    @property
    def cache_budget(self) -> float:
        return self.theta * self.gamma

    def divisibility_ok(self, mode: int) -> bool:
        """Super-shard count is a positive multiple of the thread count
        (required only when the mode has at least ``nu`` indices)."""
        if self.dims[mode] < self.nu:
            return self.m[mode] == 1
        return self.k[mode] % self.nu == 0

    def worst_case_shards(self, mode: int, g: int | None = None) -> int:
        g = self.g if g is None else g
        return _ceil_div(self.nnz, g) + self.k[mode]

    def cache_lhs(self, mode: int, g: int | None = None, shard_sum: int | None = None) -> int:
        """Modeled working-set bytes for one mode: live factor intervals and
        shards across all threads, plus the remap cursor table."""
        g = self.g if g is None else g
        if shard_sum is None:
            shard_sum = self.worst_case_shards(mode, g)
        return (self.alpha * self.m[mode] * self.rank + self.beta * g) * self.nu + self.sigma * shard_sum

    def cache_slack(self, mode: int, shard_sum: int | None = None) -> float:
        return self.cache_budget - self.cache_lhs(mode, shard_sum=shard_sum)

    def cache_ok(self, mode: int, shard_sum: int | None = None) -> bool:
        return self.cache_lhs(mode, shard_sum=shard_sum) <= self.cache_budget


def default_element_bytes(num_modes: int) -> int:
    """In-memory element footprint: per mode a shard id and an index (both
    int64), plus the float64 value."""
    return (2 * num_modes + 1) * 8


def element_size_bits(params: PartitionParams) -> int:
    """Theoretical packed footprint of one element in bits: a shard id per
    mode, the original coordinates, and a 64-bit value."""
    shard_bits = _ceil_log2(_ceil_div(params.nnz, params.g))
    return (
        params.num_modes * shard_bits
        + sum(_ceil_log2(d) for d in params.dims)
        + 64
    )


# ---------------------------------------------------------------------------
# Parameter search


def _geometric_g_candidates(g_range: tuple[int, int]) -> list[int]:
    lo, hi = g_range
    if lo < 1 or hi < lo:
        raise ValueError(f"bad shard size range {g_range}")
    out = [1 << b for b in range(lo.bit_length() - 1, hi.bit_length() + 1)]
    out = [g for g in out if lo <= g <= hi]
    if not out:
        raise ValueError(f"no power of two inside shard size range {g_range}")
    return out


def _exact_band(dim: int, k: int) -> tuple[int, int] | None:
    """Inclusive range of m with ceil(dim/m) == k, or None."""
    if k > dim:
        return None
    if k == 1:
        return dim, dim
    lo = _ceil_div(dim, k)
    hi = _ceil_div(dim, k - 1) - 1
    if lo > hi:
        return None
    return lo, hi


def _exact_k_candidates(dim: int, nu: int) -> list[int]:
    """Ascending multiples of nu that are achievable as ceil(dim/m)."""
    ks = set()
    r = math.isqrt(dim)
    for k in range(nu, min(dim, r + nu) + 1, nu):
        if _exact_band(dim, k):
            ks.add(k)
    for m in range(1, r + 2):
        k = _ceil_div(dim, m)
        if k % nu == 0 and _exact_band(dim, k):
            ks.add(k)
    return sorted(ks)


def _pick_mode_params(
    dim: int,
    nnz: int,
    nu: int,
    budget: float,
    rank: int,
    alpha: int,
    beta: int,
    sigma: int,
    g_candidates: Sequence[int],
    m_max: int | None,
) -> tuple[int, int] | None:
    """Largest interval width m (smallest super-shard count) satisfying the
    divisibility rule and, for at least one candidate g, the cache bound.
    Falls back to a ragged tail (k a multiple of nu with trailing empty
    intervals) when no m gives an exact interval count."""

    def fits(m: int, k: int) -> bool:
        return any(
            (alpha * m * rank + beta * g) * nu + sigma * (_ceil_div(nnz, g) + k) <= budget
            for g in g_candidates
        )

    if dim < nu:
        return (1, dim) if fits(1, dim) else None

    cap = dim if m_max is None else min(dim, m_max)
    for k in _exact_k_candidates(dim, nu):
        band = _exact_band(dim, k)
        lo, hi = band
        hi = min(hi, cap)
        if lo > hi:
            continue
        if fits(hi, k):
            return hi, k
        if not fits(lo, k):
            continue
        while lo < hi:  # cache bound is monotone in m
            mid = (lo + hi + 1) // 2
            if fits(mid, k):
                lo = mid
            else:
                hi = mid - 1
        return lo, k

    q = 1
    while True:
        k = q * nu
        m = min(_ceil_div(dim, k), cap) if cap >= 1 else 1
        m = max(m, 1)
        if m * k >= dim and fits(m, k):
            return m, k
        if m == 1 and m * k >= dim:
            return None  # growing k further only adds cursor bytes
        q += 1


def select_params(
    dims: Sequence[int],
    nnz: int,
    nu: int,
    gamma: int,
    rank: int,
    alpha: int = 8,
    beta: int | None = None,
    sigma: int = 8,
    theta: float = 0.5,
    g_range: tuple[int, int] = (1024, 32768),
    m_max: int | None = None,
) -> PartitionParams:
    """Choose interval widths and the shard size for a tensor shape.

    Per mode, the widest interval wins subject to the thread-divisibility rule
    and the cache bound (evaluated with a worst-case shard count, since actual
    super-shard fills are data dependent); then the largest power-of-two shard
    size in ``g_range`` that keeps every mode within budget. Raises
    :class:`InfeasibleParamsError` with the binding constraint otherwise.
    """
    dims = tuple(int(d) for d in dims)
    if nu < 1 or gamma <= 0 or rank < 1:
        raise ValueError("nu, gamma and rank must be positive")
    beta = default_element_bytes(len(dims)) if beta is None else beta
    g_candidates = _geometric_g_candidates(tuple(int(x) for x in g_range))
    budget = theta * gamma

    def solve_for(gs: Sequence[int]) -> list[tuple[int, int]] | None:
        chosen = []
        for d in dims:
            got = _pick_mode_params(d, nnz, nu, budget, rank, alpha, beta, sigma, gs, m_max)
            if got is None:
                return None
            chosen.append(got)
        return chosen

    chosen = solve_for(g_candidates)
    final_g = None
    if chosen is not None:
        for g in reversed(g_candidates):
            if all(
                (alpha * m * rank + beta * g) * nu + sigma * (_ceil_div(nnz, g) + k) <= budget
                for m, k in chosen
            ):
                final_g = g
                break
    if final_g is None:
        # the per-mode picks may each have leaned on different g; retry pinned
        for g in reversed(g_candidates):
            chosen = solve_for([g])
            if chosen is not None:
                final_g = g
                break
    if final_g is None:
        raise InfeasibleParamsError(_infeasibility_message(
            dims, nnz, nu, budget, rank, alpha, beta, sigma, g_candidates))

    return PartitionParams(
        dims=dims,
        nnz=int(nnz),
        m=tuple(m for m, _ in chosen),
        k=tuple(k for _, k in chosen),
        g=final_g,
        nu=int(nu),
        gamma=int(gamma),
        theta=float(theta),
        rank=int(rank),
        alpha=int(alpha),
        beta=int(beta),
        sigma=int(sigma),
    )


def _infeasibility_message(dims, nnz, nu, budget, rank, alpha, beta, sigma, gs) -> str:
    g = min(gs)
    parts = []
    for n, d in enumerate(dims):
        m = 1
        k = d if d < nu else nu * _ceil_div(d, nu)
        terms = {
            "factor-interval": alpha * m * rank * nu,
            "shard-elements": beta * g * nu,
            "remap-cursors": sigma * (_ceil_div(nnz, g) + k),
        }
        binding = max(terms, key=terms.get)
        parts.append(
            f"mode {n}: even m=1, g={g} needs {sum(terms.values())} bytes "
            f"(budget {budget:.0f}, binding term {binding}={terms[binding]})"
        )
    return "no feasible (m, g): " + "; ".join(parts)


# ---------------------------------------------------------------------------
# Plan and build


@dataclass(frozen=True, eq=False)
class PartitionPlan:
    """Static geometry of a built tensor: per-mode super-shard fills and the
    element offset of every shard in that mode's canonical order."""

    params: PartitionParams
    ss_counts: tuple[np.ndarray, ...]        # per mode: (k_n,) nonzeros per super-shard
    ss_elem_offsets: tuple[np.ndarray, ...]  # per mode: (k_n + 1,) prefix sums
    ss_shard_counts: tuple[np.ndarray, ...]  # per mode: (k_n,) ceil(fill / g)
    ss_first_shard: tuple[np.ndarray, ...]   # per mode: (k_n + 1,) prefix sums
    shard_offsets: tuple[np.ndarray, ...]    # per mode: (shards + 1,) element offsets

    @property
    def num_modes(self) -> int:
        return self.params.num_modes

    @property
    def nnz(self) -> int:
        return self.params.nnz

    def total_shards(self, mode: int) -> int:
        return int(self.ss_first_shard[mode][-1])

    def shard_fills(self, mode: int) -> np.ndarray:
        return np.diff(self.shard_offsets[mode])

    def ss_of_shard(self, mode: int) -> np.ndarray:
        return np.repeat(
            np.arange(self.params.k[mode], dtype=np.int64),
            self.ss_shard_counts[mode],
        )

    def signature(self) -> tuple:
        return (self.params.dims, self.params.nnz, self.params.m, self.params.g)

    def pointer_entries(self) -> int:
        """Remap cursor metadata: one entry per shard per mode."""
        return sum(self.total_shards(n) for n in range(self.num_modes))


@dataclass(eq=False)
class ShardedTensor:
    """Double-buffered element storage plus its plan.

    The active buffer is ordered by the active mode's shard ids; the back
    buffer is the remap target. ``canonical`` records whether the active
    buffer is in the build-time (Morton-refined) order, which the
    deterministic-slot remap strategy requires.
    """

    plan: PartitionPlan
    sids: list[np.ndarray]   # two (nnz, N) int64 buffers
    idxs: list[np.ndarray]   # two (nnz, N) int64 buffers
    vals: list[np.ndarray]   # two (nnz,) float64 buffers
    slot_maps: tuple[np.ndarray, ...]  # per mode: (nnz,) next-mode slot of position i
    active: int = 0
    active_mode: int = 0
    canonical: bool = True

    @property
    def params(self) -> PartitionParams:
        return self.plan.params

    @property
    def nnz(self) -> int:
        return self.plan.nnz

    @property
    def num_modes(self) -> int:
        return self.plan.num_modes

    @property
    def element_nbytes(self) -> int:
        return default_element_bytes(self.num_modes)

    def active_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        a = self.active
        return self.sids[a], self.idxs[a], self.vals[a]

    def back_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        b = 1 - self.active
        return self.sids[b], self.idxs[b], self.vals[b]

    def swap(self, new_mode: int, still_canonical: bool) -> None:
        self.active = 1 - self.active
        self.active_mode = new_mode
        self.canonical = self.canonical and still_canonical

    def to_coo(self, dims: tuple[int, ...] | None = None) -> CooTensor:
        s, i, v = self.active_arrays()
        return CooTensor(dims or self.params.dims, i.copy(), v.copy())

    def accounting(self) -> dict:
        """Byte/entry census by category; buffer storage is exactly two
        element arrays of nnz each, everything else is metadata."""
        n = self.num_modes
        plan_aux = sum(
            arr.size
            for group in (
                self.plan.ss_counts,
                self.plan.ss_elem_offsets,
                self.plan.ss_shard_counts,
                self.plan.ss_first_shard,
            )
            for arr in group
        )
        return {
            "buffer_elements": 2 * self.nnz,
            "element_bytes": self.element_nbytes,
            "buffer_bytes": sum(
                a.nbytes for a in (*self.sids, *self.idxs, *self.vals)
            ),
            "remap_pointer_entries": self.plan.pointer_entries(),
            "slot_rank_entries": sum(m.size for m in self.slot_maps),
            "plan_aux_entries": plan_aux,
        }


def build_sharded(tensor: CooTensor, params: PartitionParams) -> ShardedTensor:
    """Assign every nonzero to a super-shard and shard per mode, fix the
    canonical order (per mode: by super-shard, inside it by the Morton key of
    the element's interval coordinates, ties by input position), and lay the
    active buffer out in mode-0 order.
    """
    if tuple(params.dims) != tensor.dims:
        raise ValueError("params were selected for different dims")
    if params.nnz != tensor.nnz:
        raise ValueError("params were selected for a different nonzero count")
    nnz, nmodes, g = tensor.nnz, tensor.num_modes, params.g

    ivals = np.empty((nnz, nmodes), dtype=np.int64)
    for n in range(nmodes):
        ivals[:, n] = tensor.subs[:, n] // params.m[n]
    hi, lo = morton.interleave(ivals, params.k)
    seq = np.arange(nnz, dtype=np.int64)

    orders, positions = [], []
    ss_counts, ss_offsets, ss_shards, ss_first, shard_offs = [], [], [], [], []
    sids_all = np.empty((nnz, nmodes), dtype=np.int64)
    for n in range(nmodes):
        order = np.lexsort((seq, lo, hi, ivals[:, n]))
        pos = np.empty(nnz, dtype=np.int64)
        pos[order] = seq
        counts = np.bincount(ivals[:, n], minlength=params.k[n]).astype(np.int64)
        offs = np.concatenate(([0], np.cumsum(counts)))
        shards = -(-counts // g)
        first = np.concatenate(([0], np.cumsum(shards)))
        rank_in_ss = pos - offs[ivals[:, n]]
        sids_all[:, n] = first[ivals[:, n]] + rank_in_ss // g

        total = int(first[-1])
        ss_of = np.repeat(np.arange(params.k[n], dtype=np.int64), shards)
        q_within = np.arange(total, dtype=np.int64) - first[ss_of]
        soffs = np.concatenate((offs[ss_of] + q_within * g, [nnz])).astype(np.int64)

        orders.append(order)
        positions.append(pos)
        ss_counts.append(counts)
        ss_offsets.append(offs)
        ss_shards.append(shards)
        ss_first.append(first)
        shard_offs.append(soffs)

    plan = PartitionPlan(
        params=params,
        ss_counts=tuple(ss_counts),
        ss_elem_offsets=tuple(ss_offsets),
        ss_shard_counts=tuple(ss_shards),
        ss_first_shard=tuple(ss_first),
        shard_offsets=tuple(shard_offs),
    )

    slot_maps = tuple(
        np.ascontiguousarray(positions[(n + 1) % nmodes][orders[n]])
        for n in range(nmodes)
    )

    o0 = orders[0]
    sids = [np.ascontiguousarray(sids_all[o0]), np.zeros((nnz, nmodes), dtype=np.int64)]
    idxs = [np.ascontiguousarray(tensor.subs[o0]), np.zeros((nnz, nmodes), dtype=np.int64)]
    vals = [np.ascontiguousarray(tensor.vals[o0]), np.zeros(nnz)]
    return ShardedTensor(
        plan=plan,
        sids=sids,
        idxs=idxs,
        vals=vals,
        slot_maps=slot_maps,
    )


# ---------------------------------------------------------------------------
# Validation


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        mark = "pass" if self.passed else "FAIL"
        suffix = f" ({self.detail})" if self.detail and not self.passed else ""
        return f"[{mark}] {self.name}{suffix}"


@dataclass(frozen=True)
class PlanReport:
    checks: tuple[CheckResult, ...]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def first_failure(self) -> CheckResult | None:
        return next((c for c in self.checks if not c.passed), None)

    def format(self) -> str:
        return "\n".join(c.line() for c in self.checks)


def validate_plan(st: ShardedTensor, source: CooTensor | None = None) -> PlanReport:
    """Re-derive every structural invariant of the plan and active buffer and
    report each as pass/fail with the first counterexample."""
    plan, params = st.plan, st.params
    checks: list[CheckResult] = []
    sids, idxs, vals = st.active_arrays()

    for n in range(st.num_modes):
        total = int(plan.ss_counts[n].sum())
        checks.append(CheckResult(
            f"mode{n}-ss-conservation", total == st.nnz,
            f"super-shard fills sum to {total}, expected {st.nnz}"))

    for n in range(st.num_modes):
        offs = plan.shard_offsets[n]
        ok = bool(np.all(np.diff(offs) > 0)) and int(offs[0]) == 0 and int(offs[-1]) == st.nnz
        checks.append(CheckResult(
            f"mode{n}-offsets", ok,
            "shard offsets must rise strictly from 0 to nnz"))

        fills = plan.shard_fills(n)
        last = plan.ss_first_shard[n][1:] - 1
        interior = np.ones(plan.total_shards(n), dtype=bool)
        interior[last[plan.ss_shard_counts[n] > 0]] = False
        bad = np.nonzero(fills[interior] != params.g)[0]
        checks.append(CheckResult(
            f"mode{n}-shard-fill", bad.size == 0,
            f"{bad.size} non-final shards not holding exactly g={params.g}"))

    for n in range(st.num_modes):
        nshards = plan.total_shards(n)
        inrange = (sids[:, n] >= 0) & (sids[:, n] < nshards)
        if not inrange.all():
            e = int(np.argmin(inrange))
            checks.append(CheckResult(
                f"mode{n}-sid-range", False,
                f"element {e}: shard id {int(sids[e, n])} outside [0, {nshards})"))
            continue
        ss_of = plan.ss_of_shard(n)
        want = idxs[:, n] // params.m[n]
        got = ss_of[sids[:, n]]
        ok = np.array_equal(want, got)
        detail = ""
        if not ok:
            e = int(np.argmax(want != got))
            detail = (f"element {e}: index {int(idxs[e, n])} lies in interval "
                      f"{int(want[e])} but shard id {int(sids[e, n])} belongs to "
                      f"super-shard {int(got[e])}")
        checks.append(CheckResult(f"mode{n}-interval-containment", ok, detail))

    am = st.active_mode
    expected = np.repeat(
        np.arange(plan.total_shards(am), dtype=np.int64), plan.shard_fills(am)
    )
    ok = np.array_equal(sids[:, am], expected)
    detail = ""
    if not ok:
        e = int(np.argmax(sids[:, am] != expected))
        detail = (f"position {e}: shard id {int(sids[e, am])}, plan assigns "
                  f"{int(expected[e])}")
    checks.append(CheckResult("active-order", ok, detail))

    acc = st.accounting()
    ok = acc["buffer_bytes"] == 2 * st.nnz * st.element_nbytes
    checks.append(CheckResult(
        "double-buffer-bytes", ok,
        f"buffers hold {acc['buffer_bytes']} bytes, expected "
        f"{2 * st.nnz * st.element_nbytes}"))

    if source is not None:
        ok = source.same_nonzeros(CooTensor(source.dims, idxs, vals))
        checks.append(CheckResult(
            "conservation", ok,
            "active buffer nonzero multiset differs from the source tensor"))

    return PlanReport(tuple(checks))
