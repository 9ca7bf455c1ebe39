"""Compiled per-thread kernel for one mode's compute + remap pass.

Workers run concurrently on disjoint super-shard element ranges with the GIL
released. Output rows need no locks: all nonzeros sharing an output index sit
in one super-shard, owned by one worker. Remap writes are disjoint either by
construction (precomputed slots) or through an atomic fetch-add on the
destination shard's fill cursor.
"""

from __future__ import annotations

import numpy as np
from numba import njit, types
from numba.core import cgutils
from numba.extending import intrinsic


@intrinsic
def _atomic_fetch_add(typingctx, arr, idx):
    """LLVM atomicrmw add on one int64 slot; returns the previous value.
    Numba exposes no CPU atomics, so this drops to IR directly."""
    if not isinstance(arr, types.Array) or arr.dtype != types.int64 or arr.ndim != 1:
        raise TypeError("expected a 1-D int64 array")
    sig = types.int64(arr, types.int64)

    def codegen(context, builder, signature, args):
        arr_ty = signature.args[0]
        ary = context.make_array(arr_ty)(context, builder, args[0])
        ptr = cgutils.get_item_pointer(
            context, builder, arr_ty, ary, [args[1]], wraparound=False
        )
        one = context.get_constant(types.int64, 1)
        return builder.atomic_rmw("add", ptr, one, ordering="monotonic")

    return sig, codegen


@njit(nogil=True, cache=True)
def mode_worker(
    sids, idxs, vals,               # active buffer (read)
    dst_sids, dst_idxs, dst_vals,   # back buffer (scattered writes)
    fstack, foffs,                  # input factors stacked row-wise
    out,                            # output factor, zero-initialized
    mode, next_mode,
    starts, ends,                   # this worker's super-shard element ranges
    dest_base,                      # next-mode shard offsets (len shards + 1)
    cursors,                        # next-mode shard fill counters (shared)
    dest_slots,                     # precomputed slots (empty when unused)
    use_cursor,
    do_compute, do_remap,
    errflag,                        # [overflowed shard id + 1], 0 if clean
    counters,                       # [elements processed]
):
    rank = out.shape[1]
    nmodes = idxs.shape[1]
    ell = np.empty(rank)
    processed = 0
    for s in range(starts.shape[0]):
        for i in range(starts[s], ends[s]):
            if do_compute:
                for r in range(rank):
                    ell[r] = 1.0
                for w in range(nmodes):
                    if w == mode:
                        continue
                    row = foffs[w] + idxs[i, w]
                    for r in range(rank):
                        ell[r] *= fstack[row, r]
                v = vals[i]
                orow = idxs[i, mode]
                for r in range(rank):
                    out[orow, r] += v * ell[r]
            if do_remap:
                if use_cursor:
                    b = sids[i, next_mode]
                    slot = dest_base[b] + _atomic_fetch_add(cursors, b)
                    if slot >= dest_base[b + 1]:
                        errflag[0] = b + 1
                        processed += 1
                        continue
                else:
                    slot = dest_slots[i]
                for w in range(nmodes):
                    dst_sids[slot, w] = sids[i, w]
                    dst_idxs[slot, w] = idxs[i, w]
                dst_vals[slot] = vals[i]
            processed += 1
    counters[0] += processed
