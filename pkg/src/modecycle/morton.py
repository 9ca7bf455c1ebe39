"""Z-curve (Morton) keys over multi-mode interval coordinates.

Bit interleaving is truncated to each coordinate's own bit width, so ragged
interval counts still produce a total order; keys wider than 64 bits spill
into a second word and get compared high word first.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np


def key_widths(counts: Sequence[int]) -> tuple[int, ...]:
    """Bits needed per coordinate to index ``counts[w]`` intervals."""
    return tuple(max(0, int(c) - 1).bit_length() for c in counts)


def interleave(coords: np.ndarray, counts: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Interleave coordinate bits into (hi, lo) uint64 key words.

    ``coords`` is (n, N); bit b of mode w lands after bit b of every earlier
    mode that still has bits at level b (LSB first, mode 0 least significant).
    """
    widths = key_widths(counts)
    total = sum(widths)
    if total > 128:
        raise ValueError(f"morton key would need {total} bits (> 128)")
    n = coords.shape[0]
    lo = np.zeros(n, dtype=np.uint64)
    hi = np.zeros(n, dtype=np.uint64)
    pos = 0
    for b in range(max(widths, default=0)):
        for w, width in enumerate(widths):
            if b >= width:
                continue
            bit = (coords[:, w].astype(np.uint64) >> np.uint64(b)) & np.uint64(1)
            if pos < 64:
                lo |= bit << np.uint64(pos)
            else:
                hi |= bit << np.uint64(pos - 64)
            pos += 1
    return hi, lo


def key_order(coords: np.ndarray, counts: Sequence[int]) -> np.ndarray:
    """Stable argsort of rows by Morton key (ties keep input order)."""
    hi, lo = interleave(coords, counts)
    return np.lexsort((np.arange(coords.shape[0]), lo, hi))
