"""Canonical COO sparse tensors, FROSTT text I/O, synthetic generation, and a
sequential MTTKRP reference used as the correctness oracle for the parallel
engine.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "CooTensor",
    "Element",
    "FactorSet",
    "FrosttParseError",
    "parse_frostt",
    "read_frostt",
    "write_frostt",
    "synth_tensor",
    "reference_mttkrp",
    "save_factor_set",
    "load_factor_set",
]

FACTOR_DUMP_MAGIC = b"MCFD"


class FrosttParseError(ValueError):
    """Malformed FROSTT text input; carries the 1-based line number if known."""

    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class Element:
    """A single nonzero: zero-based coordinates and its value."""

    indices: tuple[int, ...]
    value: float


@dataclass(frozen=True, eq=False)
class CooTensor:
    """Sparse tensor in coordinate form.

    ``subs`` holds zero-based coordinates, one row per nonzero, and ``vals``
    the matching values. Instances are validated on construction and treated
    as immutable; operations never mutate them.
    """

    dims: tuple[int, ...]
    subs: np.ndarray  # (nnz, N) int64
    vals: np.ndarray  # (nnz,) float64

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        subs = np.ascontiguousarray(np.asarray(self.subs, dtype=np.int64))
        vals = np.ascontiguousarray(np.asarray(self.vals, dtype=np.float64))
        object.__setattr__(self, "subs", subs)
        object.__setattr__(self, "vals", vals)

        if len(self.dims) < 2:
            raise ValueError("a tensor needs at least 2 modes")
        if any(d < 1 for d in self.dims):
            raise ValueError("every mode dimension must be positive")
        if subs.ndim != 2 or subs.shape[1] != len(self.dims):
            raise ValueError("subs must be (nnz, num_modes)")
        if subs.shape[0] == 0:
            raise ValueError("tensor has no nonzeros")
        if vals.shape != (subs.shape[0],):
            raise ValueError("vals must align with subs rows")
        if not np.all(np.isfinite(vals)):
            raise ValueError("values must be finite")
        if subs.min() < 0:
            raise ValueError("negative index")
        if np.any(subs.max(axis=0) >= np.asarray(self.dims, dtype=np.int64)):
            raise ValueError("index out of range for declared dims")
        if len(np.unique(subs, axis=0)) != subs.shape[0]:
            raise ValueError("duplicate coordinates (coalesce first)")

    @property
    def num_modes(self) -> int:
        return len(self.dims)

    @property
    def nnz(self) -> int:
        return self.subs.shape[0]

    @property
    def density(self) -> float:
        return self.nnz / math.prod(self.dims)

    def element(self, i: int) -> Element:
        return Element(tuple(int(c) for c in self.subs[i]), float(self.vals[i]))

    def norm(self) -> float:
        """Frobenius norm (sqrt of the sum of squared nonzero values)."""
        return float(np.linalg.norm(self.vals))

    def same_nonzeros(self, other: "CooTensor", rtol: float = 0.0) -> bool:
        """Multiset equality of (coordinates, value) pairs, ignoring order."""
        if self.dims != other.dims or self.nnz != other.nnz:
            return False
        a = np.lexsort(self.subs.T[::-1])
        b = np.lexsort(other.subs.T[::-1])
        if not np.array_equal(self.subs[a], other.subs[b]):
            return False
        va, vb = self.vals[a], other.vals[b]
        if rtol == 0.0:
            return bool(np.array_equal(va, vb))
        return bool(np.allclose(va, vb, rtol=rtol, atol=0.0))


@dataclass(frozen=True, eq=False)
class FactorSet:
    """Dense factor matrices, one per mode, sharing a single rank, plus the
    per-column scaling weights extracted by normalization (all 1.0 until a
    normalization pass runs)."""

    factors: tuple[np.ndarray, ...]
    lambdas: np.ndarray

    def __post_init__(self):
        factors = tuple(
            np.ascontiguousarray(np.asarray(f, dtype=np.float64)) for f in self.factors
        )
        object.__setattr__(self, "factors", factors)
        object.__setattr__(
            self, "lambdas", np.ascontiguousarray(np.asarray(self.lambdas, dtype=np.float64))
        )
        if not factors:
            raise ValueError("need at least one factor matrix")
        ranks = {f.shape[1] for f in factors}
        if len(ranks) != 1:
            raise ValueError(f"factor matrices disagree on rank: {sorted(ranks)}")
        if any(f.ndim != 2 for f in factors):
            raise ValueError("factor matrices must be 2-D")
        if self.lambdas.shape != (self.rank,):
            raise ValueError("lambdas must have one entry per rank column")
        for f in factors:
            if not np.all(np.isfinite(f)):
                raise ValueError("factor entries must be finite")

    @property
    def rank(self) -> int:
        return self.factors[0].shape[1]

    @property
    def num_modes(self) -> int:
        return len(self.factors)

    def shapes_match(self, dims: Sequence[int]) -> bool:
        return len(dims) == len(self.factors) and all(
            f.shape[0] == d for f, d in zip(self.factors, dims)
        )

    def require_match(self, dims: Sequence[int]) -> None:
        if not self.shapes_match(dims):
            got = [f.shape[0] for f in self.factors]
            raise ValueError(f"factor rows {got} do not match tensor dims {list(dims)}")

    def replace_factor(self, mode: int, matrix: np.ndarray) -> "FactorSet":
        factors = list(self.factors)
        factors[mode] = matrix
        return FactorSet(tuple(factors), self.lambdas.copy())

    @classmethod
    def ones(cls, dims: Sequence[int], rank: int) -> "FactorSet":
        return cls(
            tuple(np.ones((int(d), rank)) for d in dims),
            np.ones(rank),
        )

    @classmethod
    def random(cls, dims: Sequence[int], rank: int, seed: int) -> "FactorSet":
        """Uniform (0,1) entries from a counter-based generator, so a seed
        reproduces the same set on any platform."""
        rng = np.random.Generator(np.random.Philox(seed))
        return cls(
            tuple(rng.random((int(d), rank)) for d in dims),
            np.ones(rank),
        )


# ---------------------------------------------------------------------------
# FROSTT text format


def _read_text(source) -> str:
    if isinstance(source, (str, Path)) and "\n" not in str(source):
        return Path(source).read_text()
    if isinstance(source, bytes):
        return source.decode("ascii")
    if isinstance(source, str):
        return source
    data = source.read()
    if isinstance(data, bytes):
        data = data.decode("ascii")
    return data


def parse_frostt(source, dims: Sequence[int] | None = None) -> CooTensor:
    """Parse FROSTT ``.tns`` text: one nonzero per line as N whitespace-separated
    1-based indices followed by a value; ``#`` starts a comment line.

    The mode count is inferred from the first data line. Duplicate coordinates
    are coalesced by summing their values. ``dims`` overrides the per-mode
    sizes (they default to the largest index seen in each mode), which matters
    for datasets with empty trailing indices.
    """
    text = _read_text(source)
    data: list[str] = []
    linenos: list[int] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        data.append(line)
        linenos.append(lineno)
    if not data:
        raise FrosttParseError("no nonzero entries in input")

    ncols = len(data[0].split())
    if ncols < 3:
        raise FrosttParseError(
            f"expected at least 2 indices and a value, got {ncols} tokens",
            linenos[0],
        )
    nmodes = ncols - 1

    try:
        table = np.loadtxt(io.StringIO("\n".join(data)), dtype=np.float64, ndmin=2)
        if table.shape[1] != ncols:
            raise ValueError
    except ValueError:
        _diagnose_lines(data, linenos, ncols)
        raise FrosttParseError("unparseable input")  # pragma: no cover

    raw_subs = table[:, :nmodes]
    vals = np.ascontiguousarray(table[:, nmodes])
    if np.any(raw_subs != np.floor(raw_subs)):
        bad = int(np.argmax(np.any(raw_subs != np.floor(raw_subs), axis=1)))
        raise FrosttParseError("non-integer index", linenos[bad])
    if raw_subs.min() <= 0:
        bad = int(np.argmax(np.any(raw_subs <= 0, axis=1)))
        raise FrosttParseError("indices are 1-based and must be positive", linenos[bad])
    subs = raw_subs.astype(np.int64) - 1

    subs, vals = _coalesce(subs, vals)

    observed = subs.max(axis=0) + 1
    if dims is None:
        dims = tuple(int(d) for d in observed)
    else:
        dims = tuple(int(d) for d in dims)
        if len(dims) != nmodes:
            raise FrosttParseError(
                f"dims override has {len(dims)} modes, file has {nmodes}"
            )
        if np.any(observed > np.asarray(dims, dtype=np.int64)):
            raise FrosttParseError("dims override smaller than an observed index")
    return CooTensor(dims, subs, vals)


def _diagnose_lines(data: list[str], linenos: list[int], ncols: int) -> None:
    """Slow pass over pre-filtered lines to pin an exact parse error."""
    for line, lineno in zip(data, linenos):
        parts = line.split()
        if len(parts) != ncols:
            raise FrosttParseError(
                f"expected {ncols} tokens, got {len(parts)}", lineno
            )
        for tok in parts:
            try:
                float(tok)
            except ValueError:
                raise FrosttParseError(f"non-numeric token {tok!r}", lineno) from None


def _coalesce(subs: np.ndarray, vals: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    uniq, inverse = np.unique(subs, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros(uniq.shape[0])
    np.add.at(sums, inverse, vals)
    return uniq, sums


def read_frostt(path, dims: Sequence[int] | None = None) -> CooTensor:
    return parse_frostt(Path(path), dims=dims)


def write_frostt(tensor: CooTensor, destination=None) -> str | None:
    """Write FROSTT text (1-based indices, ``%.17g`` values so a round trip is
    exact). Returns the text when ``destination`` is None."""
    lines = []
    subs1 = tensor.subs + 1
    for row, v in zip(subs1, tensor.vals):
        lines.append(" ".join(str(int(c)) for c in row) + f" {v:.17g}")
    text = "\n".join(lines) + "\n"
    if destination is None:
        return text
    if isinstance(destination, (str, Path)):
        Path(destination).write_text(text)
        return None
    destination.write(text)
    return None


# ---------------------------------------------------------------------------
# Synthetic tensors


def synth_tensor(
    dims: Sequence[int],
    nnz: int,
    seed: int,
    skew: float = 0.0,
) -> CooTensor:
    """Generate exactly ``nnz`` distinct nonzero coordinates with values
    uniform in (0, 1].

    Per mode, an index is drawn as ``floor(d * u**(1 + skew))`` with ``u``
    uniform in [0, 1): ``skew=0`` is uniform and larger values concentrate
    mass toward low indices, imitating the lopsided index distributions of
    real datasets. Philox counters make the output reproducible across
    platforms for a fixed seed.
    """
    dims = tuple(int(d) for d in dims)
    if any(d < 1 for d in dims):
        raise ValueError("dims must be positive")
    if skew < 0:
        raise ValueError("skew must be >= 0")
    space = math.prod(dims)
    if nnz < 1:
        raise ValueError("nnz must be positive")
    if nnz > space:
        raise ValueError(f"nnz={nnz} exceeds index space of size {space}")

    rng = np.random.Generator(np.random.Philox(int(seed)))
    if space <= (1 << 20) and nnz * 4 >= space:
        subs = _sample_exhaustive(dims, nnz, skew, rng)
    else:
        subs = _sample_rejection(dims, nnz, skew, rng)
    vals = 1.0 - rng.random(nnz)
    return CooTensor(dims, subs, vals)


def _index_probabilities(d: int, skew: float) -> np.ndarray:
    edges = (np.arange(d + 1) / d) ** (1.0 / (1.0 + skew))
    return np.diff(edges)


def _sample_exhaustive(dims, nnz, skew, rng) -> np.ndarray:
    # Weighted sampling without replacement over the full cell enumeration
    # (keys u**(1/w) pick the top-nnz cells); only viable for small spaces.
    space = math.prod(dims)
    cells = np.stack(np.unravel_index(np.arange(space), dims), axis=1).astype(np.int64)
    logw = np.zeros(space)
    for n, d in enumerate(dims):
        logw += np.log(_index_probabilities(d, skew))[cells[:, n]]
    w = np.exp(logw - logw.max())
    keys = rng.random(space) ** (1.0 / w)
    top = np.argpartition(keys, space - nnz)[space - nnz:]
    return cells[np.sort(top)]


def _sample_rejection(dims, nnz, skew, rng) -> np.ndarray:
    draws: list[np.ndarray] = []
    distinct = 0
    total = 0
    while True:
        batch = max(256, int(1.3 * (nnz - distinct)))
        u = rng.random((batch, len(dims)))
        rows = np.empty((batch, len(dims)), dtype=np.int64)
        for n, d in enumerate(dims):
            rows[:, n] = np.minimum((d * u[:, n] ** (1.0 + skew)).astype(np.int64), d - 1)
        draws.append(rows)
        total += batch
        allrows = np.concatenate(draws)
        uniq, first = np.unique(allrows, axis=0, return_index=True)
        distinct = uniq.shape[0]
        if distinct >= nnz:
            # the first nnz distinct coordinates in draw order
            return allrows[np.sort(first)[:nnz]]
        if total > 200 * nnz + 100_000:
            raise RuntimeError(
                "rejection sampling is not converging; the requested density "
                "is too high for this skew"
            )


# ---------------------------------------------------------------------------
# Reference MTTKRP


def reference_mttkrp(tensor: CooTensor, factors: FactorSet, mode: int) -> np.ndarray:
    """Single-threaded MTTKRP for output ``mode``: for every nonzero, the
    Hadamard product of the other modes' factor rows, scaled by the value and
    accumulated into the output row, in nonzero storage order.

    This is the oracle the parallel engine is checked against; it shares no
    code with the engine.
    """
    if not 0 <= mode < tensor.num_modes:
        raise ValueError(f"mode {mode} out of range")
    factors.require_match(tensor.dims)
    rank = factors.rank
    ell = np.ones((tensor.nnz, rank))
    for w in range(tensor.num_modes):
        if w == mode:
            continue
        ell *= factors.factors[w][tensor.subs[:, w], :]
    ell *= tensor.vals[:, None]
    out = np.zeros((tensor.dims[mode], rank))
    np.add.at(out, tensor.subs[:, mode], ell)
    return out


# ---------------------------------------------------------------------------
# Factor dumps (binary, row-major, little-endian)


def save_factor_set(fs: FactorSet, destination) -> bytes | None:
    """Serialize factors: magic, version, N, dims, R, lambda flag, payload.
    Returns the bytes when ``destination`` is None."""
    head = struct.pack(
        "<4sII", FACTOR_DUMP_MAGIC, 1, fs.num_modes
    ) + struct.pack(f"<{fs.num_modes}Q", *(f.shape[0] for f in fs.factors))
    head += struct.pack("<IB", fs.rank, 1)
    payload = fs.lambdas.astype("<f8").tobytes()
    for f in fs.factors:
        payload += np.ascontiguousarray(f, dtype="<f8").tobytes()
    blob = head + payload
    if destination is None:
        return blob
    Path(destination).write_bytes(blob)
    return None


def load_factor_set(source) -> FactorSet:
    blob = Path(source).read_bytes() if isinstance(source, (str, Path)) else source
    magic, version, nmodes = struct.unpack_from("<4sII", blob, 0)
    if magic != FACTOR_DUMP_MAGIC:
        raise ValueError("not a factor dump (bad magic)")
    if version != 1:
        raise ValueError(f"unsupported dump version {version}")
    off = 12
    rows = struct.unpack_from(f"<{nmodes}Q", blob, off)
    off += 8 * nmodes
    rank, has_lambdas = struct.unpack_from("<IB", blob, off)
    off += 5
    if has_lambdas:
        lambdas = np.frombuffer(blob, dtype="<f8", count=rank, offset=off).copy()
        off += 8 * rank
    else:
        lambdas = np.ones(rank)
    factors = []
    for r in rows:
        n = int(r) * rank
        factors.append(
            np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(int(r), rank).copy()
        )
        off += 8 * n
    return FactorSet(tuple(factors), lambdas)
