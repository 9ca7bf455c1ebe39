"""CP-ALS driver on top of the parallel MTTKRP engine.

Each iteration updates every mode in turn: the mode's MTTKRP result is
multiplied by the pseudo-inverse of the Hadamard product of the other
factors' Gram matrices, the new factor is column-normalized with the norms
kept as the model weights, and later modes see the already-updated factors.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .coo import CooTensor, FactorSet
from .engine import TrafficCounters, mttkrp_mode
from .layout import build_sharded, select_params
from .schedule import schedule_super_shards

__all__ = ["CpalsConfig", "CpalsResult", "cp_als", "normalize_factors", "fit"]


@dataclass(frozen=True)
class CpalsConfig:
    rank: int
    max_iters: int = 50
    tol: float = 1e-6
    seed: int = 0
    nu: int = 1
    workers: int | None = None
    remap: str = "slot"
    gamma: int = 32 * 2**20
    theta: float = 0.5
    g_range: tuple[int, int] = (1024, 32768)
    m_max: int | None = None

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be positive")
        if self.max_iters < 1:
            raise ValueError("need at least one iteration")
        if self.tol <= 0:
            raise ValueError("tolerance must be positive")


@dataclass
class CpalsResult:
    factors: FactorSet
    fit_history: list[float]
    iterations: int
    converged: bool
    mode_seconds: list[list[float]]
    counters: TrafficCounters

    @property
    def final_fit(self) -> float:
        return self.fit_history[-1]


def _solve_gram(gram: np.ndarray, mttkrp_out: np.ndarray) -> np.ndarray:
    """Least-squares factor update via an eigen pseudo-inverse of the Gram
    Hadamard product (relative cutoff 1e-12); a near-singular Gram gets a
    trace-scaled ridge and a warning."""
    w, v = np.linalg.eigh(gram)
    cutoff = 1e-12 * max(float(w[-1]), 0.0)
    if float(w[0]) < cutoff or w[-1] <= 0:
        warnings.warn(
            "gram matrix is singular beyond the pseudo-inverse tolerance; "
            "applying ridge regularization", RuntimeWarning)
        eps = 1e-12 * float(np.trace(gram)) / gram.shape[0]
        w, v = np.linalg.eigh(gram + eps * np.eye(gram.shape[0]))
        cutoff = 1e-12 * max(float(w[-1]), 0.0)
    inv_w = np.where(w > cutoff, 1.0 / np.where(w > cutoff, w, 1.0), 0.0)
    return mttkrp_out @ (v * inv_w) @ v.T


def _normalize_columns(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(matrix, axis=0)
    safe = np.where(norms > 0, norms, 1.0)
    return matrix / safe, np.where(norms > 0, norms, 0.0)


def normalize_factors(fs: FactorSet) -> FactorSet:
    """Scale every factor column to unit 2-norm, multiplying the extracted
    norms into the weights. Zero columns stay untouched with weight 0."""
    lambdas = fs.lambdas.copy()
    factors = []
    for f in fs.factors:
        scaled, norms = _normalize_columns(f)
        factors.append(scaled)
        lambdas *= np.where(norms > 0, norms, 0.0)
    return FactorSet(tuple(factors), lambdas)


def _gram(matrix: np.ndarray) -> np.ndarray:
    return matrix.T @ matrix


def fit(tensor: CooTensor, factors: FactorSet) -> float:
    """1 minus the relative Frobenius error of the weighted factor model,
    computed from Gram matrices and a sparse inner product; the dense tensor
    is never formed."""
    factors.require_match(tensor.dims)
    norm_x = tensor.norm()
    if norm_x == 0.0:
        raise ValueError("tensor norm is zero; fit is undefined")
    rank = factors.rank
    prod = np.ones((tensor.nnz, rank))
    for n, f in enumerate(factors.factors):
        prod *= f[tensor.subs[:, n], :]
    inner = float(tensor.vals @ (prod @ factors.lambdas))
    gram_all = np.ones((rank, rank))
    for f in factors.factors:
        gram_all *= _gram(f)
    model_sq = float(factors.lambdas @ gram_all @ factors.lambdas)
    err_sq = max(norm_x**2 - 2.0 * inner + model_sq, 0.0)
    return 1.0 - math.sqrt(err_sq) / norm_x


def cp_als(tensor: CooTensor, config: CpalsConfig) -> CpalsResult:
    """Alternating least squares until the fit change drops below the
    tolerance or the iteration cap is hit. Deterministic for a fixed seed
    under the slot remap strategy."""
    norm_x = tensor.norm()
    if norm_x == 0.0:
        raise ValueError("tensor norm is zero; CP-ALS is undefined")

    params = select_params(
        tensor.dims, tensor.nnz, config.nu, config.gamma, config.rank,
        theta=config.theta, g_range=config.g_range, m_max=config.m_max,
    )
    st = build_sharded(tensor, params)
    smap = schedule_super_shards(st.plan, config.nu)
    factors = FactorSet.random(tensor.dims, config.rank, config.seed)
    lambdas = np.ones(config.rank)
    counters = TrafficCounters()

    history: list[float] = []
    mode_seconds: list[list[float]] = []
    converged = False
    iterations = 0
    nmodes = tensor.num_modes

    for _ in range(config.max_iters):
        iterations += 1
        secs = []
        last_m = None
        for n in range(nmodes):
            fs = FactorSet(tuple(factors.factors), lambdas)
            t0 = time.perf_counter()
            m_out = mttkrp_mode(st, fs, n, smap, workers=config.workers,
                                remap=config.remap, counters=counters)
            secs.append(time.perf_counter() - t0)
            gram = np.ones((config.rank, config.rank))
            for w in range(nmodes):
                if w != n:
                    gram *= _gram(factors.factors[w])
            updated = _solve_gram(gram, m_out)
            normalized, norms = _normalize_columns(updated)
            lambdas = norms
            factors = factors.replace_factor(n, normalized)
            last_m = m_out
        mode_seconds.append(secs)

        # fit from the last mode's MTTKRP (inner product) plus the Grams
        inner = float(lambdas @ np.einsum("ir,ir->r", last_m, factors.factors[-1]))
        gram_all = np.ones((config.rank, config.rank))
        for f in factors.factors:
            gram_all *= _gram(f)
        model_sq = float(lambdas @ gram_all @ lambdas)
        err_sq = max(norm_x**2 - 2.0 * inner + model_sq, 0.0)
        history.append(1.0 - math.sqrt(err_sq) / norm_x)

        if len(history) > 1 and abs(history[-1] - history[-2]) < config.tol:
            converged = True
            break

    return CpalsResult(
        factors=FactorSet(tuple(factors.factors), lambdas),
        fit_history=history,
        iterations=iterations,
        converged=converged,
        mode_seconds=mode_seconds,
        counters=counters,
    )
