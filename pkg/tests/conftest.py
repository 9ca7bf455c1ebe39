import math

import numpy as np
import pytest

from modecycle import CooTensor, FactorSet, select_params


def rel_err(got: np.ndarray, want: np.ndarray) -> float:
    scale = np.maximum(np.abs(got), np.abs(want))
    denom = np.where(scale > 1e-12, scale, 1.0)
    err = np.abs(got - want) / denom
    return float(err.max()) if err.size else 0.0


def assert_close(got, want, rtol=1e-10, atol=1e-12):
    got, want = np.asarray(got), np.asarray(want)
    bad = np.abs(got - want) > atol + rtol * np.maximum(np.abs(got), np.abs(want))
    assert not bad.any(), (
        f"{bad.sum()} of {bad.size} entries off; worst rel err {rel_err(got, want):.3e}"
    )


def dense_of(tensor: CooTensor) -> np.ndarray:
    dense = np.zeros(tensor.dims)
    dense[tuple(tensor.subs.T)] = tensor.vals
    return dense


def dense_mttkrp(tensor: CooTensor, factors: FactorSet, mode: int) -> np.ndarray:
    """Brute-force oracle: materialize the dense tensor and contract every
    input mode with einsum."""
    dense = dense_of(tensor)
    letters = "ijklm"[: tensor.num_modes]
    spec = (
        letters
        + ","
        + ",".join(f"{letters[w]}r" for w in range(tensor.num_modes) if w != mode)
        + "->"
        + letters[mode]
        + "r"
    )
    mats = [factors.factors[w] for w in range(tensor.num_modes) if w != mode]
    return np.einsum(spec, dense, *mats)


def dense_fit(tensor: CooTensor, factors: FactorSet) -> float:
    dense = dense_of(tensor)
    letters = "ijklm"[: tensor.num_modes]
    spec = ",".join(f"{letters[n]}r" for n in range(tensor.num_modes)) + ",r->" + letters
    model = np.einsum(spec, *factors.factors, factors.lambdas)
    return 1.0 - np.linalg.norm(dense - model) / np.linalg.norm(dense)


def random_coo(seed: int, max_dim=24, max_modes=4, max_nnz=300) -> CooTensor:
    """Small random tensor with distinct coordinates, independent of
    synth_tensor (plain generator draws plus dedup)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    nmodes = int(rng.integers(3, max_modes + 1))
    dims = tuple(int(rng.integers(2, max_dim + 1)) for _ in range(nmodes))
    want = int(rng.integers(1, min(max_nnz, math.prod(dims)) + 1))
    subs = rng.integers(0, dims, size=(want * 3, nmodes))
    subs = np.unique(subs, axis=0)[:want]
    vals = rng.uniform(0.25, 2.0, size=subs.shape[0])
    return CooTensor(dims, subs, vals)


def loose_params(tensor: CooTensor, nu: int, rank: int, g_range=(4, 64)):
    """Partition parameters with a roomy cache budget, suitable for small
    test tensors."""
    return select_params(tensor.dims, tensor.nnz, nu, 1 << 30, rank,
                         g_range=g_range)


@pytest.fixture
def tiny_tensor():
    subs = np.array([[0, 1, 2], [1, 0, 0], [2, 2, 1], [0, 0, 0]])
    vals = np.array([4.5, 1.0, -2.0, 3.25])
    return CooTensor((3, 3, 3), subs, vals)
