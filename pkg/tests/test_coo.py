import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modecycle import (
    CooTensor,
    FactorSet,
    FrosttParseError,
    load_factor_set,
    parse_frostt,
    reference_mttkrp,
    save_factor_set,
    synth_tensor,
    write_frostt,
)

from conftest import assert_close, dense_mttkrp, random_coo


# ---------------------------------------------------------------------------
# parsing


def test_parse_basic_line():
    t = parse_frostt("1 2 3 4.5\n")
    assert t.dims == (1, 2, 3)
    assert t.element(0).indices == (0, 1, 2)
    assert t.element(0).value == 4.5


def test_parse_coalesces_duplicates():
    t = parse_frostt("1 1 1 2.0\n1 1 1 3.0\n")
    assert t.nnz == 1
    assert t.element(0) .indices == (0, 0, 0)
    assert t.element(0).value == 5.0


def test_parse_comments_and_blank_lines():
    text = "# header comment\n\n2 1 1 1.5\n# mid comment\n1 2 2 2.5\n"
    t = parse_frostt(text)
    assert t.nnz == 2
    assert t.dims == (2, 2, 2)


def test_parse_only_comments_is_empty_error():
    with pytest.raises(FrosttParseError, match="no nonzero"):
        parse_frostt("# comment\n")


def test_parse_malformed_token_count_names_line():
    with pytest.raises(FrosttParseError, match="line 3"):
        parse_frostt("1 1 1 1.0\n2 2 2 2.0\n3 3 3\n")


def test_parse_non_numeric_names_line():
    with pytest.raises(FrosttParseError, match="line 2"):
        parse_frostt("1 1 1 1.0\n1 2 x 2.0\n")


def test_parse_rejects_nonpositive_index():
    with pytest.raises(FrosttParseError, match="1-based"):
        parse_frostt("0 1 1 1.0\n")


def test_parse_rejects_fractional_index():
    with pytest.raises(FrosttParseError, match="non-integer"):
        parse_frostt("1.5 1 1 1.0\n")


def test_dims_override():
    t = parse_frostt("1 1 1 1.0\n", dims=(4, 5, 6))
    assert t.dims == (4, 5, 6)
    with pytest.raises(FrosttParseError, match="smaller"):
        parse_frostt("3 1 1 1.0\n", dims=(2, 2, 2))


def test_write_single_element():
    t = CooTensor((1, 2, 3), np.array([[0, 1, 2]]), np.array([4.5]))
    assert write_frostt(t) == "1 2 3 4.5\n"


def test_empty_tensor_rejected():
    with pytest.raises(ValueError, match="no nonzeros"):
        CooTensor((2, 2), np.empty((0, 2), dtype=np.int64), np.empty(0))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_roundtrip_identity(seed):
    t = random_coo(seed)
    back = parse_frostt(write_frostt(t), dims=t.dims)
    assert t.same_nonzeros(back)


def test_roundtrip_through_file(tmp_path, tiny_tensor):
    path = tmp_path / "t.tns"
    write_frostt(tiny_tensor, path)
    back = parse_frostt(path, dims=tiny_tensor.dims)
    assert tiny_tensor.same_nonzeros(back)


# ---------------------------------------------------------------------------
# synthetic generation


def test_synth_full_space_is_dense():
    t = synth_tensor([4, 4, 4], 64, seed=11)
    assert t.nnz == 64
    assert sorted(map(tuple, t.subs.tolist())) == sorted(
        (i, j, k) for i in range(4) for j in range(4) for k in range(4)
    )
    assert np.all((t.vals > 0) & (t.vals <= 1))


def test_synth_deterministic():
    a = synth_tensor([50, 60, 70], 900, seed=123, skew=0.7)
    b = synth_tensor([50, 60, 70], 900, seed=123, skew=0.7)
    assert np.array_equal(a.subs, b.subs) and np.array_equal(a.vals, b.vals)
    c = synth_tensor([50, 60, 70], 900, seed=124, skew=0.7)
    assert not np.array_equal(a.subs, c.subs)


def test_synth_rejects_oversized_request():
    with pytest.raises(ValueError, match="exceeds"):
        synth_tensor([3, 3], 10, seed=0)


def test_synth_histogram_matches_skew_law():
    # Oracle: the declared index law idx = floor(d * u**(1+s)) has CDF
    # P(idx < t) = (t/d)**(1/(1+s)), so the quantile edges d*q**(1+s) cut the
    # range into equal-mass bins; each observed bin must land within 10% of
    # its expected share.
    # 4 equal-mass bins keep ~1250 expected per bin, so the 10% band sits
    # near 4 sigma of sampling noise.
    skew = 1.0
    nbins = 4
    t = synth_tensor([100, 100, 100], 5000, seed=7, skew=skew)
    for n in range(3):
        d = t.dims[n]
        edges = d * (np.arange(nbins + 1) / nbins) ** (1.0 + skew)
        counts = np.histogram(t.subs[:, n], bins=edges)[0]
        cdf = (edges / d) ** (1.0 / (1.0 + skew))
        expect = np.diff(cdf) * t.nnz
        rel = np.abs(counts - expect) / expect
        assert rel.max() < 0.10, f"mode {n}: bin error {rel.max():.3f}"


def test_synth_skew_zero_is_uniformish():
    t = synth_tensor([1000, 1000], 4000, seed=3, skew=0.0)
    lo = (t.subs < 500).mean()
    assert 0.45 < lo < 0.55


# ---------------------------------------------------------------------------
# reference MTTKRP


def test_reference_single_nonzero_ones_factors():
    t = CooTensor((5, 6, 7), np.array([[2, 3, 4]]), np.array([2.5]))
    fs = FactorSet.ones(t.dims, 4)
    out = reference_mttkrp(t, fs, 0)
    assert np.all(out[2] == 2.5)
    out[2] = 0
    assert np.all(out == 0)


def test_reference_empty_row_stays_zero():
    t = CooTensor((4, 3, 3), np.array([[0, 1, 1], [2, 0, 2]]), np.array([1.0, 2.0]))
    fs = FactorSet.random(t.dims, 3, seed=9)
    out = reference_mttkrp(t, fs, 0)
    assert np.all(out[1] == 0) and np.all(out[3] == 0)
    assert np.any(out[0] != 0) and np.any(out[2] != 0)


def test_reference_matches_dense_triple_loop():
    rng = np.random.Generator(np.random.PCG64(4))
    subs = np.unique(rng.integers(0, 5, size=(40, 3)), axis=0)[:20]
    t = CooTensor((5, 5, 5), subs, rng.uniform(0.5, 1.5, size=subs.shape[0]))
    fs = FactorSet.random(t.dims, 3, seed=21)
    for mode in range(3):
        assert_close(reference_mttkrp(t, fs, mode), dense_mttkrp(t, fs, mode))


def test_reference_matches_dense_4mode():
    t = random_coo(77, max_dim=6, max_modes=4)
    fs = FactorSet.random(t.dims, 5, seed=3)
    for mode in range(t.num_modes):
        assert_close(reference_mttkrp(t, fs, mode), dense_mttkrp(t, fs, mode))


def test_reference_rank_mismatch_rejected():
    t = random_coo(5)
    mats = [np.ones((d, 3)) for d in t.dims]
    mats[1] = np.ones((t.dims[1], 4))
    with pytest.raises(ValueError, match="rank"):
        FactorSet(tuple(mats), np.ones(3))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(-8, 8))
def test_reference_power_of_two_scaling_exact(seed, exp):
    # Scaling by powers of two commutes exactly with every product and
    # partial sum, so the comparison is bitwise.
    s = math.ldexp(1.0, exp)
    t = random_coo(seed)
    scaled = CooTensor(t.dims, t.subs, t.vals * s)
    fs = FactorSet.random(t.dims, 4, seed=seed + 1)
    for mode in range(t.num_modes):
        a = reference_mttkrp(scaled, fs, mode)
        b = s * reference_mttkrp(t, fs, mode)
        assert np.array_equal(a, b)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_reference_permutation_tolerance(seed):
    # <= 10 nonzeros per output row, values in [1, 2]: permutations agree
    # to 1e-12 relative.
    rng = np.random.Generator(np.random.PCG64(seed))
    dims = (8, 6, 6)
    rows = rng.integers(0, dims[0], size=60)
    keep = np.concatenate([np.nonzero(rows == i)[0][:10] for i in range(dims[0])])
    subs = np.column_stack([
        rows[keep],
        rng.integers(0, dims[1], size=keep.size),
        rng.integers(0, dims[2], size=keep.size),
    ])
    subs = np.unique(subs, axis=0)
    t = CooTensor(dims, subs, rng.uniform(1.0, 2.0, size=subs.shape[0]))
    fs = FactorSet.random(dims, 3, seed=seed + 5)
    base = reference_mttkrp(t, fs, 0)
    perm = rng.permutation(t.nnz)
    shuffled = CooTensor(dims, t.subs[perm], t.vals[perm])
    assert_close(reference_mttkrp(shuffled, fs, 0), base, rtol=1e-12, atol=0)


# ---------------------------------------------------------------------------
# factor dumps


def test_factor_dump_roundtrip(tmp_path):
    fs = FactorSet.random((5, 7, 3), 4, seed=2)
    fs = FactorSet(fs.factors, np.array([1.0, 2.0, 0.5, 3.0]))
    path = tmp_path / "f.bin"
    save_factor_set(fs, path)
    back = load_factor_set(path)
    assert back.rank == 4
    assert all(np.array_equal(a, b) for a, b in zip(back.factors, fs.factors))
    assert np.array_equal(back.lambdas, fs.lambdas)


def test_factor_dump_bad_magic():
    with pytest.raises(ValueError, match="magic"):
        load_factor_set(b"XXXX" + b"\0" * 32)
