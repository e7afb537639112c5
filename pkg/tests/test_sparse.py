from itertools import product
from pathlib import Path

import numpy as np
import pytest
import scipy.io
from hypothesis import given, settings, strategies as st

from feproxy.domain import BoxDims, rcb_partition
from feproxy.sparse import (bcrs_to_crs, crs_from_dense, crs_from_rows, crs_to_bcrs,
                            generate_structure, identity_crs, memory_footprint,
                            segment_histogram, spmv_bcrs, spmv_bcrs_unrolled, spmv_crs,
                            to_global_column_order, write_matrix_market)

from conftest import banded_crs, fe_system, random_crs

KERNELS = (spmv_crs, spmv_bcrs, spmv_bcrs_unrolled)


def reference_crs_spmv(A, x):
    """Plain-Python transcription of the row loop, no compilation involved."""
    y = [0.0] * A.m
    for i in range(A.m):
        for j in range(int(A.ptr[i]), int(A.ptr[i + 1])):
            y[i] += float(A.val[j]) * float(x[int(A.col[j])])
    return np.array(y)


def run(kernel, A, x):
    M = A if kernel is spmv_crs else crs_to_bcrs(A)
    return kernel(M, x)


def brute_stencil_nnz(dims):
    nxn, nyn, nzn = dims.node_counts
    total = 0
    for iz, iy, ix in product(range(nzn), range(nyn), range(nxn)):
        for dz, dy, dx in product((-1, 0, 1), repeat=3):
            if 0 <= ix + dx < nxn and 0 <= iy + dy < nyn and 0 <= iz + dz < nzn:
                total += 1
    return total


def test_structure_two_cubed():
    A = generate_structure(rcb_partition(BoxDims(2, 2, 2), 1), 0)
    assert A.m == 27
    assert A.nnz == 343 == brute_stencil_nnz(BoxDims(2, 2, 2))
    assert A.row_slice(13).stop - A.row_slice(13).start == 27
    assert not A.val.any()


def test_structure_single_element():
    A = generate_structure(rcb_partition(BoxDims(1, 1, 1), 1), 0)
    assert A.m == 8 and A.nnz == 64
    assert all(np.diff(A.ptr) == 8)


@pytest.mark.parametrize("dims,p", [((3, 4, 5), 1), ((4, 4, 4), 4), ((6, 6, 6), 8)])
def test_structure_invariants(dims, p):
    d = BoxDims(*dims)
    part = rcb_partition(d, p)
    total = 0
    for r in range(p):
        A = generate_structure(part, r)
        assert A.ptr[0] == 0 and A.ptr[-1] == A.nnz
        assert np.all(np.diff(A.ptr) >= 0)
        for i in range(A.m):
            assert np.all(np.diff(A.col[A.row_slice(i)]) > 0)
        total += A.nnz
    assert total == brute_stencil_nnz(d)


def test_spmv_identity_and_hand_example():
    x = np.array([1.5, -2.0, 3.25])
    for kernel in KERNELS:
        y, _ = run(kernel, identity_crs(3), x)
        assert np.array_equal(y, x)
    A = crs_from_rows([{0: 1.0, 1: 2.0}, {1: 3.0}])
    for kernel in KERNELS:
        y, _ = run(kernel, A, np.array([1.0, 1.0]))
        assert y.tolist() == [3.0, 3.0]


def test_spmv_random_against_dense(rng):
    A, dense = random_crs(rng, 20, 20, 0.3)
    x = rng.standard_normal(20)
    expected = dense @ x
    for kernel in KERNELS:
        y, _ = run(kernel, A, x)
        np.testing.assert_allclose(y, expected, rtol=1e-13, atol=1e-13 * np.abs(expected).max())


def test_compiled_kernels_match_plain_python_bitwise(rng):
    A, _ = banded_crs(rng, 60, 4)
    x = rng.standard_normal(60)
    ref = reference_crs_spmv(A, x)
    for kernel in KERNELS:
        y, _ = run(kernel, A, x)
        assert np.array_equal(y, ref)


def test_dimension_mismatch():
    A = identity_crs(4)
    for kernel in KERNELS:
        with pytest.raises(ValueError):
            run(kernel, A, np.ones(3))


def test_bcrs_conversion_example():
    A = crs_from_rows([{c: float(c + 1) for c in (0, 1, 2, 5, 7, 8)}], ncols=9)
    B = crs_to_bcrs(A)
    assert B.jas.tolist() == [0, 5, 7]
    assert B.segment_lengths().tolist() == [3, 1, 2]
    assert B.offsets.tolist() == [0, 3, 4, 6]
    assert B.ptr.tolist() == [0, 3]
    assert np.array_equal(B.val, A.val)


def test_bcrs_identity():
    B = crs_to_bcrs(identity_crs(7))
    assert B.nns == B.nnz == 7
    assert segment_histogram(B) == {1: 7}


def assert_bcrs_invariants(B):
    assert B.offsets[-1] == B.nnz and B.ptr[-1] == B.nns and B.ptr[0] == 0
    assert np.all(np.diff(B.offsets) >= 1)
    for i in range(B.m):
        segs = range(int(B.ptr[i]), int(B.ptr[i + 1]))
        for s in list(segs)[:-1]:
            length = B.offsets[s + 1] - B.offsets[s]
            assert B.jas[s] + length != B.jas[s + 1], "adjacent segments are mergeable"


def assert_same_crs(A, C):
    assert np.array_equal(A.ptr, C.ptr)
    assert np.array_equal(A.col, C.col)
    assert np.array_equal(A.val, C.val)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 25), st.integers(1, 25), st.floats(0.0, 1.0), st.integers(0, 2**31))
def test_round_trip_and_maximality_random(m, n, density, seed):
    rng = np.random.default_rng(seed)
    A, dense = random_crs(rng, m, n, density)
    B = crs_to_bcrs(A)
    assert_bcrs_invariants(B)
    assert_same_crs(A, bcrs_to_crs(B))
    hist = segment_histogram(B)
    assert sum(hist.values()) == B.nns
    assert sum(k * v for k, v in hist.items()) == B.nnz


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 30), st.floats(0.0, 1.0), st.integers(0, 2**31))
def test_kernel_equivalence_and_counter_identities_random(m, density, seed):
    rng = np.random.default_rng(seed)
    A, _ = random_crs(rng, m, m, density, empty_rows=range(0, m, 5))
    B = crs_to_bcrs(A)
    x = rng.standard_normal(m)
    y0, c0 = spmv_crs(A, x)
    y1, c1 = spmv_bcrs(B, x)
    y2, c2 = spmv_bcrs_unrolled(B, x)
    assert np.array_equal(y0, y1) and np.array_equal(y0, y2)
    assert c0.flops == 2 * A.nnz and c0.loads == 3 * A.nnz + 2 * A.m + 1
    assert c1 == c2
    assert c1.flops - c0.flops == B.nns
    assert c0.loads - c1.loads == A.nnz - 2 * B.nns - 1


def test_bcrs_counters_identity_matrix():
    m = 9
    B = crs_to_bcrs(identity_crs(m))
    for kernel in (spmv_bcrs, spmv_bcrs_unrolled):
        y, c = kernel(B, np.arange(m, dtype=float))
        assert np.array_equal(y, np.arange(m, dtype=float))
        assert c.flops == 3 * m
        # general formula with nnz = nns = m
        assert c.loads == 2 * m + 2 * m + 2 * m + 2


def test_fe_two_cubed_loads():
    _, A, _ = fe_system((2, 2, 2))
    B = crs_to_bcrs(A)
    x = np.ones(A.ncols)
    _, c_crs = spmv_crs(A, x)
    _, c_bcrs = spmv_bcrs(B, x)
    assert c_crs.loads == 3 * 343 + 2 * 27 + 1
    assert c_bcrs.loads == 2 * 343 + 2 * B.nns + 56


def test_unrolled_fallback_arm(rng):
    dense = np.zeros((3, 8))
    dense[0, 1:6] = rng.standard_normal(5)  # length-5 segment
    dense[2, :] = rng.standard_normal(8)     # length-8 segment
    A = crs_from_dense(dense)
    B = crs_to_bcrs(A)
    x = rng.standard_normal(8)
    y, c = spmv_bcrs_unrolled(B, x)
    np.testing.assert_allclose(y, dense @ x, rtol=1e-14)
    assert y[1] == 0.0
    assert c.fallback_segments == 2
    assert np.array_equal(y, spmv_crs(A, x)[0])


def test_footprint_identity_costs_more():
    A = identity_crs(10)
    B = crs_to_bcrs(A)
    m = nnz = nns = 10
    assert memory_footprint(A, 8, 8) == 8 * nnz + 8 * nnz + 8 * (m + 1)
    assert memory_footprint(A, 8, 8) - memory_footprint(B, 8, 8) == 8 * (nnz - 2 * nns - 1) < 0


@pytest.mark.parametrize("widths", [(4, 8), (8, 8), (4, 4)])
def test_footprint_fe_matrix(widths):
    _, A, _ = fe_system((4, 4, 4), dirichlet=False)
    B = crs_to_bcrs(A)
    index, value = widths
    diff = memory_footprint(A, index, value) - memory_footprint(B, index, value)
    assert diff == index * (A.nnz - 2 * B.nns - 1) > 0


def test_footprint_rejects_bad_width():
    with pytest.raises(ValueError):
        memory_footprint(identity_crs(2), 2, 8)


def test_segments_fe_four_cubed():
    _, A, _ = fe_system((4, 4, 4), dirichlet=False)
    B = crs_to_bcrs(A)
    hist = segment_histogram(B)
    assert set(hist) <= {2, 3}
    assert hist[3] > hist[2]
    interior = 3 ** 3
    # each interior row has 9 full-length segments
    assert hist[3] >= 9 * interior


@pytest.mark.parametrize("n", [3, 5, 7])
def test_segments_single_rank(n):
    _, A, _ = fe_system((n, n, n), dirichlet=False)
    hist = segment_histogram(crs_to_bcrs(A))
    assert set(hist) <= {2, 3} and hist[3] >= hist[2]


def test_segments_merge_across_lines_on_two_node_lines():
    # with only 3 nodes per x-line, consecutive stencil lines touch
    _, A, _ = fe_system((2, 2, 2), dirichlet=False)
    assert max(segment_histogram(crs_to_bcrs(A))) > 4


def test_nnz_per_segment_ratio():
    _, A, _ = fe_system((10, 10, 10), dirichlet=False)
    ratio = A.nnz / crs_to_bcrs(A).nns
    assert 2.5 <= ratio <= 3.0


def test_global_column_order_multi_rank():
    part = rcb_partition(BoxDims(4, 4, 4), 4)
    for r in range(4):
        A = generate_structure(part, r)
        A.val[:] = np.arange(A.nnz, dtype=float)
        G, perm = to_global_column_order(A)
        for i in range(A.m):
            s = A.row_slice(i)
            gcols = G.col_map[G.col[s]]
            assert np.all(np.diff(gcols) > 0)
            assert sorted(G.val[s]) == sorted(A.val[s])
        assert np.array_equal(G.val, A.val[perm])
        assert_bcrs_invariants(crs_to_bcrs(G))


def test_matrix_market_round_trip(tmp_path: Path):
    d = BoxDims(2, 3, 2)
    part = rcb_partition(d, 2)
    blocks = [fe_system(d, 2, r)[1] for r in range(2)]
    path = write_matrix_market(tmp_path / "a.mtx", blocks, d.n_nodes)
    got = scipy.io.mmread(path).toarray()
    _, A1, _ = fe_system(d, 1, 0)
    assert got.shape == (d.n_nodes, d.n_nodes)
    np.testing.assert_array_equal(got, A1.to_dense())
