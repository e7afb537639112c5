import numpy as np
import pytest

from feproxy.assembly import assemble, impose_dirichlet
from feproxy.comm import build_halo_plan, run_ranks
from feproxy.domain import BoxDims, dirichlet_rows, rcb_partition
from feproxy.solver import CgConfig, cg_solve
from feproxy.sparse import CrsMatrix, crs_to_bcrs, generate_structure, to_global_column_order


def fe_system(dims, p=1, rank=0, dirichlet=True):
    """Assembled (optionally constrained) system of one rank."""
    if not isinstance(dims, BoxDims):
        dims = BoxDims(*dims)
    part = rcb_partition(dims, p)
    A = generate_structure(part, rank)
    A, b = assemble(part, rank, A)
    if dirichlet:
        impose_dirichlet(A, b, dirichlet_rows(dims), dims.n_nodes)
    return part, A, b


def solve_fe(dims, p=1, kernel="crs", tol=1e-10, max_iterations=2000, **kw):
    """Distributed solve; returns the global solution and rank 0's CgResult."""
    if not isinstance(dims, BoxDims):
        dims = BoxDims(*dims)
    part = rcb_partition(dims, p)
    bc = dirichlet_rows(dims)
    config = CgConfig(max_iterations=max_iterations, tolerance=tol, kernel=kernel, **kw)

    def rank_main(group, rank):
        A = generate_structure(part, rank)
        A, b = assemble(part, rank, A)
        impose_dirichlet(A, b, bc, dims.n_nodes)
        G, _ = to_global_column_order(A)
        M = G if kernel == "crs" else crs_to_bcrs(G)
        res = cg_solve(group, rank, M, b, config, build_halo_plan(part, rank), part.local(rank).owned)
        return part.local(rank).owned, res

    out = run_ranks(p, rank_main)
    x = np.empty(dims.n_nodes)
    for gids, res in out:
        x[gids] = res.x
    return x, out[0][1]


def dense_fe_oracle(dims):
    """Dense assembly + symmetric elimination, written independently of the package."""
    from itertools import product

    nxn, nyn, nzn = dims.node_counts
    hx, hy, hz = dims.spacing
    ke = closed_form_element(hx, hy, hz)
    n = dims.n_nodes
    K = np.zeros((n, n))
    for ez, ey, ex in product(range(dims.nz), range(dims.ny), range(dims.nx)):
        ids = [(ex + dx) + nxn * ((ey + dy) + nyn * (ez + dz))
               for dz, dy, dx in product((0, 1), repeat=3)]
        K[np.ix_(ids, ids)] += ke
    f = np.zeros(n)
    fixed = {}
    for iz, iy, ix in product(range(nzn), range(nyn), range(nxn)):
        if ix in (0, nxn - 1) or iy in (0, nyn - 1) or iz in (0, nzn - 1):
            fixed[ix + nxn * (iy + nyn * iz)] = 1.0 if ix == nxn - 1 else 0.0
    for i, v in fixed.items():
        f -= K[:, i] * v
    for i, v in fixed.items():
        K[i, :] = 0.0
        K[:, i] = 0.0
        K[i, i] = 1.0
    for i, v in fixed.items():
        f[i] = v
    return K, f


def closed_form_element(hx, hy, hz):
    """Trilinear box stiffness as a sum of Kronecker products of 1D matrices.

    Node order is x-fastest, so the z factor is the outermost Kronecker factor.
    """
    def mass(h):
        return h / 6.0 * np.array([[2.0, 1.0], [1.0, 2.0]])

    def stiff(h):
        return 1.0 / h * np.array([[1.0, -1.0], [-1.0, 1.0]])

    return (np.kron(mass(hz), np.kron(mass(hy), stiff(hx)))
            + np.kron(mass(hz), np.kron(stiff(hy), mass(hx)))
            + np.kron(stiff(hz), np.kron(mass(hy), mass(hx))))


def random_crs(rng, m, n, density, empty_rows=()):
    dense = np.where(rng.random((m, n)) < density, rng.standard_normal((m, n)), 0.0)
    for i in empty_rows:
        dense[i] = 0.0
    from feproxy.sparse import crs_from_dense
    return crs_from_dense(dense), dense


def banded_crs(rng, m, bandwidth):
    dense = np.zeros((m, m))
    for i in range(m):
        for j in range(max(0, i - bandwidth), min(m, i + bandwidth + 1)):
            if rng.random() < 0.8:
                dense[i, j] = rng.standard_normal()
    from feproxy.sparse import crs_from_dense
    return crs_from_dense(dense), dense


def full_global_rows(dims, p, dirichlet=True):
    """Map global row id -> (global cols, values, rhs) across all ranks."""
    part = rcb_partition(dims, p)
    rows = {}
    for r in range(p):
        _, A, b = fe_system(dims, p, r, dirichlet)
        G, _ = to_global_column_order(A)
        for i in range(G.m):
            s = G.row_slice(i)
            rows[int(G.rows[i])] = (G.col_map[G.col[s]].tolist(), G.val[s].tolist(), float(b[i]))
    return rows


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
