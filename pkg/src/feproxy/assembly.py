"""Element diffusion operators, scatter-add assembly and Dirichlet elimination."""
from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .domain import BoundaryCondition, BoxPartition, get_node_id
from .sparse import CrsMatrix, global_order_permutation

# local node k of a hex sits at offset (k & 1, (k >> 1) & 1, (k >> 2) & 1)
HEX_OFFSETS = np.array([[k & 1, (k >> 1) & 1, (k >> 2) & 1] for k in range(8)])


class AssemblyError(RuntimeError):
    """The element references a (row, column) pair missing from the pattern."""


@dataclass
class ElemData:
    node_ids: np.ndarray
    coords: np.ndarray
    diffusion_matrix: np.ndarray = field(default_factory=lambda: np.zeros((8, 8)))
    source_vector: np.ndarray = field(default_factory=lambda: np.zeros(8))


def get_elem_nodes_and_coords(dims, ex: int, ey: int, ez: int) -> ElemData:
    """Node ids and physical coordinates of element ``(ex, ey, ez)``."""
    hx, hy, hz = dims.spacing
    idx = HEX_OFFSETS + np.array([ex, ey, ez])
    ids = np.array([get_node_id(dims.node_counts, *map(int, c)) for c in idx], dtype=np.int64)
    coords = idx * np.array([hx, hy, hz])
    return ElemData(ids, coords)


def _box_edges(coords: np.ndarray) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.float64)
    origin = coords[0]
    edges = coords[7] - origin
    if np.any(edges <= 0.0):
        raise ValueError(f"degenerate element: edge lengths {edges}")
    expected = origin + HEX_OFFSETS * edges
    if not np.allclose(coords, expected, rtol=1e-12, atol=1e-14):
        raise ValueError("element is not an axis-aligned box in standard node order")
    return edges


def gauss_diffusion_matrix(edges, order: int = 2) -> np.ndarray:
    """Integral of grad(phi_i) . grad(phi_j) over a box, by tensor Gauss rule."""
    hx, hy, hz = edges
    pts, wts = np.polynomial.legendre.leggauss(order)
    # reference coordinates in [0, 1]
    xi = 0.5 * (pts + 1.0)
    w = 0.5 * wts
    k = np.zeros((8, 8))
    sign = 2 * HEX_OFFSETS - 1  # +1 at the far node of an axis, -1 at the near one
    for a, wa in zip(xi, w):
        for b_, wb in zip(xi, w):
            for c, wc in zip(xi, w):
                q = np.array([a, b_, c])
                # 1D linear factors (1 - t) or t per axis for each node
                f = np.where(HEX_OFFSETS == 1, q, 1.0 - q)
                grads = np.empty((8, 3))
                for axis in range(3):
                    others = [o for o in range(3) if o != axis]
                    grads[:, axis] = sign[:, axis] * f[:, others[0]] * f[:, others[1]] / edges[axis]
                k += wa * wb * wc * (grads @ grads.T)
    return k * (hx * hy * hz)


def compute_element_matrix_and_vector(elem: ElemData) -> ElemData:
    """Fill the 8x8 diffusion matrix (2x2x2 Gauss) and the zero source vector."""
    edges = _box_edges(elem.coords)
    elem.diffusion_matrix = gauss_diffusion_matrix(edges)
    elem.source_vector = np.zeros(8)
    return elem


def sum_into_global(elem: ElemData, A: CrsMatrix, b: np.ndarray) -> None:
    """Scatter-add ``elem`` into the rows of ``A``/``b`` that this rank owns."""
    lookup = {int(g): i for i, g in enumerate(A.col_map)}
    for i, row_gid in enumerate(elem.node_ids):
        lr = lookup.get(int(row_gid), -1)
        if lr < 0 or lr >= A.m:
            continue
        s = A.row_slice(lr)
        cols = A.col[s]
        for j, col_gid in enumerate(elem.node_ids):
            hit = np.flatnonzero(cols == lookup.get(int(col_gid), -1))
            if len(hit) == 0:
                raise AssemblyError(f"column {int(col_gid)} missing from row {int(row_gid)}")
            A.val[s.start + hit[0]] += elem.diffusion_matrix[i, j]
        b[lr] += elem.source_vector[i]


@numba.njit(cache=True, nogil=True)
def _assemble_box(lo, hi, nxn, nyn, g2l, m, ptr, col, val, ke, fe, b):
    ids = np.empty(8, dtype=np.int64)
    for ez in range(lo[2], hi[2]):
        for ey in range(lo[1], hi[1]):
            for ex in range(lo[0], hi[0]):
                for k in range(8):
                    ids[k] = (ex + (k & 1)) + nxn * ((ey + ((k >> 1) & 1)) + nyn * (ez + ((k >> 2) & 1)))
                for a in range(8):
                    lr = g2l[ids[a]]
                    if lr < 0 or lr >= m:
                        continue
                    row_lo = ptr[lr]
                    row_hi = ptr[lr + 1]
                    for c in range(8):
                        target = g2l[ids[c]]
                        # columns are sorted: binary search
                        left = row_lo
                        right = row_hi
                        while left < right:
                            mid = (left + right) // 2
                            if col[mid] < target:
                                left = mid + 1
                            else:
                                right = mid
                        if target < 0 or left >= row_hi or col[left] != target:
                            return ids[a], ids[c]
                        val[left] += ke[a, c]
                    b[lr] += fe[a]
    return -1, -1


def assemble(partition: BoxPartition, rank: int, A: CrsMatrix, b: np.ndarray | None = None):
    """Assemble every element touching ``rank``'s owned nodes into ``A`` and ``b``.

    Elements are visited in ascending global element id, so each matrix
    entry receives its contributions in the same order on every rank count.
    The mesh is uniform, so the origin element's matrix serves every
    element (edges taken from differences of other elements' coordinates
    can differ in the last bit).
    """
    if b is None:
        b = np.zeros(A.m)
    mesh = partition.local(rank)
    box = mesh.assembly_box
    if box.empty:
        return A, b
    dims = partition.dims
    elem = compute_element_matrix_and_vector(get_elem_nodes_and_coords(dims, 0, 0, 0))
    nxn, nyn, _ = dims.node_counts
    bad_row, bad_col = _assemble_box(
        np.asarray(box.lo, dtype=np.int64), np.asarray(box.hi, dtype=np.int64),
        nxn, nyn, mesh.global_to_local, A.m, A.ptr, A.col, A.val,
        elem.diffusion_matrix, elem.source_vector, b,
    )
    if bad_row >= 0:
        raise AssemblyError(f"column {bad_col} missing from row {bad_row}")
    return A, b


@numba.njit(cache=True, nogil=True)
def _impose(ptr, col, val, rows, col_map, perm, is_bc, bc_val, b):
    for j in range(len(ptr) - 1):
        g = rows[j]
        if is_bc[g]:
            for k in range(ptr[j], ptr[j + 1]):
                val[k] = 1.0 if col_map[col[k]] == g else 0.0
            b[j] = bc_val[g]
            continue
        # subtract in ascending global column order
        for t in range(ptr[j], ptr[j + 1]):
            k = perm[t]
            gc = col_map[col[k]]
            if is_bc[gc]:
                b[j] -= val[k] * bc_val[gc]
                val[k] = 0.0


def impose_dirichlet(A: CrsMatrix, b: np.ndarray, bc: BoundaryCondition, n_global: int | None = None):
    """Symmetric elimination of the prescribed nodes.

    Constrained rows become identity rows with ``b = value``; their columns
    are zeroed in every free row and moved to the right-hand side.
    """
    if n_global is None:
        n_global = int(max(A.col_map.max(initial=-1), bc.node_ids.max(initial=-1))) + 1
    is_bc = np.zeros(n_global, dtype=np.bool_)
    bc_val = np.zeros(n_global)
    is_bc[bc.node_ids] = True
    bc_val[bc.node_ids] = bc.values
    perm = global_order_permutation(A)
    _impose(A.ptr, A.col, A.val, A.rows, A.col_map, perm, is_bc, bc_val, b)
    return A, b
