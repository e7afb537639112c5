"""CRS and segment-blocked BCRS storage with instrumented SpMV kernels.

A BCRS row is a list of *segments*: maximal runs of consecutive column
indices. Each segment stores only its first column (``jas``) and the
position of its first value (``offsets``), so a row of the 27-point FE
stencil needs 9 column indices instead of 27.

Every kernel returns ``(y, OpCounters)``. Load counts follow the usual
complexity accounting: each element of ``ptr``/``offsets`` is read once
(the upper bound of one row or segment is reused as the lower bound of the
next) and ``y[i]`` is touched once per row; writes are not counted.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .domain import BoxPartition


def _index_dtype(n: int):
    return np.int32 if n < np.iinfo(np.int32).max else np.int64


@dataclass
class CrsMatrix:
    """Compressed row storage for the rows owned by one rank.

    ``col`` holds local column indices; ``col_map[c]`` is the global node id
    of local column ``c``. ``rows[i]`` is the global id of local row ``i``.
    """

    ptr: np.ndarray
    col: np.ndarray
    val: np.ndarray
    rows: np.ndarray
    col_map: np.ndarray

    @property
    def m(self) -> int:
        return len(self.ptr) - 1

    @property
    def nnz(self) -> int:
        return int(self.ptr[-1])

    @property
    def ncols(self) -> int:
        return len(self.col_map)

    def row_slice(self, i: int) -> slice:
        return slice(int(self.ptr[i]), int(self.ptr[i + 1]))

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.m, self.ncols))
        for i in range(self.m):
            s = self.row_slice(i)
            dense[i, self.col[s]] += self.val[s]
        return dense

    def copy(self) -> "CrsMatrix":
        return CrsMatrix(self.ptr.copy(), self.col.copy(), self.val.copy(),
                         self.rows.copy(), self.col_map.copy())


@dataclass
class BcrsMatrix:
    """1 x n variable-block compressed row storage."""

    ptr: np.ndarray
    jas: np.ndarray
    offsets: np.ndarray
    val: np.ndarray
    rows: np.ndarray
    col_map: np.ndarray

    @property
    def m(self) -> int:
        return len(self.ptr) - 1

    @property
    def nnz(self) -> int:
        return int(self.offsets[-1])

    @property
    def nns(self) -> int:
        return int(self.ptr[-1])

    @property
    def ncols(self) -> int:
        return len(self.col_map)

    def segment_lengths(self) -> np.ndarray:
        return np.diff(self.offsets)


@dataclass
class OpCounters:
    flops: int = 0
    loads: int = 0
    # segments that missed the unrolled arms (unrolled kernel only)
    fallback_segments: int = field(default=0, compare=False)

    def __add__(self, other: "OpCounters") -> "OpCounters":
        return OpCounters(self.flops + other.flops, self.loads + other.loads,
                          self.fallback_segments + other.fallback_segments)

    def to_dict(self) -> dict:
        return {"flops": self.flops, "loads": self.loads}


def crs_from_rows(rows: list[dict[int, float]], ncols: int | None = None) -> CrsMatrix:
    """Small helper: build a CRS matrix from ``[{col: value}, ...]``."""
    ptr = [0]
    col: list[int] = []
    val: list[float] = []
    for row in rows:
        for c in sorted(row):
            col.append(c)
            val.append(row[c])
        ptr.append(len(col))
    if ncols is None:
        ncols = max(col) + 1 if col else len(rows)
    return CrsMatrix(
        np.asarray(ptr, dtype=np.int32),
        np.asarray(col, dtype=np.int32),
        np.asarray(val, dtype=np.float64),
        np.arange(len(rows), dtype=np.int64),
        np.arange(ncols, dtype=np.int64),
    )


def crs_from_dense(a: np.ndarray) -> CrsMatrix:
    a = np.asarray(a, dtype=np.float64)
    return crs_from_rows([{int(j): a[i, j] for j in np.flatnonzero(a[i])} for i in range(a.shape[0])],
                         ncols=a.shape[1])


def identity_crs(m: int) -> CrsMatrix:
    return crs_from_rows([{i: 1.0} for i in range(m)], ncols=m)


# --------------------------------------------------------------------------
# structure generation

@numba.njit(cache=True)
def _stencil_counts(owned, nxn, nyn, nzn):
    counts = np.empty(len(owned), dtype=np.int64)
    for r in range(len(owned)):
        g = owned[r]
        ix = g % nxn
        iy = (g // nxn) % nyn
        iz = g // (nxn * nyn)
        cx = min(ix + 1, nxn - 1) - max(ix - 1, 0) + 1
        cy = min(iy + 1, nyn - 1) - max(iy - 1, 0) + 1
        cz = min(iz + 1, nzn - 1) - max(iz - 1, 0) + 1
        counts[r] = cx * cy * cz
    return counts


@numba.njit(cache=True)
def _stencil_fill(owned, nxn, nyn, nzn, g2l, ptr, col):
    for r in range(len(owned)):
        g = owned[r]
        ix = g % nxn
        iy = (g // nxn) % nyn
        iz = g // (nxn * nyn)
        k = ptr[r]
        for sz in range(-1, 2):
            for sy in range(-1, 2):
                for sx in range(-1, 2):
                    jx = ix + sx
                    jy = iy + sy
                    jz = iz + sz
                    if 0 <= jx < nxn and 0 <= jy < nyn and 0 <= jz < nzn:
                        lc = g2l[jx + nxn * (jy + nyn * jz)]
                        if lc < 0:
                            raise RuntimeError("stencil neighbour missing from local map")
                        col[k] = lc
                        k += 1
        # insertion sort: at most 27 entries
        lo = ptr[r]
        for a in range(lo + 1, k):
            v = col[a]
            b = a - 1
            while b >= lo and col[b] > v:
                col[b + 1] = col[b]
                b -= 1
            col[b + 1] = v


def generate_structure(partition: BoxPartition, rank: int) -> CrsMatrix:
    """27-point stencil pattern of ``rank``'s owned rows, values zeroed.

    Columns are local indices sorted ascending.
    """
    mesh = partition.local(rank)
    nxn, nyn, nzn = partition.dims.node_counts
    counts = _stencil_counts(mesh.owned, nxn, nyn, nzn)
    nnz = int(counts.sum())
    ptr = np.zeros(len(counts) + 1, dtype=_index_dtype(nnz))
    np.cumsum(counts, out=ptr[1:])
    col = np.empty(nnz, dtype=_index_dtype(mesh.n_local))
    _stencil_fill(mesh.owned, nxn, nyn, nzn, mesh.global_to_local, ptr, col)
    return CrsMatrix(ptr, col, np.zeros(nnz), mesh.owned.copy(), mesh.local_to_global.copy())


@numba.njit(cache=True)
def _row_global_order(ptr, col, col_map):
    perm = np.empty(len(col), dtype=np.int64)
    for i in range(len(ptr) - 1):
        lo = ptr[i]
        hi = ptr[i + 1]
        for a in range(lo, hi):
            perm[a] = a
        for a in range(lo + 1, hi):
            v = perm[a]
            key = col_map[col[v]]
            b = a - 1
            while b >= lo and col_map[col[perm[b]]] > key:
                perm[b + 1] = perm[b]
                b -= 1
            perm[b + 1] = v
    return perm


def global_order_permutation(A: CrsMatrix) -> np.ndarray:
    """Entry permutation putting every row in ascending *global* column order."""
    return _row_global_order(A.ptr, A.col, A.col_map)


def to_global_column_order(A: CrsMatrix) -> tuple[CrsMatrix, np.ndarray]:
    """Reorder each row by global column id.

    A row is then traversed in the same value order on every rank count,
    which is what makes distributed SpMV bitwise independent of the
    partition. Local indices stay as they are, so ``col`` is no longer
    monotone where owned and external columns interleave.
    """
    perm = global_order_permutation(A)
    return CrsMatrix(A.ptr.copy(), A.col[perm], A.val[perm], A.rows.copy(), A.col_map.copy()), perm


# --------------------------------------------------------------------------
# format conversion

@numba.njit(cache=True)
def _count_segments(ptr, col):
    nns = 0
    for i in range(len(ptr) - 1):
        for j in range(ptr[i], ptr[i + 1]):
            if j == ptr[i] or col[j] != col[j - 1] + 1:
                nns += 1
    return nns


@numba.njit(cache=True)
def _fill_segments(ptr, col, bptr, jas, offsets):
    s = 0
    bptr[0] = 0
    for i in range(len(ptr) - 1):
        for j in range(ptr[i], ptr[i + 1]):
            if j == ptr[i] or col[j] != col[j - 1] + 1:
                jas[s] = col[j]
                offsets[s] = j
                s += 1
        bptr[i + 1] = s
    offsets[s] = ptr[len(ptr) - 1]


def crs_to_bcrs(A: CrsMatrix) -> BcrsMatrix:
    """Collapse each row's runs of consecutive columns into segments."""
    nns = _count_segments(A.ptr, A.col)
    itype = _index_dtype(max(A.nnz, nns))
    bptr = np.empty(A.m + 1, dtype=itype)
    jas = np.empty(nns, dtype=A.col.dtype)
    offsets = np.empty(nns + 1, dtype=itype)
    _fill_segments(A.ptr, A.col, bptr, jas, offsets)
    return BcrsMatrix(bptr, jas, offsets, A.val.copy(), A.rows.copy(), A.col_map.copy())


def bcrs_to_crs(B: BcrsMatrix) -> CrsMatrix:
    """Expand segments back into one column index per value."""
    lengths = B.segment_lengths()
    starts = np.repeat(B.jas.astype(np.int64), lengths)
    within = np.arange(B.nnz) - np.repeat(B.offsets[:-1].astype(np.int64), lengths)
    col = (starts + within).astype(B.jas.dtype)
    ptr = B.offsets[B.ptr.astype(np.int64)]
    return CrsMatrix(ptr.astype(B.ptr.dtype), col, B.val.copy(), B.rows.copy(), B.col_map.copy())


# --------------------------------------------------------------------------
# kernels

@numba.njit(cache=True, nogil=True)
def _spmv_crs(ptr, col, val, x, y):
    flops = 0
    loads = 1
    start = ptr[0]
    for i in range(len(ptr) - 1):
        end = ptr[i + 1]
        loads += 2  # ptr[i+1]; y[i] stays in a register across the row
        for j in range(start, end):
            y[i] += val[j] * x[col[j]]
            loads += 3
            flops += 2
        start = end
    return flops, loads


@numba.njit(cache=True, nogil=True)
def _spmv_bcrs(ptr, jas, offsets, val, x, y):
    flops = 0
    loads = 2  # ptr[0], offsets[0]
    start = ptr[0]
    n = offsets[0]
    for i in range(len(ptr) - 1):
        acc = 0.0
        end = ptr[i + 1]
        loads += 2
        for j in range(start, end):
            c = jas[j]
            k = offsets[j + 1]
            loads += 2
            flops += 1  # per-segment column increment
            for t in range(n, k):
                acc += val[t] * x[c]
                c += 1
                loads += 2
                flops += 2
            n = k
        y[i] = acc
        start = end
    return flops, loads


@numba.njit(cache=True, nogil=True)
def _spmv_bcrs_unrolled(ptr, jas, offsets, val, x, y):
    flops = 0
    loads = 2
    fallback = 0
    start = ptr[0]
    n = offsets[0]
    for i in range(len(ptr) - 1):
        acc = 0.0
        end = ptr[i + 1]
        loads += 2
        for j in range(start, end):
            c = jas[j]
            k = offsets[j + 1]
            length = k - n
            loads += 2 + 2 * length
            flops += 1 + 2 * length
            # length 3 dominates FE matrices, so it is tested first
            if length == 3:
                acc += val[n] * x[c]
                acc += val[n + 1] * x[c + 1]
                acc += val[n + 2] * x[c + 2]
            elif length == 1:
                acc += val[n] * x[c]
            elif length == 2:
                acc += val[n] * x[c]
                acc += val[n + 1] * x[c + 1]
            elif length == 4:
                acc += val[n] * x[c]
                acc += val[n + 1] * x[c + 1]
                acc += val[n + 2] * x[c + 2]
                acc += val[n + 3] * x[c + 3]
            else:
                fallback += 1
                for t in range(length):
                    acc += val[n + t] * x[c + t]
            n = k
        y[i] = acc
        start = end
    return flops, loads, fallback


def _check_x(A, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or len(x) < A.ncols:
        raise ValueError(f"x has length {len(x)}, matrix needs {A.ncols} columns")
    return x


def spmv_crs(A: CrsMatrix, x, out: np.ndarray | None = None) -> tuple[np.ndarray, OpCounters]:
    x = _check_x(A, x)
    if out is None:
        y = np.zeros(A.m)
    else:
        if len(out) != A.m:
            raise ValueError(f"output has length {len(out)}, expected {A.m}")
        y = out
        y[:] = 0.0
    flops, loads = _spmv_crs(A.ptr, A.col, A.val, x, y)
    return y, OpCounters(int(flops), int(loads))


def spmv_bcrs(A: BcrsMatrix, x, out: np.ndarray | None = None) -> tuple[np.ndarray, OpCounters]:
    x = _check_x(A, x)
    y = _output(A, out)
    flops, loads = _spmv_bcrs(A.ptr, A.jas, A.offsets, A.val, x, y)
    return y, OpCounters(int(flops), int(loads))


def spmv_bcrs_unrolled(A: BcrsMatrix, x, out: np.ndarray | None = None) -> tuple[np.ndarray, OpCounters]:
    x = _check_x(A, x)
    y = _output(A, out)
    flops, loads, fallback = _spmv_bcrs_unrolled(A.ptr, A.jas, A.offsets, A.val, x, y)
    return y, OpCounters(int(flops), int(loads), int(fallback))


def _output(A, out):
    if out is None:
        return np.empty(A.m)
    if len(out) != A.m:
        raise ValueError(f"output has length {len(out)}, expected {A.m}")
    return out


KERNELS = {
    "crs": spmv_crs,
    "bcrs": spmv_bcrs,
    "bcrs-unrolled": spmv_bcrs_unrolled,
}


def for_kernel(A: CrsMatrix, kernel: str):
    """The storage ``kernel`` runs on: ``A`` itself or its BCRS conversion."""
    if kernel not in KERNELS:
        raise ValueError(f"unknown kernel {kernel!r}; choose from {sorted(KERNELS)}")
    return A if kernel == "crs" else crs_to_bcrs(A)


# --------------------------------------------------------------------------
# accounting

def memory_footprint(A: CrsMatrix | BcrsMatrix, index_width: int = 4, value_width: int = 8) -> int:
    """Bytes held by the matrix arrays for the given element widths."""
    for w in (index_width, value_width):
        if w not in (4, 8):
            raise ValueError(f"widths must be 4 or 8 bytes, got {w}")
    if isinstance(A, BcrsMatrix):
        return (A.nnz * value_width + A.nns * index_width
                + (A.nns + 1) * index_width + (A.m + 1) * index_width)
    return A.nnz * value_width + A.nnz * index_width + (A.m + 1) * index_width


def segment_histogram(A: BcrsMatrix) -> dict[int, int]:
    lengths, counts = np.unique(A.segment_lengths(), return_counts=True)
    return {int(k): int(v) for k, v in zip(lengths, counts)}


def write_matrix_market(path, blocks: list[CrsMatrix], n_global: int | None = None) -> Path:
    """Write the rows of one or more rank matrices in global numbering.

    Coordinate format, 1-based, entries sorted by (row, column).
    """
    rows, cols, vals = [], [], []
    for A in blocks:
        counts = np.diff(A.ptr.astype(np.int64))
        rows.append(np.repeat(A.rows, counts))
        cols.append(A.col_map[A.col.astype(np.int64)])
        vals.append(A.val)
    r = np.concatenate(rows) if rows else np.empty(0, dtype=np.int64)
    c = np.concatenate(cols) if cols else np.empty(0, dtype=np.int64)
    v = np.concatenate(vals) if vals else np.empty(0)
    order = np.lexsort((c, r))
    if n_global is None:
        n_global = int(max(r.max(initial=-1), c.max(initial=-1)) + 1)
    path = Path(path)
    with path.open("w") as fh:
        fh.write("%%MatrixMarket matrix coordinate real general\n")
        fh.write(f"{n_global} {n_global} {len(v)}\n")
        for i, j, a in zip(r[order] + 1, c[order] + 1, v[order]):
            fh.write(f"{i} {j} {float(a)!r}\n")
    return path
