"""Analytical solution of the unit-cube problem and nodal error norms.

Laplace's equation with u = 1 on the face x = 1 and u = 0 on the other five
faces has the separable solution

    u = sum_{m,n odd} 16 / (m n pi^2) * sinh(lam x) / sinh(lam)
        * sin(m pi y) * sin(n pi z),       lam = pi * sqrt(m^2 + n^2).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domain import BoxDims, node_coords


@dataclass(frozen=True)
class SeriesParams:
    terms: int = 300  # odd terms per index

    def __post_init__(self):
        if self.terms < 1:
            raise ValueError("terms must be >= 1")


def _modes(params: SeriesParams):
    k = 2 * np.arange(params.terms) + 1.0
    lam = np.pi * np.sqrt(k[:, None] ** 2 + k[None, :] ** 2)
    coef = 16.0 / (np.pi ** 2 * k[:, None] * k[None, :])
    return k, lam, coef


def _sinh_ratio(lam, x):
    # sinh(lam x) / sinh(lam) without overflow
    return np.exp(lam * (x - 1.0)) * (-np.expm1(-2.0 * lam * x)) / (-np.expm1(-2.0 * lam))


def _check_unit(*arrays):
    for a in arrays:
        a = np.asarray(a)
        if np.any(a < 0.0) or np.any(a > 1.0) or np.any(np.isnan(a)):
            raise ValueError("coordinates must lie in the closed unit cube")


def analytical_grid(xs, ys, zs, params: SeriesParams = SeriesParams()) -> np.ndarray:
    """Solution on the tensor grid ``xs x ys x zs``, shape ``(len(zs), len(ys), len(xs))``."""
    xs, ys, zs = (np.atleast_1d(np.asarray(a, dtype=np.float64)) for a in (xs, ys, zs))
    _check_unit(xs, ys, zs)
    k, lam, coef = _modes(params)
    sy = np.sin(np.pi * np.outer(ys, k))
    sz = np.sin(np.pi * np.outer(zs, k))
    out = np.empty((len(zs), len(ys), len(xs)))
    face_inside = ((ys > 0.0) & (ys < 1.0))[None, :] & ((zs > 0.0) & (zs < 1.0))[:, None]
    for i, x in enumerate(xs):
        if x == 1.0:
            # the boundary data itself; the series only converges conditionally here
            out[:, :, i] = np.where(face_inside, 1.0, 0.0)
            continue
        weights = coef * _sinh_ratio(lam, x)
        out[:, :, i] = (sy @ weights @ sz.T).T
    # sin(k pi) is not exactly zero in floating point
    out[:, (ys == 0.0) | (ys == 1.0), :] = 0.0
    out[(zs == 0.0) | (zs == 1.0), :, :] = 0.0
    return out


def analytical_solution(x, y, z, params: SeriesParams = SeriesParams()):
    """Temperature at ``(x, y, z)``; array arguments broadcast pointwise."""
    x, y, z = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (x, y, z)))
    _check_unit(x, y, z)
    flat = [a.reshape(-1) for a in (x, y, z)]
    vals = np.array([analytical_grid(px, py, pz, params)[0, 0, 0] for px, py, pz in zip(*flat)])
    return vals.reshape(x.shape) if x.ndim else float(vals[0])


def evaluation_mask(dims: BoxDims, gids) -> np.ndarray:
    """False on the edges of the x = 1 face, where the exact solution jumps."""
    ix, iy, iz = node_coords(dims.node_counts, gids)
    on_face = ix == dims.nx
    on_edge = (iy == 0) | (iy == dims.ny) | (iz == 0) | (iz == dims.nz)
    return ~(on_face & on_edge)


def analytical_at_nodes(dims: BoxDims, gids, params: SeriesParams = SeriesParams()) -> np.ndarray:
    """Series values at the given global node ids (evaluated on their bounding grid)."""
    gids = np.asarray(gids, dtype=np.int64)
    if len(gids) == 0:
        return np.empty(0)
    ix, iy, iz = node_coords(dims.node_counts, gids)
    lo = [int(a.min()) for a in (ix, iy, iz)]
    hi = [int(a.max()) for a in (ix, iy, iz)]
    grid = analytical_grid(
        np.arange(lo[0], hi[0] + 1) / dims.nx,
        np.arange(lo[1], hi[1] + 1) / dims.ny,
        np.arange(lo[2], hi[2] + 1) / dims.nz,
        params,
    )
    return grid[iz - lo[2], iy - lo[1], ix - lo[0]]


def error_partials(dims: BoxDims, gids, x_num, params: SeriesParams = SeriesParams()):
    """``(sum of squares, max abs, count)`` of the nodal error over ``gids``."""
    gids = np.asarray(gids, dtype=np.int64)
    x_num = np.asarray(x_num, dtype=np.float64)
    if len(gids) != len(x_num):
        raise ValueError(f"{len(x_num)} values for {len(gids)} nodes")
    keep = evaluation_mask(dims, gids)
    err = np.abs(x_num[keep] - analytical_at_nodes(dims, gids[keep], params))
    return float(np.dot(err, err)), float(err.max(initial=0.0)), int(keep.sum())


def combine_partials(parts):
    """Rank-ordered combination of ``error_partials`` tuples."""
    sumsq, peak, count = parts[0]
    for s, m, c in parts[1:]:
        sumsq += s
        peak = max(peak, m)
        count += c
    return sumsq, peak, count


def solution_error(x_num, dims: BoxDims, params: SeriesParams = SeriesParams()) -> tuple[float, float]:
    """Max-abs and RMS nodal error of a global solution vector."""
    x_num = np.asarray(x_num, dtype=np.float64)
    if len(x_num) != dims.n_nodes:
        raise ValueError(f"solution has {len(x_num)} entries, mesh has {dims.n_nodes} nodes")
    sumsq, peak, count = error_partials(dims, np.arange(dims.n_nodes), x_num, params)
    return peak, float(np.sqrt(sumsq / count))
