"""Unpreconditioned conjugate gradient over the simulated ranks.

The loop is built from three primitives: MATVEC (halo exchange plus one
of the SpMV kernels), DOT (globally reduced) and WAXPBY (local update).
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numba
import numpy as np

from .comm import HaloPlan, RankGroup, halo_exchange
from .sparse import KERNELS, OpCounters


class NotSPDError(ArithmeticError):
    """p^T A p <= 0: the operator is not positive definite."""


class DivergenceError(ArithmeticError):
    """Non-finite values appeared in the iteration."""


@dataclass
class CgConfig:
    max_iterations: int = 200
    tolerance: float = 1e-8
    kernel: str = "crs"
    # recompute r = b - Ax every this many iterations; 0 disables
    recompute_every: int = 50

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be > 0")
        if self.kernel not in KERNELS:
            raise ValueError(f"unknown kernel {self.kernel!r}; choose from {sorted(KERNELS)}")
        if self.recompute_every < 0:
            raise ValueError("recompute_every must be >= 0")


@dataclass
class CgResult:
    x: np.ndarray
    iterations: int
    converged: bool
    residual_history: list[float]
    b_norm: float
    times: dict[str, float] = field(default_factory=dict)
    matvec_counters: OpCounters = field(default_factory=OpCounters)
    calls: dict[str, int] = field(default_factory=dict)

    @property
    def final_relative_residual(self) -> float:
        if not self.residual_history:
            return 0.0
        return self.residual_history[-1] / self.b_norm if self.b_norm else 0.0


@numba.njit(cache=True, nogil=True)
def _ordered_sum(a):
    s = 0.0
    for v in a:
        s += v
    return s


def _ordered_terms_sum(values):
    """Sum per-rank term arrays in ascending global position."""
    if len(values) == 1:
        gids, terms = values[0]
        if gids is None:
            return _ordered_sum(terms)
    if all(g is None for g, _ in values):
        return _ordered_sum(np.concatenate([t for _, t in values]))
    gids = np.concatenate([g for g, _ in values])
    terms = np.concatenate([t for _, t in values])
    return _ordered_sum(terms[np.argsort(gids, kind="stable")])


def dot(group: RankGroup, rank: int, u, v, gids: np.ndarray | None = None) -> float:
    """Global inner product over owned entries, identical on every rank.

    The elementwise products travel to rank 0, which adds them one by one
    in ascending global index (``gids``; rank-order concatenation when
    omitted). The result is therefore bitwise independent of the rank
    count as well as of thread scheduling.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"dot of vectors with lengths {len(u)} and {len(v)}")
    terms = u * v
    if group.p == 1 and (gids is None or _is_ascending(gids)):
        return float(_ordered_sum(terms))
    return float(group.allreduce(rank, (gids, terms), _ordered_terms_sum))


def _is_ascending(gids) -> bool:
    return len(gids) < 2 or bool(np.all(gids[1:] > gids[:-1]))


@numba.njit(cache=True, nogil=True)
def _waxpby(alpha, x, beta, y, w):
    for i in range(len(w)):
        w[i] = alpha * x[i] + beta * y[i]


def waxpby(alpha: float, x, beta: float, y, out: np.ndarray | None = None) -> np.ndarray:
    """``w = alpha * x + beta * y`` elementwise; purely local."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"waxpby of vectors with lengths {len(x)} and {len(y)}")
    w = np.empty_like(x) if out is None else out
    _waxpby(float(alpha), x, float(beta), y, w)
    return w


def cg_solve(group: RankGroup, rank: int, A, b, config: CgConfig | None = None,
             plan: HaloPlan | None = None, gids: np.ndarray | None = None) -> CgResult:
    """Solve ``A x = b`` from ``x0 = 0``.

    ``A`` is this rank's matrix in the storage format of ``config.kernel``
    (a ``CrsMatrix`` for ``crs``, a ``BcrsMatrix`` otherwise); its columns
    past ``A.m`` are external entries filled by ``plan`` before each
    product. ``gids`` are the global ids of the owned rows.
    """
    config = config or CgConfig()
    spmv = KERNELS[config.kernel]
    m, ncols = A.m, A.ncols
    b = np.asarray(b, dtype=np.float64)
    if len(b) != m:
        raise ValueError(f"b has length {len(b)}, matrix has {m} rows")
    if ncols > m and plan is None:
        raise ValueError("matrix has external columns but no halo plan was given")

    times = dict.fromkeys(("matvec", "dot", "waxpby"), 0.0)
    calls = dict.fromkeys(("matvec", "dot", "waxpby"), 0)
    counters = OpCounters()
    t_start = time.perf_counter()

    def matvec(vec_full, out):
        nonlocal counters
        t = time.perf_counter()
        if plan is not None:
            halo_exchange(group, rank, plan, vec_full)
        _, c = spmv(A, vec_full, out=out)
        counters = counters + c
        times["matvec"] += time.perf_counter() - t
        calls["matvec"] += 1
        return out

    def gdot(u, v):
        t = time.perf_counter()
        s = dot(group, rank, u, v, gids)
        times["dot"] += time.perf_counter() - t
        calls["dot"] += 1
        return s

    def update(alpha, x, beta, y, out):
        t = time.perf_counter()
        waxpby(alpha, x, beta, y, out)
        times["waxpby"] += time.perf_counter() - t
        calls["waxpby"] += 1
        return out

    x = np.zeros(m)
    r = b.copy()
    p_full = np.zeros(ncols)
    p = p_full[:m]
    p[:] = r
    ap = np.empty(m)
    work = None

    rr = gdot(r, r)
    b_norm = math.sqrt(rr)
    history: list[float] = []
    converged = b_norm == 0.0
    k = 0
    while not converged and k < config.max_iterations:
        k += 1
        matvec(p_full, ap)
        p_ap = gdot(p, ap)
        if not math.isfinite(p_ap):
            raise DivergenceError(f"iteration {k}: p^T A p = {p_ap}")
        if p_ap <= 0.0:
            raise NotSPDError(f"iteration {k}: p^T A p = {p_ap} <= 0")
        alpha = rr / p_ap
        update(1.0, x, alpha, p, x)
        if config.recompute_every and k % config.recompute_every == 0:
            if work is None:
                work = np.zeros(ncols)
            work[:m] = x
            matvec(work, ap)
            update(1.0, b, -1.0, ap, r)
        else:
            update(1.0, r, -alpha, ap, r)
        rr_new = gdot(r, r)
        if not math.isfinite(rr_new):
            raise DivergenceError(f"iteration {k}: |r|^2 = {rr_new}")
        norm = math.sqrt(rr_new)
        history.append(norm)
        if norm / b_norm <= config.tolerance:
            converged = True
            break
        beta = rr_new / rr
        update(1.0, r, beta, p, p)
        rr = rr_new

    times["total"] = time.perf_counter() - t_start
    times["other"] = max(times["total"] - times["matvec"] - times["dot"] - times["waxpby"], 0.0)
    return CgResult(x, k, converged, history, b_norm, times, counters, calls)
