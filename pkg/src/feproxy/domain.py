"""Structured hexahedral mesh of the unit cube and its RCB decomposition.

Nodes are numbered x-fastest: ``id = ix + nodes_x * (iy + nodes_y * iz)``.
Sub-boxes are half-open element ranges; a node is owned by the lowest rank
whose closed node range contains it.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

INVALID_ID = -1


@dataclass(frozen=True)
class BoxDims:
    """Element counts per axis of the unit cube."""

    nx: int
    ny: int
    nz: int

    def __post_init__(self):
        for name in ("nx", "ny", "nz"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")

    @property
    def elements(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    @property
    def node_counts(self) -> tuple[int, int, int]:
        return (self.nx + 1, self.ny + 1, self.nz + 1)

    @property
    def n_nodes(self) -> int:
        return (self.nx + 1) * (self.ny + 1) * (self.nz + 1)

    @property
    def n_elements(self) -> int:
        return self.nx * self.ny * self.nz

    @property
    def spacing(self) -> tuple[float, float, float]:
        return (1.0 / self.nx, 1.0 / self.ny, 1.0 / self.nz)


@dataclass(frozen=True)
class Box:
    """Half-open element index ranges ``[lo, hi)`` per axis."""

    lo: tuple[int, int, int]
    hi: tuple[int, int, int]

    def __post_init__(self):
        if any(l > h for l, h in zip(self.lo, self.hi)):
            raise ValueError(f"inverted box {self.lo} -> {self.hi}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(h - l for l, h in zip(self.lo, self.hi))

    @property
    def n_elements(self) -> int:
        sx, sy, sz = self.shape
        return sx * sy * sz

    @property
    def empty(self) -> bool:
        return any(l == h for l, h in zip(self.lo, self.hi))

    def node_range(self) -> tuple[tuple[int, int, int], tuple[int, int, int]]:
        """Closed node range ``[lo, hi]`` spanned by the box's elements."""
        return self.lo, self.hi

    def to_dict(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi)}


@dataclass(frozen=True)
class BoundaryCondition:
    """Prescribed nodal values, sorted by global node id."""

    node_ids: np.ndarray
    values: np.ndarray

    def __len__(self):
        return len(self.node_ids)

    def as_dict(self) -> dict[int, float]:
        return dict(zip(self.node_ids.tolist(), self.values.tolist()))


def get_node_id(node_counts, ix, iy, iz):
    """Global id of node ``(ix, iy, iz)``, or ``INVALID_ID`` outside the grid.

    Works elementwise on numpy arrays as well as on plain integers.
    """
    nxn, nyn, nzn = node_counts
    if np.ndim(ix) == 0 and np.ndim(iy) == 0 and np.ndim(iz) == 0:
        if 0 <= ix < nxn and 0 <= iy < nyn and 0 <= iz < nzn:
            return int(ix + nxn * (iy + nyn * iz))
        return INVALID_ID
    ix, iy, iz = (np.asarray(a, dtype=np.int64) for a in (ix, iy, iz))
    ok = (ix >= 0) & (ix < nxn) & (iy >= 0) & (iy < nyn) & (iz >= 0) & (iz < nzn)
    return np.where(ok, ix + nxn * (iy + nyn * iz), INVALID_ID)


def node_coords(node_counts, gids):
    """Integer grid coordinates ``(ix, iy, iz)`` of global node ids."""
    nxn, nyn, _ = node_counts
    gids = np.asarray(gids, dtype=np.int64)
    return gids % nxn, (gids // nxn) % nyn, gids // (nxn * nyn)


def rcb_boxes(dims: BoxDims, p: int) -> list[Box]:
    """Recursive coordinate bisection of the element box into ``p`` sub-boxes.

    The rank count splits into ceil(p/2) (lower half of the axis) and
    floor(p/2); the cut falls on the longest axis (ties: x, y, z) at the
    element index proportional to those halves. When that would leave a
    half with fewer elements than ranks, the next longest axis is tried,
    and failing that the rank split itself is shifted.
    """
    if int(p) != p or p < 1:
        raise ValueError(f"rank count must be a positive integer, got {p!r}")
    if p > dims.n_elements:
        raise ValueError(f"{p} ranks for {dims.n_elements} elements: some rank would own no elements")
    out: list[Box] = []
    _bisect(Box((0, 0, 0), dims.elements), p, out)
    return out


def _feasible_cut(length: int, cross: int, p: int, p_lo: int) -> int | None:
    """Cut nearest the proportional position leaving each half enough elements."""
    p_hi = p - p_lo
    lo = max(1, -(-p_lo // cross))
    hi = min(length - 1, length - -(-p_hi // cross))
    if lo > hi:
        return None
    return min(max((length * p_lo) // p, lo), hi)


def _bisect(box: Box, p: int, out: list[Box]) -> None:
    if p == 1:
        out.append(box)
        return
    shape = box.shape
    axes = sorted((a for a in range(3) if shape[a] > 1), key=lambda a: (-shape[a], a))
    p_lo = (p + 1) // 2
    for axis in axes:
        cut = _feasible_cut(shape[axis], box.n_elements // shape[axis], p, p_lo)
        if cut is not None:
            break
    else:
        # thin boxes: keep the longest axis and move ranks to the side that has room
        axis = axes[0]
        length = shape[axis]
        cross = box.n_elements // length
        cut = min(max((length * p_lo) // p, 1), length - 1)
        p_lo = min(max(p_lo, p - (length - cut) * cross), cut * cross)
    p_hi = p - p_lo
    split = box.lo[axis] + cut
    lower_hi = list(box.hi)
    lower_hi[axis] = split
    upper_lo = list(box.lo)
    upper_lo[axis] = split
    _bisect(Box(box.lo, tuple(lower_hi)), p_lo, out)
    _bisect(Box(tuple(upper_lo), box.hi), p_hi, out)


@dataclass(frozen=True)
class RankMesh:
    """One rank's view of the partition.

    Local indices run over owned nodes (ascending global id) and then
    external nodes (owning rank ascending, then global id ascending).
    """

    rank: int
    owned: np.ndarray
    external: np.ndarray
    external_owner: np.ndarray
    assembly_box: Box
    n_global: int = field(repr=False)

    @property
    def n_owned(self) -> int:
        return len(self.owned)

    @property
    def n_local(self) -> int:
        return len(self.owned) + len(self.external)

    @cached_property
    def local_to_global(self) -> np.ndarray:
        return np.concatenate([self.owned, self.external])

    @cached_property
    def global_to_local(self) -> np.ndarray:
        g2l = np.full(self.n_global, INVALID_ID, dtype=np.int64)
        g2l[self.local_to_global] = np.arange(self.n_local, dtype=np.int64)
        return g2l


class BoxPartition:
    """Global element box, per-rank sub-boxes and node ownership."""

    def __init__(self, dims: BoxDims, boxes: list[Box]):
        self.dims = dims
        self.boxes = list(boxes)
        self._views: dict[int, RankMesh] = {}
        nxn, nyn, nzn = dims.node_counts
        owner = np.full((nzn, nyn, nxn), INVALID_ID, dtype=np.int32)
        # lowest rank wins: paint in descending order
        for r in reversed(range(len(self.boxes))):
            lo, hi = self.boxes[r].node_range()
            owner[lo[2]:hi[2] + 1, lo[1]:hi[1] + 1, lo[0]:hi[0] + 1] = r
        self.owner = owner.reshape(-1)
        self.owner.flags.writeable = False

    @property
    def p(self) -> int:
        return len(self.boxes)

    def local(self, rank: int) -> RankMesh:
        """Owned/external node lists and local maps for ``rank`` (cached)."""
        if not 0 <= rank < self.p:
            raise IndexError(f"rank {rank} outside [0, {self.p})")
        view = self._views.get(rank)
        if view is None:
            view = self._build_view(rank)
            self._views[rank] = view
        return view

    def _build_view(self, rank: int) -> RankMesh:
        nxn, nyn, nzn = self.dims.node_counts
        lo, hi = self.boxes[rank].node_range()
        nodes_hi = (nxn - 1, nyn - 1, nzn - 1)
        rlo = [max(l - 1, 0) for l in lo]
        rhi = [min(h + 1, n) for h, n in zip(hi, nodes_hi)]
        iz, iy, ix = np.meshgrid(
            np.arange(rlo[2], rhi[2] + 1),
            np.arange(rlo[1], rhi[1] + 1),
            np.arange(rlo[0], rhi[0] + 1),
            indexing="ij",
        )
        gids = ix + nxn * (iy + nyn * iz)
        owners = self.owner[gids]
        own = owners == rank
        reach = _dilate(own)
        ext_mask = reach & ~own
        owned = gids[own]  # region walk is z, y, x so this is ascending
        ext = gids[ext_mask]
        ext_owner = owners[ext_mask]
        order = np.lexsort((ext, ext_owner))
        elo = tuple(max(l - 1, 0) for l in lo)
        ehi = tuple(min(h + 1, n) for h, n in zip(hi, self.dims.elements))
        return RankMesh(
            rank=rank,
            owned=owned.astype(np.int64),
            external=ext[order].astype(np.int64),
            external_owner=ext_owner[order].astype(np.int64),
            assembly_box=Box(elo, ehi),
            n_global=self.dims.n_nodes,
        )

    def to_dict(self) -> dict:
        ranks = []
        for r, box in enumerate(self.boxes):
            view = self.local(r)
            ranks.append({
                "rank": r,
                "box": box.to_dict(),
                "elements": box.n_elements,
                "owned_nodes": view.n_owned,
                "external_nodes": len(view.external),
            })
        return {"dims": list(self.dims.elements), "ranks": ranks}


def _dilate(mask: np.ndarray) -> np.ndarray:
    """27-point (3x3x3 box) dilation of a boolean grid, axis by axis."""
    out = mask.copy()
    for axis in range(3):
        grown = out.copy()
        n = out.shape[axis]
        if n > 1:
            lead = [slice(None)] * 3
            tail = [slice(None)] * 3
            lead[axis] = slice(1, None)
            tail[axis] = slice(None, -1)
            grown[tuple(lead)] |= out[tuple(tail)]
            grown[tuple(tail)] |= out[tuple(lead)]
        out = grown
    return out


def rcb_partition(dims: BoxDims, p: int) -> BoxPartition:
    return BoxPartition(dims, rcb_boxes(dims, p))


def external_nodes(partition: BoxPartition, rank: int) -> np.ndarray:
    """Ghost nodes of ``rank``: stencil neighbours of owned nodes owned elsewhere."""
    return partition.local(rank).external


def dirichlet_rows(dims: BoxDims) -> BoundaryCondition:
    """Surface nodes of the cube; the x = 1 face (edges included) carries 1.0."""
    nxn, nyn, nzn = dims.node_counts
    gids = np.arange(dims.n_nodes, dtype=np.int64)
    ix, iy, iz = node_coords(dims.node_counts, gids)
    surface = (
        (ix == 0) | (ix == nxn - 1)
        | (iy == 0) | (iy == nyn - 1)
        | (iz == 0) | (iz == nzn - 1)
    )
    ids = gids[surface]
    values = np.where(ix[surface] == nxn - 1, 1.0, 0.0)
    return BoundaryCondition(ids, values)
