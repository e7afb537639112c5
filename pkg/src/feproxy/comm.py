"""Simulated message-passing ranks.

Each rank runs on its own thread and talks to the others only through
per-pair FIFO mailboxes. Collectives are built from point-to-point
messages with a fixed schedule (gather to rank 0 in rank order, combine
sequentially, broadcast), so reductions are bitwise reproducible no matter
how the threads are scheduled.
"""
from __future__ import annotations

import logging
import queue
import random
import threading
import time
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .domain import BoxPartition

log = logging.getLogger(__name__)


class ProtocolError(RuntimeError):
    """Ranks disagree about which collective (or message) comes next."""


@dataclass
class CommStats:
    calls: int = 0
    messages: int = 0
    bytes: int = 0

    def to_dict(self) -> dict:
        return {"calls": self.calls, "messages": self.messages, "bytes": self.bytes}


def _payload_bytes(obj) -> int:
    if isinstance(obj, np.ndarray):
        return int(obj.nbytes)
    if isinstance(obj, (tuple, list)):
        return sum(_payload_bytes(o) for o in obj)
    if obj is None:
        return 0
    return 8


def sequential_sum(values):
    """Left-to-right sum in rank order."""
    total = values[0]
    for v in values[1:]:
        total = total + v
    return total


class RankGroup:
    """Mailboxes and collective bookkeeping shared by ``p`` ranks."""

    def __init__(self, p: int, timeout: float = 120.0, jitter_seed: int | None = None):
        if p < 1:
            raise ValueError(f"rank count must be positive, got {p}")
        self.p = p
        self.timeout = timeout
        self._boxes = {(s, d): queue.Queue() for s in range(p) for d in range(p) if s != d}
        self._seq = [0] * p
        self._halo_seq = [0] * p
        self._lock = threading.Lock()
        self._abort = threading.Event()
        self.stats: dict[str, CommStats] = defaultdict(CommStats)
        self.sites: dict[str, CommStats] = defaultdict(CommStats)
        self._jitter = random.Random(jitter_seed) if jitter_seed is not None else None

    # -- point to point ----------------------------------------------------

    def send(self, src: int, dst: int, tag, payload, kind: str, site: str | None = None) -> None:
        if self._jitter is not None:
            with self._lock:
                delay = self._jitter.random() * 1e-3
            time.sleep(delay)
        nbytes = _payload_bytes(payload)
        with self._lock:
            for book, key in ((self.stats, kind), (self.sites, site)):
                if key is not None:
                    book[key].messages += 1
                    book[key].bytes += nbytes
        self._boxes[(src, dst)].put((tag, payload))

    def recv(self, dst: int, src: int, tag):
        box = self._boxes[(src, dst)]
        deadline = time.monotonic() + self.timeout
        while True:
            if self._abort.is_set():
                raise ProtocolError(f"rank {dst}: group aborted while waiting on rank {src}")
            try:
                got_tag, payload = box.get(timeout=0.02)
                break
            except queue.Empty:
                if time.monotonic() > deadline:
                    raise ProtocolError(f"rank {dst}: timed out waiting for {tag} from rank {src}")
        if got_tag != tag:
            raise ProtocolError(f"rank {dst}: expected {tag} from rank {src}, got {got_tag}")
        return payload

    def abort(self) -> None:
        self._abort.set()

    # -- collectives -------------------------------------------------------

    def _enter(self, rank: int, name: str, site: str | None):
        if not 0 <= rank < self.p:
            raise IndexError(f"rank {rank} outside [0, {self.p})")
        seq = self._seq[rank]
        self._seq[rank] += 1
        if rank == 0:
            with self._lock:
                self.stats[name].calls += 1
                if site is not None:
                    self.sites[site].calls += 1
        return (name, seq)

    def _gather_to_root(self, rank, value, tag, kind, site):
        if rank != 0:
            self.send(rank, 0, tag, value, kind, site)
            return None
        values = [value]
        for src in range(1, self.p):
            values.append(self.recv(0, src, tag))
        return values

    def _bcast_from_root(self, rank, value, tag, kind, site):
        if rank == 0:
            for dst in range(1, self.p):
                self.send(0, dst, tag, value, kind, site)
            return value
        return self.recv(rank, 0, tag)

    def allreduce(self, rank: int, value, op=sequential_sum, site: str | None = None):
        tag = self._enter(rank, "allreduce", site)
        values = self._gather_to_root(rank, value, tag, "allreduce", site)
        result = op(values) if rank == 0 else None
        return self._bcast_from_root(rank, result, tag, "allreduce", site)

    def reduce(self, rank: int, value, op=sequential_sum, site: str | None = None):
        tag = self._enter(rank, "reduce", site)
        values = self._gather_to_root(rank, value, tag, "reduce", site)
        return op(values) if rank == 0 else None

    def gather(self, rank: int, chunk, site: str | None = None):
        tag = self._enter(rank, "gather", site)
        chunks = self._gather_to_root(rank, chunk, tag, "gather", site)
        return _concat(chunks) if rank == 0 else None

    def allgather(self, rank: int, chunk, site: str | None = None):
        tag = self._enter(rank, "allgather", site)
        chunks = self._gather_to_root(rank, chunk, tag, "allgather", site)
        result = _concat(chunks) if rank == 0 else None
        return self._bcast_from_root(rank, result, tag, "allgather", site)

    def broadcast(self, rank: int, value, site: str | None = None):
        tag = self._enter(rank, "broadcast", site)
        return self._bcast_from_root(rank, value, tag, "broadcast", site)

    def barrier(self, rank: int) -> None:
        tag = self._enter(rank, "barrier", None)
        self._gather_to_root(rank, None, tag, "barrier", None)
        self._bcast_from_root(rank, None, tag, "barrier", None)

    def stats_dict(self) -> dict:
        with self._lock:
            return {k: self.stats[k].to_dict() for k in sorted(self.stats)}

    def sites_dict(self) -> dict:
        with self._lock:
            return {k: self.sites[k].to_dict() for k in sorted(self.sites)}


def _concat(chunks):
    if all(isinstance(c, np.ndarray) for c in chunks):
        return np.concatenate(chunks)
    out = []
    for c in chunks:
        out.extend(c)
    return out


def allreduce_sum(group: RankGroup, rank: int, value, site: str | None = None):
    return group.allreduce(rank, value, sequential_sum, site)


def reduce_sum(group: RankGroup, rank: int, value, site: str | None = None):
    return group.reduce(rank, value, sequential_sum, site)


def gather(group: RankGroup, rank: int, chunk, site: str | None = None):
    return group.gather(rank, chunk, site)


def allgather(group: RankGroup, rank: int, chunk, site: str | None = None):
    return group.allgather(rank, chunk, site)


# --------------------------------------------------------------------------
# halo exchange

@dataclass(frozen=True)
class HaloPlan:
    """Per-neighbour index lists: owned entries to send, external slots to fill."""

    rank: int
    n_owned: int
    sends: dict[int, np.ndarray] = field(default_factory=dict)
    recvs: dict[int, np.ndarray] = field(default_factory=dict)


def build_halo_plan(partition: BoxPartition, rank: int) -> HaloPlan:
    mesh = partition.local(rank)
    recvs = {}
    for s in np.unique(mesh.external_owner).tolist():
        recvs[s] = mesh.n_owned + np.flatnonzero(mesh.external_owner == s)
    sends = {}
    g2l = mesh.global_to_local
    for s in range(partition.p):
        if s == rank:
            continue
        other = partition.local(s)
        wanted = other.external[other.external_owner == rank]
        if len(wanted):
            sends[s] = g2l[wanted]
    return HaloPlan(rank, mesh.n_owned, sends, recvs)


def halo_exchange(group: RankGroup, rank: int, plan: HaloPlan, x: np.ndarray) -> np.ndarray:
    """Fill the external entries of ``x`` from their owners, in place."""
    seq = group._halo_seq[rank]
    group._halo_seq[rank] += 1
    for dst, idx in plan.sends.items():
        group.send(rank, dst, ("halo", seq), x[idx], "halo")
    for src, idx in plan.recvs.items():
        data = group.recv(rank, src, ("halo", seq))
        if len(data) != len(idx):
            raise ProtocolError(
                f"rank {rank}: halo from rank {src} has {len(data)} values, plan expects {len(idx)}")
        x[idx] = data
    if rank == 0:
        with group._lock:
            group.stats["halo"].calls += 1
    return x


def run_ranks(p: int, fn, *args, group: RankGroup | None = None, **kwargs) -> list:
    """Run ``fn(group, rank, *args, **kwargs)`` on ``p`` worker threads.

    Returns per-rank results in rank order. If any rank raises, the group
    is aborted and the lowest-rank exception is re-raised.
    """
    group = group or RankGroup(p)
    if group.p != p:
        raise ValueError(f"group has {group.p} ranks, asked for {p}")
    results = [None] * p
    errors: list[BaseException | None] = [None] * p

    def worker(rank):
        try:
            results[rank] = fn(group, rank, *args, **kwargs)
        except BaseException as exc:  # noqa: BLE001 - re-raised in the caller
            errors[rank] = exc
            group.abort()

    if p == 1:
        worker(0)
    else:
        threads = [threading.Thread(target=worker, args=(r,), name=f"rank-{r}") for r in range(p)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    primary = [e for e in errors if e is not None and not _is_abort(e)]
    for e in primary or [e for e in errors if e is not None]:
        raise e
    return results


def _is_abort(exc: BaseException) -> bool:
    return isinstance(exc, ProtocolError) and "aborted" in str(exc)
