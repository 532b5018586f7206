"""Packets, FIFO buffers with drop-oldest, and link transfers."""

from __future__ import annotations

import csv
import io
import itertools
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable

PACKET_BYTES = 1456


@dataclass(slots=True)
class Packet:
    id: int
    lineage: int
    origin: int
    created_at: int
    copies: int | None = None  # Spray-and-Wait copy counter L
    hops: int = 0
    size_bytes: int = PACKET_BYTES

    def __post_init__(self):
        if self.copies is not None and self.copies < 1:
            raise ValueError("copy counter must be >= 1")


class PacketFactory:
    """Hands out episode-unique packet ids."""

    def __init__(self):
        self._ids = itertools.count()

    def new(self, origin: int, step: int, copies: int | None = None) -> Packet:
        pid = next(self._ids)
        return Packet(pid, pid, origin, step, copies)

    def copy_of(self, pkt: Packet, copies: int) -> Packet:
        return Packet(next(self._ids), pkt.lineage, pkt.origin, pkt.created_at, copies, pkt.hops)


class Buffer:
    """FIFO queue bounded by ``capacity``; ``None`` means unbounded (lander).

    Packets received during the current step sit at the tail and are counted
    in ``fresh``; they become forwardable after :meth:`new_step`.
    """

    def __init__(self, capacity: int | None):
        if capacity is not None and capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.queue: deque[Packet] = deque()
        self.fresh = 0
        self.dropped: list[Packet] = []

    def __len__(self) -> int:
        return len(self.queue)

    def __iter__(self):
        return iter(self.queue)

    @property
    def full(self) -> bool:
        return self.capacity is not None and len(self.queue) >= self.capacity

    @property
    def forwardable(self) -> int:
        return len(self.queue) - self.fresh

    def new_step(self) -> None:
        self.fresh = 0

    def lineages(self) -> set[int]:
        return {p.lineage for p in self.queue}


def enqueue(buf: Buffer, pkt: Packet, fresh: bool = False) -> Packet | None:
    """Append ``pkt``; if the buffer was full the oldest packet is evicted and returned."""
    dropped = None
    if buf.full:
        dropped = buf.queue.popleft()
        buf.dropped.append(dropped)
        if buf.fresh > len(buf.queue):
            buf.fresh = len(buf.queue)
    buf.queue.append(pkt)
    if fresh:
        buf.fresh += 1
    return dropped


def dequeue_batch(buf: Buffer, k: int) -> list[Packet]:
    """Remove up to ``k`` packets from the head, never touching fresh arrivals."""
    if k < 0:
        raise ValueError("k must be >= 0")
    n = min(k, buf.forwardable)
    return [buf.queue.popleft() for _ in range(n)]


def transfer(src: Buffer, dst: Buffer, k: int) -> tuple[int, int]:
    """Move up to ``k`` head packets from ``src`` to ``dst``. Returns (moved, dropped_at_dst)."""
    batch = dequeue_batch(src, k)
    return deliver_batch(batch, dst)


def deliver_batch(batch: Iterable[Packet], dst: Buffer) -> tuple[int, int]:
    moved = dropped = 0
    for p in batch:
        p.hops += 1
        moved += 1
        if enqueue(dst, p, fresh=True) is not None:
            dropped += 1
    return moved, dropped


def generate_packet(factory: PacketFactory, rover: int, step: int, every: int,
                    copies: int | None = None) -> Packet | None:
    """One packet when ``step`` is a multiple of ``every``."""
    if every < 1:
        raise ValueError("generation interval must be >= 1")
    if step % every:
        return None
    return factory.new(rover, step, copies)


# -- ledger ------------------------------------------------------------------

LEDGER_COLUMNS = ("id", "lineage", "origin", "created_at", "fate", "fate_step", "hops")


@dataclass
class PacketLedger:
    """Final fate of every packet copy in one episode."""

    rows: dict[int, list] = field(default_factory=dict)

    def created(self, p: Packet) -> None:
        self.rows[p.id] = [p.id, p.lineage, p.origin, p.created_at, "Buffered", "", 0]

    def resolve(self, p: Packet, fate: str, step: int) -> None:
        row = self.rows[p.id]
        row[4], row[5], row[6] = fate, step, p.hops

    def settle_buffered(self, packets: Iterable[Packet]) -> None:
        for p in packets:
            self.rows[p.id][6] = p.hops

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(LEDGER_COLUMNS)
        for pid in sorted(self.rows):
            w.writerow(self.rows[pid])
        return out.getvalue()
