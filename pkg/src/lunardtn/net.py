"""Per-step communication graph between rovers and the lander.

Node ids ``0 .. n_rovers-1`` are rovers; the lander is node ``n_rovers``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .world import Cell, GridMap


@dataclass(frozen=True)
class LinkParams:
    d_max_r2r: float = 10.0   # meters
    d_max_r2l: float = 15.0   # meters
    rate_r2r_max: int = 2     # packets per step
    rate_r2l_max: int = 4

    def __post_init__(self):
        if self.rate_r2l_max <= self.rate_r2r_max:
            raise ConfigError("rover-to-lander rate must exceed rover-to-rover rate")
        if self.d_max_r2l < self.d_max_r2r:
            raise ConfigError("d_max_r2l must be >= d_max_r2r")
        if self.rate_r2r_max < 1:
            raise ConfigError("rates must be positive integers")


@dataclass(frozen=True)
class NetworkSnapshot:
    n_rovers: int
    positions: tuple[Cell, ...]   # rovers then lander
    edges: frozenset[tuple[int, int]]  # (i, j) with i < j
    params: LinkParams
    step: int = 0
    _adj: np.ndarray = field(default=None, repr=False, compare=False)

    @property
    def lander(self) -> int:
        return self.n_rovers

    @property
    def n_nodes(self) -> int:
        return self.n_rovers + 1

    @property
    def adjacency(self) -> np.ndarray:
        return self._adj

    def has_edge(self, i: int, j: int) -> bool:
        return i != j and bool(self._adj[i, j])

    def neighbors(self, i: int) -> list[int]:
        return [int(j) for j in np.flatnonzero(self._adj[i])]

    def rate(self, i: int, j: int, hold_capacity: int = 0) -> int:
        return link_rate(i, j, self, hold_capacity)

    def to_json(self) -> dict:
        return {"step": self.step, "edges": sorted([list(e) for e in self.edges])}


def link_up(gm: GridMap, a: Cell, b: Cell, d_max: float) -> bool:
    return gm.distance_m(a, b) < d_max and gm.los(a, b)


def lander_coverage(gm: GridMap, params: LinkParams) -> np.ndarray:
    """Cells from which a rover holds a link to the lander."""
    cov = np.zeros((gm.height, gm.width), dtype=bool)
    lx, ly = gm.lander
    reach = int(np.ceil(params.d_max_r2l / gm.rho))
    for y in range(max(0, ly - reach), min(gm.height, ly + reach + 1)):
        for x in range(max(0, lx - reach), min(gm.width, lx + reach + 1)):
            cov[y, x] = link_up(gm, (x, y), gm.lander, params.d_max_r2l)
    return cov


def build_snapshot(positions: list[Cell], gm: GridMap, params: LinkParams, step: int = 0,
                   coverage: np.ndarray | None = None) -> NetworkSnapshot:
    """Edges between every pair of nodes that are in range and in line of sight.

    ``positions`` lists rover cells only; the lander sits at ``gm.lander``.
    A precomputed ``coverage`` grid short-cuts the rover-to-lander test.
    """
    n = len(positions)
    pos = tuple(tuple(p) for p in positions) + (gm.lander,)
    adj = np.zeros((n + 1, n + 1), dtype=bool)
    edges = set()
    for i in range(n):
        for j in range(i + 1, n + 1):
            if j == n:
                x, y = pos[i]
                ok = bool(coverage[y, x]) if coverage is not None else \
                    link_up(gm, pos[i], pos[j], params.d_max_r2l)
            else:
                ok = link_up(gm, pos[i], pos[j], params.d_max_r2r)
            if ok:
                adj[i, j] = adj[j, i] = True
                edges.add((i, j))
    return NetworkSnapshot(n, pos, frozenset(edges), params, step, adj)


def link_rate(i: int, j: int, snap: NetworkSnapshot, hold_capacity: int = 0) -> int:
    """Per-step packet budget on the link ``i -> j``.

    For ``i == j`` (hold) the budget is the holder's whole buffer, passed in as
    ``hold_capacity``; nothing is transmitted.
    """
    if i == j:
        return hold_capacity
    if not snap.has_edge(i, j):
        return 0
    if snap.lander in (i, j):
        return snap.params.rate_r2l_max
    return snap.params.rate_r2r_max


def count_topology_changes(prev: NetworkSnapshot | None, cur: NetworkSnapshot) -> int:
    if prev is None:
        return 0
    if prev.n_rovers != cur.n_rovers:
        raise ValueError("snapshots cover different node sets")
    return int(prev.edges != cur.edges)
