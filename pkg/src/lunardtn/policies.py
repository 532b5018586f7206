"""Routing policies.

A policy looks at one rover's :class:`LocalView` and returns the
:class:`Directive` list for that rover at this step. Only Greedy receives the
global snapshot; every other policy sees its own buffer and its one-hop
neighborhood.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import gnn
from .marl import NodeView, epsilon_at, observe_state, select_action
from .net import NetworkSnapshot
from .traffic import Buffer, Packet


@dataclass
class Directive:
    target: int
    count: int = 0                                    # FIFO head batch
    spray: list[Packet] = field(default_factory=list)  # Spray-and-Wait copies


@dataclass
class RoutingDecision:
    rover: int
    directives: list[Directive]
    observation: gnn.PaddedGraph | None = None  # learned policy only
    action: int | None = None

    def target(self) -> int:
        return self.directives[0].target if self.directives else self.rover


@dataclass
class LocalView:
    rover: int
    neighbors: list[int]          # ascending, excluding self
    lander: int
    buffer: Buffer
    rate: Callable[[int], int]
    neighbor_full: Callable[[int], bool]
    neighbor_holds: Callable[[int, int], bool]  # (node, lineage) -> copy present
    snapshot: NetworkSnapshot | None = None
    nodes: NodeView | None = None


class Policy:
    name = "base"
    needs_global = False
    needs_forecast = False
    uses_copies = False

    def decide(self, view: LocalView) -> RoutingDecision:
        raise NotImplementedError


def hold(rover: int) -> RoutingDecision:
    return RoutingDecision(rover, [Directive(rover)])


class RandomPolicy(Policy):
    """Uniform next hop over the neighborhood, self included."""

    name = "random"

    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def decide(self, view):
        choices = [view.rover] + view.neighbors
        j = choices[int(self.rng.integers(len(choices)))]
        if j == view.rover:
            return hold(j)
        return RoutingDecision(view.rover, [Directive(j, view.rate(j))])


def initial_copies(n_rovers: int) -> int:
    return max(1, math.ceil(math.sqrt(n_rovers)))


class SprayAndWait(Policy):
    """Binary Spray-and-Wait towards the lander.

    With the lander in range the rover sends head-of-line packets straight to
    it. Otherwise every rover neighbor that has room and lacks a copy of a
    lineage receives half of that packet's remaining copy budget, for packets
    whose counter is still above one.
    """

    name = "snw"
    uses_copies = True

    def decide(self, view):
        me = view.rover
        if view.lander in view.neighbors:
            return RoutingDecision(me, [Directive(view.lander, view.rate(view.lander))])
        live = list(view.buffer.queue)[:view.buffer.forwardable]
        budget = {p.id: p.copies or 1 for p in live}
        out = []
        for j in view.neighbors:
            if j == view.lander or view.neighbor_full(j):
                continue
            cap = view.rate(j)
            chosen = []
            for p in live:
                if len(chosen) >= cap:
                    break
                if budget[p.id] > 1 and not view.neighbor_holds(j, p.lineage):
                    chosen.append(p)
                    budget[p.id] -= budget[p.id] // 2
            if chosen:
                out.append(Directive(j, spray=chosen))
        return RoutingDecision(me, out) if out else hold(me)


def hop_distances(adj: np.ndarray, root: int) -> np.ndarray:
    """Unit-weight shortest-path lengths to ``root`` (-1 when disconnected)."""
    n = len(adj)
    dist = np.full(n, -1)
    dist[root] = 0
    q = deque([root])
    while q:
        u = q.popleft()
        for v in np.flatnonzero(adj[u]):
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                q.append(v)
    return dist


def greedy_next_hop(snapshot: NetworkSnapshot, rover: int) -> int | None:
    """Lowest-id neighbor on a minimum-hop path to the lander, if any."""
    dist = hop_distances(snapshot.adjacency, snapshot.lander)
    if dist[rover] <= 0:
        return None
    for j in snapshot.neighbors(rover):
        if dist[j] == dist[rover] - 1:
            return j
    return None


class GreedyForwarding(Policy):
    """Shortest path on the current snapshot; hold when the lander is unreachable."""

    name = "greedy"
    needs_global = True

    def decide(self, view):
        j = greedy_next_hop(view.snapshot, view.rover)
        if j is None:
            return hold(view.rover)
        return RoutingDecision(view.rover, [Directive(j, view.rate(j))])


class GATMARLPolicy(Policy):
    """Decentralized execution of the shared GAT Q-network.

    ``epsilon`` follows the trainer schedule while learning and is zero once
    frozen. At ``epsilon >= 1`` the network is not evaluated at all.
    """

    name = "gatmarl"
    needs_forecast = True

    def __init__(self, params: gnn.Params, rng: np.random.Generator | None = None,
                 epsilon: float = 0.0):
        self.params = params
        self.rng = rng or np.random.default_rng(0)
        self.epsilon = epsilon

    def decide(self, view):
        obs = observe_state(view.rover, view.neighbors, view.lander, view.nodes,
                            self.params.dims.n_max)
        if self.epsilon >= 1.0:
            q = np.zeros(len(obs.valid))
        else:
            q, _ = gnn.forward(self.params, obs)
        a = select_action(q, obs.valid, self.epsilon, self.rng)
        j = obs.node_ids[a]
        if j == view.rover:
            d = hold(j)
        else:
            d = RoutingDecision(view.rover, [Directive(j, view.rate(j))])
        d.observation, d.action = obs, a
        return d

    def schedule(self, step: int, cfg) -> None:
        self.epsilon = epsilon_at(step, cfg)


POLICY_NAMES = ("random", "snw", "greedy", "gatmarl")
