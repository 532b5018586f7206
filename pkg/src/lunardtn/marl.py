"""Observation, reward and Double-DQN training around the GAT Q-network.

Training is centralized: every rover's transitions go into one replay buffer
and update one shared parameter set. Transitions are packet-centric, so the
next state of a forward is observed at the node that received the batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import gnn
from .errors import CapacityError, ConfigError, InsufficientData
from .gnn import PaddedGraph, Params

FEATURE_SCALE = 10.0


@dataclass(frozen=True)
class RewardConfig:
    r_deliver: float = 10.0
    r_conn: float = 2.0
    r_ttl: float = 3.0
    r_nottl: float = -2.0
    r_usage: float = -3.0
    r_hold: float = -0.2
    r_fwd: float = -0.5
    alpha_ttl: float = 1.0
    alpha_b: float = 1.0

    def __post_init__(self):
        for name in ("r_nottl", "r_usage", "r_hold", "r_fwd"):
            if getattr(self, name) > 0:
                raise ConfigError(f"{name} must be <= 0")
        for name in ("r_ttl", "r_deliver", "r_conn"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.alpha_ttl <= 0 or self.alpha_b <= 0:
            raise ConfigError("reward steepness must be > 0")


@dataclass(frozen=True)
class TrainerConfig:
    learning_rate: float = 1e-3
    gamma: float = 0.6
    epsilon_start: float = 1.0
    epsilon_decay: float = 1e-3   # per decision step, exponential
    epsilon_min: float = 0.05
    batch_size: int = 64
    target_sync: int = 500        # train steps between target refreshes
    replay_capacity: int = 50_000
    warmup: int = 10_000          # random-action experiences before the first sweep
    initial_sweep: int = 1000     # gradient steps right after warm-up
    grad_clip: float = 0.0        # global-norm clip, 0 disables

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if not 0 <= self.gamma < 1:
            raise ConfigError("gamma must be in [0, 1)")
        if not 0 <= self.epsilon_min <= self.epsilon_start <= 1:
            raise ConfigError("need 0 <= epsilon_min <= epsilon_start <= 1")
        if self.epsilon_decay < 0 or self.batch_size < 1 or self.target_sync < 1:
            raise ConfigError("bad trainer schedule")


def epsilon_at(step: int, cfg: TrainerConfig) -> float:
    return max(cfg.epsilon_min, cfg.epsilon_start * math.exp(-cfg.epsilon_decay * step))


# -- observation --------------------------------------------------------------

@dataclass
class NodeView:
    """What each node shares with its one-hop neighbors at one step.

    Arrays are indexed by node id (rovers, then the lander).
    """

    ttl: np.ndarray            # forecast lander contacts, lander = t_max
    occupancy: np.ndarray      # packets buffered, lander = 0
    region_dist: np.ndarray    # meters from sub-region centroid to lander
    lander_dist: np.ndarray    # meters from node to lander
    lander_link: np.ndarray    # bool, node currently linked to the lander
    capacity: int
    t_max: int
    diagonal: float


def node_features(n: int, me: int, lander: int, view: NodeView) -> np.ndarray:
    s = FEATURE_SCALE
    return np.array([
        s * (n == me),
        s * (n == lander),
        s * bool(view.lander_link[n]),
        s * min(view.ttl[n], view.t_max) / view.t_max,
        s * min(view.occupancy[n], view.capacity) / view.capacity,
        s * min(view.region_dist[n] / view.diagonal, 1.0),
        s * min(view.lander_dist[n] / view.diagonal, 1.0),
    ])


def observe_state(rover: int, neighbors: list[int], lander: int, view: NodeView,
                  n_max: int = 32) -> PaddedGraph:
    """Padded local graph: self in slot 0, then neighbors by ascending id.

    The adjacency is a star around the rover with self-loops. When at least
    one neighbor has a non-zero TTL, neighbors with TTL 0 are masked out.
    """
    others = sorted(n for n in neighbors if n != rover)
    nodes = [rover] + others
    if len(nodes) > n_max:
        raise CapacityError(f"rover {rover} sees {len(nodes)} nodes, n_max is {n_max}")
    feats = np.zeros((n_max, 7))
    for slot, n in enumerate(nodes):
        feats[slot] = node_features(n, rover, lander, view)
    valid = np.zeros(n_max, dtype=bool)
    valid[:len(nodes)] = True
    if any(view.ttl[n] > 0 for n in others):
        for slot, n in enumerate(nodes[1:], start=1):
            if view.ttl[n] <= 0:
                valid[slot] = False
    adj = np.zeros((n_max, n_max), dtype=bool)
    k = len(nodes)
    adj[0, :k] = adj[:k, 0] = True
    adj[np.arange(k), np.arange(k)] = True
    adj &= valid[:, None] & valid[None, :]
    return PaddedGraph(feats, adj, valid, 0, tuple(nodes))


# -- reward ---------------------------------------------------------------------

def _curve(u: float, alpha: float) -> float:
    return (10.0 ** (alpha * u) - 1.0) / (10.0 ** alpha - 1.0)


def ttl_term(ttl: float, cfg: RewardConfig, t_max: int) -> float:
    if ttl <= 0:
        return cfg.r_nottl
    return cfg.r_ttl * _curve(min(ttl, t_max) / t_max, cfg.alpha_ttl)


def buffer_term(occupancy: int, capacity: int, cfg: RewardConfig) -> float:
    return cfg.r_usage * _curve(occupancy / capacity, cfg.alpha_b)


def compute_reward(sender: int, target: int, lander: int, view: NodeView, cfg: RewardConfig) -> float:
    """Composite reward for sending the head-of-line batch from ``sender`` to ``target``."""
    if target == lander:
        r = cfg.r_ttl + cfg.r_deliver
    else:
        r = buffer_term(int(view.occupancy[target]), view.capacity, cfg)
        r += ttl_term(view.ttl[target], cfg, view.t_max)
        r += cfg.r_hold if target == sender else cfg.r_fwd
    if target == lander or view.lander_link[target]:
        r += cfg.r_conn
    return float(r)


def select_action(q: np.ndarray, valid: np.ndarray, epsilon: float,
                  rng: np.random.Generator) -> int:
    idx = np.flatnonzero(valid)
    if len(idx) == 0:
        raise ValueError("no valid action")
    if len(idx) > 1 and rng.random() < epsilon:
        return int(idx[rng.integers(len(idx))])
    masked = np.where(valid, q, -np.inf)
    return int(np.argmax(masked))


# -- replay -----------------------------------------------------------------------

@dataclass
class Experience:
    state: PaddedGraph
    action: int
    reward: float
    next_state: PaddedGraph | None
    terminal: bool

    def __post_init__(self):
        if not self.state.valid[self.action]:
            raise ValueError("action was not valid in the recorded state")


class ReplayBuffer:
    """Fixed-capacity ring of experiences, overwriting the oldest."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.items: list[Experience] = []
        self._next = 0

    def __len__(self) -> int:
        return len(self.items)

    def append(self, exp: Experience) -> None:
        if len(self.items) < self.capacity:
            self.items.append(exp)
        else:
            self.items[self._next] = exp
        self._next = (self._next + 1) % self.capacity

    def sample_indices(self, k: int, rng: np.random.Generator) -> np.ndarray:
        return rng.integers(len(self.items), size=k)


def record_experience(replay: ReplayBuffer, state: PaddedGraph, action: int, reward: float,
                      next_state: PaddedGraph | None, terminal: bool) -> Experience:
    nxt = None if terminal or next_state is None else next_state.compact()
    exp = Experience(state.compact(), action, reward, nxt, terminal)
    replay.append(exp)
    return exp


# -- Double DQN -------------------------------------------------------------------

def td_target(rewards, q_next_online, q_next_target, valid_next, terminal, gamma: float) -> np.ndarray:
    """``r + gamma * Q_target(s', argmax_a Q_online(s', a))``, or ``r`` when terminal."""
    rewards = np.asarray(rewards, dtype=float)
    terminal = np.asarray(terminal, dtype=bool)
    online = np.where(valid_next, q_next_online, -np.inf)
    best = np.argmax(online, axis=1)
    boot = np.take_along_axis(np.asarray(q_next_target, dtype=float), best[:, None], 1)[:, 0]
    boot = np.where(terminal, 0.0, boot)
    return rewards + gamma * boot


@dataclass
class DDQNTrainer:
    """Online/target parameter pair and the centralized replay buffer."""

    params: Params
    config: TrainerConfig = field(default_factory=TrainerConfig)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    dropout_rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(1))
    target: Params | None = None
    replay: ReplayBuffer | None = None
    steps: int = 0
    anneal_steps: int = 0  # simulation steps spent annealing epsilon

    def __post_init__(self):
        if self.target is None:
            self.target = self.params.copy()
        if self.replay is None:
            self.replay = ReplayBuffer(self.config.replay_capacity)

    def loss_and_grad(self, batch: list[Experience]):
        states = [e.state for e in batch]
        nexts = [e.next_state if e.next_state is not None else e.state for e in batch]
        actions = np.array([e.action for e in batch])
        x, adj, valid = gnn.stack_graphs(states)
        q, cache = gnn.forward_batch(self.params, x, adj, valid, training=True, rng=self.dropout_rng)
        xn, adjn, validn = gnn.stack_graphs(nexts)
        qn_online, _ = gnn.forward_batch(self.params, xn, adjn, validn)
        qn_target, _ = gnn.forward_batch(self.target, xn, adjn, validn)
        y = td_target([e.reward for e in batch], qn_online, qn_target, validn,
                      [e.terminal for e in batch], self.config.gamma)
        rows = np.arange(len(batch))
        err = q[rows, actions] - y
        loss = float(np.mean(err ** 2))
        dq = np.zeros_like(q)
        dq[rows, actions] = 2.0 * err / len(batch)
        return loss, gnn.backward(self.params, cache, dq)

    def apply(self, grad: Params) -> None:
        lr = self.config.learning_rate
        scale = 1.0
        if self.config.grad_clip > 0:
            norm = math.sqrt(sum(float((g.astype(float) ** 2).sum()) for g in grad.values()))
            if norm > self.config.grad_clip:
                scale = self.config.grad_clip / norm
        if lr == 0:
            return
        for k, g in grad.items():
            self.params[k] -= (lr * scale) * g

    def train_step(self, batch: list[Experience] | None = None) -> float:
        """One SGD step on a uniform replay sample (or on ``batch``)."""
        if batch is None:
            if len(self.replay) < self.config.batch_size:
                raise InsufficientData(
                    f"replay holds {len(self.replay)} < batch {self.config.batch_size}")
            idx = self.replay.sample_indices(self.config.batch_size, self.rng)
            batch = [self.replay.items[i] for i in idx]
        loss, grad = self.loss_and_grad(batch)
        self.apply(grad)
        self.steps += 1
        if self.steps % self.config.target_sync == 0:
            self.sync_target()
        return loss

    def sync_target(self) -> None:
        self.target = self.params.copy()
