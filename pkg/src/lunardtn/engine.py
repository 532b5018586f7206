"""Episode driver, training curriculum and Monte Carlo evaluation.

Routing never feeds back into motion, so an episode's rover trajectories are
computed once up front (:func:`plan_motion`) and shared by every policy run on
the same scenario. Per step the driver then

1. places the rovers at their positions for this step,
2. rebuilds the communication graph,
3. generates packets while exploration is still running,
4. lets each rover decide, in ascending id order, and applies its transfers
   immediately (packets received this step wait until the next one),
5. scores lander arrivals by lineage (first copy unique, later copies
   duplicates),
6. records transitions and trains when the learned policy is in a training
   phase,
7. checks the per-link flow bound and the buffer bound.

When every region is classified, packet generation stops, rovers finish
driving home and the episode ends once all buffers are empty or after
``drain_factor`` times the exploration length.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from . import seeding
from .errors import ConfigError, ConstraintViolation
from .explore import ExplorationConfig, advance_rover, init_rovers
from .gnn import Dims, Params
from .marl import (DDQNTrainer, NodeView, RewardConfig, TrainerConfig, compute_reward,
                   epsilon_at, observe_state, record_experience)
from .net import LinkParams, build_snapshot, count_topology_changes, lander_coverage
from .policies import (GATMARLPolicy, GreedyForwarding, LocalView, Policy, RandomPolicy,
                       SprayAndWait, initial_copies)
from .traffic import Buffer, PacketFactory, PacketLedger, deliver_batch, dequeue_batch, enqueue
from .world import GridMap, ObstacleModel, generate_map

PHASES = ("collect", "anneal", "frozen")


@dataclass(frozen=True)
class EpisodeConfig:
    width: int = 40
    height: int = 40
    rho: float = 1.0
    obstacles: ObstacleModel = field(default_factory=ObstacleModel)
    n_rovers: int = 3
    link: LinkParams = field(default_factory=LinkParams)
    explore: ExplorationConfig = field(default_factory=ExplorationConfig)
    gen_interval: int = 1
    buffer_capacity: int = 50
    t_max: int = 100
    drain_factor: int = 3
    max_steps: int = 0      # hard cap on episode length, 0 = none
    seed: int = 0           # region partition seed

    def __post_init__(self):
        if self.n_rovers < 1:
            raise ConfigError("need at least one rover")
        if self.gen_interval < 1 or self.buffer_capacity < 1 or self.t_max < 1:
            raise ConfigError("gen_interval, buffer_capacity and t_max must be >= 1")
        if self.drain_factor < 1 or self.max_steps < 0:
            raise ConfigError("drain_factor must be >= 1 and max_steps >= 0")


@dataclass
class EpisodeMetrics:
    policy: str
    seed: int
    rovers: int
    created: int = 0
    copies: int = 0
    delivered_unique: int = 0
    delivered_duplicates: int = 0
    dropped: int = 0
    still_buffered: int = 0
    topology_changes: int = 0
    steps: int = 0
    explore_steps: int = 0

    @property
    def delivery_ratio(self) -> float:
        return self.delivered_unique / self.created if self.created else 0.0

    def row(self) -> dict:
        return {
            "policy": self.policy, "seed": self.seed, "rovers": self.rovers,
            "created": self.created, "delivered_unique": self.delivered_unique,
            "duplicates": self.delivered_duplicates, "dropped": self.dropped,
            "ratio": round(self.delivery_ratio, 6), "topology_changes": self.topology_changes,
            "steps": self.steps,
        }


RESULT_COLUMNS = ("policy", "seed", "rovers", "created", "delivered_unique", "duplicates",
                  "dropped", "ratio", "topology_changes", "steps")


# -- motion -----------------------------------------------------------------------

@dataclass
class MotionPlan:
    """Rover trajectories for one scenario, independent of routing.

    Index ``t`` holds the state after ``t`` motion steps (``t = 0`` is the
    start on the lander). ``active[s]`` is False when the rover sat parked
    during step ``s``; ``objective[s]`` is the objective it was driving to.
    """

    gm: GridMap
    coverage: np.ndarray
    centroids: list[tuple[float, float]]
    positions: np.ndarray   # (T+1, R, 2)
    active: np.ndarray      # (T+1, R) bool
    objective: np.ndarray   # (T+1, R) int
    next_objective: np.ndarray  # (T+1, R) int, first objective of the forecast window
    parked: np.ndarray      # (T+1, R) bool
    explore_steps: int
    _ttl: dict = field(default_factory=dict, repr=False)

    @property
    def horizon_steps(self) -> int:
        return len(self.positions) - 1

    def positions_at(self, t: int) -> list[tuple[int, int]]:
        t = min(t, self.horizon_steps)
        return [tuple(int(v) for v in p) for p in self.positions[t]]

    def ttl(self, horizon: int, t_max: int) -> np.ndarray:
        """Lander-contact forecast of every rover at every step (see :func:`ttl_series`)."""
        key = (horizon, t_max)
        if key not in self._ttl:
            self._ttl[key] = ttl_series(self, horizon, t_max)
        return self._ttl[key]

    def ttl_at(self, t: int, horizon: int, t_max: int) -> np.ndarray:
        series = self.ttl(horizon, t_max)
        return series[min(t, len(series) - 1)]


def plan_motion(cfg: EpisodeConfig, gm: GridMap | None = None) -> MotionPlan:
    gm = gm or generate_map(cfg.obstacles, cfg.width, cfg.height, cfg.rho)
    rovers = init_rovers(gm, cfg.n_rovers, cfg.explore, np.random.default_rng(cfg.seed))
    coverage = lander_coverage(gm, cfg.link)
    R = cfg.n_rovers

    def snapshot():
        pos = [r.position for r in rovers]
        nxt = [r.objective_index if r.objective is not None else r.objective_index + 1
               for r in rovers]
        return pos, nxt, [r.parked for r in rovers]

    pos, nxt, parked = snapshot()
    positions, nexts, parks = [pos], [nxt], [parked]
    active, objective = [[False] * R], [[0] * R]
    explore_steps = None
    limit = 50 * gm.n_cells
    s = 0
    while not all(r.parked for r in rovers):
        s += 1
        if s > limit:
            raise RuntimeError("exploration failed to terminate")
        act = [advance_rover(r, gm, cfg.explore) for r in rovers]
        pos, nxt, parked = snapshot()
        positions.append(pos)
        nexts.append(nxt)
        parks.append(parked)
        active.append(act)
        objective.append([r.objective_index for r in rovers])
        if explore_steps is None and all(r.finished for r in rovers):
            explore_steps = s
    if explore_steps is None:
        explore_steps = s
    return MotionPlan(gm, coverage, [r.region_centroid for r in rovers],
                      np.array(positions, dtype=int).reshape(-1, R, 2),
                      np.array(active, dtype=bool), np.array(objective, dtype=int),
                      np.array(nexts, dtype=int), np.array(parks, dtype=bool),
                      max(1, explore_steps))


def ttl_series(plan: MotionPlan, horizon: int, t_max: int) -> np.ndarray:
    """Count future lander-contact steps inside each rover's forecast window.

    This reads the realized trajectory; since rovers follow their plans
    unperturbed it equals what :func:`~lunardtn.explore.forecast_lander_contacts`
    computes onboard.
    """
    T = plan.horizon_steps
    R = plan.positions.shape[1]
    out = np.zeros((T + 1, R), dtype=int)
    cov = plan.coverage
    for r in range(R):
        xs, ys = plan.positions[:, r, 0], plan.positions[:, r, 1]
        contact = cov[ys, xs].astype(int)
        act = plan.active[:, r]
        obj = plan.objective[:, r]
        for t in range(T + 1):
            if plan.parked[t, r]:
                out[t, r] = t_max if contact[t] else 0
                continue
            limit = plan.next_objective[t, r] + horizon - 1
            s, count = t + 1, 0
            while s <= T and act[s] and obj[s] <= limit:
                count += contact[s]
                s += 1
            if s > T or not act[s]:
                # parked inside the window; the rover sits at its last position
                count += t_max if contact[min(s, T)] else 0
            out[t, r] = count
    return out


# -- episode -------------------------------------------------------------------------

@dataclass
class EpisodeResult:
    metrics: EpisodeMetrics
    ledger: PacketLedger | None = None
    train_log: list[dict] = field(default_factory=list)


@dataclass
class _Pending:
    state: object
    action: int
    reward: float
    receiver: int
    terminal: bool


def run_episode(cfg: EpisodeConfig, policy: Policy, *, phase: str = "frozen",
                trainer: DDQNTrainer | None = None, reward: RewardConfig | None = None,
                plan: MotionPlan | None = None, horizon: int | None = None,
                label: str | None = None, keep_ledger: bool = False,
                trace: list | None = None,
                on_step: Callable[[int, dict], None] | None = None) -> EpisodeResult:
    """Simulate one exploration episode under ``policy``.

    ``trainer`` must be given when the learned policy runs in the ``collect``
    or ``anneal`` phase; transitions then go into ``trainer.replay`` and, while
    annealing, one gradient step is taken per simulation step.
    """
    if phase not in PHASES:
        raise ValueError(f"unknown phase {phase!r}")
    learning = isinstance(policy, GATMARLPolicy) and phase != "frozen"
    if learning and trainer is None:
        raise ValueError("a trainer is required to learn")
    reward = reward or RewardConfig()
    horizon = horizon or cfg.explore.objective_horizon
    plan = plan or plan_motion(cfg)
    gm = plan.gm
    R, lander = cfg.n_rovers, cfg.n_rovers
    B = cfg.buffer_capacity
    buffers = [Buffer(B) for _ in range(R)]
    occ = np.zeros(R + 1, dtype=int)
    delivered: set[int] = set()
    delivered_copies: dict[int, int] = defaultdict(int)
    factory = PacketFactory()
    ledger = PacketLedger() if keep_ledger else None
    copies0 = initial_copies(R) if policy.uses_copies else None
    m = EpisodeMetrics(label or policy.name, cfg.obstacles.seed, R, explore_steps=plan.explore_steps)
    result = EpisodeResult(m, ledger)
    region_dist = np.array([gm.distance_m(tuple(map(round, c)), gm.lander) for c in plan.centroids]
                           + [0.0])
    lander_dist = np.zeros(R + 1)
    cap = cfg.drain_factor * plan.explore_steps
    if cfg.max_steps:
        cap = min(cap, cfg.max_steps)
    pending: list[_Pending] = []
    prev = None

    if isinstance(policy, GATMARLPolicy):
        if phase == "collect":
            policy.epsilon = 1.0
        elif phase == "frozen":
            policy.epsilon = 0.0

    def settle_drops(t):
        for b in buffers:
            for p in b.dropped:
                m.dropped += 1
                if ledger:
                    ledger.resolve(p, "Dropped", t)
            b.dropped.clear()

    def land(pkts, t):
        for p in pkts:
            p.hops += 1
            if p.lineage in delivered:
                m.delivered_duplicates += 1
            else:
                delivered.add(p.lineage)
                m.delivered_unique += 1
            delivered_copies[p.lineage] += p.copies or 1
            if ledger:
                ledger.resolve(p, "Delivered", t)

    t = 0
    while True:
        positions = plan.positions_at(t)
        snap = build_snapshot(positions, gm, cfg.link, t, plan.coverage)
        m.topology_changes += count_topology_changes(prev, snap)
        prev = snap
        for b in buffers:
            b.new_step()

        if t < plan.explore_steps:
            if t % cfg.gen_interval == 0:
                for r in range(R):
                    p = factory.new(r, t, copies0)
                    m.created += 1
                    if ledger:
                        ledger.created(p)
                    enqueue(buffers[r], p)
            settle_drops(t)
        for r in range(R):
            occ[r] = len(buffers[r])

        nodes = None
        if policy.needs_forecast:
            ttl = np.append(plan.ttl_at(t, horizon, cfg.t_max), cfg.t_max)
            for r in range(R):
                lander_dist[r] = gm.distance_m(positions[r], gm.lander)
            link = snap.adjacency[:, lander].copy()
            link[lander] = True
            nodes = NodeView(ttl, occ, region_dist, lander_dist, link, B, cfg.t_max, gm.diagonal_m)

        if learning and pending:
            for pe in pending:
                nxt = None
                if not pe.terminal:
                    nxt = observe_state(pe.receiver, snap.neighbors(pe.receiver), lander, nodes,
                                        policy.params.dims.n_max)
                record_experience(trainer.replay, pe.state, pe.action, pe.reward, nxt, pe.terminal)
            pending.clear()

        flows: dict[tuple[int, int], int] = defaultdict(int)
        step_log = [] if trace is not None else None
        if learning and phase == "anneal":
            policy.epsilon = epsilon_at(trainer.anneal_steps, trainer.config)

        for r in range(R):
            buf = buffers[r]
            if buf.forwardable == 0:
                continue
            view = LocalView(
                rover=r, neighbors=snap.neighbors(r), lander=lander, buffer=buf,
                rate=lambda j, r=r: snap.rate(r, j),
                neighbor_full=lambda j: buffers[j].full,
                neighbor_holds=lambda j, lin: any(q.lineage == lin for q in buffers[j].queue),
                snapshot=snap if policy.needs_global else None, nodes=nodes)
            d = policy.decide(view)
            if learning:
                j = d.target()
                pending.append(_Pending(d.observation, d.action,
                                        compute_reward(r, j, lander, nodes, reward), j, j == lander))
            for dv in d.directives:
                j = dv.target
                if j == r:
                    continue
                if dv.spray:
                    batch = []
                    for p in dv.spray:
                        child = p.copies // 2
                        p.copies -= child
                        c = factory.copy_of(p, child)
                        m.copies += 1
                        if ledger:
                            ledger.created(c)
                        batch.append(c)
                else:
                    batch = dequeue_batch(buf, dv.count)
                flows[(r, j)] += len(batch)
                if j == lander:
                    land(batch, t)
                else:
                    deliver_batch(batch, buffers[j])
                if step_log is not None:
                    step_log.append({"rover": r, "target": j, "packets": len(batch),
                                     "spray": bool(dv.spray)})
            settle_drops(t)
            for k in range(R):
                occ[k] = len(buffers[k])

        for (i, j), f in flows.items():
            if f > snap.rate(i, j):
                raise ConstraintViolation(f"step {t}: flow {i}->{j} = {f} exceeds rate {snap.rate(i, j)}")
        for r, b in enumerate(buffers):
            if len(b) > B:
                raise ConstraintViolation(f"step {t}: rover {r} buffer holds {len(b)} > {B}")

        if learning and phase == "anneal":
            trainer.anneal_steps += 1
            if len(trainer.replay) >= trainer.config.batch_size:
                loss = trainer.train_step()
                result.train_log.append({"step": trainer.steps, "epsilon": round(policy.epsilon, 6),
                                         "loss": loss, "replay_fill": len(trainer.replay)})

        if trace is not None:
            trace.append({"step": t, "edges": sorted([list(e) for e in snap.edges]),
                          "positions": [list(p) for p in positions],
                          "decisions": step_log, "buffers": [len(b) for b in buffers],
                          "flows": [[i, j, f] for (i, j), f in sorted(flows.items())],
                          "created": m.created, "copies": m.copies, "delivered_unique": m.delivered_unique,
                          "duplicates": m.delivered_duplicates, "dropped": m.dropped})
        if on_step is not None:
            on_step(t, {"buffers": buffers, "delivered_copies": delivered_copies,
                        "snapshot": snap, "flows": flows, "metrics": m})
        t += 1
        done_exploring = t >= plan.explore_steps
        if done_exploring and all(len(b) == 0 for b in buffers):
            break
        if t >= cap:
            break

    if learning and pending:
        # the episode ended before the receivers could observe again
        for pe in pending:
            record_experience(trainer.replay, pe.state, pe.action, pe.reward, None, True)
    m.steps = t
    m.still_buffered = sum(len(b) for b in buffers)
    if ledger:
        for b in buffers:
            ledger.settle_buffered(b)
    total = m.created + m.copies
    accounted = m.delivered_unique + m.delivered_duplicates + m.dropped + m.still_buffered
    if total != accounted:
        raise ConstraintViolation(f"packet accounting: {total} copies vs {accounted} resolved")
    return result


# -- scenarios, policies ----------------------------------------------------------------

@dataclass(frozen=True)
class ScenarioSpace:
    """Ranges scenarios are drawn from (square maps, inclusive bounds)."""

    min_size: int = 40
    max_size: int = 40
    min_rovers: int = 3
    max_rovers: int = 3


def draw_scenario(base: EpisodeConfig, space: ScenarioSpace, master: int, phase: str,
                  index: int) -> EpisodeConfig:
    """Episode config for ``(phase, index)``; identical for every policy."""
    key = (seeding.PHASES[phase], index)
    g = seeding.rng(master, "scenario", *key)
    size = int(g.integers(space.min_size, space.max_size + 1))
    rovers = int(g.integers(space.min_rovers, space.max_rovers + 1))
    obstacles = replace(base.obstacles, seed=seeding.seed(master, "map", *key))
    return replace(base, width=size, height=size, n_rovers=rovers, obstacles=obstacles,
                   seed=seeding.seed(master, "kmeans", *key))


def make_policy(name: str, master: int = 0, key: tuple[int, ...] = (),
                params: Params | None = None) -> Policy:
    rng = seeding.rng(master, "policy", *key)
    if name == "random":
        return RandomPolicy(rng)
    if name == "snw":
        return SprayAndWait()
    if name == "greedy":
        return GreedyForwarding()
    if name == "gatmarl":
        if params is None:
            raise ValueError("gatmarl needs trained parameters")
        return GATMARLPolicy(params, rng)
    raise ValueError(f"unknown policy {name!r}")


# -- curriculum ---------------------------------------------------------------------

@dataclass
class CurriculumResult:
    params: Params
    trainer: DDQNTrainer
    episodes: list[tuple[str, EpisodeMetrics]]
    train_log: list[dict]
    frozen_digest: tuple[str, str] = ("", "")


def run_curriculum(base: EpisodeConfig, space: ScenarioSpace, master: int,
                   episodes: tuple[int, int, int] = (10, 10, 10),
                   trainer_cfg: TrainerConfig | None = None,
                   reward: RewardConfig | None = None, dims: Dims | None = None,
                   log: Callable[[str], None] | None = None) -> CurriculumResult:
    """Collect with random actions, anneal epsilon while training, then evaluate frozen.

    Collection continues past its episode count until the replay holds
    ``warmup`` transitions; an initial sweep of gradient steps follows.
    """
    trainer_cfg = trainer_cfg or TrainerConfig()
    params = Params.init(dims or Dims(), seed=seeding.seed(master, "init"))
    trainer = DDQNTrainer(params, trainer_cfg, rng=seeding.rng(master, "replay"),
                          dropout_rng=seeding.rng(master, "dropout"))
    history: list[tuple[str, EpisodeMetrics]] = []
    train_log: list[dict] = []
    say = log or (lambda s: None)

    def one(phase, i):
        cfg = draw_scenario(base, space, master, phase, i)
        pol = GATMARLPolicy(trainer.params, seeding.rng(master, "policy", seeding.PHASES[phase], i))
        res = run_episode(cfg, pol, phase=phase, trainer=trainer, reward=reward)
        history.append((phase, res.metrics))
        train_log.extend(res.train_log)
        say(f"[{phase}] episode {i}: rovers={cfg.n_rovers} size={cfg.width} "
            f"ratio={res.metrics.delivery_ratio:.3f} replay={len(trainer.replay)}")
        return res

    i = 0
    while i < episodes[0] or len(trainer.replay) < trainer_cfg.warmup:
        one("collect", i)
        i += 1
    if len(trainer.replay) >= trainer_cfg.batch_size:
        for _ in range(trainer_cfg.initial_sweep):
            loss = trainer.train_step()
            train_log.append({"step": trainer.steps, "epsilon": 1.0, "loss": loss,
                              "replay_fill": len(trainer.replay)})
        trainer.sync_target()
    for i in range(episodes[1]):
        one("anneal", i)
    before = trainer.params.digest()
    for i in range(episodes[2]):
        one("frozen", i)
    return CurriculumResult(trainer.params, trainer, history, train_log,
                            (before, trainer.params.digest()))


# -- Monte Carlo --------------------------------------------------------------------

def _eval_one(args):
    base, space, master, i, policies, params, horizons, tracing = args
    cfg = draw_scenario(base, space, master, "eval", i)
    plan = plan_motion(cfg)
    rows, traces = [], []
    for name in policies:
        for h in (horizons if name == "gatmarl" else (None,)):
            pol = make_policy(name, master, (seeding.PHASES["eval"], i), params)
            label = name if h is None or len(horizons) == 1 else f"{name}_o{h}"
            trace = [] if tracing else None
            res = run_episode(cfg, pol, plan=plan, horizon=h, label=label, trace=trace)
            rows.append(res.metrics)
            if tracing:
                traces.append({"policy": label, "episode": i, "horizon": h,
                               "metrics": res.metrics.row(), "steps": trace})
    return rows, traces


def run_monte_carlo(base: EpisodeConfig, space: ScenarioSpace, master: int, n_episodes: int,
                    policies: tuple[str, ...], params: Params | None = None,
                    horizons: tuple[int, ...] | None = None, jobs: int = 1,
                    log: Callable[[str], None] | None = None,
                    traces: list | None = None) -> list[EpisodeMetrics]:
    """Run every policy on the same ``n_episodes`` scenarios (frozen, no learning).

    With ``traces`` given, one step-by-step record per (policy, episode) is
    appended to it.
    """
    horizons = horizons or (base.explore.objective_horizon,)
    tasks = [(base, space, master, i, tuple(policies), params, tuple(horizons), traces is not None)
             for i in range(n_episodes)]
    if jobs > 1 and n_episodes > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(jobs) as ex:
            chunks = list(ex.map(_eval_one, tasks))
    else:
        chunks = []
        for task in tasks:
            chunks.append(_eval_one(task))
            if log:
                log(f"[eval] episode {task[3]}: " + " ".join(
                    f"{mm.policy}={mm.delivery_ratio:.3f}" for mm in chunks[-1][0]))
    if traces is not None:
        for _, tr in chunks:
            traces.extend(tr)
    return [mm for rows, _ in chunks for mm in rows]


SUMMARY_FIELDS = ("created", "delivered_unique", "delivered_duplicates", "dropped",
                  "still_buffered", "delivery_ratio", "topology_changes", "steps")


def summarize(rows: list[EpisodeMetrics]) -> dict:
    """Mean and population standard deviation of each metric, per policy."""
    out: dict[str, dict] = {}
    by: dict[str, list[EpisodeMetrics]] = defaultdict(list)
    for r in rows:
        by[r.policy].append(r)
    for name, items in by.items():
        stats = {"episodes": len(items)}
        for f in SUMMARY_FIELDS:
            vals = np.array([getattr(r, f) for r in items], dtype=float)
            stats[f] = {"mean": float(vals.mean()), "std": float(vals.std())}
        out[name] = stats
    return out
