"""Multi-rover frontier exploration.

The team splits the traversable cells with k-means, assigns one sub-region per
rover with the Hungarian method, and each rover then repeatedly picks the
frontier with the lowest ``w1 * distance - w2 * gain`` score, walks an A* path
towards it and senses a square window around itself. A rover whose region is
fully classified drives home to the lander and parks there.

Everything a rover does depends only on its own state and the static map, so a
cloned rover can be stepped forward to forecast lander contacts exactly.
"""

from __future__ import annotations

import copy
import heapq
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .world import NEIGHBORS4, Cell, GridMap, reachable_mask

UNREACHED = -1


@dataclass(frozen=True)
class ExplorationConfig:
    w1: float = 1.0
    w2: float = 0.5
    sensor_radius: int = 2
    objective_horizon: int = 1
    kmeans_iters: int = 100
    kmeans_tol: float = 1e-6


@dataclass
class SubRegion:
    cells: np.ndarray  # (n, 2) int array of (x, y)
    centroid: tuple[float, float]

    def mask(self, width: int, height: int) -> np.ndarray:
        m = np.zeros((height, width), dtype=bool)
        m[self.cells[:, 1], self.cells[:, 0]] = True
        return m


@dataclass
class RoverState:
    id: int
    position: Cell
    region: np.ndarray        # M_r, bool [h, w]
    targets: np.ndarray       # region cells reachable from the lander
    sensed: np.ndarray        # every cell this rover has classified
    region_centroid: tuple[float, float]
    home: Cell
    objective: Cell | None = None
    going_home: bool = False
    planned_path: list[Cell] = field(default_factory=list)
    objective_index: int = 0  # count of objectives selected so far
    remaining: int = 0        # unexplored target cells
    parked: bool = False

    @property
    def explored(self) -> np.ndarray:
        return self.sensed & self.region

    @property
    def finished(self) -> bool:
        return self.remaining == 0

    def clone(self) -> "RoverState":
        c = copy.copy(self)
        c.sensed = self.sensed.copy()
        c.planned_path = list(self.planned_path)
        return c


# -- partitioning -----------------------------------------------------------

def kmeans(points: np.ndarray, k: int, rng: np.random.Generator,
           max_iter: int = 100, tol: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with k-means++ seeding. Returns (labels, centroids)."""
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    centers = np.empty((k, pts.shape[1]))
    centers[0] = pts[rng.integers(n)]
    d2 = ((pts - centers[0]) ** 2).sum(1)
    for j in range(1, k):
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers[j] = pts[idx]
        d2 = np.minimum(d2, ((pts - centers[j]) ** 2).sum(1))

    labels = np.zeros(n, dtype=int)
    for _ in range(max_iter):
        dist = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        labels = dist.argmin(1)
        new = centers.copy()
        for j in range(k):
            members = pts[labels == j]
            if len(members):
                new[j] = members.mean(0)
            else:
                # reseed from the point farthest from its centroid
                far = dist[np.arange(n), labels].argmax()
                new[j] = pts[far]
                labels[far] = j
        shift = np.sqrt(((new - centers) ** 2).sum(1)).max()
        centers = new
        if shift <= tol:
            break
    dist = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
    labels = dist.argmin(1)
    return labels, centers


def partition_kmeans(gm: GridMap, k: int, rng: np.random.Generator,
                     max_iter: int = 100, tol: float = 1e-6) -> list[SubRegion]:
    ys, xs = np.nonzero(~gm.obstacle)
    cells = np.stack([xs, ys], axis=1)
    if k < 1 or len(cells) < k:
        raise ValueError(f"cannot split {len(cells)} traversable cells into {k} regions")
    labels, _ = kmeans(cells, k, rng, max_iter, tol)
    regions = []
    for j in range(k):
        c = cells[labels == j]
        regions.append(SubRegion(c, (float(c[:, 0].mean()), float(c[:, 1].mean()))))
    return regions


def assign_regions_hungarian(rovers: list[Cell], centroids: list[tuple[float, float]]) -> list[int]:
    """Region index for each rover, minimizing total rover-to-centroid distance."""
    if len(rovers) != len(centroids):
        raise ValueError("need exactly one region per rover")
    r = np.asarray(rovers, dtype=float)
    c = np.asarray(centroids, dtype=float)
    cost = np.hypot(r[:, None, 0] - c[None, :, 0], r[:, None, 1] - c[None, :, 1])
    return assignment_from_costs(cost)


def assignment_from_costs(cost: np.ndarray) -> list[int]:
    rows, cols = linear_sum_assignment(cost)
    out = [0] * len(rows)
    for i, j in zip(rows, cols):
        out[int(i)] = int(j)
    return out


# -- search -------------------------------------------------------------------

def plan_path(gm: GridMap, start: Cell, goal: Cell) -> list[Cell]:
    """Shortest 4-connected collision-free path (A*, Manhattan heuristic).

    Returns ``[]`` when the goal cannot be reached. Ties in the open list are
    broken towards the lower ``(x, y)``.
    """
    if not (gm.is_free(start) and gm.is_free(goal)):
        return []
    if start == goal:
        return [start]
    free = gm.free
    gx, gy = goal
    g = {start: 0}
    parent: dict[Cell, Cell] = {}
    openq = [(abs(start[0] - gx) + abs(start[1] - gy), start[0], start[1])]
    closed = set()
    while openq:
        _, x, y = heapq.heappop(openq)
        cur = (x, y)
        if cur in closed:
            continue
        if cur == goal:
            path = [cur]
            while cur in parent:
                cur = parent[cur]
                path.append(cur)
            return path[::-1]
        closed.add(cur)
        gc = g[cur] + 1
        for dx, dy in NEIGHBORS4:
            nx, ny = x + dx, y + dy
            if not (0 <= nx < gm.width and 0 <= ny < gm.height) or not free[ny, nx]:
                continue
            nb = (nx, ny)
            if gc < g.get(nb, 1 << 30):
                g[nb] = gc
                parent[nb] = cur
                heapq.heappush(openq, (gc + abs(nx - gx) + abs(ny - gy), nx, ny))
    return []


def bfs_tree(gm: GridMap, start: Cell) -> tuple[np.ndarray, np.ndarray]:
    """Hop distances and BFS parents (flat index, -1 at the root) from ``start``."""
    w, h = gm.width, gm.height
    dist = np.full((h, w), UNREACHED, dtype=int)
    parent = np.full(h * w, -1, dtype=int)
    if not gm.is_free(start):
        return dist, parent
    free = gm.free
    dist[start[1], start[0]] = 0
    q = deque([start])
    while q:
        x, y = q.popleft()
        d = dist[y, x] + 1
        for dx, dy in NEIGHBORS4:
            nx, ny = x + dx, y + dy
            if 0 <= nx < w and 0 <= ny < h and free[ny, nx] and dist[ny, nx] == UNREACHED:
                dist[ny, nx] = d
                parent[ny * w + nx] = y * w + x
                q.append((nx, ny))
    return dist, parent


def _frontier_mask(rover: RoverState, gm: GridMap, dist: np.ndarray) -> np.ndarray:
    known_free = rover.sensed & ~gm.obstacle
    adj = np.zeros_like(known_free)
    adj[1:, :] |= known_free[:-1, :]
    adj[:-1, :] |= known_free[1:, :]
    adj[:, 1:] |= known_free[:, :-1]
    adj[:, :-1] |= known_free[:, 1:]
    return rover.region & ~rover.sensed & adj & (dist != UNREACHED)


def detect_frontiers(rover: RoverState, gm: GridMap) -> list[Cell]:
    """Unexplored cells of the rover's region bordering known free space.

    Frontiers without a collision-free path from the rover are left out.
    """
    dist, _ = bfs_tree(gm, rover.position)
    ys, xs = np.nonzero(_frontier_mask(rover, gm, dist))
    return sorted((int(x), int(y)) for x, y in zip(xs, ys))


def score_frontier(d: float, n: float, config: ExplorationConfig) -> float:
    return config.w1 * d - config.w2 * n


def information_gain(rover: RoverState, path: list[Cell], radius: int) -> int:
    """Unexplored region cells within ``radius`` (Chebyshev) of any path cell."""
    unexplored = rover.region & ~rover.sensed
    h, w = unexplored.shape
    seen: set[int] = set()
    for x, y in path:
        win = unexplored[max(0, y - radius):y + radius + 1, max(0, x - radius):x + radius + 1]
        if win.any():
            wy, wx = np.nonzero(win)
            oy, ox = max(0, y - radius), max(0, x - radius)
            seen.update(((wy + oy) * w + wx + ox).tolist())
    return len(seen)


def _tree_path(parent: np.ndarray, w: int, goal: Cell) -> list[Cell]:
    idx = goal[1] * w + goal[0]
    out = []
    while idx != -1:
        out.append((idx % w, idx // w))
        idx = parent[idx]
    return out[::-1]


# -- per-rover driver ---------------------------------------------------------

def sense(rover: RoverState, radius: int) -> None:
    x, y = rover.position
    h, w = rover.sensed.shape
    sl = (slice(max(0, y - radius), y + radius + 1), slice(max(0, x - radius), x + radius + 1))
    fresh = rover.targets[sl] & ~rover.sensed[sl]
    rover.remaining -= int(fresh.sum())
    rover.sensed[sl] = True


def select_objective(rover: RoverState, gm: GridMap, config: ExplorationConfig) -> None:
    """Choose the next objective and plan the path to it, or park the rover."""
    rover.objective = None
    rover.planned_path = []
    if rover.finished:
        if rover.position == rover.home:
            rover.parked = True
            return
        rover.going_home = True
        rover.objective = rover.home
        rover.planned_path = plan_path(gm, rover.position, rover.home)
        rover.objective_index += 1
        return

    dist, parent = bfs_tree(gm, rover.position)
    ys, xs = np.nonzero(_frontier_mask(rover, gm, dist))
    best = None
    if len(xs):
        px, py = rover.position
        for x, y in sorted(zip(xs.tolist(), ys.tolist())):
            d = abs(x - px) + abs(y - py)
            n = information_gain(rover, _tree_path(parent, gm.width, (x, y)), config.sensor_radius)
            s = score_frontier(d, n, config)
            if best is None or s < best[0]:
                best = (s, (x, y))
    else:
        # nothing borders known space yet: head for the closest unexplored target
        cand = rover.targets & ~rover.sensed & (dist != UNREACHED)
        ys, xs = np.nonzero(cand)
        order = sorted(zip(dist[ys, xs].tolist(), xs.tolist(), ys.tolist()))
        best = (0.0, (order[0][1], order[0][2]))
    rover.objective = best[1]
    rover.planned_path = plan_path(gm, rover.position, rover.objective)
    rover.objective_index += 1


def _objective_done(rover: RoverState) -> bool:
    if rover.going_home:
        return rover.position == rover.home
    x, y = rover.objective
    return bool(rover.sensed[y, x])


def advance_rover(rover: RoverState, gm: GridMap, config: ExplorationConfig) -> bool:
    """One time step: pick an objective if needed, move one cell, sense.

    Returns False when the rover is parked and did not move.
    """
    if rover.parked:
        return False
    if rover.objective is None:
        select_objective(rover, gm, config)
        if rover.parked:
            return False
    if len(rover.planned_path) > 1:
        rover.planned_path.pop(0)
        rover.position = rover.planned_path[0]
    sense(rover, config.sensor_radius)
    if _objective_done(rover):
        if rover.going_home:
            rover.parked = True
        rover.objective = None
        rover.planned_path = []
    return True


def init_rovers(gm: GridMap, n_rovers: int, config: ExplorationConfig,
                rng: np.random.Generator) -> list[RoverState]:
    """All rovers start on the lander with one k-means region each."""
    regions = partition_kmeans(gm, n_rovers, rng, config.kmeans_iters, config.kmeans_tol)
    starts = [gm.lander] * n_rovers
    assign = assign_regions_hungarian(starts, [r.centroid for r in regions])
    reach = reachable_mask(gm, gm.lander)
    rovers = []
    for i in range(n_rovers):
        reg = regions[assign[i]]
        region = reg.mask(gm.width, gm.height)
        targets = region & reach
        r = RoverState(i, gm.lander, region, targets, np.zeros_like(region),
                       reg.centroid, gm.lander, remaining=int(targets.sum()))
        sense(r, config.sensor_radius)
        rovers.append(r)
    return rovers


def step_exploration(rovers: list[RoverState], gm: GridMap, config: ExplorationConfig) -> bool:
    """Advance every rover by one cell. Returns True once every region is classified."""
    for r in rovers:
        advance_rover(r, gm, config)
    return all(r.finished for r in rovers)


# -- lander-contact forecast --------------------------------------------------

def window_limit(rover: RoverState, horizon: int) -> int:
    """Index of the last objective inside the forecast window."""
    nxt = rover.objective_index if rover.objective is not None else rover.objective_index + 1
    return nxt + horizon - 1


def forecast_lander_contacts(rover: RoverState, gm: GridMap, coverage: np.ndarray,
                             horizon: int, config: ExplorationConfig | None = None,
                             t_max: int = 100) -> int:
    """Number of future steps with a lander link over the next ``horizon`` objectives.

    ``coverage`` marks the cells that currently hold a link to the lander. A
    cloned rover is stepped forward with the same exploration logic, so the
    forecast is exact when the real rover is left unperturbed. A rover that
    ends parked within the window contributes ``t_max`` steps of parking.
    """
    config = config or ExplorationConfig()
    if rover.parked:
        return t_max if coverage[rover.position[1], rover.position[0]] else 0
    return _simulate_contacts(rover, gm, coverage, window_limit(rover, horizon), t_max, config)


def _simulate_contacts(rover: RoverState, gm: GridMap, coverage: np.ndarray, limit: int,
                       t_max: int, config: ExplorationConfig) -> int:
    shadow = rover.clone()
    count = 0
    while True:
        if shadow.objective is None and not shadow.parked:
            select_objective(shadow, gm, config)
        if shadow.parked:
            x, y = shadow.position
            return count + (t_max if coverage[y, x] else 0)
        if shadow.objective_index > limit:
            return count
        advance_rover(shadow, gm, config)
        x, y = shadow.position
        count += bool(coverage[y, x])
