"""Exploration map: obstacle layout, inflation, line of sight and reachability.

Cells are ``(x, y)`` tuples; grids are numpy arrays indexed ``[y, x]``.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import ConfigError

Cell = tuple[int, int]

NEIGHBORS4 = ((1, 0), (-1, 0), (0, 1), (0, -1))


@dataclass(frozen=True)
class ObstacleModel:
    density: float = 0.08
    # (radius_in_cells, probability) pairs
    radius_distribution: tuple[tuple[int, float], ...] = ((1, 0.7), (2, 0.25), (3, 0.05))
    seed: int = 0
    inflation_radius: int = 1
    max_retries: int = 25

    def __post_init__(self):
        if not 0.0 <= self.density < 1.0:
            raise ConfigError(f"obstacle density must be in [0, 1), got {self.density}")
        if not self.radius_distribution:
            raise ConfigError("radius_distribution is empty")
        for r, p in self.radius_distribution:
            if r < 1 or p < 0:
                raise ConfigError(f"bad radius entry ({r}, {p})")
        if sum(p for _, p in self.radius_distribution) <= 0:
            raise ConfigError("radius probabilities sum to zero")
        if self.inflation_radius < 0:
            raise ConfigError("inflation_radius must be >= 0")


@dataclass(eq=False)
class GridMap:
    width: int
    height: int
    rho: float
    obstacle: np.ndarray  # bool [h, w], ground truth
    inflated: np.ndarray  # bool [h, w], obstacle grown by the rover footprint
    lander: Cell
    _los_cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_cells(self) -> int:
        return self.width * self.height

    @property
    def free(self) -> np.ndarray:
        """Cells a rover may occupy: traversable and outside the inflation."""
        return ~self.inflated

    @property
    def diagonal_m(self) -> float:
        return float(np.hypot(self.width, self.height)) * self.rho

    def inside(self, c: Cell) -> bool:
        return 0 <= c[0] < self.width and 0 <= c[1] < self.height

    def is_free(self, c: Cell) -> bool:
        return self.inside(c) and not self.inflated[c[1], c[0]]

    def distance_m(self, a: Cell, b: Cell) -> float:
        return float(np.hypot(a[0] - b[0], a[1] - b[1])) * self.rho

    def los(self, a: Cell, b: Cell) -> bool:
        key = (a, b) if a <= b else (b, a)
        hit = self._los_cache.get(key)
        if hit is None:
            hit = line_of_sight(self, a, b)
            if len(self._los_cache) > 200_000:
                self._los_cache.clear()
            self._los_cache[key] = hit
        return hit

    def to_json(self) -> dict:
        ys, xs = np.nonzero(self.obstacle)
        return {
            "width": self.width,
            "height": self.height,
            "rho": self.rho,
            "lander": list(self.lander),
            "obstacles": [[int(x), int(y)] for x, y in zip(xs, ys)],
        }

    @classmethod
    def from_json(cls, data: dict | str, inflation_radius: int = 1) -> "GridMap":
        if isinstance(data, str):
            data = json.loads(data)
        w, h = int(data["width"]), int(data["height"])
        obstacle = np.zeros((h, w), dtype=bool)
        for x, y in data["obstacles"]:
            obstacle[y, x] = True
        return from_obstacles(obstacle, tuple(data["lander"]), rho=float(data["rho"]),
                              inflation_radius=inflation_radius)


def inflate(obstacle: np.ndarray, radius: int) -> np.ndarray:
    """Grow obstacles by a Chebyshev disc (square) of ``radius`` cells."""
    out = obstacle.copy()
    h, w = obstacle.shape
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dx == 0 and dy == 0:
                continue
            src = obstacle[max(0, -dy):h - max(0, dy), max(0, -dx):w - max(0, dx)]
            out[max(0, dy):h - max(0, -dy), max(0, dx):w - max(0, -dx)] |= src
    return out


def from_obstacles(obstacle: np.ndarray, lander: Cell, rho: float = 1.0,
                   inflation_radius: int = 1) -> GridMap:
    """Wrap a hand-built obstacle grid (tests, replays)."""
    obstacle = np.asarray(obstacle, dtype=bool)
    h, w = obstacle.shape
    m = GridMap(w, h, rho, obstacle, inflate(obstacle, inflation_radius), tuple(lander))
    return m


def _disc_offsets(r: int) -> list[Cell]:
    return [(dx, dy) for dy in range(-r, r + 1) for dx in range(-r, r + 1)
            if dx * dx + dy * dy <= r * r]


def generate_map(model: ObstacleModel, width: int, height: int, rho: float = 1.0) -> GridMap:
    """Sample a seeded obstacle layout with the lander at the map center.

    Discs are dropped with uniform centers until the obstacle fraction reaches
    ``model.density``. The landing zone is then cleared so the lander cell is
    neither an obstacle nor inflated. Layouts where fewer than half of all
    cells are reachable from the lander are resampled.
    """
    if width < 8 or height < 8:
        raise ConfigError(f"map must be at least 8x8, got {width}x{height}")
    rng = np.random.default_rng(model.seed)
    radii = np.array([r for r, _ in model.radius_distribution])
    probs = np.array([p for _, p in model.radius_distribution], dtype=float)
    probs /= probs.sum()
    lander = (width // 2, height // 2)
    target = int(round(model.density * width * height))
    clear = model.inflation_radius + 1

    for _ in range(model.max_retries):
        obstacle = np.zeros((height, width), dtype=bool)
        count = 0
        guard = 0
        while count < target and guard < 100 * width * height:
            guard += 1
            r = int(rng.choice(radii, p=probs))
            cx, cy = int(rng.integers(width)), int(rng.integers(height))
            for dx, dy in _disc_offsets(r):
                x, y = cx + dx, cy + dy
                if 0 <= x < width and 0 <= y < height and not obstacle[y, x]:
                    obstacle[y, x] = True
                    count += 1
        lx, ly = lander
        obstacle[max(0, ly - clear):ly + clear + 1, max(0, lx - clear):lx + clear + 1] = False
        gm = from_obstacles(obstacle, lander, rho, model.inflation_radius)
        if reachable_mask(gm, lander).sum() * 2 >= width * height:
            return gm
    raise ConfigError(
        f"density {model.density} gave no layout with >=50% of cells reachable "
        f"after {model.max_retries} attempts")


def _column_rows(x0: int, y0: int, x1: int, y1: int) -> Iterable[Cell]:
    # Supercover of the segment between two cell centers; x0 < x1.
    dx, dy = x1 - x0, y1 - y0
    two_dx = 2 * dx
    for cx in range(x0, x1 + 1):
        # segment x-extent inside this column, in half-cell units
        xl2 = max(2 * cx - 1, 2 * x0)
        xr2 = min(2 * cx + 1, 2 * x1)
        # y scaled by 2*dx at both ends
        na = two_dx * y0 + (xl2 - 2 * x0) * dy
        nb = two_dx * y0 + (xr2 - 2 * x0) * dy
        lo, hi = (na, nb) if na <= nb else (nb, na)
        # rows whose closed extent [cy-1/2, cy+1/2] meets [lo, hi] / (2dx)
        row_lo = -((-(lo - dx)) // two_dx)
        row_hi = (hi + dx) // two_dx
        for cy in range(row_lo, row_hi + 1):
            yield cx, cy


def ray_cells(a: Cell, b: Cell) -> list[Cell]:
    """All cells touched by the segment joining the centers of ``a`` and ``b``."""
    (x0, y0), (x1, y1) = a, b
    if x0 == x1:
        lo, hi = sorted((y0, y1))
        return [(x0, y) for y in range(lo, hi + 1)]
    if x0 > x1:
        x0, y0, x1, y1 = x1, y1, x0, y0
    return list(_column_rows(x0, y0, x1, y1))


def line_of_sight(gm: GridMap, a: Cell, b: Cell) -> bool:
    """True iff no ground-truth obstacle lies on the ray between the two cells."""
    obs = gm.obstacle
    for x, y in ray_cells(a, b):
        if 0 <= x < gm.width and 0 <= y < gm.height and obs[y, x]:
            return False
    return True


def reachable_mask(gm: GridMap, start: Cell) -> np.ndarray:
    seen = np.zeros((gm.height, gm.width), dtype=bool)
    if not gm.is_free(start):
        return seen
    free = gm.free
    seen[start[1], start[0]] = True
    q = deque([start])
    while q:
        x, y = q.popleft()
        for dx, dy in NEIGHBORS4:
            nx, ny = x + dx, y + dy
            if 0 <= nx < gm.width and 0 <= ny < gm.height and free[ny, nx] and not seen[ny, nx]:
                seen[ny, nx] = True
                q.append((nx, ny))
    return seen


def reachable_cells(gm: GridMap, start: Cell) -> set[Cell]:
    ys, xs = np.nonzero(reachable_mask(gm, start))
    return {(int(x), int(y)) for x, y in zip(xs, ys)}
