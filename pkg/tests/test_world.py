from collections import deque
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lunardtn.errors import ConfigError
from lunardtn.world import (GridMap, ObstacleModel, from_obstacles, generate_map, inflate,
                            line_of_sight, ray_cells, reachable_cells)

from conftest import open_map


def flood_fill(free, start):
    # independent oracle: recursive-stack DFS over 4-neighbours
    h, w = free.shape
    out, stack = set(), [start]
    while stack:
        x, y = stack.pop()
        if (x, y) in out or not (0 <= x < w and 0 <= y < h) or not free[y, x]:
            continue
        out.add((x, y))
        stack += [(x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)]
    return out


def segment_hits_cell(a, b, c):
    """Exact test: does the closed segment between centers a, b meet the closed unit square at c?"""
    (x0, y0), (x1, y1) = a, b
    lo_x, hi_x = Fraction(2 * c[0] - 1, 2), Fraction(2 * c[0] + 1, 2)
    lo_y, hi_y = Fraction(2 * c[1] - 1, 2), Fraction(2 * c[1] + 1, 2)
    t0, t1 = Fraction(0), Fraction(1)
    for p0, d, lo, hi in ((x0, x1 - x0, lo_x, hi_x), (y0, y1 - y0, lo_y, hi_y)):
        if d == 0:
            if not lo <= p0 <= hi:
                return False
            continue
        ta, tb = (lo - p0) / d, (hi - p0) / d
        if ta > tb:
            ta, tb = tb, ta
        t0, t1 = max(t0, ta), min(t1, tb)
    return t0 <= t1


def test_zero_density_is_all_free():
    gm = generate_map(ObstacleModel(density=0.0, seed=5), 16, 12)
    assert not gm.obstacle.any() and not gm.inflated.any()


def test_generation_is_deterministic():
    m = ObstacleModel(density=0.12, seed=11)
    a, b = generate_map(m, 30, 24), generate_map(m, 30, 24)
    assert np.array_equal(a.obstacle, b.obstacle) and a.lander == b.lander


def test_density_015_seed7_fraction():
    gm = generate_map(ObstacleModel(density=0.15, seed=7), 40, 40)
    frac = gm.obstacle.mean()
    assert 0.05 <= frac <= 0.30


@pytest.mark.parametrize("seed", range(8))
def test_generated_map_invariants(seed):
    gm = generate_map(ObstacleModel(density=0.1, seed=seed), 24, 20)
    lx, ly = gm.lander
    assert gm.lander == (12, 10)
    assert not gm.obstacle[ly, lx] and not gm.inflated[ly, lx]
    assert np.all(gm.inflated >= gm.obstacle)
    assert len(reachable_cells(gm, gm.lander)) * 2 >= gm.n_cells


def test_tiny_map_rejected():
    with pytest.raises(ConfigError):
        generate_map(ObstacleModel(), 7, 20)


def test_impossible_density_raises():
    with pytest.raises(ConfigError):
        generate_map(ObstacleModel(density=0.9, seed=0, max_retries=3), 12, 12)


def test_bad_obstacle_model():
    with pytest.raises(ConfigError):
        ObstacleModel(density=1.0)
    with pytest.raises(ConfigError):
        ObstacleModel(radius_distribution=((0, 1.0),))


def test_inflation_is_chebyshev_square():
    obs = np.zeros((7, 7), dtype=bool)
    obs[3, 3] = True
    inf = inflate(obs, 1)
    assert inf.sum() == 9 and inf[2:5, 2:5].all()
    assert inflate(obs, 0).sum() == 1


def test_los_trivial_cases():
    gm = open_map(5, 5)
    assert line_of_sight(gm, (1, 1), (1, 1))
    assert line_of_sight(gm, (1, 1), (2, 1))


def test_los_blocked_by_full_wall():
    obs = np.zeros((5, 5), dtype=bool)
    obs[:, 2] = True
    gm = from_obstacles(obs, (0, 0))
    for ya in range(5):
        for yb in range(5):
            assert not line_of_sight(gm, (0, ya), (4, yb))
            assert line_of_sight(gm, (0, ya), (1, yb))


def test_ray_cells_match_exact_intersection_oracle():
    rng = np.random.default_rng(0)
    for _ in range(300):
        a = tuple(int(v) for v in rng.integers(0, 9, 2))
        b = tuple(int(v) for v in rng.integers(0, 9, 2))
        got = set(ray_cells(a, b))
        lo_x, hi_x = min(a[0], b[0]), max(a[0], b[0])
        lo_y, hi_y = min(a[1], b[1]), max(a[1], b[1])
        want = {(x, y) for x in range(lo_x - 1, hi_x + 2) for y in range(lo_y - 1, hi_y + 2)
                if segment_hits_cell(a, b, (x, y))}
        assert got == want, (a, b)


def test_diagonal_ray_includes_corner_cells():
    assert set(ray_cells((0, 0), (2, 2))) == {(0, 0), (1, 0), (0, 1), (1, 1), (2, 1), (1, 2), (2, 2)}


cells = st.tuples(st.integers(0, 14), st.integers(0, 14))


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 50), a=cells, b=cells)
def test_los_symmetric(seed, a, b):
    gm = _cached_map(seed)
    assert line_of_sight(gm, a, b) == line_of_sight(gm, b, a)


_maps: dict = {}


def _cached_map(seed):
    if seed not in _maps:
        _maps[seed] = generate_map(ObstacleModel(density=0.15, seed=seed), 15, 15)
    return _maps[seed]


@pytest.mark.parametrize("seed", range(10))
def test_reachable_matches_flood_fill_oracle(seed):
    gm = generate_map(ObstacleModel(density=0.12, seed=seed), 20, 20)
    assert reachable_cells(gm, gm.lander) == flood_fill(~gm.inflated, gm.lander)


def test_reachable_open_map_and_split_map():
    assert len(reachable_cells(open_map(9, 6), (0, 0))) == 54
    obs = np.zeros((6, 9), dtype=bool)
    obs[:, 4] = True
    gm = from_obstacles(obs, (0, 0), inflation_radius=1)
    got = reachable_cells(gm, (0, 0))
    assert got == {(x, y) for x in range(3) for y in range(6)}


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 30), x=st.integers(0, 14), y=st.integers(0, 14))
def test_adding_obstacle_never_enlarges_reachable(seed, x, y):
    gm = _cached_map(seed)
    before = reachable_cells(gm, gm.lander)
    obs = gm.obstacle.copy()
    obs[y, x] = True
    if (x, y) == gm.lander:
        return
    gm2 = from_obstacles(obs, gm.lander)
    assert reachable_cells(gm2, gm.lander) <= before


def test_map_json_round_trip(small_map):
    back = GridMap.from_json(small_map.to_json())
    assert np.array_equal(back.obstacle, small_map.obstacle)
    assert np.array_equal(back.inflated, small_map.inflated)
    assert back.lander == small_map.lander and back.rho == small_map.rho
