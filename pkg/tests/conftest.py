import numpy as np
import pytest

from lunardtn.world import ObstacleModel, from_obstacles, generate_map


@pytest.fixture(scope="session")
def small_map():
    return generate_map(ObstacleModel(density=0.1, seed=3), 20, 20)


def open_map(w, h, lander=None, rho=1.0):
    obstacle = np.zeros((h, w), dtype=bool)
    return from_obstacles(obstacle, lander or (w // 2, h // 2), rho)


# criterion number -> (passed, detail), filled in by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
