"""Shared fixtures and random instance builders."""

from __future__ import annotations

import numpy as np
import pytest

from hdastgnn import autodiff as ad
from hdastgnn.graph import (BACKWARD, FORWARD, ONE_WAY, TWO_WAY, Link, Maneuver, PrimalGraph,
                            StaticAttrs)


def random_attrs(rng: np.random.Generator) -> StaticAttrs:
    fc = int(rng.integers(1, 6))
    return StaticAttrs(
        speed_limit=float(rng.choice([30, 50, 70, 90])),
        lanes=float(rng.integers(1, 4)),
        length=float(np.round(rng.uniform(50, 800), 1)),
        free_flow_speed=float(np.round(rng.uniform(20, 100), 2)),
        curvature=float(np.round(rng.uniform(0, 0.05), 4)),
        slope_percent=float(np.round(rng.normal(0, 3), 2)),
        functional_class=fc,
    )


def random_primal(rng: np.random.Generator, max_nodes: int = 30, maneuver_rate: float = 0.3,
                  allow_uturns: bool = False) -> PrimalGraph:
    """Random road network with mixed one-way links and a few explicit maneuver rules."""
    n = int(rng.integers(2, max_nodes + 1))
    names = tuple(f"x{i}" for i in range(n))
    m = int(rng.integers(1, 2 * n + 1))
    links = []
    for i in range(m):
        a, b = rng.choice(n, size=2, replace=False)
        direction = ONE_WAY if rng.random() < 0.4 else TWO_WAY
        links.append(Link(f"l{i}", names[a], names[b], direction, random_attrs(rng)))
    maneuvers = []
    for inc in links:
        for out in links:
            for di in inc.travels():
                for do in out.travels():
                    if inc.travel_ends(di)[1] != out.travel_ends(do)[0]:
                        continue
                    if rng.random() < maneuver_rate:
                        maneuvers.append(Maneuver(inc.id, di, out.id, do, bool(rng.random() < 0.5)))
    return PrimalGraph(names, tuple(links), tuple(maneuvers), allow_uturns)


@pytest.fixture
def float64():
    previous = ad.DEFAULT_DTYPE
    ad.set_default_dtype(np.float64)
    yield
    ad.set_default_dtype(previous)


__all__ = ["random_attrs", "random_primal", "FORWARD", "BACKWARD"]


# criterion lines from test_acceptance, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
