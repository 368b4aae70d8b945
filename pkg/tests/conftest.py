from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fstkg.kgstore import from_quads

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

DATA = Path(__file__).parent / "data"


def random_quads(rng: np.random.Generator, n_ent: int, n_rel: int, n_ev: int, t_max: int = 20):
    out = []
    for _ in range(n_ev):
        s, o = rng.integers(n_ent, size=2)
        out.append((f"e{s}", f"r{rng.integers(n_rel)}", f"e{o}", int(rng.integers(t_max + 1))))
    return out


def random_kg(seed: int, n_ent: int = 12, n_rel: int = 3, n_ev: int = 40, t_max: int = 20):
    return from_quads(random_quads(np.random.default_rng(seed), n_ent, n_rel, n_ev, t_max))


@pytest.fixture
def toy_kg():
    """Six entities, two relations, timestamps 1..9."""
    return from_quads([
        ("a", "r0", "b", 1), ("b", "r1", "c", 2), ("c", "r0", "d", 3), ("a", "r1", "c", 4),
        ("d", "r0", "e", 5), ("e", "r1", "a", 6), ("b", "r0", "f", 7), ("f", "r1", "d", 8),
        ("a", "r0", "f", 9), ("c", "r1", "e", 9),
    ])


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
