import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from loragraft.toyforge import SCENARIO_KINDS, capture_pair, gen_scenario


@pytest.fixture(scope="session")
def scenarios():
    """One generated instance per scenario kind, with captures, shared
    across the whole run (generation dominates test time otherwise)."""
    cache = {}

    def get(kind: str, seed: int = 3):
        key = (kind, seed)
        if key not in cache:
            old, new, adapter, sc = gen_scenario(kind, seed)
            acts_old, acts_new = capture_pair(old, new, sc)
            cache[key] = (old, new, adapter, sc, acts_old, acts_new)
        return cache[key]

    return get


@pytest.fixture(scope="session")
def all_kinds():
    return SCENARIO_KINDS
