import numpy as np
import pytest

from conformal_audit.data import ScoreRecord, ScoreTable


def random_simplex(rng, k):
    g = rng.gamma(1.0, size=k)
    return g / g.sum()


def make_table(n=20, k=4, groups=("a", "b"), seed=0, critical=(), with_mc=False):
    """Small random table for unit tests; rows are exact-simplex Dirichlet draws."""
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        probs = random_simplex(rng, k)
        mc = None
        if with_mc:
            mc = np.vstack([random_simplex(rng, k) for _ in range(3)])
        records.append(
            ScoreRecord(
                id=f"r{i:03d}",
                group=groups[i % len(groups)],
                label=int(rng.integers(0, k)),
                probs=probs,
                mc_samples=mc,
            )
        )
    return ScoreTable.from_records(records, critical_classes=critical)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
