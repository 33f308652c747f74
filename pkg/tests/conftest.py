import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from evgen.events import EVENT_DTYPE, EventStream

settings.register_profile("evgen", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("evgen")


def random_events(rng, n, width=32, height=32, t_max=100_000, sort=True):
    ev = np.empty(n, dtype=EVENT_DTYPE)
    ev["x"] = rng.integers(0, width, n)
    ev["y"] = rng.integers(0, height, n)
    ev["t"] = rng.integers(0, t_max, n)
    ev["p"] = rng.choice(np.array([-1, 1], dtype=np.int8), n)
    if sort:
        ev = ev[np.argsort(ev["t"], kind="stable")]
    return ev


def random_stream(rng, n, width=32, height=32, t_max=100_000, label=-1):
    return EventStream(width, height, random_events(rng, n, width, height, t_max), label)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
