import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config():
    """A network small enough for exhaustive finite differences."""
    from lidarfuse.pipeline import desk_config

    return desk_config().with_overrides(
        dict(
            image_height=16, image_width=32, range_height=8, range_width=32,
            channels=4, image_channels=4, bev_height=12, bev_width=16, bev_cell=2.0,
            points_per_scene=32,
        )
    )


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
