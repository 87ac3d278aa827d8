import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from camaudit.experiments import two_region_fixture  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def trained_fixture():
    """(model, x, labels): bias-free-head micro model on the 64x64 two-region scene."""
    return two_region_fixture()


@pytest.fixture(scope="session")
def small_trained():
    """A biased (standard) 16x16 model trained briefly on urban scenes, for cheap checks."""
    from camaudit.hsi import SceneSpec, prepare, scene_split
    from camaudit.model import TrainConfig, build_unet_micro, train

    spec = SceneSpec(height=16, width=16, template="urban")
    scenes = [prepare(s, 3) for s in scene_split(spec, 4, 10)]
    model, _ = train(build_unet_micro(3, 5, 8, seed=1), scenes, TrainConfig(epochs=10, seed=1))
    return model, scenes


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
