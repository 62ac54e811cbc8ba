import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(scope="session")
def default_pipeline():
    """Default-config world plus its pretrained, frozen LM (seed 0)."""
    from cotmeta import experiments as ex
    from cotmeta.config import ExperimentConfig

    cfg = ExperimentConfig()
    world = ex.build_world(cfg)
    lm = ex.pretrain(cfg, world)
    return cfg, world, lm


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for line in sorted(results):
            terminalreporter.write_line(line)
