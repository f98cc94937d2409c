import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    """Small end-to-end configuration: fast enough for per-test training runs."""
    from aegis.config import PretrainConfig, TrainingConfig
    from aegis.models import ToyVLMConfig

    return TrainingConfig(
        model=ToyVLMConfig(num_layers=2, d_model=16, num_heads=2),
        steps=20, warmup=5, eval_every=10, ewc_samples=4,
        pretrain=PretrainConfig(max_steps=20, min_steps=0, eval_every=10, batch_size=8,
                                anchor_batches=2, anchor_batch_size=4),
    )


@pytest.fixture
def tiny_setup(tiny_cfg, tmp_path_factory):
    """Pretrained tiny checkpoint and its anchor."""
    from aegis import harness

    ckpt = harness.pretrain(tiny_cfg)
    anchor = harness.build_anchor_from_checkpoint(tiny_cfg, ckpt)
    return tiny_cfg, ckpt, anchor


# one line per acceptance criterion, printed after the run
VERDICTS = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
