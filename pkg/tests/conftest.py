import numpy as np
import pytest

from src.pipeline import pretrain_backbone
from src.synth_data import TaskSpec, generate


@pytest.fixture(scope="session")
def tiny_spec():
    return TaskSpec(
        n_range=(10, 14),
        feature_dim=8,
        num_classes=2,
        signal_tokens=2,
        sink_count=1,
        sink_scale=4.0,
        noise_std=0.25,
        duplicate_frac=0.2,
        seed=7,
    )


@pytest.fixture(scope="session")
def tiny_train(tiny_spec):
    return generate(tiny_spec, 64, 0)


@pytest.fixture(scope="session")
def tiny_val(tiny_spec):
    return generate(tiny_spec, 32, 1)


@pytest.fixture(scope="session")
def tiny_clean(tiny_spec):
    return generate(tiny_spec.clean(), 32, 2)


@pytest.fixture(scope="session")
def tiny_backbone(tiny_train, tiny_clean):
    return pretrain_backbone(
        tiny_train,
        tiny_clean,
        num_classes=2,
        epochs=5,
        seed=7,
        hidden_dim=8,
        lr=1e-2,
        batch_size=16,
        min_accuracy=None,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(0)
