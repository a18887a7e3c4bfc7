import numpy as np
import pytest

from app.config import parse_run_config


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


TINY_RUN = """
[run]
seed_updates = 6
pl_updates = 6
labeled_batch = 2
unlabeled_batch = 2
eval_every = 3
ema_decay = 0.9

[model]
hidden = 8
layers = 1

[corpus]
vocab_size = 4
feature_dim = 6
label_length = 1,3
noise = 0.8
sizes.labeled = 6
sizes.unlabeled = 6
sizes.labeled_dev = 3
sizes.dev = 3
sizes.test = 3
"""


@pytest.fixture
def tiny_ini() -> str:
    return TINY_RUN


@pytest.fixture
def tiny_cfg():
    return parse_run_config(TINY_RUN)
