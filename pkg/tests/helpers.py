"""Small shared configs and data for the unit tests."""

import numpy as np

from flowstate.data import toy_series
from flowstate.model import ModelConfig
from flowstate.training import TrainConfig

SMALL = ModelConfig(num_layers=1, state_size=8, hidden_size=8, mlp_hidden=16, context_length=48,
                    min_context=8, base_horizon=8, basis_n=6, base_seasonality=8.0)


def small_series(n=6, length=400, seed=0):
    return [toy_series(seed * 1000 + i, length).values[:, 0] for i in range(n)]


def small_train(**kw):
    base = dict(steps=10, batch=4, learning_rate=3e-3, seed=0)
    base.update(kw)
    return TrainConfig(**base)


# one "PASS/FAIL  C<n>  label  detail" line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []
