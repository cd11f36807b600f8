"""Continuous-time S5 forecaster with a functional basis decoder.

Import the estimator for the common path::

    from flowstate import FlowStateForecaster
"""

from .data import TimeSeries, load_dataset, toy_series
from .estimator import FlowStateForecaster, SeasonalNaiveForecaster
from .model import ModelConfig, init_params
from .pipeline import ForecastRequest, TaskSpec, forecast
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "FlowStateForecaster",
    "ForecastRequest",
    "ModelConfig",
    "SeasonalNaiveForecaster",
    "TaskSpec",
    "TimeSeries",
    "TrainConfig",
    "forecast",
    "init_params",
    "load_dataset",
    "toy_series",
    "train",
]
