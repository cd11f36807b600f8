"""scikit-learn style front end.

``FlowStateForecaster().fit(series).predict(context, horizon=48, seasonality=24)``
trains on a collection of 1-D series and forecasts each row of ``context``.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .checkpoint import load_checkpoint, save_checkpoint
from .data import TimeSeries
from .metrics import seasonal_naive
from .model import DEFAULT_QUANTILES, ModelConfig, count_params
from .pipeline import ForecastRequest, TaskSpec, forecast
from .training import TrainConfig, train


def _as_series_list(X) -> list[np.ndarray]:
    """Accept one series, a 2-D array of equal-length series, TimeSeries, or a ragged list."""
    if isinstance(X, TimeSeries):
        return [X.values[:, c] for c in range(X.num_channels)]
    if isinstance(X, (list, tuple)) and X and (isinstance(X[0], TimeSeries) or np.ndim(X[0]) == 1):
        if all(np.ndim(x) == 1 and not isinstance(x, TimeSeries) for x in X) and len({len(x) for x in X}) == 1:
            return list(check_array(np.asarray(X, dtype=np.float64), ensure_2d=True))
        out = []
        for x in X:
            out.extend(_as_series_list(x) if isinstance(x, TimeSeries)
                       else [check_array(np.asarray(x, dtype=np.float64).reshape(1, -1))[0]])
        return out
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    return list(check_array(arr, ensure_2d=True))


class FlowStateForecaster(BaseEstimator):
    """Continuous-time S5 encoder with a functional basis decoder.

    Model and training hyper-parameters are constructor arguments so
    ``get_params``/``set_params``/``clone`` work as usual.
    """

    def __init__(
        self,
        num_layers=2,
        state_size=32,
        hidden_size=32,
        mlp_hidden=64,
        context_length=256,
        min_context=20,
        base_horizon=24,
        basis="legendre",
        basis_n=16,
        quantile_levels=DEFAULT_QUANTILES,
        norm_variance_mode="elementwise-cumsum",
        base_seasonality=24.0,
        steps=600,
        batch=8,
        learning_rate=3e-3,
        grad_clip=1.0,
        cpm_enabled=True,
        patch_mask_prob=0.5,
        parallel=True,
        seasonality=24.0,
        mode="mpi",
        seed=0,
    ):
        self.num_layers = num_layers
        self.state_size = state_size
        self.hidden_size = hidden_size
        self.mlp_hidden = mlp_hidden
        self.context_length = context_length
        self.min_context = min_context
        self.base_horizon = base_horizon
        self.basis = basis
        self.basis_n = basis_n
        self.quantile_levels = quantile_levels
        self.norm_variance_mode = norm_variance_mode
        self.base_seasonality = base_seasonality
        self.steps = steps
        self.batch = batch
        self.learning_rate = learning_rate
        self.grad_clip = grad_clip
        self.cpm_enabled = cpm_enabled
        self.patch_mask_prob = patch_mask_prob
        self.parallel = parallel
        self.seasonality = seasonality
        self.mode = mode
        self.seed = seed

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            num_layers=self.num_layers, state_size=self.state_size, hidden_size=self.hidden_size,
            mlp_hidden=self.mlp_hidden, context_length=self.context_length, min_context=self.min_context,
            base_horizon=self.base_horizon, basis=self.basis, basis_n=self.basis_n,
            quantile_levels=tuple(self.quantile_levels), norm_variance_mode=self.norm_variance_mode,
            base_seasonality=self.base_seasonality,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            steps=self.steps, batch=self.batch, learning_rate=self.learning_rate, grad_clip=self.grad_clip,
            cpm_enabled=self.cpm_enabled, patch_mask_prob=self.patch_mask_prob, parallel=self.parallel,
            seed=self.seed,
        )

    def fit(self, X, y=None, checkpoint_path=None, log_path=None):
        series = _as_series_list(X)
        cfg = self._model_config()
        need = cfg.context_length + cfg.base_horizon
        if not any(len(s) >= need for s in series):
            raise ValueError(f"at least one training series must have {need} steps")
        result = train(series, cfg, self._train_config(), checkpoint_path=checkpoint_path, log_path=log_path)
        self.model_config_ = cfg
        self.params_ = result.params
        self.loss_curve_ = list(result.losses)
        self.n_params_ = count_params(result.params)
        return self

    def predict_quantiles(self, X, horizon=None, seasonality=None, scale_override=None, mode=None):
        """Quantile forecasts ``(n_series, horizon, K)`` for each context row of ``X``."""
        check_is_fitted(self, "params_")
        horizon = self.model_config_.base_horizon if horizon is None else int(horizon)
        task = TaskSpec(self.seasonality if seasonality is None else seasonality, horizon)
        out = []
        for ctx in _as_series_list(X):
            req = ForecastRequest(ctx, task, mode=mode or self.mode, s_delta_override=scale_override)
            out.append(forecast(req, self.params_, self.model_config_)[:, :, 0])
        return np.stack(out)

    def predict(self, X, horizon=None, seasonality=None, scale_override=None, mode=None):
        """Median forecasts ``(n_series, horizon)``."""
        q = self.predict_quantiles(X, horizon, seasonality, scale_override, mode)
        med = int(np.argmin(np.abs(np.asarray(self.model_config_.quantile_levels) - 0.5)))
        return q[:, :, med]

    def save(self, path) -> Path:
        check_is_fitted(self, "params_")
        return save_checkpoint(path, self.model_config_.to_dict(), self.params_)

    @classmethod
    def from_checkpoint(cls, path) -> "FlowStateForecaster":
        ck = load_checkpoint(path)
        mcfg = ModelConfig(**ck["meta"]["model"])
        train_meta = ck["meta"].get("train", {})
        known = set(cls._get_param_names())
        est = cls(**{k: v for k, v in {**mcfg.to_dict(), **train_meta}.items() if k in known})
        est.model_config_ = mcfg
        est.params_ = ck["params"]
        est.n_params_ = count_params(ck["params"])
        return est


class SeasonalNaiveForecaster(BaseEstimator):
    """Baseline with the same prediction interface (every quantile = the naive value)."""

    def __init__(self, seasonality=24.0, quantile_levels=DEFAULT_QUANTILES):
        self.seasonality = seasonality
        self.quantile_levels = quantile_levels

    def fit(self, X=None, y=None):
        self.fitted_ = True
        return self

    def predict_quantiles(self, X, horizon=24, seasonality=None, **_):
        m = max(1, int(round(self.seasonality if seasonality is None else seasonality)))
        k = len(self.quantile_levels)
        return np.stack([np.repeat(seasonal_naive(s, m, horizon)[:, None], k, axis=1) for s in _as_series_list(X)])

    def predict(self, X, horizon=24, seasonality=None, **_):
        return self.predict_quantiles(X, horizon, seasonality)[:, :, 0]
