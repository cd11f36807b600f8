"""Inference: scale factor, effective lengths, and multi-patch composition."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .basis import basis_matrix, round_half_away, sample_coefficients, decode_readout
from .encoder import encode
from .model import ModelConfig, model_inputs

MODES = ("mpi", "autoregressive")


class ForecastConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    seasonality: float
    horizon: int
    context_budget: int | None = None

    def __post_init__(self):
        if not self.seasonality > 0:
            raise ValueError(f"seasonality must be positive, got {self.seasonality}")
        if self.horizon < 1:
            raise ValueError(f"horizon must be at least 1, got {self.horizon}")


@dataclass(frozen=True)
class ForecastRequest:
    series: np.ndarray
    task: TaskSpec
    mode: str = "mpi"
    s_delta_override: float | None = None
    observed: np.ndarray | None = None

    def __post_init__(self):
        values = np.asarray(self.series, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2 or values.shape[0] < 1:
            raise ValueError("series must be (length, channels) with at least one step")
        object.__setattr__(self, "series", values)
        if self.observed is not None:
            obs = np.broadcast_to(np.asarray(self.observed, dtype=bool).reshape(values.shape[0], -1), values.shape)
            object.__setattr__(self, "observed", obs)
        if self.s_delta_override is not None and not self.s_delta_override > 0:
            raise ValueError("scale override must be positive")


def scale_factor(task: TaskSpec, base_seasonality: float = 24.0, override: float | None = None) -> float:
    if override is not None:
        if not override > 0:
            raise ValueError("scale override must be positive")
        return float(override)
    if not task.seasonality > 0:
        raise ValueError("seasonality must be positive")
    return base_seasonality / task.seasonality


def effective_lengths(s_delta: float, L: int, T_base: int, context_budget: int | None = None) -> tuple[int, int]:
    """Context and horizon rescaled to the model's time base (half-up rounding)."""
    if not s_delta > 0:
        raise ValueError("s_delta must be positive")
    L_eff = max(1, round_half_away(L / s_delta))
    if context_budget is not None:
        L_eff = min(int(context_budget), L_eff)
    return L_eff, max(1, round_half_away(T_base / s_delta))


def _median_index(levels) -> int:
    levels = np.asarray(levels)
    return int(np.argmin(np.abs(levels - 0.5)))


def _patches(params, cfg: ModelConfig, values, observed, anchors, s_delta, t_eff):
    """Denormalized ``(len(anchors), t_eff, K)`` forecasts from one encoder pass."""
    inputs, stats = model_inputs(values, observed, cfg.norm_variance_mode)
    o = encode(inputs, cfg.encoder_config(), params, s_delta)[anchors]
    coeffs = decode_readout(o, params["readout.W"], cfg.num_quantiles, cfg.basis_n)
    y = sample_coefficients(coeffs, basis_matrix(cfg.basis_spec(), t_eff, t_eff))
    mu = stats.mu_r[anchors][:, None, None]
    sigma = stats.sigma_r[anchors][:, None, None]
    return y * sigma + mu, stats


def mpi_extend(context, params: Mapping, cfg: ModelConfig, patches_needed: int, s_delta: float,
               observed=None) -> np.ndarray:
    """Forecast ``patches_needed`` consecutive patches, treating earlier ones as missing.

    Placeholders are unobserved, so the running statistics stay frozen at the
    last real observation. All patches come from a single encoder pass.
    Returns ``(patches_needed * T_eff, K)``.
    """
    if patches_needed < 1:
        raise ValueError("patches_needed must be at least 1")
    context = np.asarray(context, dtype=np.float64)
    obs = np.ones(context.shape, dtype=bool) if observed is None else np.asarray(observed, dtype=bool)
    t_eff = max(1, round_half_away(cfg.base_horizon / s_delta))
    pad = (patches_needed - 1) * t_eff
    values = np.concatenate([context, np.zeros(pad)])
    obs = np.concatenate([obs, np.zeros(pad, dtype=bool)])
    anchors = len(context) - 1 + t_eff * np.arange(patches_needed)
    y, _ = _patches(params, cfg, values, obs, anchors, s_delta, t_eff)
    return y.reshape(-1, cfg.num_quantiles)


def autoregressive_extend(context, params: Mapping, cfg: ModelConfig, patches_needed: int, s_delta: float,
                          observed=None) -> np.ndarray:
    """Forecast patch by patch, appending each median as if it were observed."""
    if patches_needed < 1:
        raise ValueError("patches_needed must be at least 1")
    values = np.asarray(context, dtype=np.float64)
    obs = np.ones(values.shape, dtype=bool) if observed is None else np.asarray(observed, dtype=bool)
    t_eff = max(1, round_half_away(cfg.base_horizon / s_delta))
    med = _median_index(cfg.quantile_levels)
    out = []
    for _ in range(patches_needed):
        y, _ = _patches(params, cfg, values, obs, np.array([len(values) - 1]), s_delta, t_eff)
        patch = np.sort(y[0], axis=-1)
        out.append(patch)
        values = np.concatenate([values, patch[:, med]])
        obs = np.concatenate([obs, np.ones(t_eff, dtype=bool)])
    return np.concatenate(out, axis=0)


def forecast(req: ForecastRequest, params: Mapping, cfg: ModelConfig) -> np.ndarray:
    """Quantile forecast of shape ``(horizon, K, channels)``."""
    if req.mode not in MODES:
        raise ForecastConfigError(f"unknown mode {req.mode!r}; expected one of {MODES}")
    s = scale_factor(req.task, cfg.base_seasonality, req.s_delta_override)
    L_eff, t_eff = effective_lengths(s, cfg.context_length, cfg.base_horizon, req.task.context_budget)
    patches_needed = math.ceil(req.task.horizon / t_eff)
    extend = mpi_extend if req.mode == "mpi" else autoregressive_extend
    n, channels = req.series.shape
    out = np.empty((req.task.horizon, cfg.num_quantiles, channels))
    for c in range(channels):
        ctx = req.series[-L_eff:, c]
        obs = None if req.observed is None else req.observed[-L_eff:, c]
        y = extend(ctx, params, cfg, patches_needed, s, observed=obs)
        out[:, :, c] = np.sort(y[: req.task.horizon], axis=-1)
    return out


def estimate_seasonality(x, max_lag: int | None = None, min_lag: int = 2) -> int:
    """Lag of the highest autocorrelation peak; a helper, never applied implicitly."""
    x = np.asarray(x, dtype=np.float64)
    x = x - x.mean()
    n = len(x)
    max_lag = min(n // 2, max_lag or n // 2)
    if max_lag <= min_lag:
        return 1
    denom = float(np.dot(x, x)) or 1.0
    acf = np.array([np.dot(x[:-k], x[k:]) / denom for k in range(1, max_lag + 1)])
    peaks = [k for k in range(max(min_lag, 2), max_lag) if acf[k - 1] > acf[k - 2] and acf[k - 1] >= acf[k]]
    if not peaks:
        return 1
    return max(peaks, key=lambda k: acf[k - 1])
