"""Model configuration and the shared forward path (normalize -> encode -> decode)."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .basis import BasisSpec, basis_matrix, decode_readout, round_half_away, sample_coefficients
from .encoder import EncoderConfig, encode, init_encoder
from .norm import MODES, CausalStats, causal_normalize

DEFAULT_QUANTILES = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 2
    state_size: int = 32
    hidden_size: int = 32
    mlp_hidden: int = 64
    context_length: int = 256
    min_context: int = 20
    base_horizon: int = 24
    basis: str = "legendre"
    basis_n: int = 16
    quantile_levels: tuple = DEFAULT_QUANTILES
    norm_variance_mode: str = "elementwise-cumsum"
    base_seasonality: float = 24.0
    dt_min: float = 1e-3
    dt_max: float = 1e-1

    def __post_init__(self):
        object.__setattr__(self, "quantile_levels", tuple(float(q) for q in self.quantile_levels))
        q = np.asarray(self.quantile_levels)
        if q.size < 1 or np.any(q <= 0) or np.any(q >= 1) or np.any(np.diff(q) <= 0):
            raise ValueError("quantile levels must be strictly increasing inside (0, 1)")
        if self.norm_variance_mode not in MODES:
            raise ValueError(f"norm_variance_mode must be one of {MODES}")
        if self.base_horizon < 1 or self.base_seasonality <= 0:
            raise ValueError("base_horizon and base_seasonality must be positive")
        if not 0 < self.dt_min <= self.dt_max:
            raise ValueError("need 0 < dt_min <= dt_max")
        self.encoder_config()
        self.basis_spec()

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            num_layers=self.num_layers,
            state_size=self.state_size,
            hidden_size=self.hidden_size,
            input_channels=2,
            context_length=self.context_length,
            min_context=self.min_context,
            mlp_hidden=self.mlp_hidden,
        )

    def basis_spec(self) -> BasisSpec:
        return BasisSpec(self.basis, self.basis_n)

    @property
    def num_quantiles(self) -> int:
        return len(self.quantile_levels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["quantile_levels"] = list(self.quantile_levels)
        return d


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    params = init_encoder(cfg.encoder_config(), seed, cfg.dt_min, cfg.dt_max)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    k, n, H = cfg.num_quantiles, cfg.basis_n, cfg.hidden_size
    params["readout.W"] = rng.normal(size=(k * n, H)) * (0.1 / np.sqrt(H))
    return params


def count_params(params: Mapping[str, np.ndarray]) -> int:
    return int(sum(np.asarray(v).size for v in params.values()))


def model_inputs(x, observed=None, mode: str = "elementwise-cumsum") -> tuple[np.ndarray, CausalStats]:
    """Stack normalized values with the missing-value flag: ``(..., L, 2)``."""
    x = np.asarray(x, dtype=np.float64)
    if observed is None:
        observed = np.ones(x.shape, dtype=bool)
    observed = np.broadcast_to(np.asarray(observed, dtype=bool), x.shape)
    x_norm, stats = causal_normalize(np.where(observed, x, 0.0), mode, observed)
    flags = (~observed).astype(np.float64)
    return np.stack([x_norm, flags], axis=-1), stats


def horizon_steps(cfg: ModelConfig, s_delta: float) -> int:
    return max(1, round_half_away(cfg.base_horizon / s_delta))


def anchor_forecasts(params: Mapping, cfg: ModelConfig, inputs, anchors, s_delta: float = 1.0, t_eff: int | None = None):
    """Normalized quantile forecasts from every position in ``anchors`` (0-based).

    One encoder pass serves all anchors. Returns ``(..., A, T_eff, K)``.
    """
    o = encode(inputs, cfg.encoder_config(), params, s_delta)
    o_anchor = ad.getitem(o, (Ellipsis, anchors, slice(None)))
    coeffs = decode_readout(o_anchor, params["readout.W"], cfg.num_quantiles, cfg.basis_n)
    base = horizon_steps(cfg, s_delta)
    bm = basis_matrix(cfg.basis_spec(), base if t_eff is None else t_eff, base)
    return sample_coefficients(coeffs, bm)


def denormalize(y_norm, stats: CausalStats, anchors):
    """Scale ``(..., A, T, K)`` forecasts back with the statistics at each anchor."""
    mu = stats.mu_r[..., anchors][..., None, None]
    sigma = stats.sigma_r[..., anchors][..., None, None]
    return ad.add(ad.mul(y_norm, sigma), mu)
