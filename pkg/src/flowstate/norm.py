"""Causal (prefix-only) reversible instance normalization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EPS = 1e-5
MODES = ("elementwise-cumsum", "exact-prefix-variance")


@dataclass(frozen=True)
class CausalStats:
    """Running mean and (clamped) running std, one entry per prefix length.

    Arrays may carry leading batch axes; time is the last axis.
    """

    mu_r: np.ndarray
    sigma_r: np.ndarray

    def __len__(self) -> int:
        return self.mu_r.shape[-1]

    def at(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        """Statistics after the first ``t`` steps (1-based)."""
        if not 1 <= t <= len(self):
            raise IndexError(f"t={t} outside 1..{len(self)}")
        return self.mu_r[..., t - 1], self.sigma_r[..., t - 1]


def causal_normalize(x, mode: str = "elementwise-cumsum", observed=None, eps: float = EPS):
    """Normalize each step with statistics of its own prefix.

    ``observed`` (bool, same shape as ``x``) marks real observations. Unobserved
    steps do not enter the running sums, so the statistics stay frozen across
    them, and their normalized value is 0.

    Returns ``(x_norm, CausalStats)``.
    """
    if mode not in MODES:
        raise ValueError(f"unknown variance mode {mode!r}; expected one of {MODES}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ValueError("need at least one step")
    if observed is None:
        obs = np.ones(x.shape, dtype=bool)
    else:
        obs = np.broadcast_to(np.asarray(observed, dtype=bool), x.shape)
    if not np.all(np.isfinite(x[obs])):
        raise ValueError("non-finite values in observed input")

    xo = np.where(obs, x, 0.0)
    count = np.cumsum(obs, axis=-1, dtype=np.float64)
    safe = np.maximum(count, 1.0)
    # work relative to the first observation: exact for constant input and
    # better conditioned for large offsets
    first = np.take_along_axis(xo, np.argmax(obs, axis=-1)[..., None], axis=-1)
    y = np.where(obs, xo - first, 0.0)
    m1 = np.cumsum(y, axis=-1) / safe
    mu = np.where(count > 0, first + m1, 0.0)

    if mode == "elementwise-cumsum":
        dev2 = np.where(obs, (m1 - y) ** 2, 0.0)
        var = np.cumsum(dev2, axis=-1) / safe
    else:
        m2 = np.cumsum(y * y, axis=-1) / safe
        var = np.maximum(m2 - m1 * m1, 0.0)

    sigma = np.maximum(np.sqrt(var), eps)
    x_norm = np.where(obs, (y - m1) / sigma, 0.0)
    return x_norm, CausalStats(mu, sigma)


def denormalize_forecast(y_norm, stats: CausalStats, t: int) -> np.ndarray:
    """Map a normalized forecast (any shape) back with the statistics at step ``t``."""
    mu, sigma = stats.at(t)
    return np.asarray(y_norm, dtype=np.float64) * sigma + mu
