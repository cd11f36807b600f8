"""Parallel-forecast training: CPM masking, pinball objective, Adam."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autodiff as ad
from .autodiff import pinball_loss
from .checkpoint import load_checkpoint, save_checkpoint
from .encoder import max_real_eigenvalue
from .model import ModelConfig, anchor_forecasts, denormalize, init_params, model_inputs

__all__ = [
    "TrainConfig",
    "AdamState",
    "TrainingError",
    "pinball_loss",
    "apply_cpm_mask",
    "anchor_range",
    "parallel_forecast_loss",
    "train_step",
    "train",
]


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch: int = 8
    learning_rate: float = 3e-3
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    cosine_decay: bool = True
    cpm_enabled: bool = True
    patch_mask_prob: float = 0.5
    parallel: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.steps < 0 or self.batch < 1:
            raise ValueError("steps must be >= 0 and batch >= 1")
        if not 0.0 <= self.patch_mask_prob <= 1.0:
            raise ValueError("patch_mask_prob must lie in [0, 1]")
        if self.learning_rate < 0 or self.grad_clip <= 0:
            raise ValueError("learning_rate must be >= 0 and grad_clip > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def apply_cpm_mask(x, rng: np.random.Generator, *, base_horizon: int, min_context: int,
                   prob: float, enabled: bool = True):
    """Zero one contiguous block per series with probability ``prob``.

    Blocks span 1-3 base horizons and never touch the first ``min_context``
    steps. Returns ``(x_masked, flags)`` with ``flags == 1`` on masked steps.
    """
    x = np.array(x, dtype=np.float64)
    flags = np.zeros(x.shape, dtype=np.float64)
    if not enabled or prob <= 0:
        return x, flags
    L = x.shape[-1]
    room = L - min_context
    rows = x.reshape(-1, L)
    frows = flags.reshape(-1, L)
    for r in range(rows.shape[0]):
        if room <= 0 or rng.random() >= prob:
            continue
        length = min(int(rng.integers(1, 4)) * base_horizon, room)
        start = int(rng.integers(min_context, L - length + 1))
        rows[r, start:start + length] = 0.0
        frows[r, start:start + length] = 1.0
    return x, flags


def anchor_range(cfg: ModelConfig, parallel: bool = True) -> slice:
    """0-based positions of forecast anchors ``t = L_min..L-1`` (1-based)."""
    L = cfg.context_length
    first = cfg.min_context if parallel else L - 1
    return slice(first - 1, L - 1)


def _targets(window: np.ndarray, cfg: ModelConfig, anchors: slice) -> np.ndarray:
    T = cfg.base_horizon
    # anchor at 0-based position p forecasts window[p+1 : p+1+T]
    views = sliding_window_view(window, T, axis=-1)
    return views[..., anchors.start + 1:anchors.stop + 1, :]


def parallel_forecast_loss(window, params: Mapping, cfg: ModelConfig, *, flags=None,
                           parallel: bool = True, anchors: slice | None = None):
    """Mean pinball loss over all anchors of one encoder pass.

    ``window`` is ``(..., L + T)`` of true values; ``flags`` (``(..., L)``)
    marks masked context steps, whose values the model never sees.
    """
    window = np.asarray(window, dtype=np.float64)
    L, T = cfg.context_length, cfg.base_horizon
    if window.shape[-1] < L + T:
        raise ValueError(f"window of {window.shape[-1]} steps is shorter than L + T = {L + T}")
    window = window[..., : L + T]
    observed = None if flags is None else np.asarray(flags) == 0
    inputs, stats = model_inputs(window[..., :L], observed, cfg.norm_variance_mode)
    anchors = anchor_range(cfg, parallel) if anchors is None else anchors
    y_norm = anchor_forecasts(params, cfg, inputs, anchors)
    y = denormalize(y_norm, stats, anchors)
    return pinball_loss(y, _targets(window, cfg, anchors), cfg.quantile_levels)


@dataclass
class AdamState:
    step: int
    m: dict
    v: dict

    @classmethod
    def zeros(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls(0, {k: np.zeros_like(v) for k, v in params.items()}, {k: np.zeros_like(v) for k, v in params.items()})


def learning_rate(tcfg: TrainConfig, step: int) -> float:
    if not tcfg.cosine_decay or tcfg.steps <= 0:
        return tcfg.learning_rate
    return tcfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * min(step, tcfg.steps) / tcfg.steps))


def loss_and_grads(window, params: Mapping, cfg: ModelConfig, flags=None, parallel=True):
    tape = ad.Tape()
    names = sorted(params)
    leaves = {k: tape.leaf(params[k]) for k in names}
    loss = parallel_forecast_loss(window, leaves, cfg, flags=flags, parallel=parallel)
    grads = tape.backward(loss, [leaves[k] for k in names])
    return float(loss.value), dict(zip(names, grads))


def train_step(window, params: dict, state: AdamState, cfg: ModelConfig, tcfg: TrainConfig, flags=None):
    """One clipped Adam(W) step. Returns ``(params, state, loss, grad_norm)``."""
    loss, grads = loss_and_grads(window, params, cfg, flags, tcfg.parallel)
    if not math.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss} at step {state.step}")
    gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if not math.isfinite(gnorm):
        bad = sorted(k for k, g in grads.items() if not np.all(np.isfinite(g)))
        raise TrainingError(f"non-finite gradient at step {state.step} in {bad}")
    clip = min(1.0, tcfg.grad_clip / (gnorm + 1e-12))
    lr = learning_rate(tcfg, state.step)
    b1, b2 = tcfg.betas
    t = state.step + 1
    new_params = {}
    for k in sorted(params):
        g = grads[k] * clip
        m = b1 * state.m[k] + (1 - b1) * g
        v = b2 * state.v[k] + (1 - b2) * g * g
        state.m[k], state.v[k] = m, v
        update = (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + tcfg.adam_eps)
        p = params[k]
        if tcfg.weight_decay:
            p = p * (1.0 - lr * tcfg.weight_decay)
        new_params[k] = p - lr * update
    state.step = t
    if not max_real_eigenvalue(new_params) < 0:
        raise TrainingError("state matrix left the stable half-plane")
    return new_params, state, loss, gnorm


def sample_windows(series: Sequence[np.ndarray], batch: int, length: int, rng: np.random.Generator) -> np.ndarray:
    eligible = [i for i, s in enumerate(series) if len(s) >= length]
    if not eligible:
        raise ValueError(f"no training series with at least {length} steps")
    out = np.empty((batch, length))
    for b in range(batch):
        s = series[eligible[int(rng.integers(len(eligible)))]]
        start = int(rng.integers(0, len(s) - length + 1))
        out[b] = s[start:start + length]
    return out


def step_batch(series, cfg: ModelConfig, tcfg: TrainConfig, step: int):
    """Training batch and CPM flags for ``step``; a pure function of (seed, step)."""
    rng = np.random.default_rng([tcfg.seed, step])
    L, T = cfg.context_length, cfg.base_horizon
    window = sample_windows(series, tcfg.batch, L + T, rng)
    _, flags = apply_cpm_mask(window[:, :L], rng, base_horizon=T, min_context=cfg.min_context,
                              prob=tcfg.patch_mask_prob, enabled=tcfg.cpm_enabled)
    return window, flags


@dataclass
class TrainResult:
    params: dict
    state: AdamState
    losses: list = field(default_factory=list)


LOG_FIELDS = ("step", "loss", "grad_norm", "wall_time")


def train(
    series: Sequence[np.ndarray],
    cfg: ModelConfig,
    tcfg: TrainConfig,
    *,
    params: dict | None = None,
    state: AdamState | None = None,
    checkpoint_path=None,
    log_path=None,
    stop_after: int | None = None,
    checkpoint_every: int = 0,
    callback: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Run (or continue) training until ``tcfg.steps`` or ``stop_after`` steps."""
    series = [np.asarray(s, dtype=np.float64) for s in series]
    if params is None:
        params = init_params(cfg, tcfg.seed)
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    state = AdamState.zeros(params) if state is None else state
    end = tcfg.steps if stop_after is None else min(tcfg.steps, stop_after)
    log = None
    if log_path is not None:
        log_path = Path(log_path)
        fresh = not log_path.exists() or state.step == 0
        log = open(log_path, "w" if fresh else "a", newline="")
        writer = csv.writer(log)
        if fresh:
            writer.writerow(LOG_FIELDS)
    losses = []
    t0 = time.perf_counter()
    try:
        while state.step < end:
            window, flags = step_batch(series, cfg, tcfg, state.step)
            params, state, loss, gnorm = train_step(window, params, state, cfg, tcfg, flags)
            losses.append(loss)
            if log is not None:
                writer.writerow([state.step, repr(loss), repr(gnorm), f"{time.perf_counter() - t0:.3f}"])
            if callback is not None:
                callback(state.step, loss)
            if checkpoint_path and checkpoint_every and state.step % checkpoint_every == 0:
                save_checkpoint(checkpoint_path, cfg.to_dict(), params, tcfg.to_dict(), state)
    finally:
        if log is not None:
            log.close()
    if checkpoint_path:
        save_checkpoint(checkpoint_path, cfg.to_dict(), params, tcfg.to_dict(), state)
    return TrainResult(params, state, losses)


def resume_state(path) -> tuple[dict, AdamState, dict]:
    """Parameters, optimizer state and saved train config from a checkpoint."""
    ck = load_checkpoint(path)
    params = ck["params"]
    if not ck["adam_m"]:
        return params, AdamState.zeros(params), ck["meta"].get("train", {})
    state = AdamState(int(ck["meta"].get("step", 0)), ck["adam_m"], ck["adam_v"])
    return params, state, ck["meta"].get("train", {})
