"""Finite-difference verification of every backward rule and of the full model.

Errors are per coordinate: ``|ad - fd| / max(|ad|, |fd|, floor)``. The floor
keeps coordinates whose true gradient is at rounding level (central
differences of an O(1) function carry ~1e-11 absolute noise) from reporting
spurious relative errors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .model import ModelConfig, anchor_forecasts, denormalize, init_params, model_inputs
from .training import _targets, anchor_range, apply_cpm_mask, parallel_forecast_loss

STEP = 1e-5
TOLERANCE = 1e-4
FLOOR = 1e-7


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    coords: int
    skipped: int = 0
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tolerance)


@dataclass
class GradcheckReport:
    results: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def lines(self) -> list[str]:
        out = [f"{'check':<24}{'max_rel_err':>14}{'coords':>8}{'skipped':>9}  status"]
        for r in self.results:
            out.append(f"{r.name:<24}{r.max_rel_error:>14.3e}{r.coords:>8}{r.skipped:>9}  "
                       f"{'PASS' if r.passed else 'FAIL'}")
        return out


def rel_error(a, b, floor: float = FLOOR) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def _real_views(x: np.ndarray):
    """(array, setter-part) pairs covering every real degree of freedom of ``x``."""
    return [("re", x)] if not np.iscomplexobj(x) else [("re", x), ("im", x)]


def check_rule(name: str, fn: Callable, inputs: list, rng: np.random.Generator, h: float = STEP) -> CheckResult:
    """Compare the tape's VJP of ``fn`` against central differences of
    ``phi(x) = Re <g, fn(x)>`` for a random cotangent ``g``."""
    out = np.asarray(fn(*inputs))
    g = rng.normal(size=out.shape)
    if np.iscomplexobj(out):
        g = g + 1j * rng.normal(size=out.shape)

    def phi(*xs):
        return float(np.real(np.sum(np.conj(g) * fn(*xs))))

    tape = ad.Tape()
    leaves = [tape.leaf(x) for x in inputs]
    y = fn(*leaves)
    grads = tape.vjp(y, g, leaves)
    worst, coords = 0.0, 0
    for i, x in enumerate(inputs):
        for part, _ in _real_views(x):
            for idx in np.ndindex(x.shape):
                bump = h if part == "re" else 1j * h
                xp = [v.copy() for v in inputs]
                xm = [v.copy() for v in inputs]
                xp[i][idx] += bump
                xm[i][idx] -= bump
                fd = (phi(*xp) - phi(*xm)) / (2 * h)
                an = grads[i][idx].real if part == "re" else grads[i][idx].imag
                worst = max(worst, float(rel_error(an, fd)))
                coords += 1
    return CheckResult(name, worst, coords)


def _cplx(rng, *shape):
    return rng.normal(size=shape) + 1j * rng.normal(size=shape)


def primitive_cases(rng: np.random.Generator) -> list[tuple[str, Callable, list]]:
    r = lambda *s: rng.normal(size=s)  # noqa: E731
    lam = -rng.uniform(0.2, 1.0, 3) + 1j * rng.normal(size=3)
    a_scan = 0.9 * np.exp(1j * rng.uniform(0, np.pi, 3)) * rng.uniform(0.5, 1.0, 3)
    pred = r(4, 3)
    target = pred[:, 0] + rng.choice([-1.0, 1.0], size=4) * rng.uniform(0.3, 1.0, 4)
    return [
        ("add", ad.add, [r(3, 2), r(2)]),
        ("sub", ad.sub, [_cplx(rng, 3), _cplx(rng, 3)]),
        ("mul", ad.mul, [r(3, 2), _cplx(rng, 3, 2)]),
        ("div", ad.div, [_cplx(rng, 4), _cplx(rng, 4) + 3.0]),
        ("neg", ad.neg, [r(5)]),
        ("exp", ad.exp, [_cplx(rng, 4) * 0.5]),
        ("gelu", ad.gelu, [r(6) * 2]),
        ("complex", ad.complex_, [r(3), r(3)]),
        ("real", ad.real, [_cplx(rng, 2, 3)]),
        ("zoh_scale", ad.zoh_scale, [lam, rng.uniform(0.01, 0.5, 3)]),
        ("zoh_scale_limit", ad.zoh_scale, [np.array([0.0 + 0.0j, 1e-13 + 0j]), rng.uniform(0.01, 0.5, 2)]),
        ("zoh_scale_series", ad.zoh_scale, [np.array([-3e-5 + 2e-5j, 1e-9 - 4e-9j]), rng.uniform(0.5, 2.0, 2)]),
        ("matmul", ad.matmul, [r(2, 4, 3), _cplx(rng, 3, 2)]),
        ("matmul_2d", ad.matmul, [r(3, 4), r(4, 2)]),
        ("matmul_vec", ad.matmul, [r(3, 4), r(4)]),
        ("reshape", lambda x: ad.reshape(x, (3, 2)), [r(2, 3)]),
        ("transpose", lambda x: ad.transpose(x, (2, 0, 1)), [r(2, 3, 4)]),
        ("getitem", lambda x: ad.getitem(x, (slice(None), slice(1, 3))), [r(3, 4)]),
        ("getitem_fancy", lambda x: ad.getitem(x, np.array([0, 2, 2])), [r(3, 2)]),
        ("sum", lambda x: ad.sum(x, axis=1), [r(3, 4)]),
        ("mean", lambda x: ad.mean(x, axis=0), [r(3, 4)]),
        ("layer_norm", ad.layer_norm, [r(3, 5)]),
        ("linear_scan", lambda a, b: ad.linear_scan(a, b, axis=-2), [a_scan, _cplx(rng, 2, 7, 3)]),
        ("pinball", lambda p, y: ad.pinball_loss(p, y, (0.1, 0.5, 0.9)), [pred, target]),
    ]


def check_primitives(seed: int = 0, only: list[str] | None = None) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    for name, fn, inputs in primitive_cases(rng):
        if only and name not in only:
            continue
        out.append(check_rule(name, fn, inputs, rng))
    return out


def tiny_config() -> ModelConfig:
    return ModelConfig(num_layers=1, state_size=4, hidden_size=8, mlp_hidden=16, context_length=16,
                       min_context=4, base_horizon=6, basis_n=6)


def check_model(seed: int = 0, cfg: ModelConfig | None = None, h: float = STEP) -> CheckResult:
    """Full parallel-forecast loss of a random tiny model against central differences.

    The pinball loss is piecewise linear; a coordinate whose ``+-h`` probe
    flips the sign of any residual straddles a kink and is skipped (counted).
    """
    cfg = cfg or tiny_config()
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed)
    # move off the zero-initialized biases so every path carries signal
    params = {k: v + 0.05 * rng.normal(size=v.shape) for k, v in params.items()}
    window = np.cumsum(rng.normal(size=cfg.context_length + cfg.base_horizon))
    _, flags = apply_cpm_mask(window[: cfg.context_length], rng, base_horizon=3,
                              min_context=cfg.min_context, prob=1.0)
    anchors = anchor_range(cfg)
    targets = _targets(window, cfg, anchors)
    obs = flags == 0

    def loss(p):
        return float(parallel_forecast_loss(window, p, cfg, flags=flags))

    def signs(p):
        inputs, stats = model_inputs(window[: cfg.context_length], obs, cfg.norm_variance_mode)
        y = denormalize(anchor_forecasts(p, cfg, inputs, anchors), stats, anchors)
        return np.sign(targets[..., None] - y)

    tape = ad.Tape()
    names = sorted(params)
    leaves = [tape.leaf(params[k]) for k in names]
    lv = parallel_forecast_loss(window, dict(zip(names, leaves)), cfg, flags=flags)
    grads = dict(zip(names, tape.backward(lv, leaves)))

    base_signs = signs(params)
    worst, coords, skipped = 0.0, 0, 0
    for k in names:
        for idx in np.ndindex(params[k].shape):
            pp = dict(params)
            pm = dict(params)
            pp[k] = params[k].copy()
            pm[k] = params[k].copy()
            pp[k][idx] += h
            pm[k][idx] -= h
            if np.any(signs(pp) != base_signs) or np.any(signs(pm) != base_signs):
                skipped += 1
                continue
            fd = (loss(pp) - loss(pm)) / (2 * h)
            worst = max(worst, float(rel_error(grads[k][idx], fd)))
            coords += 1
    return CheckResult("full_model", worst, coords, skipped)


def run_gradcheck(seed: int = 0, include_model: bool = True) -> GradcheckReport:
    report = GradcheckReport(check_primitives(seed))
    if include_model:
        report.results.append(check_model(seed))
    return report
