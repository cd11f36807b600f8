"""Point and quantile forecast metrics with seasonal-naive normalization."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

SCALE_EPS = 1e-12


def pinball(e, q):
    """Pinball (quantile) loss of residual ``e = target - prediction``."""
    e = np.asarray(e, dtype=np.float64)
    return np.maximum(q * e, (q - 1.0) * e)


def seasonal_naive(history, m: int, horizon: int) -> np.ndarray:
    """Repeat the last observed season ``horizon`` steps ahead."""
    history = np.asarray(history, dtype=np.float64)
    if horizon <= 0:
        return np.empty((0,) + history.shape[1:])
    if len(history) == 0:
        raise ValueError("empty history")
    m = int(m)
    if m < 1 or len(history) < m:
        log.warning("history of %d steps is shorter than season %d; using last value", len(history), m)
        m = 1
    idx = len(history) - m + (np.arange(horizon) % m)
    return history[idx]


def mase_scale(insample, m: int) -> float:
    """In-sample mean absolute seasonal difference (unclamped)."""
    insample = np.asarray(insample, dtype=np.float64)
    m = int(m)
    if len(insample) <= m:
        log.warning("in-sample of %d steps does not exceed season %d; using lag 1", len(insample), m)
        m = 1
    if len(insample) <= m:
        return 0.0
    return float(np.mean(np.abs(insample[m:] - insample[:-m])))


def mase(pred, target, insample, m: int) -> float:
    target = np.asarray(target, dtype=np.float64)
    if target.size == 0:
        raise ValueError("empty target")
    err = float(np.mean(np.abs(target - np.asarray(pred, dtype=np.float64))))
    return err / max(mase_scale(insample, m), SCALE_EPS)


def wql(pred_quantiles, target, levels) -> float:
    """Weighted quantile loss; ``pred_quantiles`` has quantiles on its last axis."""
    pq = np.asarray(pred_quantiles, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    levels = np.asarray(levels, dtype=np.float64)
    if pq.shape[:-1] != target.shape or pq.shape[-1] != levels.size:
        raise ValueError(f"shape mismatch: {pq.shape} vs target {target.shape} and {levels.size} levels")
    loss = pinball(target[..., None] - pq, levels).sum()
    scale = np.abs(target).sum()
    return float(2.0 * loss / (levels.size * max(scale, SCALE_EPS)))


crps = wql


def aggregate(values: Iterable[float]) -> float:
    """Geometric mean; non-positive or non-finite entries are dropped with a warning."""
    vals = np.asarray(list(values), dtype=np.float64)
    keep = np.isfinite(vals) & (vals > 0)
    if not keep.all():
        log.warning("excluding %d non-positive/non-finite values from the geometric mean", int((~keep).sum()))
    if not keep.any():
        return math.nan
    return float(np.exp(np.mean(np.log(vals[keep]))))


@dataclass
class TaskResult:
    task_id: str
    mase_model: float = math.nan
    mase_naive: float = math.nan
    wql_model: float = math.nan
    wql_naive: float = math.nan
    mase_ratio: float = math.nan
    wql_ratio: float = math.nan
    degenerate: bool = False
    error: str = ""

    @property
    def crps_ratio(self) -> float:
        return self.wql_ratio


@dataclass
class EvalReport:
    per_task: list[TaskResult]
    aggregate: dict = field(default_factory=dict)

    def to_json(self, path) -> None:
        payload = {"per_task": [asdict(r) | {"crps_ratio": r.crps_ratio} for r in self.per_task],
                   "aggregate": self.aggregate}
        Path(path).write_text(json.dumps(payload, indent=2, allow_nan=True))

    def to_csv(self, path) -> None:
        cols = ["task_id", "mase_model", "mase_naive", "wql_model", "wql_naive", "mase_ratio", "wql_ratio",
                "crps_ratio", "degenerate", "error"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in self.per_task:
                w.writerow([r.task_id, r.mase_model, r.mase_naive, r.wql_model, r.wql_naive, r.mase_ratio,
                            r.wql_ratio, r.crps_ratio, int(r.degenerate), r.error])
            w.writerow(["__aggregate__", "", "", "", "", self.aggregate.get("mase"), self.aggregate.get("wql"),
                        self.aggregate.get("crps"), "", ""])


def score_task(task_id: str, history, target, pred_quantiles, levels, m: int) -> TaskResult:
    """Score one task against the seasonal naive (point forecast repeated at every level).

    ``history``/``target`` are ``(T,)`` or ``(T, channels)``; ``pred_quantiles``
    is ``(T, K)`` or ``(T, K, channels)`` to match.
    """
    history = np.asarray(history, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    pq = np.asarray(pred_quantiles, dtype=np.float64)
    if history.ndim == 1:
        history, target = history[:, None], target[:, None]
        if pq.ndim == 2:
            pq = pq[:, :, None]
    levels = np.asarray(levels, dtype=np.float64)
    pq = np.moveaxis(pq, 1, -1)  # (T, C, K)
    med = int(np.argmin(np.abs(levels - 0.5)))
    naive = seasonal_naive(history, m, len(target))
    naive_q = np.repeat(naive[..., None], levels.size, axis=-1)

    scale = np.mean([mase_scale(history[:, c], m) for c in range(history.shape[1])])
    degenerate = scale < SCALE_EPS or np.abs(target).sum() < SCALE_EPS
    res = TaskResult(task_id, degenerate=bool(degenerate))
    denom = max(scale, SCALE_EPS)
    res.mase_model = float(np.mean(np.abs(target - pq[..., med]))) / denom
    res.mase_naive = float(np.mean(np.abs(target - naive))) / denom
    res.wql_model = wql(pq, target, levels)
    res.wql_naive = wql(naive_q, target, levels)
    res.mase_ratio = res.mase_model / res.mase_naive if res.mase_naive > 0 else math.nan
    res.wql_ratio = res.wql_model / res.wql_naive if res.wql_naive > 0 else math.nan
    return res


def build_report(results: Sequence[TaskResult]) -> EvalReport:
    results = sorted(results, key=lambda r: r.task_id)
    usable = [r for r in results if not r.error and not r.degenerate]
    for r in results:
        if r.degenerate:
            log.warning("task %s is degenerate (zero scale); excluded from aggregate", r.task_id)
    agg = {
        "mase": aggregate(r.mase_ratio for r in usable),
        "wql": aggregate(r.wql_ratio for r in usable),
        "num_tasks": len(results),
        "num_scored": len(usable),
    }
    agg["crps"] = agg["wql"]
    return EvalReport(results, agg)


def evaluate(tasks: Sequence[dict], predict: Callable[[dict], np.ndarray], levels) -> EvalReport:
    """Run ``predict`` on each task and score it.

    Each task is a dict with ``id``, ``history``, ``target`` and ``seasonality``;
    ``predict(task)`` returns ``(T, K[, channels])`` quantiles. Failures are
    recorded per task rather than raised.
    """
    results = []
    for task in tasks:
        try:
            pq = predict(task)
            m = max(1, int(round(task["seasonality"])))
            results.append(score_task(task["id"], task["history"], task["target"], pq, levels, m))
        except Exception as exc:  # noqa: BLE001 - recorded, not swallowed
            log.error("task %s failed: %s", task["id"], exc)
            results.append(TaskResult(task["id"], error=f"{type(exc).__name__}: {exc}"))
    return build_report(results)
