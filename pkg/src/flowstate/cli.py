"""Command line interface.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every command writes only below ``--output-dir`` and removes its own partial
outputs when it fails.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import math
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig
from .data import DatasetError, TimeSeries, generate_synthetic, load_dataset, save_dataset, toy_series
from .gradcheck import run_gradcheck
from .metrics import evaluate, seasonal_naive
from .model import ModelConfig, init_params
from .pipeline import ForecastRequest, TaskSpec, effective_lengths, forecast, scale_factor
from .training import TrainingError, resume_state, train

log = logging.getLogger("flowstate")


class UsageError(Exception):
    pass


class Outputs:
    """Tracks files a command creates so a failure can remove them."""

    def __init__(self, root):
        self.root = Path(root)
        self.created: list[Path] = []
        self._made_root = False

    def __enter__(self):
        if not self.root.exists():
            self.root.mkdir(parents=True)
            self._made_root = True
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            for p in reversed(self.created):
                with contextlib.suppress(OSError):
                    p.unlink()
            if self._made_root:
                with contextlib.suppress(OSError):
                    self.root.rmdir()
        return False

    def path(self, name) -> Path:
        p = Path(name)
        p = p if p.is_absolute() else self.root / p
        try:
            p.resolve().relative_to(self.root.resolve())
        except ValueError:
            raise UsageError(f"{p} is outside the output directory {self.root}") from None
        if not p.exists():
            self.created.append(p)
        return p

    def write_text(self, name, text: str) -> Path:
        p = self.path(name)
        fd, tmp = tempfile.mkstemp(dir=p.parent, prefix=p.name, suffix=".tmp")
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, p)
        return p


def _threads():
    n = os.environ.get("FLOWSTATE_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(max(1, int(n)))


def _training_series(cfg: RunConfig) -> list[np.ndarray]:
    data = cfg.data
    if data.get("path"):
        series, _ = load_dataset(data["path"], data.get("format", "csv_long"), data.get("manifest"))
        out = []
        for ts in series:
            hist = ts.history
            out.extend(hist[:, c] for c in range(hist.shape[1]))
        return out
    syn = dict(data["synthetic"])
    kind = syn.get("kind", "toy")
    n, length, seed = int(syn.get("num_series", 64)), int(syn.get("length", 1500)), int(syn.get("seed", 0))
    if kind == "toy":
        return [toy_series(seed * 100003 + i, length, noise=float(syn.get("noise", 0.2))).values[:, 0] for i in range(n)]
    params = {"noise": float(syn["noise"])} if "noise" in syn else {}
    return [generate_synthetic(kind, seed * 100003 + i, length, **params).values[:, 0] for i in range(n)]


def cmd_train(args) -> int:
    overrides = {"train.steps": args.steps, "seed": args.seed}
    if args.output_dir:
        overrides["paths.output_dir"] = args.output_dir
    cfg = RunConfig.load(args.config, overrides) if args.config else RunConfig.from_dict({}, ".", overrides)
    with Outputs(cfg.output_dir) as out:
        out.write_text("resolved_config.json", json.dumps(cfg.to_dict(), indent=2))
        ck_path = out.path(cfg.paths["checkpoint"])
        log_path = out.path(cfg.paths["log"])
        params = state = None
        if args.resume and ck_path.exists():
            params, state, _ = resume_state(ck_path)
            log.info("resuming from step %d", state.step)
        series = _training_series(cfg)
        result = train(series, cfg.model, cfg.train, params=params, state=state, checkpoint_path=ck_path,
                       log_path=log_path, stop_after=args.stop_after, checkpoint_every=cfg.checkpoint_every)
        last = f"{result.losses[-1]:.6f}" if result.losses else "n/a"
        print(f"trained to step {result.state.step}; last loss {last}; checkpoint {ck_path}")
    return 0


def _load_model(path) -> tuple[ModelConfig, dict]:
    ck = load_checkpoint(path)
    return ModelConfig(**ck["meta"]["model"]), ck["params"]


def _load_one_series(args) -> tuple[TimeSeries, dict]:
    series, manifest = load_dataset(args.series, args.format, args.manifest)
    if args.id is not None:
        series = [s for s in series if s.id == args.id]
        if not series:
            raise UsageError(f"no series with id {args.id!r}")
    if len(series) != 1:
        raise UsageError(f"{len(series)} series found; pick one with --id")
    return series[0], manifest


def _seasonality(args, ts: TimeSeries) -> float:
    if args.seasonality is not None:
        return float(args.seasonality)
    if "seasonality" in ts.meta:
        return float(ts.meta["seasonality"])
    raise UsageError("no seasonality: pass --seasonality or provide a manifest entry")


def cmd_forecast(args) -> int:
    cfg, params = _load_model(args.checkpoint)
    ts, _ = _load_one_series(args)
    m = _seasonality(args, ts)
    context = ts.history
    obs = None if ts.observed is None else ts.observed[: len(context)]
    s = scale_factor(TaskSpec(m, 1), cfg.base_seasonality, args.scale_override)
    L_eff, t_eff = effective_lengths(s, cfg.context_length, cfg.base_horizon, len(context))
    horizon = args.horizon or int(ts.meta.get("horizon", t_eff))
    task = TaskSpec(m, horizon, len(context))
    y = forecast(ForecastRequest(context, task, args.mode, args.scale_override, obs), params, cfg)
    last_t = ts.timestamps[len(context) - 1]
    with Outputs(args.output_dir) as out:
        lines = [f"# mode={args.mode} s_delta={s!r} L_eff={L_eff} T_eff={t_eff} seasonality={m!r} id={ts.id}"]
        header = ["timestamp", "channel"] + [f"q{q:g}" for q in cfg.quantile_levels]
        rows = [",".join(header)]
        for c, ch in enumerate(ts.channels):
            for k in range(horizon):
                stamp = last_t + (k + 1) * ts.interval
                rows.append(",".join([repr(float(stamp)), ch] + [repr(float(v)) for v in y[k, :, c]]))
        p = out.write_text(args.output_name, "\n".join(lines + rows) + "\n")
        print(f"wrote {horizon} steps x {len(ts.channels)} channel(s) to {p}")
    return 0


def _eval_tasks(series: list[TimeSeries]) -> list[dict]:
    tasks = []
    for ts in series:
        task = {"id": ts.id, "seasonality": ts.meta.get("seasonality"), "series": ts}
        horizon = ts.meta.get("horizon")
        if ts.split is None or horizon is None or task["seasonality"] is None:
            task["error"] = "manifest must give split, horizon and seasonality"
            task["history"] = task["target"] = np.zeros(1)
        else:
            task["history"] = ts.values[: ts.split]
            task["target"] = ts.values[ts.split: ts.split + int(horizon)]
            if len(task["target"]) < int(horizon):
                task["error"] = f"only {len(task['target'])} steps after the split, need {horizon}"
        tasks.append(task)
    return tasks


def cmd_evaluate(args) -> int:
    series, _ = load_dataset(args.data, args.format, args.manifest)
    if args.model == "seasonal-naive":
        levels = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)

        def predict(task):
            if "error" in task:
                raise ValueError(task["error"])
            m = max(1, int(round(task["seasonality"])))
            naive = seasonal_naive(task["history"], m, len(task["target"]))
            return np.repeat(naive[:, None, :], len(levels), axis=1)
    else:
        if not args.checkpoint:
            raise UsageError("--checkpoint is required unless --model seasonal-naive")
        cfg, params = _load_model(args.checkpoint)
        levels = cfg.quantile_levels

        def predict(task):
            if "error" in task:
                raise ValueError(task["error"])
            ts = task["series"]
            obs = None if ts.observed is None else ts.observed[: ts.split]
            spec = TaskSpec(float(task["seasonality"]), len(task["target"]), len(task["history"]))
            return forecast(ForecastRequest(task["history"], spec, args.mode, args.scale_override, obs), params, cfg)

    report = evaluate(_eval_tasks(series), predict, levels)
    with Outputs(args.output_dir) as out:
        report.to_csv(out.path("report.csv"))
        report.to_json(out.path("report.json"))
    agg = report.aggregate
    print(f"tasks={agg['num_tasks']} scored={agg['num_scored']} MASE={agg['mase']:.4f} WQL={agg['wql']:.4f}")
    if report.per_task and all(r.error for r in report.per_task):
        log.error("every task failed")
        return 1
    return 0


def _parse_factors(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    if not out or min(out) < 1:
        raise argparse.ArgumentTypeError("factors must be positive integers, e.g. 1-13 or 1,2,5")
    return out


def resample_eval(x, seasonality: float, factors, target: int, params, cfg: ModelConfig, *,
                  scale_adjust: bool = True, mode: str = "mpi") -> list[dict]:
    """MAE of the median forecast for each subsampling factor of ``x`` (``(T,)`` or ``(T, C)``)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    rows = []
    for k in factors:
        sub = x[::k]
        if len(sub) < cfg.min_context + target:
            log.warning("factor %d leaves %d steps (< min context %d + target %d); skipped",
                        k, len(sub), cfg.min_context, target)
            continue
        season = seasonality / k
        hist, tgt = sub[:-target], sub[-target:]
        task = TaskSpec(season, target, len(hist))
        override = None if scale_adjust else 1.0
        s = scale_factor(task, cfg.base_seasonality, override)
        y = forecast(ForecastRequest(hist, task, mode, override), params, cfg)
        med = int(np.argmin(np.abs(np.asarray(cfg.quantile_levels) - 0.5)))
        mae = float(np.mean(np.abs(y[:, med, :] - tgt)))
        rows.append({"factor": k, "seasonality": season, "s_delta": s, "context": len(hist), "mae": mae})
    return rows


def cmd_resample_eval(args) -> int:
    cfg, params = _load_model(args.checkpoint)
    ts, _ = _load_one_series(args)
    m = _seasonality(args, ts)
    rows = resample_eval(ts.values, m, args.factors, args.target, params, cfg,
                         scale_adjust=not args.no_scale_adjust, mode=args.mode)
    with Outputs(args.output_dir) as out:
        p = out.path(args.output_name)
        with open(p, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["factor", "interval", "seasonality", "s_delta", "context", "mae"])
            w.writeheader()
            for r in rows:
                w.writerow({**r, "interval": ts.interval * r["factor"]})
        print(f"wrote {len(rows)} factor(s) to {p}")
    return 0 if rows else 1


def cmd_gradcheck(args) -> int:
    report = run_gradcheck(args.seed, include_model=not args.skip_model)
    text = "\n".join(report.lines())
    print(text)
    if args.output_dir:
        with Outputs(args.output_dir) as out:
            out.write_text("gradcheck.txt", text + "\n")
    return 0 if report.passed else 1


def cmd_generate(args) -> int:
    series = []
    for i in range(args.num_series):
        seed = args.seed * 100003 + i
        if args.kind == "toy":
            ts = toy_series(seed, args.length, noise=args.noise)
        else:
            ts = generate_synthetic(args.kind, seed, args.length, noise=args.noise)
        ts.id = f"{args.kind}-{i}"
        ts.split = args.length - args.horizon
        ts.meta = {"seasonality": args.seasonality, "horizon": args.horizon}
        series.append(ts)
    with Outputs(args.output_dir) as out:
        target = out.path("data.csv" if args.format == "csv_long" else "series")
        manifest = out.path("manifest.json")
        for p in save_dataset(series, target, args.format, manifest):
            if p not in out.created:
                out.created.append(p)
        print(f"wrote {len(series)} series to {target}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="flowstate", description="Continuous-time SSM forecaster", formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a JSON config", formatter_class=fmt)
    p.add_argument("--config", help="run config (JSON); defaults apply when omitted")
    p.add_argument("--steps", type=int, help="override train.steps")
    p.add_argument("--seed", type=int, help="override seed")
    p.add_argument("--output-dir", help="override paths.output_dir")
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint in the output dir")
    p.add_argument("--stop-after", type=int, help="stop once this many total steps are done")
    p.set_defaults(func=cmd_train)

    def series_args(p):
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--series", required=True, help="CSV file with the series")
        p.add_argument("--format", choices=["csv_wide", "csv_long"], default="csv_wide")
        p.add_argument("--id", help="series id (long format with several series)")
        p.add_argument("--manifest", help="manifest JSON with seasonality/horizon/split")
        p.add_argument("--seasonality", type=float, help="steps per season (overrides manifest)")
        p.add_argument("--mode", choices=["mpi", "autoregressive"], default="mpi")
        p.add_argument("--output-dir", required=True)

    p = sub.add_parser("forecast", help="forecast one series", formatter_class=fmt)
    series_args(p)
    p.add_argument("--horizon", type=int, help="steps to forecast (default: manifest horizon or T_eff)")
    p.add_argument("--scale-override", type=float, help="use this s_delta instead of 24/seasonality")
    p.add_argument("--output-name", default="forecast.csv")
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("evaluate", help="MASE/WQL against the seasonal naive", formatter_class=fmt)
    p.add_argument("--checkpoint")
    p.add_argument("--model", choices=["flowstate", "seasonal-naive"], default="flowstate")
    p.add_argument("--data", required=True)
    p.add_argument("--format", choices=["csv_long", "csv_wide"], default="csv_long")
    p.add_argument("--manifest")
    p.add_argument("--mode", choices=["mpi", "autoregressive"], default="mpi")
    p.add_argument("--scale-override", type=float)
    p.add_argument("--output-dir", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("resample-eval", help="MAE across subsampling factors", formatter_class=fmt)
    series_args(p)
    p.add_argument("--factors", type=_parse_factors, default=_parse_factors("1-13"), help="e.g. 1-13 or 1,2,5")
    p.add_argument("--target", type=int, default=480, help="forecast length per factor")
    p.add_argument("--no-scale-adjust", action="store_true", help="force s_delta = 1")
    p.add_argument("--output-name", default="resample_mae.csv")
    p.set_defaults(func=cmd_resample_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of all backward rules", formatter_class=fmt)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--skip-model", action="store_true", help="only check primitives")
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("generate", help="write a synthetic dataset and manifest", formatter_class=fmt)
    p.add_argument("--kind", choices=["toy", "sinmix", "gp_kernel", "trend_noise"], default="toy")
    p.add_argument("--num-series", type=int, default=8)
    p.add_argument("--length", type=int, default=600)
    p.add_argument("--horizon", type=int, default=24)
    p.add_argument("--seasonality", type=float, default=24.0)
    p.add_argument("--noise", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=["csv_long", "csv_wide"], default="csv_long")
    p.add_argument("--output-dir", required=True)
    p.set_defaults(func=cmd_generate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _threads():
            return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, CheckpointError, TrainingError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
