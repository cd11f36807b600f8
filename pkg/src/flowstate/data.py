"""Time series containers, CSV/manifest IO, and synthetic generators.

CSV long format: header ``id,timestamp,channel,value``; one row per
observation. CSV wide format: header ``timestamp,<ch0>,<ch1>,...``; one file
per series. Timestamps are numbers or ISO-8601 datetimes (converted to POSIX
seconds). Empty cells and ``nan`` mark missing observations.

The manifest (JSON) carries per-series metadata the model cannot infer::

    {"format_version": 1,
     "series": [{"id": "s0", "seasonality": 24, "horizon": 24,
                 "split": 480, "interval": 1.0}]}

``split`` is the number of leading steps available as history; evaluation
forecasts ``horizon`` steps from there.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
GP_MAX_LENGTH = 2048


class DatasetError(ValueError):
    pass


@dataclass
class TimeSeries:
    values: np.ndarray
    interval: float = 1.0
    id: str = "series"
    split: int | None = None
    observed: np.ndarray | None = None
    timestamps: np.ndarray | None = None
    channels: list[str] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] < 1:
            raise ValueError("values must be (length, channels) with length >= 1")
        self.values = v
        if not self.interval > 0:
            raise ValueError("interval must be positive")
        if self.split is not None and not 0 <= self.split <= len(v):
            raise ValueError(f"split {self.split} outside 0..{len(v)}")
        if self.observed is not None:
            obs = np.asarray(self.observed, dtype=bool).reshape(v.shape)
            self.observed = obs
        if self.channels is None:
            self.channels = [f"ch{i}" for i in range(v.shape[1])]
        if self.timestamps is None:
            self.timestamps = np.arange(len(v), dtype=np.float64) * self.interval

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def num_channels(self) -> int:
        return self.values.shape[1]

    @property
    def history(self) -> np.ndarray:
        return self.values[: self.split if self.split is not None else len(self)]


# ------------------------------------------------------------------ parsing


def _parse_time(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        return datetime.fromisoformat(text).timestamp()


def _parse_value(text: str) -> float:
    text = text.strip()
    if text == "" or text.lower() == "nan":
        return math.nan
    v = float(text)
    if not math.isfinite(v):
        raise ValueError(text)
    return v


def _assemble(sid, rows, channels, interval, errors, where):
    """rows: {timestamp: {channel: (value, line)}}"""
    times = sorted(rows)
    values = np.full((len(times), len(channels)), np.nan)
    for i, t in enumerate(times):
        for j, ch in enumerate(channels):
            if ch in rows[t]:
                values[i, j] = rows[t][ch][0]
    ts = np.asarray(times, dtype=np.float64)
    if interval is None:
        diffs = np.diff(ts)
        interval = float(np.median(diffs)) if len(diffs) else 1.0
        if interval <= 0:
            errors.append(f"{where}: cannot infer a positive sampling interval for {sid!r}")
            interval = 1.0
    observed = np.isfinite(values)
    return TimeSeries(np.where(observed, values, 0.0), interval=interval, id=sid,
                      observed=None if observed.all() else observed, timestamps=ts, channels=list(channels))


def _read_long(path: Path, errors: list[str]) -> dict[str, TimeSeries]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DatasetError(f"{path}: empty file")
        header = [h.strip() for h in header]
        missing = [c for c in ("id", "timestamp", "channel", "value") if c not in header]
        if missing:
            raise DatasetError(f"{path}:1: missing columns {missing}")
        col = {c: header.index(c) for c in ("id", "timestamp", "channel", "value")}
        data: dict[str, dict] = {}
        chans: dict[str, list] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < len(header):
                errors.append(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
                continue
            sid, ch = row[col["id"]].strip(), row[col["channel"]].strip()
            try:
                t = _parse_time(row[col["timestamp"]].strip())
            except ValueError:
                errors.append(f"{path}:{lineno}: bad timestamp {row[col['timestamp']]!r}")
                continue
            try:
                v = _parse_value(row[col["value"]])
            except ValueError:
                errors.append(f"{path}:{lineno}: non-numeric value {row[col['value']]!r}")
                continue
            slot = data.setdefault(sid, {}).setdefault(t, {})
            if ch in slot:
                errors.append(f"{path}:{lineno}: duplicate timestamp {t!r} for id={sid!r} channel={ch!r} "
                              f"(first on line {slot[ch][1]})")
                continue
            slot[ch] = (v, lineno)
            if ch not in chans.setdefault(sid, []):
                chans[sid].append(ch)
    return {sid: _assemble(sid, rows, chans[sid], None, errors, path) for sid, rows in data.items()}


def _read_wide(path: Path, errors: list[str]) -> TimeSeries:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DatasetError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if not header or header[0] != "timestamp" or len(header) < 2:
            raise DatasetError(f"{path}:1: wide format needs 'timestamp' followed by channel columns")
        channels = header[1:]
        rows: dict = {}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                errors.append(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
                continue
            try:
                t = _parse_time(row[0].strip())
            except ValueError:
                errors.append(f"{path}:{lineno}: bad timestamp {row[0]!r}")
                continue
            if t in rows:
                first = next(iter(rows[t].values()))[1]
                errors.append(f"{path}:{lineno}: duplicate timestamp {row[0].strip()!r} (first on line {first})")
                continue
            vals = {}
            for ch, cell in zip(channels, row[1:]):
                try:
                    vals[ch] = (_parse_value(cell), lineno)
                except ValueError:
                    errors.append(f"{path}:{lineno}: non-numeric value {cell!r} in column {ch!r}")
            rows[t] = vals
    return _assemble(path.stem, rows, channels, None, errors, path)


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"{path}: cannot read manifest: {exc}") from exc
    if manifest.get("format_version", MANIFEST_VERSION) != MANIFEST_VERSION:
        raise DatasetError(f"{path}: unsupported manifest version {manifest.get('format_version')}")
    entries = manifest.get("series", [])
    if not isinstance(entries, list) or not all(isinstance(e, dict) and "id" in e for e in entries):
        raise DatasetError(f"{path}: 'series' must be a list of objects with an 'id'")
    return manifest


def load_dataset(path, format: str = "csv_long", manifest=None) -> tuple[list[TimeSeries], dict]:
    """Load series and apply manifest metadata.

    ``path`` is a long-format CSV, or for ``csv_wide`` a single CSV or a
    directory of them. ``manifest`` defaults to ``manifest.json`` next to the
    data when present.
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"{path}: no such file or directory")
    errors: list[str] = []
    if format == "csv_long":
        found = _read_long(path, errors)
    elif format == "csv_wide":
        files = sorted(path.glob("*.csv")) if path.is_dir() else [path]
        found = {}
        for f in files:
            ts = _read_wide(f, errors)
            found[ts.id] = ts
    else:
        raise DatasetError(f"unknown format {format!r}; expected csv_long or csv_wide")
    if errors:
        raise DatasetError("\n".join(errors))

    if manifest is None:
        guess = (path if path.is_dir() else path.parent) / "manifest.json"
        manifest = guess if guess.exists() else None
    mdata = read_manifest(manifest) if manifest is not None else {"format_version": MANIFEST_VERSION, "series": []}
    by_id = {e["id"]: e for e in mdata["series"]}
    unknown = sorted(set(by_id) - set(found))
    if unknown:
        raise DatasetError(f"manifest lists series absent from the data: {unknown}")
    out = []
    for sid in sorted(found):
        ts = found[sid]
        entry = by_id.get(sid, {})
        if "interval" in entry:
            ts.interval = float(entry["interval"])
        if entry.get("split") is not None:
            split = int(entry["split"])
            if not 0 <= split <= len(ts):
                raise DatasetError(f"manifest split {split} outside 0..{len(ts)} for {sid!r}")
            ts.split = split
        ts.meta.update({k: v for k, v in entry.items() if k not in ("id", "interval", "split")})
        out.append(ts)
    return out, mdata


def _fmt(v: float, observed: bool) -> str:
    return repr(float(v)) if observed else ""


def save_dataset(series: list[TimeSeries], path, format: str = "csv_long", manifest_path=None) -> list[Path]:
    """Write series in the given format (values printed round-trip exact)."""
    path = Path(path)
    written = []
    if format == "csv_long":
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "timestamp", "channel", "value"])
            for ts in series:
                obs = ts.observed if ts.observed is not None else np.ones(ts.values.shape, bool)
                for i, t in enumerate(ts.timestamps):
                    for j, ch in enumerate(ts.channels):
                        if obs[i, j]:
                            w.writerow([ts.id, repr(float(t)), ch, repr(float(ts.values[i, j]))])
        written.append(path)
    elif format == "csv_wide":
        path.mkdir(parents=True, exist_ok=True)
        for ts in series:
            obs = ts.observed if ts.observed is not None else np.ones(ts.values.shape, bool)
            f = path / f"{ts.id}.csv"
            with open(f, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["timestamp", *ts.channels])
                for i, t in enumerate(ts.timestamps):
                    w.writerow([repr(float(t)), *(_fmt(v, o) for v, o in zip(ts.values[i], obs[i]))])
            written.append(f)
    else:
        raise DatasetError(f"unknown format {format!r}")
    if manifest_path is not None:
        entries = []
        for ts in series:
            e = {"id": ts.id, "interval": ts.interval}
            if ts.split is not None:
                e["split"] = int(ts.split)
            e.update({k: v for k, v in ts.meta.items() if k in ("seasonality", "horizon")})
            entries.append(e)
        Path(manifest_path).write_text(json.dumps({"format_version": MANIFEST_VERSION, "series": entries}, indent=2))
        written.append(Path(manifest_path))
    return written


# ---------------------------------------------------------------- synthetic


def kernel_matrix(kernel: dict, t: np.ndarray) -> np.ndarray:
    """Covariance of a kernel description such as
    ``{"type": "sum", "terms": [{"type": "rbf", "lengthscale": 20}, ...]}``."""
    t = np.asarray(t, dtype=np.float64)
    d = t[:, None] - t[None, :]
    kind = kernel["type"]
    var = kernel.get("variance", 1.0)
    if kind == "rbf":
        return var * np.exp(-0.5 * (d / kernel["lengthscale"]) ** 2)
    if kind == "periodic":
        s = np.sin(np.pi * np.abs(d) / kernel["period"])
        return var * np.exp(-2.0 * (s / kernel.get("lengthscale", 1.0)) ** 2)
    if kind == "sum":
        return sum(kernel_matrix(k, t) for k in kernel["terms"])
    if kind == "product":
        out = np.ones_like(d)
        for k in kernel["terms"]:
            out = out * kernel_matrix(k, t)
        return out
    raise ValueError(f"unknown kernel type {kind!r}")


def random_kernel(rng: np.random.Generator, length: int) -> dict:
    def leaf():
        if rng.random() < 0.5:
            return {"type": "rbf", "lengthscale": float(rng.uniform(0.02, 0.3) * length)}
        return {"type": "periodic", "period": float(rng.choice([6, 7, 12, 24, 48, 52, 168])),
                "lengthscale": float(rng.uniform(0.5, 2.0))}

    kern = leaf()
    for _ in range(int(rng.integers(0, 3))):
        kern = {"type": "sum" if rng.random() < 0.6 else "product", "terms": [kern, leaf()]}
    return kern


def generate_synthetic(kind: str, seed: int, length: int, **params) -> TimeSeries:
    """Deterministic synthetic series.

    ``sinmix``: ``periods``/``amplitudes``/``phases`` (random 1-4 components
    when omitted), ``noise`` std, ``level``. ``gp_kernel``: ``kernel``
    description (random composition when omitted), ``jitter``, ``noise``.
    ``trend_noise``: ``slope``, ``breaks``, ``noise``.
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    rng = np.random.default_rng(seed)
    t = np.arange(length, dtype=np.float64)
    sid = params.pop("id", f"{kind}-{seed}")
    seasonality = params.pop("seasonality", None)
    if kind == "sinmix":
        periods = params.get("periods")
        if periods is None:
            periods = rng.uniform(4, 200, size=int(rng.integers(1, 5))).tolist()
        periods = [float(p) for p in periods]
        amps = params.get("amplitudes")
        amps = rng.uniform(0.5, 1.5, size=len(periods)) if amps is None else np.asarray(amps, float)
        phases = params.get("phases")
        phases = rng.uniform(0, 2 * np.pi, size=len(periods)) if phases is None else np.asarray(phases, float)
        y = np.full(length, float(params.get("level", 0.0)))
        for p, a, ph in zip(periods, amps, phases):
            y = y + a * np.sin(2 * np.pi * t / p + ph)
        noise = float(params.get("noise", 0.1))
        if noise:
            y = y + noise * rng.normal(size=length)
        meta = {"periods": periods, "amplitudes": list(map(float, amps)), "phases": list(map(float, phases))}
        if seasonality is None:
            seasonality = periods[int(np.argmax(amps))]
    elif kind == "gp_kernel":
        if length > GP_MAX_LENGTH:
            raise ValueError(f"gp_kernel is limited to {GP_MAX_LENGTH} steps (dense Cholesky)")
        kernel = params.get("kernel") or random_kernel(rng, length)
        K = kernel_matrix(kernel, t)
        jitter = float(params.get("jitter", 1e-6))
        Lc = np.linalg.cholesky(K + jitter * np.eye(length))
        y = Lc @ rng.normal(size=length)
        noise = float(params.get("noise", 0.0))
        if noise:
            y = y + noise * rng.normal(size=length)
        meta = {"kernel": kernel}
    elif kind == "trend_noise":
        slope = float(params.get("slope", rng.normal(0, 0.01)))
        y = slope * t
        for _ in range(int(params.get("breaks", rng.integers(0, 3)))):
            at = int(rng.integers(1, length)) if length > 1 else 0
            y[at:] += rng.normal(0, 0.02) * (t[at:] - at)
        y = y + float(params.get("noise", 0.1)) * rng.normal(size=length)
        meta = {"slope": slope}
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}")
    if seasonality is not None:
        meta["seasonality"] = seasonality
    return TimeSeries(y, interval=1.0, id=sid, meta=meta)


def toy_series(seed: int, length: int, noise: float = 0.2) -> TimeSeries:
    """Benchmark task used throughout the tests: daily (24-step) cycle with a
    half-day harmonic, a slower cycle the seasonal naive cannot exploit, and noise."""
    rng = np.random.default_rng([seed, 24])
    periods = [24.0, 12.0, float(rng.uniform(60.0, 160.0))]
    amps = [float(rng.uniform(0.6, 1.4)), float(rng.uniform(0.0, 0.5)), float(rng.uniform(0.5, 1.2))]
    ts = generate_synthetic("sinmix", int(rng.integers(2**31)), length, periods=periods, amplitudes=amps,
                            noise=noise, level=float(rng.uniform(-2, 2)), seasonality=24.0,
                            id=f"toy-{seed}")
    return ts
