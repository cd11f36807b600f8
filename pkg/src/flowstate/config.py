"""Run configuration files (JSON).

Schema (every section optional, unknown keys rejected)::

    {
      "seed": 0,
      "model": {<ModelConfig fields>},
      "train": {<TrainConfig fields except seed>, "checkpoint_every": 0},
      "data": {"path": "...", "format": "csv_long", "manifest": null,
               "synthetic": {"kind": "toy", "num_series": 64, "length": 1500,
                             "noise": 0.2, "seed": 0}},
      "paths": {"output_dir": "run", "checkpoint": "checkpoint.npz",
                "log": "train_log.csv"}
    }

Relative paths in ``data`` resolve against the config file's directory;
``paths`` entries other than ``output_dir`` resolve against the output dir.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


DATA_KEYS = {"path", "format", "manifest", "synthetic"}
SYNTH_KEYS = {"kind", "num_series", "length", "noise", "seed"}
PATH_KEYS = {"output_dir", "checkpoint", "log"}
TOP_KEYS = {"seed", "model", "train", "data", "paths"}


def _check_keys(section: str, given: dict, allowed: set) -> None:
    unknown = sorted(set(given) - allowed)
    if unknown:
        raise ConfigError(f"{section}: unknown key(s) {', '.join(unknown)}; allowed: {', '.join(sorted(allowed))}")


def _build(cls, section: str, values: dict):
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: dict = field(default_factory=lambda: {"synthetic": {"kind": "toy", "num_series": 64, "length": 1500}})
    paths: dict = field(default_factory=lambda: {"output_dir": "run", "checkpoint": "checkpoint.npz",
                                                 "log": "train_log.csv"})
    checkpoint_every: int = 0
    base_dir: Path = Path(".")

    @property
    def seed(self) -> int:
        return self.train.seed

    @property
    def output_dir(self) -> Path:
        return Path(self.paths["output_dir"])

    def resolve(self, key: str) -> Path:
        p = Path(self.paths[key])
        return p if p.is_absolute() else self.output_dir / p

    def to_dict(self) -> dict:
        train = self.train.to_dict()
        seed = train.pop("seed")
        train["checkpoint_every"] = self.checkpoint_every
        return {"seed": seed, "model": self.model.to_dict(), "train": train, "data": self.data,
                "paths": {k: str(v) for k, v in self.paths.items()}}

    @classmethod
    def from_dict(cls, raw: dict, base_dir=".", overrides: dict | None = None) -> "RunConfig":
        """Merge defaults < ``raw`` < ``overrides`` (dotted keys like ``train.steps``)."""
        if not isinstance(raw, dict):
            raise ConfigError("config root must be an object")
        raw = json.loads(json.dumps(raw))
        for key, value in (overrides or {}).items():
            if value is None:
                continue
            node = raw
            *parents, leaf = key.split(".")
            for p in parents:
                node = node.setdefault(p, {})
            node[leaf] = value
        _check_keys("config", raw, TOP_KEYS)
        model_raw = dict(raw.get("model", {}))
        _check_keys("model", model_raw, {f.name for f in fields(ModelConfig)})
        train_raw = dict(raw.get("train", {}))
        every = int(train_raw.pop("checkpoint_every", 0))
        _check_keys("train", train_raw, {f.name for f in fields(TrainConfig)} - {"seed"})
        train_raw["seed"] = int(raw.get("seed", 0))
        data = dict(cls().data)
        if "data" in raw:
            data = dict(raw["data"])
        _check_keys("data", data, DATA_KEYS)
        if "synthetic" in data and data["synthetic"] is not None:
            _check_keys("data.synthetic", data["synthetic"], SYNTH_KEYS)
        if not data.get("path") and not data.get("synthetic"):
            raise ConfigError("data: give either 'path' or 'synthetic'")
        paths = dict(cls().paths)
        paths.update(raw.get("paths", {}))
        _check_keys("paths", paths, PATH_KEYS)
        base = Path(base_dir)
        for k in ("path", "manifest"):
            if data.get(k) and not Path(data[k]).is_absolute():
                data[k] = str(base / data[k])
        return cls(
            model=_build(ModelConfig, "model", model_raw),
            train=_build(TrainConfig, "train", train_raw),
            data=data,
            paths=paths,
            checkpoint_every=every,
            base_dir=base,
        )

    @classmethod
    def load(cls, path, overrides: dict | None = None) -> "RunConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from None
        return cls.from_dict(raw, path.parent, overrides)
