"""Checkpoint files.

Layout: a numpy ``.npz`` archive (no pickles). Member ``__meta__`` holds UTF-8
JSON with ``format_version``, the model config and, when present, the
training config and optimizer step. Parameter tensors are stored as
``param/<name>``; Adam moments as ``adam_m/<name>`` and ``adam_v/<name>``.
All arrays are float64 in C (row-major) order, so a save/load round trip is
bit-exact.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, model_cfg: dict, params: dict, train_cfg: dict | None = None, opt_state=None) -> Path:
    path = Path(path)
    meta = {"format_version": FORMAT_VERSION, "model": model_cfg, "param_names": sorted(params)}
    arrays = {f"param/{k}": np.ascontiguousarray(v, dtype=np.float64) for k, v in params.items()}
    if train_cfg is not None:
        meta["train"] = train_cfg
    if opt_state is not None:
        meta["step"] = int(opt_state.step)
        for k in params:
            arrays[f"adam_m/{k}"] = np.ascontiguousarray(opt_state.m[k])
            arrays[f"adam_v/{k}"] = np.ascontiguousarray(opt_state.v[k])
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path) -> dict:
    """Returns a dict with ``meta``, ``params`` and (if saved) ``adam_m``/``adam_v``."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(bytes(z["__meta__"]).decode())
            if meta.get("format_version") != FORMAT_VERSION:
                raise CheckpointError(f"unsupported checkpoint version {meta.get('format_version')}")
            out = {"meta": meta, "params": {}, "adam_m": {}, "adam_v": {}}
            for key in z.files:
                if key == "__meta__":
                    continue
                group, name = key.split("/", 1)
                out[{"param": "params"}.get(group, group)][name] = z[key]
    except (OSError, ValueError, KeyError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    missing = set(meta["param_names"]) - set(out["params"])
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters {sorted(missing)}")
    return out
