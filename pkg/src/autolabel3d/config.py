"""One flat run configuration shared by every command.

Keys come from the synthetic-data, training and tracker settings plus a few
paths and evaluation options. ``seed`` drives both data generation and
training; ``horizon`` is both the tracker's and the consistency loss's K.
"""

from __future__ import annotations

import ast
import json
from dataclasses import fields
from pathlib import Path

from .model import TrainConfig
from .synth import SynthConfig
from .tracking import TrackerConfig

EXTRA_DEFAULTS = {
    "iou_threshold": 0.5,
    "template_obj": None,
    "dataset_dir": "data",
    "checkpoint": "model.al3d",
    "output_dir": "out",
    "predict_batch_size": 64,
    "image_width": 1242,
    "image_height": 375,
}


def _defaults() -> dict:
    out = {}
    for cls in (SynthConfig, TrainConfig, TrackerConfig):
        inst = cls()
        for f in fields(cls):
            v = getattr(inst, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
    out.update(EXTRA_DEFAULTS)
    return out


DEFAULTS = _defaults()


def _coerce(key: str, text: str):
    """Parse an override value by the type of its default."""
    default = DEFAULTS[key]
    if isinstance(default, bool):
        low = text.strip().lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, list):
        try:
            val = json.loads(text)
        except json.JSONDecodeError:
            val = ast.literal_eval(text)
        if not isinstance(val, (list, tuple)):
            raise ValueError(f"{key}: expected a list, got {text!r}")
        return list(val)
    if default is None:
        return None if text.lower() in ("", "none", "null") else text
    return text


class RunConfig:
    """Resolved settings; build with :meth:`load`."""

    def __init__(self, values: dict | None = None):
        self.values = dict(DEFAULTS)
        if values:
            self.update(values)

    def update(self, values: dict) -> None:
        unknown = sorted(set(values) - set(DEFAULTS))
        if unknown:
            raise KeyError(f"unknown config keys: {', '.join(unknown)}")
        self.values.update(values)

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def load(cls, path=None, overrides=(), seed=None) -> "RunConfig":
        cfg = cls()
        if path is not None:
            try:
                data = json.loads(Path(path).read_text())
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
            if not isinstance(data, dict):
                raise ValueError(f"{path}: expected a JSON object")
            cfg.update(data)
        for item in overrides:
            key, sep, text = item.partition("=")
            key = key.strip()
            if not sep:
                raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
            if key not in DEFAULTS:
                raise KeyError(f"unknown config key: {key}")
            cfg.update({key: _coerce(key, text)})
        if seed is not None:
            cfg.update({"seed": int(seed)})
        cfg.synth()
        cfg.train()
        cfg.tracker()
        return cfg

    def _pick(self, cls) -> dict:
        return {f.name: self.values[f.name] for f in fields(cls)}

    def synth(self) -> SynthConfig:
        return SynthConfig(**self._pick(SynthConfig))

    def train(self) -> TrainConfig:
        return TrainConfig(**self._pick(TrainConfig))

    def tracker(self) -> TrackerConfig:
        return TrackerConfig(**self._pick(TrackerConfig))

    def to_dict(self) -> dict:
        return dict(sorted(self.values.items()))

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")
