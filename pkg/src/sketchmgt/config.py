"""Flat ``key = value`` experiment files.

One file holds the model, optimisation and data settings of a run::

    # comments start with '#'
    graphs = khop:1,khop:2,global
    d_hat = 32
    data_dir = runs/data

Unknown keys are errors.  Every key has a default (see :data:`DEFAULTS`).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields
from pathlib import Path

from .model import MGTConfig
from .training import TrainConfig

DATA_DIR_ENV = "SKETCHMGT_DATA_DIR"

# key -> (default, one-line description)
DEFAULTS: dict[str, tuple[object, str]] = {
    "data_dir": ("", f"prepared dataset directory; empty means ${DATA_DIR_ENV}"),
    "out_dir": ("runs/default", "where metrics, checkpoints and the resolved config go"),
    "S": (100, "padded sequence length"),
    "d_hat": (128, "width of each embedding block; node width is 3 * d_hat"),
    "L": (4, "number of layers"),
    "heads_per_graph": (8, "attention heads per graph"),
    "dropout": (0.1, "dropout probability"),
    "graphs": ("khop:1,khop:2,global", "ordered graph specs, one attention branch each"),
    "mask_mode": ("pre_softmax", "pre_softmax or post_softmax"),
    "self_loops": (True, "add the diagonal to every graph"),
    "num_classes": (345, "classifier width"),
    "coord_scale": (256.0, "coordinates are divided by this before embedding"),
    "variant": ("mgt", "mgt or ff_only"),
    "graph_seed": (0, "seed for random graphs"),
    "initial_lr": (5e-5, "learning rate at epoch 0"),
    "decay_factor": (0.7, "multiplicative decay"),
    "decay_every": (10, "epochs between decays"),
    "max_epochs": (100, "hard epoch limit"),
    "patience": (10, "epochs without a better val acc@1 before stopping"),
    "batch_size": (128, "mini-batch size"),
    "seed": (0, "seed for init, shuffling and dropout"),
    "precision": ("float32", "float32 or float64"),
}

_MODEL_KEYS = {f.name for f in fields(MGTConfig)} - {"graph_specs"}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


class ConfigError(ValueError):
    pass


def _coerce(key: str, raw: str):
    default = DEFAULTS[key][0]
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


@dataclass
class ExperimentConfig:
    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def model(self) -> MGTConfig:
        kw = {k: self.values[k] for k in _MODEL_KEYS}
        try:
            return MGTConfig(graph_specs=self.values["graphs"], **kw)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def train(self) -> TrainConfig:
        try:
            return TrainConfig(**{k: self.values[k] for k in _TRAIN_KEYS})
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def data_dir(self) -> Path:
        d = self.values["data_dir"] or os.environ.get(DATA_DIR_ENV, "")
        if not d:
            raise ConfigError(f"data_dir: not set and ${DATA_DIR_ENV} is empty")
        return Path(d)

    @property
    def out_dir(self) -> Path:
        return Path(self.values["out_dir"])

    def to_text(self) -> str:
        """Every key, resolved, with its description as a comment."""
        lines = []
        for key, (_, doc) in DEFAULTS.items():
            v = self.values[key]
            lines.append(f"# {doc}")
            lines.append(f"{key} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"


def parse_config(text: str, overrides: dict | None = None) -> ExperimentConfig:
    values = {k: v for k, (v, _) in DEFAULTS.items()}
    for no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {no}: expected 'key = value', got {line!r}")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"line {no}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    for key, v in (overrides or {}).items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _coerce(key, str(v)) if isinstance(v, str) else v
    cfg = ExperimentConfig(values)
    cfg.model, cfg.train  # validate eagerly so errors surface at load time
    return cfg


def load_config(path: str | Path, overrides: dict | None = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, overrides)
