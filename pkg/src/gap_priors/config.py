"""Experiment configuration: shipped presets, JSON loading with preset
inheritance, and the resolved :class:`ExperimentConfig`."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

from .datagen import PRESETS as DATA_PRESETS, ShiftSpec
from .gap import GapConfig
from .model import MlpSpec
from .trainer import TrainConfig

METHOD_LABELS = {
    "erm": "ERM",
    "gap_last_layer": "GAP Last Layer",
    "gap_all_layers": "GAP All Layers",
}

# Per-dataset hyperparameters: momentum SGD, cosine ERM schedule with a
# floor, constant-rate cosine for last-layer retraining, linear decay for all
# layers, and lam/gamma/rho per task. Learning rates and epochs are set for
# the small synthetic MLP.
_COMMON = {
    "data": {"seed": 0},
    "model": {"hidden": [32, 32], "nonlinearity": "relu"},
    "n_seeds": 10,
    "base_seed": 0,
    "ablation_method": "gap_last_layer",
}

PRESETS: dict[str, dict] = {
    "waterbirds-like": {
        **copy.deepcopy(_COMMON),
        "data": {"preset": "waterbirds-like", "seed": 0, "spec": {}},
        "erm": {"epochs": 100, "initial_lr": 0.05, "schedule": "cosine", "alpha_min": 0.01,
                "momentum": 0.9, "batch_size": 128, "weight_decay": 0.0},
        "methods": {
            "gap_last_layer": {
                "gap": {"lam": 1.0, "gamma": 4.0, "rho": 0.15, "tau": 0.0, "S": 128},
                "train": {"epochs": 100, "initial_lr": 0.01, "schedule": "cosine", "alpha_min": 1.0,
                          "momentum": 0.9, "batch_size": 128, "weight_decay": 0.0, "mode": "last_layer"},
            },
            "gap_all_layers": {
                "gap": {"lam": 15.0, "gamma": 4.0, "rho": 0.15, "tau": 0.0, "S": 128},
                "train": {"epochs": 100, "initial_lr": 0.001, "schedule": "linear",
                          "momentum": 0.9, "batch_size": 128, "weight_decay": 0.0, "mode": "all_layers"},
            },
        },
    },
    "celeba-like": {
        **copy.deepcopy(_COMMON),
        "data": {"preset": "celeba-like", "seed": 0, "spec": {}},
        "erm": {"epochs": 100, "initial_lr": 0.05, "schedule": "cosine", "alpha_min": 0.001,
                "momentum": 0.9, "batch_size": 128, "weight_decay": 0.0},
        "methods": {
            "gap_last_layer": {
                "gap": {"lam": 30.0, "gamma": 1.5, "rho": 0.15, "tau": 0.0, "S": 128},
                "train": {"epochs": 100, "initial_lr": 0.001, "schedule": "cosine", "alpha_min": 1.0,
                          "momentum": 0.9, "batch_size": 128, "weight_decay": 0.0, "mode": "last_layer"},
            },
            "gap_all_layers": {
                # lam=200 collapses onto the single rarest group at this scale
                "gap": {"lam": 30.0, "gamma": 4.0, "rho": 0.1, "tau": 0.0, "S": 128},
                "train": {"epochs": 100, "initial_lr": 0.0003, "schedule": "linear",
                          "momentum": 0.9, "batch_size": 128, "weight_decay": 0.0, "mode": "all_layers"},
            },
        },
    },
}


class ConfigError(ValueError):
    pass


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve(raw: dict) -> dict:
    """Expand ``"preset"`` (if any) and apply the document's overrides on top."""
    raw = dict(raw)
    name = raw.pop("preset", None)
    if name is None:
        base = {}
    elif name in PRESETS:
        base = PRESETS[name]
    else:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    merged = deep_merge(base, raw)
    if name is not None:
        merged["preset"] = name
    return merged


def load_config(path) -> dict:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return resolve(raw)


def set_override(doc: dict, assignment: str) -> dict:
    """Apply ``a.b.c=value`` (value parsed as JSON, else kept as a string)."""
    key, sep, value = assignment.partition("=")
    if not sep:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    node = doc
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = parsed
    return doc


@dataclass
class MethodConfig:
    name: str
    gap: GapConfig
    train: TrainConfig

    @property
    def label(self) -> str:
        return METHOD_LABELS.get(self.name, self.name)


@dataclass
class ExperimentConfig:
    model_hidden: tuple[int, ...]
    nonlinearity: str
    erm: TrainConfig
    methods: dict[str, MethodConfig]
    n_seeds: int
    base_seed: int
    data_seed: int
    shift: ShiftSpec | None = None
    data_dir: str | None = None
    output_dir: str | None = None
    ablation_method: str = "gap_last_layer"
    raw: dict = field(default_factory=dict)

    def model_spec(self, n_features: int, n_classes: int) -> MlpSpec:
        return MlpSpec((n_features, *self.model_hidden, n_classes), self.nonlinearity)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        try:
            data = doc.get("data", {})
            shift = None
            data_dir = data.get("dir")
            if data_dir is None:
                preset = data.get("preset")
                spec_kw = dict(data.get("spec", {}))
                if preset is not None:
                    if preset not in DATA_PRESETS:
                        raise ConfigError(f"unknown data preset {preset!r}")
                    shift = DATA_PRESETS[preset](**spec_kw)
                else:
                    shift = ShiftSpec(**spec_kw)
            elif not Path(data_dir).is_dir():
                raise ConfigError(f"data directory {data_dir} does not exist")
            erm = TrainConfig(**{**doc["erm"], "mode": "all_layers"})
            methods = {}
            for name, m in doc.get("methods", {}).items():
                if m is None:
                    continue
                methods[name] = MethodConfig(name, GapConfig(**m.get("gap", {})), TrainConfig(**m.get("train", {})))
            model = doc.get("model", {})
            exp = cls(
                model_hidden=tuple(int(h) for h in model.get("hidden", (32, 32))),
                nonlinearity=model.get("nonlinearity", "relu"),
                erm=erm,
                methods=methods,
                n_seeds=int(doc.get("n_seeds", 10)),
                base_seed=int(doc.get("base_seed", 0)),
                data_seed=int(data.get("seed", 0)),
                shift=shift,
                data_dir=data_dir,
                output_dir=doc.get("output_dir"),
                ablation_method=doc.get("ablation_method", "gap_last_layer"),
                raw=doc,
            )
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid experiment config: {exc}") from None
        if exp.n_seeds < 1:
            raise ConfigError("n_seeds must be >= 1")
        return exp
