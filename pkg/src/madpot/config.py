"""Run configuration: one JSON document with a section per component.

Every key is optional; a missing key keeps its library default.  Layout::

    {
      "model":   {"image_side": 64, "patch_side": 8, ...},
      "solver":  {"lambda": 0.1, "max_iter": 100, "early_stop_tol": 0.001, "frac": 0.8},
      "scoring": {"tau": 0.07, "variant": "cl+pot"},
      "train":   {"lr": 0.001, "batch_size": 16, "epochs": 100, "seed": 0, "vision": "both"},
      "loss":    {"w_gdice": 1.0, "w_focal": 1.0, "w_bce": 1.0},
      "data":    {"image_side": 64, "noise_amplitude": 0.3, ...}
    }

Overrides use dotted keys such as ``"solver.frac"``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

from .data import SyntheticSpec
from .errors import InvalidConfigError, ParseError
from .losses import LossWeights
from .model import ModelConfig
from .scoring import ScoringConfig
from .training import TrainConfig
from .transport import SolverConfig

__all__ = ["RunConfig", "load_config", "SWEEP_PARAMS"]

SECTIONS = ("model", "solver", "scoring", "train", "loss", "data")

# solver.lam is spelled out in files and flags
_RENAMES = {"solver": {"lambda": "lam"}}

# short sweep names -> dotted config keys
SWEEP_PARAMS = {
    "frac": "solver.frac",
    "lambda": "solver.lambda",
    "max_iter": "solver.max_iter",
    "tau": "scoring.tau",
    "lr": "train.lr",
    "epochs": "train.epochs",
    "batch_size": "train.batch_size",
    "gamma": "model.gamma",
    "num_prompts": "model.num_prompts",
    "context_len": "model.context_len",
}

_TRAIN_FIELDS = ("lr", "batch_size", "epochs", "seed", "vision")


def _coerce(section, name, value, default):
    """Check a JSON value against the type of its default."""
    where = f"{section}.{name}"
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, tuple):
        ok = isinstance(value, (list, tuple)) and len(value) == len(default)
        if ok:
            value = tuple(_coerce(section, name, v, d) for v, d in zip(value, default))
    else:
        ok = True
    if not ok:
        raise InvalidConfigError(f"{where}: expected {type(default).__name__}, got {value!r}")
    return value


def _build(cls, section, values):
    defaults = cls()
    if not isinstance(values, dict):
        raise InvalidConfigError(f"section {section!r} must be an object")
    renames = _RENAMES.get(section, {})
    kwargs = {}
    names = {f.name for f in fields(cls)}
    for key, value in values.items():
        attr = renames.get(key, key)
        hidden = attr in renames.values() and key == attr
        if attr not in names or hidden or is_dataclass(getattr(defaults, attr)):
            raise InvalidConfigError(f"unknown key {section}.{key}")
        kwargs[attr] = _coerce(section, key, value, getattr(defaults, attr))
    return cls(**kwargs)


@dataclass(frozen=True)
class RunConfig:
    """Everything a train/eval run needs besides file paths."""

    train: TrainConfig = field(default_factory=TrainConfig)
    data: SyntheticSpec = field(default_factory=SyntheticSpec)

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict):
            raise InvalidConfigError("configuration must be a JSON object")
        unknown = set(doc) - set(SECTIONS)
        if unknown:
            raise InvalidConfigError(f"unknown config sections: {sorted(unknown)}")
        solver = _build(SolverConfig, "solver", doc.get("solver", {}))
        scoring_doc = doc.get("scoring", {})
        scoring = replace(_build(ScoringConfig, "scoring", scoring_doc), solver=solver)
        train_doc = doc.get("train", {})
        base = TrainConfig()
        for key in train_doc:
            if key not in _TRAIN_FIELDS:
                raise InvalidConfigError(f"unknown key train.{key}")
        train_kwargs = {k: _coerce("train", k, v, getattr(base, k)) for k, v in train_doc.items()}
        train = TrainConfig(
            model=_build(ModelConfig, "model", doc.get("model", {})),
            scoring=scoring,
            weights=_build(LossWeights, "loss", doc.get("loss", {})),
            **train_kwargs,
        )
        return cls(train=train, data=_build(SyntheticSpec, "data", doc.get("data", {})))

    def to_dict(self):
        t = self.train
        solver = asdict(t.scoring.solver)
        solver["lambda"] = solver.pop("lam")
        return {
            "model": asdict(t.model),
            "solver": {k: solver[k] for k in ("lambda", "max_iter", "early_stop_tol", "frac")},
            "scoring": {"tau": t.scoring.tau, "variant": t.scoring.variant},
            "train": {k: getattr(t, k) for k in _TRAIN_FIELDS},
            "loss": asdict(t.weights),
            "data": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.data).items()},
        }

    def with_overrides(self, overrides):
        """Copy with dotted-key overrides applied, e.g. ``{"solver.frac": 0.6}``."""
        doc = self.to_dict()
        for dotted, value in overrides.items():
            section, _, key = dotted.partition(".")
            if section not in doc or key not in doc[section]:
                raise InvalidConfigError(f"unknown config key {dotted!r}")
            doc[section][key] = value
        return RunConfig.from_dict(doc)


def load_config(path):
    """Parse a JSON run configuration; a missing ``path`` means all defaults."""
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"{path}: cannot read config: {exc.strerror}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON ({exc.msg})") from exc
    return RunConfig.from_dict(doc)
