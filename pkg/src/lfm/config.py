"""Experiment configuration: dataclasses, YAML loading, flag overrides.

Unknown keys are a hard error, never silently ignored.  Overrides use
dotted paths ("search.eta_a=0.2") and beat file values.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields

import yaml

from .models import ModelConfig
from .trilevel import SearchConfig

MODES = ("lfm", "darts-baseline", "random-search", "single-set-baseline")
ENV_OUT_DIR = "LFM_OUT_DIR"


@dataclass
class DataConfig:
    n: int = 2000
    classes: int = 4
    noise_rate: float = 0.2
    form: str = "image"
    image_size: int = 8
    features: int = 8
    fractions: tuple = (5 / 12, 5 / 12, 2 / 12)


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    data: DataConfig = field(default_factory=DataConfig)
    cell_nodes: int = 2
    op_set: tuple | None = None        # None: default set for the input kind
    eval_epochs: int = 20
    eval_lr: float = 0.1
    eval_batch: int = 32
    random_search_samples: int = 4
    mode: str = "lfm"
    seeds: tuple = (0, 1, 2, 3, 4)
    out_dir: str = ""

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode '{self.mode}'; expected one of {MODES}")
        if isinstance(self.seeds, int):
            self.seeds = (self.seeds,)
        self.seeds = tuple(self.seeds)
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if not self.out_dir:
            self.out_dir = os.environ.get(ENV_OUT_DIR, "runs")


_NESTED = {"model": ModelConfig, "search": SearchConfig, "data": DataConfig}


def _build(cls, mapping, path=""):
    names = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in mapping.items():
        if key not in names:
            raise KeyError(f"unknown config key '{path}{key}'")
        if key in _NESTED and dataclasses.is_dataclass(_NESTED.get(key)) \
                and isinstance(value, dict):
            value = _build(_NESTED[key], value, path=f"{key}.")
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


def _parse_scalar(text):
    # comma-separated values become a list so tuple fields like seeds or
    # fractions can be set from the command line
    if "," in text:
        return [yaml.safe_load(part) for part in text.split(",") if part != ""]
    return yaml.safe_load(text)


def _apply_override(tree, dotted, value):
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise KeyError(f"cannot override through scalar key '{k}'")
    node[keys[-1]] = _parse_scalar(value)


def parse_config(path=None, overrides=()):
    """Load an ExperimentConfig from a YAML file plus key=value overrides."""
    tree = {}
    if path is not None:
        with open(path) as f:
            loaded = yaml.safe_load(f) or {}
        if not isinstance(loaded, dict):
            raise ValueError(f"config file {path} must hold a mapping")
        tree = loaded
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override '{item}' is not key=value")
        dotted, value = item.split("=", 1)
        _apply_override(tree, dotted.strip(), value)
    return _build(ExperimentConfig, tree)


def dump_config(cfg, path):
    """Echo the fully resolved configuration."""
    with open(path, "w") as f:
        yaml.safe_dump(to_dict(cfg), f, sort_keys=True)


def to_dict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, tuple):
        return [to_dict(v) for v in obj]
    return obj
