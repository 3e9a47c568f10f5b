"""Run configuration: preset defaults, a YAML/JSON file, then dotted-key overrides."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable, Mapping

import yaml

from .encoding import EncodingConfig
from .errors import ConfigError, DagpredError
from .model import ModelConfig
from .train import TrainConfig

PRESETS = ("accuracy", "latency")


@dataclass(frozen=True)
class DataConfig:
    fractions: tuple[float, ...] = (0.8, 0.1, 0.1)
    split_seed: int | None = None  # falls back to the run seed

    def __post_init__(self):
        object.__setattr__(self, "fractions", tuple(float(f) for f in self.fractions))
        if len(self.fractions) != 3:
            raise ValueError("fractions must be (train, val, test)")
        if any(f < 0 for f in self.fractions) or sum(self.fractions) > 1.0 + 1e-12:
            raise ValueError(f"fractions must be non-negative and sum to <= 1: {self.fractions}")
        if self.fractions[0] == 0:
            raise ValueError("the train fraction must be positive")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    encoding: EncodingConfig
    data: DataConfig = field(default_factory=DataConfig)
    preset: str = "accuracy"
    seed: int = 0
    data_path: str | None = None
    out_dir: str | None = None

    @property
    def split_seed(self) -> int:
        return self.seed if self.data.split_seed is None else self.data.split_seed

    def to_dict(self) -> dict:
        return {
            "preset": self.preset,
            "seed": self.seed,
            "data_path": self.data_path,
            "out_dir": self.out_dir,
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "encoding": self.encoding.to_dict(),
            "data": {"fractions": list(self.data.fractions), "split_seed": self.data.split_seed},
        }


def preset_sections(preset: str) -> dict[str, dict]:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; expected one of {PRESETS}")
    model = getattr(ModelConfig, preset)()
    return {
        "model": model.to_dict(),
        "train": getattr(TrainConfig, preset)().to_dict(),
        "encoding": getattr(EncodingConfig, preset)().to_dict(),
        "data": {"fractions": [0.8, 0.1, 0.1], "split_seed": None},
    }


def read_config_file(path) -> dict:
    """YAML or JSON mapping (JSON is a YAML subset, so one parser covers both)."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        obj = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None
    if obj is None:
        return {}
    if not isinstance(obj, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return obj


def parse_override(item: str) -> tuple[list[str], Any]:
    key, sep, raw = item.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override {item!r} is not key=value")
    try:
        value = yaml.safe_load(raw) if raw.strip() else ""
    except yaml.YAMLError:
        value = raw
    return key.strip().split("."), value


def _set_path(tree: dict, path: list[str], value) -> None:
    node = tree
    for part in path[:-1]:
        nxt = node.setdefault(part, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"{'.'.join(path)}: {part!r} is not a section")
        node = nxt
    node[path[-1]] = value


def _merge(base: dict, extra: Mapping) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _build(cls, section: str, values: Mapping):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown {section} keys: {sorted(unknown)}")
    try:
        return cls(**values)
    except (DagpredError, ValueError, TypeError) as exc:
        raise ConfigError(f"invalid {section} config: {exc}") from None


def load_run_config(path=None, overrides: Iterable[str] = (), preset: str | None = None,
                    **flags) -> RunConfig:
    """Merge preset, file, ``--set`` overrides and explicit flags, validating every field.

    ``flags`` accepts top-level keys (``seed``, ``data_path``, ``out_dir``) and the
    shortcuts ``mask_variant`` / ``ffn_variant``; ``None`` values are ignored.
    """
    tree = read_config_file(path) if path is not None else {}
    for item in overrides:
        keys, value = parse_override(item)
        _set_path(tree, keys, value)
    name = preset or tree.pop("preset", None) or "accuracy"
    tree.pop("preset", None)
    merged = _merge(preset_sections(name), tree)
    for key in ("mask_variant", "ffn_variant"):
        if flags.get(key) is not None:
            merged["model"][key] = flags.pop(key)
        flags.pop(key, None)
    for key, value in flags.items():
        if value is not None:
            merged[key] = value

    allowed = {"model", "train", "encoding", "data", "seed", "data_path", "out_dir"}
    unknown = set(merged) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    seed = merged.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    for section in ("model", "train", "encoding", "data"):
        if not isinstance(merged[section], dict):
            raise ConfigError(f"{section} must be a mapping")
    model = _build(ModelConfig, "model", merged["model"])
    train = _build(TrainConfig, "train", {**merged["train"], "seed": seed})
    enc = _build(EncodingConfig, "encoding", merged["encoding"])
    data = _build(DataConfig, "data", merged["data"])
    if enc.total_dim != model.input_dim:
        raise ConfigError(f"encoding width {enc.total_dim} != model.input_dim {model.input_dim}")
    return RunConfig(model, train, enc, data, name, seed,
                     merged.get("data_path"), merged.get("out_dir"))


def dump_json(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True)


def with_variants(cfg: RunConfig, mask_variant, ffn_variant, seed: int) -> RunConfig:
    model = replace(cfg.model, mask_variant=mask_variant, ffn_variant=ffn_variant)
    return replace(cfg, model=model, train=replace(cfg.train, seed=seed), seed=seed)
