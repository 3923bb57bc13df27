"""Flat ``key = value`` run configuration.

Every model, training, data and selection setting lives in one namespace.
Files may use ``#`` comments; unknown keys are rejected. Later sources
(command-line overrides) win over earlier ones (file, then defaults).
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable

from .adapters import STRATEGIES
from .training import TrainConfig
from .transformer import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    n_domains: int = 6
    n_per_domain: int = 2000
    domains: str = ""
    rank: int = 8
    lora_scale: float = 1.0
    mlp_hidden: int | None = None
    strategy: str = "last"
    max_new_tokens: int = 64
    gen_samples: int = 0
    # short LM pass on generic text before stage 1 when no base checkpoint is given
    warmup_steps: int = 0
    warmup_lr: float = 3e-3

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}")
        if self.rank < 1:
            raise ConfigError("rank must be >= 1")

    def to_flat(self) -> dict[str, Any]:
        out = dataclasses.asdict(self.model)
        out.update(dataclasses.asdict(self.train))
        for f in fields(self):
            if f.name not in ("model", "train"):
                out[f.name] = getattr(self, f.name)
        return out

    def domain_list(self) -> list[str] | None:
        return [d.strip() for d in self.domains.split(",") if d.strip()] or None

    def dump(self) -> str:
        return "".join(f"{k} = {'none' if v is None else v}\n" for k, v in sorted(self.to_flat().items()))


def _schema() -> dict[str, tuple[str, type, bool]]:
    """key -> (group, python type, optional?)"""
    out = {}
    hints = {"int": int, "float": float, "bool": bool, "str": str}
    for group, cls in (("model", ModelConfig), ("train", TrainConfig), ("run", RunConfig)):
        for f in fields(cls):
            if f.name in ("model", "train"):
                continue
            tname = f.type if isinstance(f.type, str) else f.type.__name__
            optional = "None" in tname
            base = tname.replace("| None", "").replace("None |", "").strip()
            out[f.name] = (group, hints[base], optional)
    return out


SCHEMA = _schema()


def _coerce(key: str, raw: Any) -> Any:
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    _, typ, optional = SCHEMA[key]
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    if optional and text.lower() in ("none", "null", ""):
        return None
    try:
        if typ is bool:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return typ(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from None


def parse_config_text(text: str) -> dict[str, Any]:
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",), inline_comment_prefixes=("#",), delimiters=("=",))
    parser.optionxform = str
    try:
        parser.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    return {k: _coerce(k, v) for k, v in parser["run"].items()}


def parse_overrides(items: Iterable[str]) -> dict[str, Any]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = _coerce(k.strip(), v)
    return out


def build_config(values: dict[str, Any]) -> RunConfig:
    groups: dict[str, dict] = {"model": {}, "train": {}, "run": {}}
    for k, v in values.items():
        if k not in SCHEMA:
            raise ConfigError(f"unknown config key {k!r}")
        groups[SCHEMA[k][0]][k] = _coerce(k, v)
    try:
        return RunConfig(model=ModelConfig(**groups["model"]), train=TrainConfig(**groups["train"]), **groups["run"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    values: dict[str, Any] = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        values.update(parse_config_text(text))
    values.update(overrides or {})
    return build_config(values)
