"""YAML run configuration with dotted-path overrides (``training.lr=1e-3``)."""
from __future__ import annotations

import copy
import os
from pathlib import Path
from typing import Iterable, Optional

import yaml

from .attention import AttentionSpec
from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig

SECTIONS = {"model", "training", "corpus", "sweep", "eval", "passkey", "probe", "output"}


def default_seed() -> int:
    raw = os.environ.get("ATTNLAB_SEED")
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"ATTNLAB_SEED must be an integer, got {raw!r}") from exc


def load(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        cfg = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"config {path} must be a mapping at top level")
    unknown = set(cfg) - SECTIONS
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    return cfg


def apply_overrides(cfg: dict, overrides: Iterable[str]) -> dict:
    """Return a copy of ``cfg`` with each ``a.b.c=value`` applied (value parsed as YAML)."""
    cfg = copy.deepcopy(cfg)
    for item in overrides or ():
        key, eq, raw = item.partition("=")
        if not eq or not key:
            raise ConfigError(f"override {item!r} must look like section.field=value")
        parts = key.strip().split(".")
        if parts[0] not in SECTIONS:
            raise ConfigError(f"override {item!r}: unknown section {parts[0]!r}")
        node = cfg
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r}: {p!r} is not a section")
        node[parts[-1]] = yaml.safe_load(raw)
    return cfg


def _section(cfg: dict, name: str) -> dict:
    sec = cfg.get(name) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    return dict(sec)


def model_config(cfg: dict) -> ModelConfig:
    sec = _section(cfg, "model")
    sec.setdefault("seed", default_seed())
    try:
        return ModelConfig.from_dict(sec)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"model: {exc}") from exc


def train_config(cfg: dict, require_corpus: bool = True) -> TrainConfig:
    sec = _section(cfg, "training")
    sec.setdefault("seed", default_seed())
    try:
        tc = TrainConfig.from_dict(sec)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"training: {exc}") from exc
    if require_corpus:
        if not tc.corpus_path:
            raise ConfigError("training.corpus_path is required")
        if not Path(tc.corpus_path).is_file():
            raise ConfigError(f"training.corpus_path: no such file {tc.corpus_path!r}")
    return tc


def parse_mechanisms(items, p_values: Optional[list] = None) -> list:
    """Mechanism entries are compact strings or mappings; ``p_values`` crosses
    every entry with each power (``null`` meaning no re-weighting)."""
    if not items:
        raise ConfigError("sweep.mechanisms must list at least one mechanism")
    specs = []
    for item in items:
        try:
            spec = AttentionSpec.parse(item) if isinstance(item, str) else AttentionSpec.from_dict(item)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"sweep.mechanisms: {exc}") from exc
        if p_values:
            specs.extend(spec.with_p(None if p is None else float(p)) for p in p_values)
        else:
            specs.append(spec)
    return specs


def int_list(cfg: dict, dotted: str, default=None) -> list:
    sec, _, key = dotted.partition(".")
    val = _section(cfg, sec).get(key, default)
    if val is None:
        raise ConfigError(f"{dotted} is required")
    if isinstance(val, int):
        val = [val]
    try:
        return [int(v) for v in val]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{dotted} must be a list of integers") from exc
