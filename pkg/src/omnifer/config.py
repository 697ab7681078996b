"""Pipeline configuration: INI sections, flag overrides and the config hash."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .distill import DistillConfig
from .model import Architecture, TrainConfig
from .selection import SelectionConfig


class ConfigError(ValueError):
    pass


PATH_KEYS = ("anchor", "pool", "test", "shifted_test", "checkpoint", "manifest", "distilled",
             "final_checkpoint", "records")

DEFAULT_PATHS = {
    "checkpoint": "primitive.odmp",
    "manifest": "selection.tsv",
    "distilled": "distilled.odds",
    "final_checkpoint": "final.odmp",
    "records": "records.jsonl",
}


@dataclass
class PipelineConfig:
    architecture: Architecture = field(default_factory=Architecture)
    train: TrainConfig = field(default_factory=TrainConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    paths: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_PATHS))
    seed: int = 0

    def to_dict(self) -> dict:
        sel = {"delta": self.selection.delta, "per_class_cap": self.selection.per_class_cap}
        return {
            "architecture": self.architecture.to_dict(),
            "train": dataclasses.asdict(self.train),
            "selection": sel,
            "distill": dataclasses.asdict(self.distill),
            "paths": dict(sorted(self.paths.items())),
            "seed": self.seed,
        }

    def hash(self) -> str:
        """Digest of every setting that can change an output's bytes.

        File locations are left out so that the same experiment run in two
        directories, or resumed into a new file, carries the same hash.
        """
        d = self.to_dict()
        del d["paths"]
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _parse_value(raw: str, target):
    raw = raw.strip()
    if target is None:
        return None if raw.lower() in ("", "none") else int(raw)
    if isinstance(target, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(target, int):
        return int(raw)
    if isinstance(target, float):
        return float(raw)
    if isinstance(target, tuple):
        return tuple(int(v) for v in raw.replace("x", ",").split(",") if v.strip())
    return raw


def _section(obj, items: dict, name: str, optional_ints=()):
    kwargs = {}
    valid = {f.name for f in dataclasses.fields(obj) if f.init}
    for key, raw in items.items():
        key = key.replace("-", "_")
        if key not in valid:
            raise ConfigError(f"unknown key {key!r} in section [{name}]")
        current = getattr(obj, key)
        kwargs[key] = _parse_value(raw, None if key in optional_ints else current)
    return kwargs


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """Defaults, then the file, then ``overrides`` ({section: {key: value}})."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} not found")
        parser.read_string(p.read_text())
    sections = {s: dict(parser[s]) for s in parser.sections()}
    allowed = {"architecture", "train", "selection", "distill", "paths", "global"}
    for s in sections:
        if s not in allowed:
            raise ConfigError(f"unknown section [{s}]")
    for s, kv in (overrides or {}).items():
        sections.setdefault(s, {}).update({k: str(v) for k, v in kv.items() if v is not None})

    cfg = PipelineConfig()
    glob = sections.get("global", {})
    for key in glob:
        if key != "seed":
            raise ConfigError(f"unknown key {key!r} in section [global]")
    cfg.seed = int(glob.get("seed", 0))
    try:
        arch_kw = _section(cfg.architecture, sections.get("architecture", {}), "architecture")
        cfg.architecture = dataclasses.replace(cfg.architecture, **arch_kw)
        train_kw = {"seed": cfg.seed}
        train_kw.update(_section(cfg.train, sections.get("train", {}), "train"))
        cfg.train = dataclasses.replace(cfg.train, **train_kw)
        sel_kw = _section(cfg.selection, sections.get("selection", {}), "selection", ("per_class_cap",))
        cfg.selection = SelectionConfig(**{"delta": cfg.selection.delta, **sel_kw})
        dist_kw = {"seed": cfg.seed}
        dist_kw.update(_section(cfg.distill, sections.get("distill", {}), "distill", ("n",)))
        cfg.distill = dataclasses.replace(cfg.distill, **dist_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    for key, value in sections.get("paths", {}).items():
        if key not in PATH_KEYS:
            raise ConfigError(f"unknown key {key!r} in section [paths]")
        cfg.paths[key] = value
    return cfg
