"""Experiment config files.

The format is INI: one section per config type, keys named exactly as the
dataclass fields.  Every key is optional (dataclass defaults fill gaps) but
unknown sections and keys are rejected::

    [experiment]
    seed = 0
    rounds = 300

    [model]
    kind = MLP2

    [aggregator]
    kind = AdaFed
    gamma = 1.0
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .aggregation import AggregatorSpec
from .data import PartitionSpec, SyntheticTaskSpec
from .federation import FederatedConfig, ScheduleSpec
from .models import ModelSpec

SECTIONS = {
    "model": ModelSpec,
    "task": SyntheticTaskSpec,
    "partition": PartitionSpec,
    "aggregator": AggregatorSpec,
    "schedule": ScheduleSpec,
}
TOP_LEVEL = "experiment"


class ConfigError(ValueError):
    """Bad config text; ``key`` and ``line`` point at the culprit when known."""

    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"key {key!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.key = key
        self.line = line


@dataclass
class RunManifest:
    config_hash: str
    seeds: list[int]
    output_dir: str
    started: str = ""
    finished: str = ""


def _scalar_fields(cls) -> dict[str, type]:
    out = {}
    for f in dataclasses.fields(cls):
        default = f.default
        if default is dataclasses.MISSING or dataclasses.is_dataclass(default):
            continue
        out[f.name] = type(default)
    return out


def _coerce(raw: str, kind: type, key: str, line: int | None):
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"expected {kind.__name__}, got {raw!r}", key, line) from None
    return raw


def _key_lines(text: str) -> dict[tuple[str, str], int]:
    lines: dict[tuple[str, str], int] = {}
    section = None
    for no, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        m = re.match(r"^\[([^\]]+)\]$", s)
        if m:
            section = m.group(1).strip()
            continue
        m = re.match(r"^([^=:#;\s][^=:]*?)\s*[=:]", s)
        if m and section is not None:
            lines.setdefault((section, m.group(1).strip().lower()), no)
    return lines


def _section_lines(text: str) -> dict[str, int]:
    out = {}
    for no, line in enumerate(text.splitlines(), start=1):
        m = re.match(r"^\s*\[([^\]]+)\]\s*$", line)
        if m:
            out.setdefault(m.group(1).strip(), no)
    return out


def parse_config(text: str) -> FederatedConfig:
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    try:
        parser.read_string(text)
    except configparser.DuplicateOptionError as exc:
        raise ConfigError("duplicate key", f"{exc.section}.{exc.option}", exc.lineno) from None
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"duplicate section [{exc.section}]", None, exc.lineno) from None
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("key outside of any [section]", None, exc.lineno) from None
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if exc.errors else None
        raise ConfigError("unparseable line", None, line) from None

    key_lines = _key_lines(text)
    section_lines = _section_lines(text)
    known = {TOP_LEVEL, *SECTIONS}
    for name in parser.sections():
        if name not in known:
            raise ConfigError(f"unknown section [{name}]", name, section_lines.get(name))

    def read(section: str, cls) -> dict[str, Any]:
        if not parser.has_section(section):
            return {}
        fields = _scalar_fields(cls)
        values = {}
        for key, raw in parser.items(section):
            line = key_lines.get((section, key))
            qual = f"{section}.{key}"
            if key not in fields:
                raise ConfigError("unknown key", qual, line)
            values[key] = _coerce(raw.strip(), fields[key], qual, line)
        return values

    nested = {}
    for name, cls in SECTIONS.items():
        kwargs = read(name, cls)
        try:
            nested[name] = cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc), name, section_lines.get(name)) from None
    top = read(TOP_LEVEL, FederatedConfig)
    try:
        return FederatedConfig(**nested, **top)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), TOP_LEVEL, section_lines.get(TOP_LEVEL)) from None


def load_config(path: str | Path) -> FederatedConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return parse_config(text)


def config_to_dict(config: FederatedConfig) -> dict:
    return dataclasses.asdict(config)


def dump_config(config: FederatedConfig) -> str:
    """Render a config back to INI text that ``parse_config`` accepts."""
    d = config_to_dict(config)
    out = [f"[{TOP_LEVEL}]"]
    out += [f"{k} = {v}" for k, v in d.items() if not isinstance(v, dict)]
    for name in SECTIONS:
        out += ["", f"[{name}]"] + [f"{k} = {v}" for k, v in d[name].items()]
    return "\n".join(out) + "\n"


def config_hash(config: FederatedConfig) -> str:
    canonical = json.dumps(config_to_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def with_seed(config: FederatedConfig, seed: int) -> FederatedConfig:
    """Same experiment under another seed: model init, task and partition all move."""
    return dataclasses.replace(
        config,
        seed=seed,
        task=dataclasses.replace(config.task, seed=seed),
        partition=dataclasses.replace(config.partition, seed=seed),
    )
