"""Loading, validating and echoing `~vipsim.model.RunConfig` files.

The file is YAML with one mapping per section; every key is optional.

>>> cfg = load_config("frascati.yaml")
>>> cfg.run.current_A
40.0
"""

import dataclasses
import logging
import os

import yaml

from vipsim.exceptions import ConfigError, ValidationError
from vipsim.model import (
    AnalysisSettings,
    CalibrationSettings,
    DetectorGeometry,
    LimitSettings,
    LineCatalog,
    PhysicsConstants,
    ProjectionScenario,
    REFERENCE,
    ResponseModel,
    RunConfig,
    RunPlan,
    SelectionPolicy,
    SimulationSettings,
    SourceMix,
)
from vipsim.utils import dumps_json, sha256_bytes, write_atomic

logger = logging.getLogger(__name__)

SECTIONS = {
    "geometry": DetectorGeometry,
    "response": ResponseModel,
    "constants": PhysicsConstants,
    "run": RunPlan,
    "sources": SourceMix,
    "selection": SelectionPolicy,
    "calibration": CalibrationSettings,
    "analysis": AnalysisSettings,
    "limits": LimitSettings,
    "simulation": SimulationSettings,
    "projection": ProjectionScenario,
}


def _as_tuple(value):
    if isinstance(value, (list, tuple)):
        return tuple(_as_tuple(v) for v in value)
    return value


def _coerce(section, field, value):
    """Match YAML scalars to the field's default type."""
    name = f"{section}.{field.name}"
    default = field.default
    if default is dataclasses.MISSING or value is None:
        return value
    if default is None:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", field=name)
        return float(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", field=name)
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
            raise ConfigError(f"expected an integer, got {value!r}", field=name)
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", field=name)
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"expected a list, got {value!r}", field=name)
        return _as_tuple(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"expected a string, got {value!r}", field=name)
    return value


def _build_section(section, cls, values):
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigError("section must be a mapping", field=section)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(fields))
    if unknown:
        raise ConfigError("unknown key", field=f"{section}.{unknown[0]}")
    kwargs = {k: _coerce(section, fields[k], v) for k, v in values.items()}
    try:
        return cls(**kwargs)
    except ValidationError as e:
        if e.field is not None and e.field in fields:
            e.field = f"{section}.{e.field}"
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"malformed value: {e}", field=section) from e


def _build_lines(values):
    mapping = dict(REFERENCE["lines"])
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigError("section must be a mapping", field="lines")
    for label, entry in values.items():
        if not isinstance(entry, (list, tuple)) or len(entry) != 2:
            raise ConfigError("expected [energy_eV, relative_intensity]", field=f"lines.{label}")
        mapping[label] = entry
    try:
        return LineCatalog.from_mapping(mapping)
    except ValidationError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"malformed value: {e}", field="lines") from e


def config_from_dict(data):
    """Build a `RunConfig` from a parsed mapping."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping")
    unknown = sorted(set(data) - set(SECTIONS) - {"lines"})
    if unknown:
        raise ConfigError("unknown section", field=unknown[0])
    kwargs = {name: _build_section(name, cls, data.get(name)) for name, cls in SECTIONS.items()}
    kwargs["lines"] = _build_lines(data.get("lines"))
    return RunConfig(**kwargs)


def config_to_dict(cfg):
    """The fully-resolved config as plain data (the config echo)."""
    out = {}
    for name in SECTIONS:
        section = getattr(cfg, name)
        out[name] = {
            f.name: _to_plain(getattr(section, f.name)) for f in dataclasses.fields(section)
        }
    out["lines"] = cfg.lines.to_mapping()
    return out


def _to_plain(value):
    if isinstance(value, tuple):
        return [_to_plain(v) for v in value]
    return value


def parse_config(text, source="<string>"):
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        problem = getattr(e, "problem", None) or str(e)
        raise ConfigError(f"cannot parse {source}: {problem}", line=line) from e
    return config_from_dict(data)


def load_config(path):
    """Read a config file; missing keys take the documented defaults."""
    path = os.fspath(path)
    with open(path, encoding="utf-8") as f:
        text = f.read()
    cfg = parse_config(text, source=path)
    logger.debug("loaded config %s (digest %s)", path, config_digest(cfg)[:12])
    return cfg


def dump_config(cfg, path):
    write_atomic(path, yaml.safe_dump(config_to_dict(cfg), sort_keys=True))


def config_digest(cfg):
    return sha256_bytes(dumps_json(config_to_dict(cfg)).encode())
