"""Configuration files and precedence.

Config files are INI text (``key = value``) with one section per module. Settings
objects are frozen dataclasses; :func:`resolve` layers built-in defaults, the
config file section and command-line overrides, in that order of precedence.
"""

import configparser
import dataclasses
import enum
import os
import typing
from pathlib import Path

from latentaug.exception import ConfigError

OUTPUT_ROOT_ENV = "LATENTAUG_DIR"

_TRUE = ("y", "yes", "t", "true", "on", "1")
_FALSE = ("n", "no", "f", "false", "off", "0")


def output_root():
    """Default output root: ``$LATENTAUG_DIR`` or the current directory."""

    root = os.getenv(OUTPUT_ROOT_ENV)
    return Path(root) if root else Path.cwd()


def strtobool(value):

    v = str(value).strip().lower()
    if v in _TRUE:
        return True
    if v in _FALSE:
        return False
    raise ValueError(f"invalid truth value {value!r}")


def read_section(config_file, section):
    """Return the ``key -> string`` mapping of one section (empty if absent)."""

    if config_file is None:
        return {}

    config_file = Path(config_file)
    if not config_file.is_file():
        raise FileNotFoundError(f"config file not found: {config_file}")

    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(config_file, encoding="utf-8")
    except configparser.Error as e:
        raise ConfigError(f"{config_file}: {e}") from e

    if not parser.has_section(section):
        return {}

    return {k: v for k, v in parser.items(section, raw=True) if k not in parser.defaults()}


def coerce(value, hint):
    """Convert a config string to ``hint``; non-strings pass through (lists become tuples)."""

    origin = typing.get_origin(hint)
    args = typing.get_args(hint)

    if origin is typing.Union:
        if isinstance(value, str) and value.strip().lower() in ("", "none"):
            return None
        if value is None:
            return None
        inner = [a for a in args if a is not type(None)]
        return coerce(value, inner[0])

    if origin in (tuple, typing.Tuple):
        elem = args[0] if args else str
        if isinstance(value, str):
            parts = [p.strip() for p in value.split(",") if p.strip()]
        else:
            parts = list(value)
        return tuple(coerce(p, elem) for p in parts)

    if not isinstance(value, str):
        return value

    if hint is bool:
        return strtobool(value)
    if hint in (int, float, str):
        return hint(value.strip())
    if isinstance(hint, type) and issubclass(hint, enum.Enum):
        return hint(value.strip())

    return value


def resolve(cls, section, config_file=None, overrides=None):
    """Build a ``cls`` dataclass: CLI ``overrides`` > ``config_file[section]`` > defaults.

    Parameters
    ----------
    cls : dataclass type
    section : str
        INI section holding this component's keys
    config_file : str or Path, optional
    overrides : dict, optional
        values from command-line flags; ``None`` values are ignored

    Raises
    ------
    ConfigError
        unknown key or a value that cannot be converted
    """

    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}

    values = dict(read_section(config_file, section))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})

    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"[{section}] unknown key(s): {', '.join(unknown)}")

    kwargs = {}
    for key, raw in values.items():
        try:
            kwargs[key] = coerce(raw, hints[key])
        except (TypeError, ValueError) as e:
            raise ConfigError(f"[{section}] {key} = {raw!r}: {e}") from e

    return cls(**kwargs)


def to_dict(settings):
    """JSON-friendly dict of a settings dataclass (enums by value, tuples as lists)."""

    def plain(v):
        if isinstance(v, enum.Enum):
            return v.value
        if isinstance(v, (tuple, list)):
            return [plain(x) for x in v]
        if isinstance(v, Path):
            return v.as_posix()
        if isinstance(v, dict):
            return {str(k): plain(x) for k, x in v.items()}
        return v

    return {
        f.name: plain(getattr(settings, f.name))
        for f in dataclasses.fields(settings)
        if not callable(getattr(settings, f.name))
    }
