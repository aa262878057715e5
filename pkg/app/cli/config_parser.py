"""Layered experiment configuration.

Resolution order (later wins): built-in defaults, the flat `key = value`
config file, DFKD_<FIELD> environment variables, command-line flags.
"""
from __future__ import annotations

import argparse
import os
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from dotenv import dotenv_values
from pydantic import ValidationError

from app.cli.commands import COMMANDS
from app.core.config import CFG, ENV_PREFIX
from app.core.errors import ConfigError
from app.core.models import Config

# short aliases next to the generated --<field> flags
ALIASES = {"out_dir": ["--out"]}


def _check_keys(values: Mapping[str, Any]) -> None:
    for key in values:
        if key not in Config.model_fields:
            raise ConfigError(f"unknown key: {key}")


def read_config_file(path: str | Path) -> Dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    values = dotenv_values(path)
    missing = [k for k, v in values.items() if v is None or v == ""]
    if missing:
        raise ConfigError(f"no value for key: {missing[0]}")
    return {k.strip(): v for k, v in values.items()}


def read_env_overrides(environ: Optional[Mapping[str, str]] = None) -> Dict[str, Any]:
    environ = os.environ if environ is None else environ
    out: Dict[str, Any] = {}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX) or name in CFG.RESERVED_ENV:
            continue
        out[name[len(ENV_PREFIX) :].lower()] = value
    return out


def parse_config(
    path: Optional[str | Path] = None,
    flags: Optional[Mapping[str, Any]] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> Config:
    """Merge every layer and validate once; raises ConfigError naming the offending key."""
    merged: Dict[str, Any] = {}
    if path is not None:
        file_values = read_config_file(path)
        _check_keys(file_values)
        merged.update(file_values)
    env_values = read_env_overrides(environ)
    _check_keys(env_values)
    merged.update(env_values)
    flag_values = dict(flags or {})
    _check_keys(flag_values)
    merged.update(flag_values)
    try:
        return Config(**merged)
    except ValidationError as ve:
        first = ve.errors()[0]
        where = ".".join(str(p) for p in first.get("loc", ())) or "config"
        raise ConfigError(f"invalid value for {where}: {first.get('msg')}") from ve


def _add_field_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("settings")
    for name, info in Config.model_fields.items():
        flags = [f"--{name.replace('_', '-')}"] + ALIASES.get(name, [])
        if name != name.replace("_", "-"):
            flags.append(f"--{name}")
        help_text = info.description or f"default: {info.get_default(call_default_factory=True)}"
        group.add_argument(*flags, dest=name, default=argparse.SUPPRESS, help=help_text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dfkd-fgvc",
        description="Data-free knowledge distillation on a toy fine-grained image task.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        p = sub.add_parser(command)
        p.add_argument("--config", default=None, help="flat key = value config file")
        _add_field_flags(p)
    return parser


def parse_args(argv=None) -> tuple[str, Config]:
    args = vars(build_parser().parse_args(argv))
    command = args.pop("command")
    path = args.pop("config")
    return command, parse_config(path, args)
