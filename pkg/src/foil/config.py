"""TOML configuration files: model/training keys, a ``[data]`` table, SCM specs.

A run config holds :class:`~foil.trainer.FoilConfig` fields at the top level
and an optional ``[data]`` table (see :class:`DataConfig`). An SCM spec file
holds :class:`~foil.scm.ScmSpec` fields, optionally starting from a named
``preset``. Unknown keys and wrongly typed values are rejected with the
offending key in the message.
"""
from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

from . import scm
from .data import SplitSpec
from .errors import ConfigError
from .trainer import FoilConfig

PROTOCOLS = ("none",) + scm.OOD_PROTOCOLS


@dataclass
class DataConfig:
    target: Optional[str] = None  # column name; defaults to the last column
    split: str = "0.7:0.1:0.2"
    protocol: str = "none"  # none | held-out-environment | shifted-z (synthetic sources only)
    has_header: bool = True
    normalize: str = "global"  # global (train-split z-score) | none
    val_fraction: float = 0.1  # used by the OOD protocols

    def validate(self) -> "DataConfig":
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"data.protocol={self.protocol!r}: must be one of {PROTOCOLS}")
        if self.normalize not in ("global", "none"):
            raise ConfigError(f"data.normalize={self.normalize!r}: must be global|none")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"data.val_fraction={self.val_fraction!r}: must lie in [0, 1)")
        SplitSpec.parse(self.split, 1000)  # syntax and sum check
        return self


def read_toml(path) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: no such config file")
    try:
        return tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def parse_value(text: str) -> Any:
    """Parse a ``--set`` value as a TOML value, falling back to a bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def _check_type(where: str, key: str, value: Any, default: Any) -> Any:
    def bad(kind):
        return ConfigError(f"{where}{key}={value!r}: expected {kind}")

    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise bad("true/false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise bad("an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise bad("a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise bad("a string")
        return value
    if isinstance(default, (list, tuple)):
        if not isinstance(value, (list, tuple)):
            raise bad("a list")
        return type(default)(value)
    return value  # optional fields defaulting to None: validated by the owner


def typed_fields(cls, values: Dict[str, Any], where: str = "") -> Dict[str, Any]:
    """Reject unknown keys and check every value against the field's default type."""
    defaults = asdict(cls())
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown keys {[where + k for k in unknown]}; known keys: {sorted(known)}")
    return {k: _check_type(where, k, v, defaults[k]) for k, v in values.items()}


def build_run_config(raw: Dict[str, Any], overrides: Optional[Dict[str, Any]] = None, base: Optional[dict] = None):
    """``(FoilConfig, DataConfig)`` from a parsed file, flag overrides and an optional base."""
    raw = dict(raw)
    data_raw = raw.pop("data", {})
    if not isinstance(data_raw, dict):
        raise ConfigError("[data] must be a table")
    model = dict(base or {})
    model.update(typed_fields(FoilConfig, raw))
    data = typed_fields(DataConfig, data_raw, "data.")
    for key, value in (overrides or {}).items():
        if key.startswith("data."):
            data.update(typed_fields(DataConfig, {key[5:]: value}, "data."))
        else:
            model.update(typed_fields(FoilConfig, {key: value}))
    return FoilConfig.from_dict(model), DataConfig(**data).validate()


def build_scm_spec(raw: Dict[str, Any], seed: Optional[int] = None) -> scm.ScmSpec:
    raw = dict(raw)
    preset_name = raw.pop("preset", None)
    base = scm.spec_to_dict(scm.preset(preset_name)) if preset_name else {}
    values = typed_fields(scm.ScmSpec, raw, "scm.")
    base.update(values)
    if seed is not None and "seed" not in values:
        base["seed"] = seed
    for key in ("alpha_range", "beta_range", "test_alpha_range", "test_beta_range"):
        if base.get(key) is not None:
            base[key] = tuple(base[key])
    spec = scm.ScmSpec(**base)
    spec.validate()
    return spec
