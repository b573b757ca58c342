"""Flat ``key = value`` run configuration.

One assignment per line, ``#`` starts a comment, dotted keys group related
settings (``adais.M = 1000``). Every key is declared in :data:`SCHEMA`
with a type and default; unknown keys and malformed values raise
:class:`ConfigError` naming the line and key.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path

from .adais import AdaIsConfig
from .learning import TrainConfig


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"key {key!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.line = line
        self.key = key


def _parse_bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _parse_float(s: str) -> float:
    v = float(s)
    if not math.isfinite(v):
        raise ValueError(f"expected a finite number, got {s!r}")
    return v


def _parse_opt_int(s: str):
    return None if s.lower() in ("none", "") else int(s)


def _int_list(s: str) -> tuple:
    return tuple(int(v) for v in s.split(",") if v.strip())


def _str_list(s: str) -> tuple:
    return tuple(v.strip() for v in s.split(",") if v.strip())


PARSERS = {
    "int": int,
    "float": _parse_float,
    "bool": _parse_bool,
    "str": str,
    "opt_int": _parse_opt_int,
    "int_list": _int_list,
    "str_list": _str_list,
}

_TYPE_OF = {int: "int", float: "float", bool: "bool", str: "str"}


def _dataclass_schema(prefix: str, cls, skip=()) -> dict:
    out = {}
    for f in fields(cls):
        if f.name in skip:
            continue
        default = f.default
        t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
        kind = {"int": "int", "float": "float", "bool": "bool", "int | None": "opt_int"}.get(t)
        if kind is None:
            kind = "int_list" if isinstance(default, tuple) else _TYPE_OF.get(type(default), "float")
        out[f"{prefix}.{f.name}"] = (kind, default)
    return out


SCHEMA: dict = {
    "seed": ("int", 0),
    "data.path": ("str", "data.csv"),
    "artifact.path": ("str", "model.mtds"),
    "model.kind": ("str", "pd"),
    "model.n_x": ("int", 2),
    "model.n_u": ("int", 1),
    "model.n_y": ("int", 3),
    "model.L": ("int", 8),
    "model.n1": ("int", 32),
    "model.ell": ("int", 8),
    "model.n2": ("int", 16),
    "model.checkpoint_every": ("int", 1),
    "synth.k": ("int", 2),
    "synth.N": ("int", 32),
    "synth.T": ("int", 100),
    "synth.noise_sd": ("float", 0.3),
    "synth.family_seed": ("int", 0),
    "synth.input_kind": ("str", ""),
    "synth.missing_prob": ("float", 0.0),
    "train.k": ("int", 2),
    "train.log_path": ("str", "train_log.csv"),
    **_dataclass_schema("train", TrainConfig, skip=("seed",)),
    **_dataclass_schema("adais", AdaIsConfig, skip=("seed",)),
    "filter.seq_id": ("str", ""),
    "filter.T": ("opt_int", None),
    "forecast.posteriors": ("str", "posteriors.csv"),
    "forecast.anchor": ("opt_int", None),
    "forecast.horizon": ("int", 20),
    "forecast.samples": ("int", 500),
    "eval.anchors": ("int_list", (30, 60)),
    "eval.horizons": ("int_list", (20, 40)),
    "eval.methods": ("str_list", ("mtds", "pooled", "pooled_alpha")),
    "eval.srmse": ("bool", False),
    "eval.forecast_samples": ("int", 200),
    "eval.single_task_prior_sd": ("float", 100.0),
    "kalman.n_models": ("int", 20),
    "kalman.T": ("int", 400),
    "kalman.max_n_x": ("int", 4),
    "kalman.threshold": ("float", 1e-4),
    "grad.instances": ("int", 20),
    "grad.T": ("int", 30),
    "grad.models": ("str_list", ("lds", "pd", "mtrnn")),
}


@dataclass(frozen=True)
class RunConfig:
    values: dict
    explicit: frozenset  # keys set by file or overrides

    def __getitem__(self, key: str):
        return self.values[key]

    def get(self, key: str, default=None):
        return self.values.get(key, default)

    def section(self, prefix: str) -> dict:
        p = prefix + "."
        return {k[len(p) :]: v for k, v in self.values.items() if k.startswith(p)}

    def require(self, *keys: str) -> None:
        missing = [k for k in keys if k not in self.explicit]
        if missing:
            raise ConfigError(f"required key(s) not set: {', '.join(missing)}", key=missing[0])

    def train_config(self) -> TrainConfig:
        return _build(TrainConfig, "train", seed=self["seed"], **_fields_of(self, "train", TrainConfig))

    def adais_config(self) -> AdaIsConfig:
        return _build(AdaIsConfig, "adais", seed=self["seed"], **_fields_of(self, "adais", AdaIsConfig))


def _build(cls, prefix: str, **kw):
    try:
        return cls(**kw)
    except ValueError as exc:
        raise ConfigError(f"invalid {prefix} settings: {exc}", key=prefix) from None


def _fields_of(cfg: RunConfig, prefix: str, cls) -> dict:
    names = {f.name for f in fields(cls)} - {"seed"}
    return {k: v for k, v in cfg.section(prefix).items() if k in names}


def _parse_value(key: str, raw: str, line: int | None):
    if key not in SCHEMA:
        raise ConfigError("unknown key", line, key)
    kind, _ = SCHEMA[key]
    try:
        return PARSERS[kind](raw.strip())
    except (ValueError, TypeError, OverflowError) as exc:
        raise ConfigError(f"invalid {kind} value {raw.strip()!r} ({exc})", line, key) from None


def parse_config(text, overrides=()) -> RunConfig:
    """Parse config text (str or bytes) plus ``key=value`` overrides."""
    if isinstance(text, (bytes, bytearray)):
        try:
            text = bytes(text).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ConfigError(f"not valid UTF-8 at byte {exc.start}") from None
    values = {k: d for k, (_, d) in SCHEMA.items()}
    explicit = set()
    seen = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError("expected 'key = value'", lineno)
        key, raw = body.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError("empty key", lineno)
        if key in seen:
            raise ConfigError(f"duplicate key (first set on line {seen[key]})", lineno, key)
        seen[key] = lineno
        values[key] = _parse_value(key, raw, lineno)
        explicit.add(key)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must be key=value")
        key, raw = item.split("=", 1)
        key = key.strip()
        values[key] = _parse_value(key, raw, None)
        explicit.add(key)
    return RunConfig(values, frozenset(explicit))


def load_config(path=None, overrides=()) -> RunConfig:
    if path is None:
        return parse_config("", overrides)
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    return parse_config(data, overrides)


def format_config(cfg: RunConfig) -> str:
    """Canonical text form; parses back to the same values."""

    def show(v):
        if isinstance(v, tuple):
            return ",".join(str(x) for x in v)
        if isinstance(v, float):
            return repr(v)
        return "none" if v is None else str(v)

    lines = []
    for k in sorted(cfg.values):
        text = show(cfg[k])
        if "#" in text or "\n" in text or "\r" in text or text != text.strip():
            raise ConfigError("value cannot be written as a single config line", key=k)
        lines.append(f"{k} = {text}\n")
    return "".join(lines)


__all__ = ["ConfigError", "RunConfig", "SCHEMA", "format_config", "load_config", "parse_config"]
