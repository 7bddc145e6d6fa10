"""Run configuration: flat ``key = value`` files with command-line overrides.

Precedence is defaults < config file < command line. Unknown keys are
rejected. Lists are comma separated; ``checks = none`` selects exact search.
"""

from __future__ import annotations

import dataclasses
import logging
import typing
from dataclasses import dataclass, fields
from pathlib import Path

from trinoloc.errors import ValidationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RunConfig:
    # paths
    library: str = "library.tlib"
    manifest: str = ""
    queries: str = ""
    model: str = "model.tmod"
    output: str = "out"
    # retrieval
    alpha: float = 0.4
    alphas: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
    shortlist_n: int = 20
    checks: int | None = 32
    workers: int = 1
    # evaluation
    threshold: float = 10.0
    thresholds: tuple[float, ...] = (10.0, 15.0, 20.0)
    recall_ns: tuple[int, ...] = (5, 10, 20)
    # descriptors and index
    cell: int = 16
    codebook_size: int = 16
    codebook_seed: int = 0
    temperature: float = 1.0
    out_dim: int = 256
    projection_seed: int = 0
    branching: int = 8
    leaf_max: int = 16
    tree_seed: int = 0
    # training
    iterations: int = 50
    lr: float = 1e-3
    decay: float = 1e-4
    decay_every: int = 5
    decay_mode: str = "lr"
    margin: float = 1.0
    extra_negatives: int = 8
    seed: int = 0
    # synthetic worlds
    synth_preset: str = "aliased"
    # none keeps the preset's frozen fixture value
    synth_num_locations: int | None = None
    synth_spacing: float = 12.0
    synth_alias_period: int = 4
    synth_side_change_rate: float = 0.5
    synth_noise_sigma: float | None = None

    def as_lines(self) -> list[str]:
        return [f"{f.name} = {_format(getattr(self, f.name))}" for f in fields(self)]


_HINTS = typing.get_type_hints(RunConfig)
KEYS = tuple(f.name for f in fields(RunConfig))


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    return str(value)


def _coerce(key: str, raw, hint):
    if not isinstance(raw, str):
        return tuple(raw) if isinstance(raw, list) else raw
    text = raw.strip()
    try:
        if hint in (int | None, typing.Optional[int]):
            return None if text.lower() in ("none", "exact", "") else int(text)
        if hint in (float | None, typing.Optional[float]):
            return None if text.lower() in ("none", "") else float(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is str:
            return text
        if hint == tuple[float, ...]:
            return tuple(float(t) for t in text.split(",") if t.strip())
        if hint == tuple[int, ...]:
            return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError as exc:
        raise ValidationError(f"bad value for {key}: {raw!r}", field=key) from exc
    raise ValidationError(f"unsupported config type for {key}", field=key)


def parse_config_text(text: str, origin: str = "<config>") -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{origin}:{lineno}: expected 'key = value'", field="config")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ValidationError(f"{origin}:{lineno}: unknown config key {key!r}", field=key)
        out[key] = value
    return out


def resolve_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Merge defaults, an optional config file and explicit overrides."""
    values = {}
    if path:
        p = Path(path)
        values.update(parse_config_text(p.read_text(encoding="utf-8"), str(p)))
    for key, value in (overrides or {}).items():
        if key not in KEYS:
            raise ValidationError(f"unknown config key {key!r}", field=key)
        values[key] = value
    typed = {k: _coerce(k, v, _HINTS[k]) for k, v in values.items()}
    cfg = dataclasses.replace(RunConfig(), **typed)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if not 0.0 <= cfg.alpha <= 1.0:
        raise ValidationError(f"alpha {cfg.alpha} outside [0, 1]", field="alpha")
    if any(not 0.0 <= a <= 1.0 for a in cfg.alphas) or not cfg.alphas:
        raise ValidationError("alphas must be a non-empty list within [0, 1]", field="alphas")
    if cfg.shortlist_n < 1:
        raise ValidationError("shortlist_n must be >= 1", field="shortlist_n")
    if cfg.checks is not None and cfg.checks < 1:
        raise ValidationError("checks must be >= 1 or none", field="checks")
    if cfg.threshold <= 0 or any(t <= 0 for t in cfg.thresholds):
        raise ValidationError("thresholds must be positive", field="thresholds")
    if any(n < 1 for n in cfg.recall_ns):
        raise ValidationError("recall_ns must be >= 1", field="recall_ns")
    if cfg.workers < 1:
        raise ValidationError("workers must be >= 1", field="workers")


def log_config(cfg: RunConfig, command: str) -> None:
    log.info("resolved config for %s:\n  %s", command, "\n  ".join(cfg.as_lines()))
