"""Flat `key = value` run configuration.

One statement per line, `#` starts a comment, blank lines are ignored.
The same format is what training writes back out as the run manifest,
so a manifest file is itself a loadable config.
"""

from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Tuple

from .errors import ConfigError


@dataclass(frozen=True)
class RunConfig:
    # model shape
    input_dim: int = 784
    hidden_layers: Tuple[int, ...] = (256, 256)
    num_classes: int = 10
    seed: int = 42
    T: int = 60
    d: int = 12
    head_hidden_layers: Tuple[int, ...] = ()
    bit_encoding: str = "zero_one"
    # loss mix
    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda3: float = 1.0
    temperature: float = 1.0
    # optimization
    steps: int = 20000
    batch_size: int = 200
    learning_rate: float = 0.05
    eval_every: int = 1000


def _parse_int_tuple(s: str) -> Tuple[int, ...]:
    s = s.strip()
    if s in ("", "none"):
        return ()
    return tuple(int(part) for part in s.split(","))


def _format_int_tuple(t: Tuple[int, ...]) -> str:
    return ",".join(str(x) for x in t) if t else "none"


_PARSERS = {
    int: int,
    float: float,
    str: str,
    Tuple[int, ...]: _parse_int_tuple,
}


def _field_types():
    return {f.name: f.type for f in fields(RunConfig)}


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    types = _field_types()
    seen = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected `key = value`")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            seen[key] = _PARSERS[types[key]](value)
        except ValueError as exc:
            raise ConfigError(
                f"{source}:{lineno}: bad value {value!r} for {key}: {exc}"
            ) from None
    try:
        cfg = replace(RunConfig(), **seen)
    except Exception as exc:
        raise ConfigError(f"{source}: {exc}") from None
    validate(cfg, source)
    return cfg


def validate(cfg: RunConfig, source: str = "<config>"):
    def bad(msg):
        raise ConfigError(f"{source}: {msg}")

    if cfg.input_dim < 1:
        bad(f"input_dim must be >= 1, got {cfg.input_dim}")
    if cfg.num_classes < 2:
        bad(f"num_classes must be >= 2, got {cfg.num_classes}")
    if cfg.T < 1 or cfg.d < 1:
        bad(f"T and d must be >= 1, got T={cfg.T}, d={cfg.d}")
    if cfg.bit_encoding not in ("zero_one", "signed"):
        bad(f"bit_encoding must be zero_one or signed, got {cfg.bit_encoding!r}")
    if any(h < 1 for h in cfg.hidden_layers + cfg.head_hidden_layers):
        bad("layer sizes must be >= 1")
    if min(cfg.lambda1, cfg.lambda2, cfg.lambda3) < 0:
        bad("loss weights must be >= 0")
    if cfg.temperature <= 0:
        bad(f"temperature must be > 0, got {cfg.temperature}")
    if cfg.steps < 0 or cfg.batch_size < 1 or cfg.eval_every < 1:
        bad("steps must be >= 0, batch_size and eval_every >= 1")
    if not cfg.learning_rate > 0:
        bad(f"learning_rate must be > 0, got {cfg.learning_rate}")


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config_text(path.read_text(encoding="utf-8"), source=path.name)


def format_config(cfg: RunConfig) -> str:
    """Render cfg in the same `key = value` shape the parser reads."""
    lines = []
    for f in fields(RunConfig):
        value = getattr(cfg, f.name)
        if f.type == Tuple[int, ...]:
            value = _format_int_tuple(value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
