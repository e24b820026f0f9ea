from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping


class ConfigError(ValueError):
    """Invalid or incomplete configuration; ``key`` names the culprit."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


@dataclass(frozen=True)
class TrainConfig:
    """Hyper-parameters shared by all three trainers.

    ``alpha`` is the task (inner-loop) learning rate, ``beta`` the global
    learning rate, ``inner_steps`` the number of inner gradient steps.
    ``warmup_steps`` defaults to 5% of ``total_steps``. ``global_grad_source``
    picks which meta block feeds the global-block gradient in the split
    network: ``adapted`` (per-task adapted copies) or ``shared`` (the
    un-adapted meta block). ``freeze_meta`` keeps the meta block fixed in the
    outer update.
    """

    alpha: float = 0.1
    beta: float = 0.0012
    inner_steps: int = 1
    tasks_per_batch: int = 128
    clip_norm: float | None = 1.0
    warmup_steps: int | None = None
    total_steps: int = 1000
    decay: str = "cosine"
    dropout: float = 0.0
    workers: int = 1
    seed: int = 0
    global_grad_source: str = "adapted"
    freeze_meta: bool = False

    def __post_init__(self):
        if self.warmup_steps is None:
            object.__setattr__(self, "warmup_steps", int(round(0.05 * self.total_steps)))
        if self.alpha < 0 or self.beta <= 0:
            raise ConfigError("alpha must be >= 0 and beta > 0", "alpha" if self.alpha < 0 else "beta")
        if self.inner_steps < 0:
            raise ConfigError("inner_steps must be >= 0", "inner_steps")
        if self.tasks_per_batch < 1:
            raise ConfigError("tasks_per_batch must be >= 1", "tasks_per_batch")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm must be > 0", "clip_norm")
        if self.total_steps < 1 or not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigError("need 0 <= warmup_steps <= total_steps and total_steps >= 1", "warmup_steps")
        if self.decay not in ("cosine", "none"):
            raise ConfigError("decay must be 'cosine' or 'none'", "decay")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)", "dropout")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1", "workers")
        if self.global_grad_source not in ("adapted", "shared"):
            raise ConfigError("global_grad_source must be 'adapted' or 'shared'", "global_grad_source")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_mapping(cls, values: Mapping[str, object], require_all: bool = False) -> "TrainConfig":
        """Build from string (or typed) values, e.g. a parsed config file."""
        fields = {f.name: f for f in dataclasses.fields(cls)}
        for key in values:
            if key not in fields:
                raise ConfigError(f"unknown config key {key!r}", key)
        if require_all:
            for key in fields:
                if key not in values:
                    raise ConfigError(f"missing config key {key!r}", key)
        kwargs = {k: _coerce(k, v) for k, v in values.items()}
        return cls(**kwargs)


_TYPES = {
    "alpha": float,
    "beta": float,
    "inner_steps": int,
    "tasks_per_batch": int,
    "clip_norm": float,
    "warmup_steps": int,
    "total_steps": int,
    "decay": str,
    "dropout": float,
    "workers": int,
    "seed": int,
    "global_grad_source": str,
    "freeze_meta": bool,
}


def _coerce(key: str, value):
    if not isinstance(value, str):
        return value
    text = value.strip()
    if key in ("clip_norm", "warmup_steps") and text.lower() in ("none", ""):
        return None
    typ = _TYPES[key]
    try:
        if typ is bool:
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        if typ is int:
            return int(text)
        return typ(text)
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {value!r}", key) from None


def parse_config_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}", key)
        out[key] = value
    return out


def read_config_file(path) -> dict[str, str]:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for key, value in cfg.to_dict().items():
        lines.append(f"{key} = {'none' if value is None else value}")
    return "\n".join(lines) + "\n"
