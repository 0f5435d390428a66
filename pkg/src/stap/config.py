"""Flat ``key=value`` run configuration.

One key per line, ``#`` starts a comment. Model, corpus and run keys share
one namespace; the temporal sub-configs use ``ssm.`` and ``attn.`` prefixes.
The embedding widths ``d_v``, ``d_t`` and ``d_u`` feed both the corpus and
the model so the two can never disagree.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .predictor import ModelConfig
from .synthdata import SynthConfig
from .temporal import SparseAttnConfig, SSMConfig


class ConfigError(ValueError):
    def __init__(self, msg: str, key: str | None = None):
        super().__init__(msg)
        self.key = key


@dataclass
class RunSettings:
    seed: int = 0
    epochs: int = 10
    batch_size: int = 32
    ablation_seeds: int = 5
    ablation_epochs: int = 10
    grid_P: tuple = (3, 6, 9)
    grid_C: tuple = (2, 4, 8)
    grid_epochs: int = 5
    bench_trials: int = 5
    robustness: tuple = (0.25, 0.5, 0.75, 1.0)


@dataclass
class RunConfig:
    model: ModelConfig
    synth: SynthConfig
    run: RunSettings

    @property
    def seed(self) -> int:
        return self.run.seed

    def with_seed(self, seed: int) -> "RunConfig":
        return RunConfig(self.model, replace(self.synth, seed=seed), replace(self.run, seed=seed))


_SHARED = ("d_v", "d_t", "d_u")
_NESTED = {"ssm": SSMConfig, "attn": SparseAttnConfig}


def _schema() -> dict[str, tuple[str, str, object]]:
    """key -> (section, field, default)."""
    out = {}
    for f in fields(ModelConfig):
        if f.name in _NESTED:
            for g in fields(_NESTED[f.name]):
                out[f"{f.name}.{g.name}"] = ("model." + f.name, g.name, getattr(_NESTED[f.name](), g.name))
        else:
            out[f.name] = ("model", f.name, getattr(ModelConfig(), f.name))
    for f in fields(SynthConfig):
        if f.name == "seed":
            continue
        if f.name in _SHARED:
            out[f.name] = ("shared", f.name, out[f.name][2])
        else:
            out[f.name] = ("synth", f.name, getattr(SynthConfig(), f.name))
    for f in fields(RunSettings):
        out[f.name] = ("run", f.name, getattr(RunSettings(), f.name))
    return out


SCHEMA = _schema()
# defaults whose type cannot be read off the default value
_TUPLE_OF = {"topic_pop": float, "split": float, "grid_P": int, "grid_C": int, "robustness": float}


def _coerce(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if key in _TUPLE_OF:
            if raw.lower() in ("", "none"):
                if default is None:
                    return None
                raise ValueError("empty list")
            return tuple(_TUPLE_OF[key](v) for v in raw.split(","))
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError("expected a boolean")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r} ({exc})", key) from None


def parse_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{n}: unknown config key {key!r}", key)
        if key in values:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}", key)
        values[key] = _coerce(key, raw, SCHEMA[key][2])
    return values


def build(values: dict) -> RunConfig:
    model, synth, run, nested = {}, {}, {}, {"ssm": {}, "attn": {}}
    for key, val in values.items():
        section, name, _ = SCHEMA[key]
        if section == "shared":
            model[name] = synth[name] = val
        elif section == "model":
            model[name] = val
        elif section == "synth":
            synth[name] = val
        elif section == "run":
            run[name] = val
        else:
            nested[section.split(".", 1)[1]][name] = val
    try:
        for sub, cls in _NESTED.items():
            model[sub] = cls(**nested[sub])
        rs = RunSettings(**run)
        return RunConfig(ModelConfig(**model), SynthConfig(seed=rs.seed, **synth), rs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from None


def load(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return build(parse_text(p.read_text(), str(p)))


def default() -> RunConfig:
    return build({})


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def echo(cfg: RunConfig) -> str:
    """Every key with its effective value, in schema order; parses back to ``cfg``."""
    lines = []
    for key, (section, name, _) in SCHEMA.items():
        if section in ("model", "shared"):
            v = getattr(cfg.model, name)
        elif section == "synth":
            v = getattr(cfg.synth, name)
        elif section == "run":
            v = getattr(cfg.run, name)
        else:
            v = getattr(getattr(cfg.model, section.split(".", 1)[1]), name)
        lines.append(f"{key}={_fmt(v)}")
    return "\n".join(lines) + "\n"
