"""Run configuration: dataclasses per module and an INI reader/writer.

The file has one section per module (``[env]``, ``[model]``, ``[policy]``,
``[replay]``, ``[train]``); every key is optional and falls back to the
dataclass default. Unknown sections or keys and invalid values raise
``ConfigurationError`` carrying the file name and line number.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import re
from dataclasses import dataclass, field, fields

from .errors import ConfigurationError
from .latentmodel import ModelConfig
from .policy import PolicyConfig
from .worldsim.env import EnvConfig


@dataclass(frozen=True)
class ReplayConfig:
    capacity_steps: int = 100_000
    tau: int = 10

    def __post_init__(self):
        if self.tau < 1:
            raise ConfigurationError("tau must be >= 1", key="tau")
        if self.capacity_steps < self.tau + 1:
            raise ConfigurationError("capacity_steps must be >= tau + 1", key="capacity_steps")


@dataclass(frozen=True)
class TrainConfig:
    total_env_steps: int = 200_000
    frame_skip: int = 4
    grad_steps_per_agent_step: int = 1
    warmup_steps: int = 1000
    model_lr: float = 1e-4
    model_batch_size: int = 32
    grad_clip: float = 100.0
    eval_every: int = 5000
    eval_episodes: int = 10
    eval_seed: int = 1_000_000
    checkpoint_every: int = 5000
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("seed", "eval_seed", "grad_steps_per_agent_step", "warmup_steps"):
                if v < 0:
                    raise ConfigurationError(f"{f.name} must be >= 0", key=f.name)
            elif v <= 0:
                raise ConfigurationError(f"{f.name} must be positive", key=f.name)


# keys the user may not set because they are derived from other sections
_DERIVED = {
    "model": {"image_size", "action_dim"},
    "policy": {"latent_dim", "action_dim"},
}

SECTIONS = {
    "env": EnvConfig,
    "model": ModelConfig,
    "policy": PolicyConfig,
    "replay": ReplayConfig,
    "train": TrainConfig,
}


@dataclass(frozen=True)
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    replay: ReplayConfig = field(default_factory=ReplayConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def with_seed(self, seed):
        return dataclasses.replace(self, train=dataclasses.replace(self.train, seed=int(seed)))

    def to_dict(self):
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}


def _settable(section):
    cls = SECTIONS[section]
    return [f for f in fields(cls) if f.name not in _DERIVED.get(section, ())]


def _parse_value(raw, typ, key):
    text = raw.strip()
    try:
        if typ in (bool, "bool"):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if typ in (int, "int"):
            return int(text.replace("_", ""))
        if typ in (float, "float"):
            return float(text)
        return text
    except ValueError:
        raise ConfigurationError(f"invalid value {text!r} for {key}", key=key) from None


def _locate(text):
    """Map ``(section, key)`` and ``(section, None)`` to 1-based line numbers."""
    where = {}
    section = None
    for i, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        m = re.match(r"^\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip()
            where.setdefault((section, None), i)
            continue
        m = re.match(r"^([^=:#;\s][^=:]*?)\s*[=:]", s)
        if m and section is not None:
            where.setdefault((section, m.group(1).strip().lower()), i)
    return where


def _build(section, values, lines, path):
    kwargs = {}
    types = {f.name: f.type for f in fields(SECTIONS[section])}
    for key, raw in values.items():
        kwargs[key] = _parse_value(raw, types[key], key)
    return kwargs


def parse_config(text, path="<config>"):
    """Parse INI text into a :class:`RunConfig`."""
    lines = _locate(text)
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigurationError(f"malformed config: {exc.message if hasattr(exc, 'message') else exc}",
                                 line=line, path=path) from None

    kwargs = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigurationError(f"unknown section [{section}]", key=section,
                                     line=lines.get((section, None)), path=path)
        allowed = {f.name for f in _settable(section)}
        values = {}
        for key, raw in parser.items(section):
            if key not in allowed:
                hint = " (derived from other settings)" if key in _DERIVED.get(section, ()) else ""
                raise ConfigurationError(f"unknown key '{key}' in [{section}]{hint}", key=key,
                                         line=lines.get((section, key)), path=path)
            values[key] = raw
        try:
            kwargs[section] = _build(section, values, lines, path)
        except ConfigurationError as exc:
            raise ConfigurationError(f"[{section}] {exc}", key=exc.key,
                                     line=lines.get((section, exc.key)), path=path) from None
    return build_run_config(kwargs, lines, path)


def build_run_config(kwargs, lines=None, path=None):
    """Instantiate section dataclasses from plain dicts, wiring derived keys."""
    lines = lines or {}

    def make(section, extra=None):
        vals = dict(kwargs.get(section, {}))
        vals.update(extra or {})
        try:
            return SECTIONS[section](**vals)
        except ConfigurationError as exc:
            raise ConfigurationError(f"[{section}] {exc}", key=exc.key,
                                     line=lines.get((section, exc.key)), path=path) from None

    env = make("env")
    model = make("model", {"image_size": env.image_size, "action_dim": 2})
    policy = make("policy", {"latent_dim": model.latent_dim, "action_dim": 2})
    replay = make("replay")
    train = make("train")
    return RunConfig(env, model, policy, replay, train)


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config: {exc.strerror}", path=path) from None
    return parse_config(text, path)


def from_dict(d):
    """Rebuild a :class:`RunConfig` from :meth:`RunConfig.to_dict` output."""
    kwargs = {}
    for section in SECTIONS:
        derived = _DERIVED.get(section, set())
        kwargs[section] = {k: v for k, v in d.get(section, {}).items() if k not in derived}
    return build_run_config(kwargs)


def dump_config(cfg: RunConfig):
    """Render every settable key of ``cfg`` as INI text."""
    out = io.StringIO()
    for section in SECTIONS:
        obj = getattr(cfg, section)
        out.write(f"[{section}]\n")
        for f in _settable(section):
            v = getattr(obj, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            out.write(f"{f.name} = {v!r}\n" if isinstance(v, float) else f"{f.name} = {v}\n")
        out.write("\n")
    return out.getvalue()


def describe_defaults():
    """One line per settable key with its default, for ``--help`` output."""
    lines = []
    defaults = RunConfig()
    for section in SECTIONS:
        obj = getattr(defaults, section)
        keys = ", ".join(f"{f.name}={getattr(obj, f.name)}" for f in _settable(section))
        lines.append(f"[{section}] {keys}")
    return "\n".join(lines)
