"""Run configuration: nested TOML blocks mapped onto frozen dataclasses.

Unknown keys and out-of-range values raise :class:`ConfigError` naming the
offending key path (``reward.lambda``). Environment variables of the form
``CARML__BLOCK__KEY=value`` override file values.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import tomli
import tomli_w

from .env import EnvConfig
from .metapolicy import PolicyConfig
from .reward import RewardConfig
from .scaffold import ScaffoldConfig

ENV_PREFIX = "CARML__"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CurriculumConfig:
    outer_iterations: int = 5
    policy_updates_per_iteration: int = 60
    tasks_per_update: int = 16
    reservoir_capacity: int = 500
    seed_episodes: int = 500
    encoder_warm_start: bool = True
    learner: str = "rl2"

    def __post_init__(self):
        if self.outer_iterations < 1 or self.tasks_per_update < 1:
            raise ValueError("outer_iterations and tasks_per_update must be >= 1")
        if self.policy_updates_per_iteration < 0:
            raise ValueError("policy_updates_per_iteration must be >= 0")
        if self.reservoir_capacity < 1 or self.seed_episodes < 1:
            raise ValueError("reservoir_capacity and seed_episodes must be >= 1")
        if self.learner not in ("rl2", "contextual"):
            raise ValueError("learner must be 'rl2' or 'contextual'")


@dataclass(frozen=True)
class EvalConfig:
    test_repeats: int = 4
    finetune_updates: int = 300
    finetune_tasks_per_update: int = 8
    finetune_window: int = 30
    grid_n: int = 16
    lambda_grid: tuple = (0.3, 0.7, 0.99, 1.0)
    discriminator_temperature: float = 3.0
    discriminator_epochs: int = 1
    discriminator_lr: float = 1e-3

    def __post_init__(self):
        if self.test_repeats < 1 or self.grid_n < 1 or self.finetune_window < 1:
            raise ValueError("test_repeats, grid_n and finetune_window must be >= 1")
        if self.finetune_updates < 0 or self.finetune_tasks_per_update < 1:
            raise ValueError("finetune budget must be >= 0 and batch >= 1")
        if self.discriminator_temperature <= 0:
            raise ValueError("discriminator_temperature must be positive")
        object.__setattr__(self, "lambda_grid", tuple(float(x) for x in self.lambda_grid))
        if any(not 0 <= x <= 1 for x in self.lambda_grid):
            raise ValueError("lambda_grid entries must lie in [0, 1]")


BLOCKS = {
    "env": EnvConfig,
    "scaffold": ScaffoldConfig,
    "reward": RewardConfig,
    "policy": PolicyConfig,
    "curriculum": CurriculumConfig,
    "eval": EvalConfig,
}

# TOML key -> dataclass field where they differ
ALIASES = {("reward", "lambda"): "lam"}


@dataclass(frozen=True)
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    scaffold: ScaffoldConfig = field(default_factory=ScaffoldConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    out_dir: str = "runs/default"

    def replace(self, **blocks) -> "RunConfig":
        """``cfg.replace(reward={"lam": 0.3}, seed=2)``: dicts patch a block's fields."""
        kw = {}
        for k, v in blocks.items():
            if isinstance(v, dict):
                kw[k] = dataclasses.replace(getattr(self, k), **v)
            else:
                kw[k] = v
        return dataclasses.replace(self, **kw)


def _coerce(value, current, path: str):
    if isinstance(current, bool):
        if isinstance(value, str):
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if isinstance(current, int) and not isinstance(current, bool):
        try:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{path}: expected an integer, got {value!r}") from None
    if isinstance(current, float) or (current is None and isinstance(value, (int, float, str))):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{path}: expected a number, got {value!r}") from None
    if isinstance(current, tuple):
        if isinstance(value, str):
            value = [v for v in value.split(",") if v.strip()]
        return tuple(value)
    return value


def _field_name(block: str, key: str) -> str:
    return ALIASES.get((block, key), key)


def _toml_key(block: str, name: str) -> str:
    for (b, k), f in ALIASES.items():
        if b == block and f == name:
            return k
    return name


def build_config(data: dict) -> RunConfig:
    data = dict(data)
    top = {}
    for key in ("seed", "out_dir"):
        if key in data:
            top[key] = data.pop(key)
    blocks = {}
    for block, values in data.items():
        if block not in BLOCKS:
            raise ConfigError(f"unknown config key {block!r}")
        if not isinstance(values, dict):
            raise ConfigError(f"{block}: expected a table")
        cls = BLOCKS[block]
        defaults = cls()
        names = {f.name for f in fields(cls)}
        kwargs = {}
        for key, value in values.items():
            name = _field_name(block, key)
            if name not in names:
                raise ConfigError(f"unknown config key '{block}.{key}'")
            kwargs[name] = _coerce(value, getattr(defaults, name), f"{block}.{key}")
        try:
            blocks[block] = cls(**kwargs)
        except ValueError as e:
            culprit = next((k for k in values if k in str(e) or _field_name(block, k) in str(e)), None)
            where = f"{block}.{culprit}" if culprit else block
            raise ConfigError(f"{where}: {e}") from None
    try:
        seed = int(top.get("seed", 0))
    except (TypeError, ValueError):
        raise ConfigError(f"seed: expected an integer, got {top.get('seed')!r}") from None
    return RunConfig(**blocks, seed=seed, out_dir=str(top.get("out_dir", "runs/default")))


def _env_overrides(environ) -> dict:
    out: dict = {}
    for key, value in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        parts = key[len(ENV_PREFIX):].lower().split("__")
        if len(parts) == 1:
            out[parts[0]] = value
        elif len(parts) == 2:
            out.setdefault(parts[0], {})[parts[1]] = value
        else:
            raise ConfigError(f"bad override variable {key}")
    return out


def parse_config(source: str | Path | None = None, environ=None) -> RunConfig:
    """Parse TOML text or a path; ``None`` or empty text gives all defaults."""
    text = ""
    if isinstance(source, Path) or (isinstance(source, str) and source and "\n" not in source
                                    and Path(source).is_file()):
        text = Path(source).read_text()
    elif source:
        text = source
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"malformed config: {e}") from None
    for block, values in _env_overrides(os.environ if environ is None else environ).items():
        if isinstance(values, dict):
            data.setdefault(block, {}).update(values)
        else:
            data[block] = values
    return build_config(data)


def config_to_dict(cfg: RunConfig) -> dict:
    out: dict = {"seed": cfg.seed, "out_dir": cfg.out_dir}
    for block in BLOCKS:
        obj = getattr(cfg, block)
        out[block] = {_toml_key(block, f.name): (list(v) if isinstance(v := getattr(obj, f.name), tuple) else v)
                      for f in fields(obj)}
    return out


def serialize_config(cfg: RunConfig) -> str:
    return tomli_w.dumps(config_to_dict(cfg))
