"""TOML scenario files.

A file has up to seven sections, each mapping onto one settings object::

    [world]    map size range, obstacle model
    [net]      link ranges and rates
    [traffic]  generation interval, buffer size, drain policy
    [explore]  frontier weights, sensor radius, forecast horizon
    [reward]   reward constants
    [trainer]  DDQN hyper-parameters
    [run]      seeds, episode counts, policies, output paths

Omitted keys keep their defaults (``lunardtn defaults`` prints them all);
unknown sections or keys are errors. Every key can also be overridden on the
command line as ``--section.key VALUE``.
"""

from __future__ import annotations

import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from .engine import EpisodeConfig, ScenarioSpace
from .errors import ConfigError
from .explore import ExplorationConfig
from .marl import RewardConfig, TrainerConfig
from .net import LinkParams
from .world import ObstacleModel


@dataclass(frozen=True)
class WorldSection:
    min_size: int = 20
    max_size: int = 40
    rho: float = 1.0
    density: float = 0.08
    radius_distribution: tuple[tuple[int, float], ...] = ((1, 0.7), (2, 0.25), (3, 0.05))
    inflation_radius: int = 1
    max_retries: int = 25

    def __post_init__(self):
        if not 8 <= self.min_size <= self.max_size:
            raise ConfigError("need 8 <= min_size <= max_size")
        if self.rho <= 0:
            raise ConfigError("rho must be > 0")
        object.__setattr__(self, "radius_distribution",
                           tuple((int(r), float(p)) for r, p in self.radius_distribution))


@dataclass(frozen=True)
class TrafficSection:
    gen_interval: int = 1
    buffer_capacity: int = 50
    t_max: int = 100
    drain_factor: int = 3
    max_steps: int = 0


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    min_rovers: int = 3
    max_rovers: int = 3
    collect_episodes: int = 10
    anneal_episodes: int = 10
    frozen_episodes: int = 10
    eval_episodes: int = 20
    eval_seed: int = 1
    policies: tuple[str, ...] = ("snw", "greedy", "gatmarl")
    horizons: tuple[int, ...] = (1,)
    jobs: int = 1
    out_dir: str = "results"
    model: str = "results/model.ckpt"
    trace: str = ""

    def __post_init__(self):
        from .policies import POLICY_NAMES
        object.__setattr__(self, "policies", tuple(self.policies))
        object.__setattr__(self, "horizons", tuple(int(h) for h in self.horizons))
        if not 1 <= self.min_rovers <= self.max_rovers:
            raise ConfigError("need 1 <= min_rovers <= max_rovers")
        bad = [p for p in self.policies if p not in POLICY_NAMES]
        if bad:
            raise ConfigError(f"unknown policies {bad}; choose from {list(POLICY_NAMES)}")
        if not self.horizons or min(self.horizons) < 1:
            raise ConfigError("horizons must be >= 1")
        if min(self.collect_episodes, self.anneal_episodes, self.frozen_episodes,
               self.eval_episodes) < 0 or self.jobs < 1:
            raise ConfigError("episode counts must be >= 0 and jobs >= 1")


SECTIONS: dict[str, type] = {
    "world": WorldSection,
    "net": LinkParams,
    "traffic": TrafficSection,
    "explore": ExplorationConfig,
    "reward": RewardConfig,
    "trainer": TrainerConfig,
    "run": RunSection,
}


@dataclass(frozen=True)
class Settings:
    world: WorldSection = field(default_factory=WorldSection)
    net: LinkParams = field(default_factory=LinkParams)
    traffic: TrafficSection = field(default_factory=TrafficSection)
    explore: ExplorationConfig = field(default_factory=ExplorationConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    run: RunSection = field(default_factory=RunSection)

    def episode(self) -> EpisodeConfig:
        w, t = self.world, self.traffic
        obstacles = ObstacleModel(w.density, w.radius_distribution, 0, w.inflation_radius,
                                  w.max_retries)
        return EpisodeConfig(w.max_size, w.max_size, w.rho, obstacles, self.run.min_rovers,
                             self.net, self.explore, t.gen_interval, t.buffer_capacity, t.t_max,
                             t.drain_factor, t.max_steps)

    def space(self) -> ScenarioSpace:
        return ScenarioSpace(self.world.min_size, self.world.max_size,
                             self.run.min_rovers, self.run.max_rovers)


def _coerce(value: Any, default: Any, where: str) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected an array")
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    return value


def _section(name: str, data: dict) -> Any:
    cls = SECTIONS[name]
    defaults = cls()
    known = {f.name for f in fields(cls) if f.init}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"[{name}] unknown keys: {', '.join(sorted(unknown))}")
    kwargs = {k: _coerce(v, getattr(defaults, k), f"{name}.{k}") for k, v in data.items()}
    try:
        return replace(defaults, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}] {exc}") from exc


def from_dict(data: dict) -> Settings:
    unknown = set(data) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown sections: {', '.join(sorted(unknown))}")
    for name, body in data.items():
        if not isinstance(body, dict):
            raise ConfigError(f"[{name}] must be a table")
    return Settings(**{name: _section(name, data.get(name, {})) for name in SECTIONS})


def to_dict(settings: Settings) -> dict:
    def plain(v):
        if isinstance(v, tuple):
            return [plain(x) for x in v]
        return v
    return {name: {k: plain(v) for k, v in asdict(getattr(settings, name)).items()}
            for name in SECTIONS}


def loads(text: str) -> Settings:
    try:
        return from_dict(tomllib.loads(text))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc


def dumps(settings: Settings) -> str:
    return tomli_w.dumps(to_dict(settings))


def load(path: str | Path) -> Settings:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return loads(p.read_text())


def flag_names() -> list[str]:
    """Every overridable dotted key, in section order."""
    d = to_dict(Settings())
    return [f"{s}.{k}" for s in SECTIONS for k in d[s]]


def parse_value(text: str, default: Any) -> Any:
    """Interpret a command-line string using the type of ``default``."""
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes"):
            return True
        if text.lower() in ("0", "false", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {text!r}")
    if isinstance(default, int):
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"expected an integer, got {text!r}") from None
    if isinstance(default, float):
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"expected a number, got {text!r}") from None
    if isinstance(default, tuple):
        try:
            v = json.loads(text)
        except json.JSONDecodeError:
            v = [x.strip() for x in text.split(",") if x.strip()]
            if default and isinstance(default[0], int):
                try:
                    v = [int(x) for x in v]
                except ValueError:
                    raise ConfigError(f"expected integers, got {text!r}") from None
        if not isinstance(v, list):
            v = [v]
        return tuple(v)
    return text


def override(settings: Settings, updates: dict[str, str]) -> Settings:
    """Apply ``{"section.key": "text"}`` overrides."""
    data = to_dict(settings)
    for dotted, text in updates.items():
        section, _, key = dotted.partition(".")
        if section not in data or key not in data[section]:
            raise ConfigError(f"unknown setting {dotted}")
        default = getattr(getattr(settings, section), key)
        value = parse_value(text, default)
        data[section][key] = [list(v) if isinstance(v, tuple) else v for v in value] \
            if isinstance(value, tuple) else value
    return from_dict(data)
