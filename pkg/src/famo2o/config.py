"""Run configuration: defaults, ini parsing, overrides and validation.

Config files use ini syntax.  Section names only group keys for readability;
every key lives in one flat namespace, so ``--override key=value`` needs no
section.  Example::

    [experiment]
    algo = iql
    balance = famo2o
    env = maze
    seeds = 0, 1, 2

    [balance]
    beta_min = 1.0
    beta_max = 5.0

List values are comma separated; booleans accept true/false/yes/no/1/0.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path

ALGOS = ("iql", "awac", "cql")
ENVS = ("maze", "pointmass")
DATASET_MODES = ("mixed", "guided", "random")

# Default coefficient ranges per base algorithm (the IQL/AWAC values are the
# locomotion-scale ranges, CQL's is its alpha range).
DEFAULT_RANGES = {"iql": (1.0, 5.0), "awac": (2.0, 3.0), "cql": (0.5, 1.5)}
BETA_MAX_WARN = 20.0

# Large-scale values replaced by smaller ones for desk runs: key -> reference value.
DESK_OVERRIDES = {
    "batch_size": 256,
    "hidden": (256, 256),
    "buffer_capacity": 2_000_000,
    "n_offline": 1_000_000,
    "n_online": 1_000_000,
}

_SECTIONS = {
    "experiment": ("algo", "balance", "env", "seeds", "out"),
    "data": ("dataset_path", "dataset_mode", "dataset_episodes", "dataset_seed", "max_episode_steps"),
    "balance": ("beta_min", "beta_max", "enc_dim", "beta_normalize", "balance_update_freq",
                "online_beta_sample", "balance_action_sample", "balance_init_log_std",
                "balance_hidden"),
    "training": ("n_offline", "n_online", "batch_size", "hidden", "lr", "lr_balance", "gamma",
                 "expectile", "soft_update", "w_max", "alpha_cql", "buffer_capacity", "env_steps_per_update"),
    "logging": ("log_interval", "eval_interval", "checkpoint"),
}


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class RunConfig:
    algo: str = "iql"
    balance: str = "famo2o"
    env: str = "maze"
    seeds: tuple = (0,)
    out: str = "runs"
    dataset_path: str = ""
    dataset_mode: str = "mixed"
    dataset_episodes: int = 200
    dataset_seed: int = -1
    max_episode_steps: int = 50
    beta_min: float = float("nan")
    beta_max: float = float("nan")
    enc_dim: int = 8
    beta_normalize: bool = False
    balance_update_freq: int = 1
    online_beta_sample: bool = True
    balance_action_sample: bool = True
    balance_init_log_std: float = 0.0
    balance_hidden: str = "shared"
    n_offline: int = 20_000
    n_online: int = 20_000
    batch_size: int = 64
    hidden: tuple = (64, 64)
    lr: float = 3e-4
    lr_balance: float = 3e-4
    gamma: float = 0.99
    expectile: float = 0.7
    soft_update: float = 5e-3
    w_max: float = 100.0
    alpha_cql: float = 1.0
    buffer_capacity: int = 100_000
    env_steps_per_update: int = 1
    log_interval: int = 100
    eval_interval: int = 1000
    checkpoint: bool = True
    explicit: frozenset = field(default_factory=frozenset, compare=False, repr=False)

    def __post_init__(self):
        lo, hi = DEFAULT_RANGES.get(self.algo, (1.0, 5.0))
        if self.beta_min != self.beta_min:  # nan: take the algorithm default
            self.beta_min = lo
        if self.beta_max != self.beta_max:
            self.beta_max = hi

    # --- derived views ---------------------------------------------------

    @property
    def beta_midpoint(self) -> float:
        return 0.5 * (self.beta_min + self.beta_max)

    @property
    def balance_kind(self) -> str:
        return self.balance.split(":", 1)[0]

    @property
    def fixed_beta(self) -> float:
        if self.balance_kind != "fixed":
            raise ConfigError("balance: not a fixed-coefficient run")
        return float(self.balance.split(":", 1)[1])

    @property
    def balance_layers(self) -> tuple:
        """Hidden widths of the balance model: ``shared`` reuses ``hidden``,
        ``linear`` means no hidden layer, otherwise comma-separated widths."""
        text = self.balance_hidden.strip()
        if text == "shared":
            return tuple(self.hidden)
        if text == "linear":
            return ()
        try:
            widths = tuple(int(v) for v in text.split(",") if v.strip())
        except ValueError:
            raise ConfigError(f"balance_hidden: expected shared, linear or widths, got {text!r}") from None
        if not widths or any(w <= 0 for w in widths):
            raise ConfigError(f"balance_hidden: widths must be positive, got {text!r}")
        return widths

    def with_overrides(self, **changes) -> "RunConfig":
        data = self.to_dict()
        data.update(changes)
        return from_mapping(data, explicit=self.explicit | set(changes))

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            if f.name == "explicit":
                continue
            value = getattr(self, f.name)
            out[f.name] = list(value) if isinstance(value, tuple) else value
        return out

    def to_ini(self) -> str:
        data = self.to_dict()
        lines = []
        for section, keys in _SECTIONS.items():
            lines.append(f"[{section}]")
            for key in keys:
                lines.append(f"{key} = {_format_value(data[key])}")
            lines.append("")
        return "\n".join(lines)

    def content_hash(self, extra: bytes = b"") -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode() + extra
        return hashlib.sha256(payload).hexdigest()

    def desk_scale_keys(self) -> dict:
        """Keys whose value differs from the large-scale reference."""
        out = {}
        for key, ref in DESK_OVERRIDES.items():
            value = getattr(self, key)
            if value != ref:
                out[key] = {"value": list(value) if isinstance(value, tuple) else value,
                            "reference": list(ref) if isinstance(ref, tuple) else ref}
        return out


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


_FIELD_TYPES = {f.name: f.default for f in fields(RunConfig) if f.name != "explicit"}


def _coerce(key: str, raw):
    if key not in _FIELD_TYPES:
        raise ConfigError(f"{key}: unknown configuration key")
    default = _FIELD_TYPES[key]
    try:
        if isinstance(default, bool):
            if isinstance(raw, bool):
                return raw
            text = str(raw).strip().lower()
            if text in ("true", "yes", "1", "on"):
                return True
            if text in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, tuple):
            items = raw if isinstance(raw, (list, tuple)) else [v for v in str(raw).split(",") if v.strip()]
            return tuple(int(v) for v in items)
        if isinstance(default, int):
            value = float(raw)
            if value != int(value):
                raise ValueError(raw)
            return int(value)
        if isinstance(default, float):
            return float(raw)
        return str(raw).strip()
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None


def from_mapping(data: dict, explicit=None) -> RunConfig:
    values = {k: _coerce(k, v) for k, v in data.items()}
    cfg = RunConfig(**values)
    cfg.explicit = frozenset(explicit if explicit is not None else data.keys())
    validate(cfg)
    return cfg


def parse_ini(text: str) -> dict:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config: {exc}") from None
    flat = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            if key in flat:
                raise ConfigError(f"{key}: defined more than once")
            flat[key] = value
    return flat


def parse_override(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise ConfigError(f"override {text!r}: expected key=value")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def load_config(path=None, overrides=()) -> RunConfig:
    data = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config: file not found: {p}")
        data = parse_ini(p.read_text())
    for item in overrides:
        key, value = parse_override(item)
        data[key] = value
    return from_mapping(data)


def validate(cfg: RunConfig) -> None:
    """Reject inconsistent settings before any work starts."""
    if cfg.algo not in ALGOS:
        raise ConfigError(f"algo: must be one of {ALGOS}, got {cfg.algo!r}")
    if cfg.env not in ENVS:
        raise ConfigError(f"env: must be one of {ENVS}, got {cfg.env!r}")
    if cfg.dataset_mode not in DATASET_MODES:
        raise ConfigError(f"dataset_mode: must be one of {DATASET_MODES}")
    kind = cfg.balance_kind
    if kind not in ("famo2o", "fixed", "random", "anneal"):
        raise ConfigError(f"balance: must be famo2o, fixed:<beta>, random or anneal, got {cfg.balance!r}")
    if kind == "fixed":
        try:
            value = cfg.fixed_beta
        except ValueError:
            raise ConfigError(f"balance: cannot parse the fixed coefficient in {cfg.balance!r}") from None
        if not value > 0:
            raise ConfigError("balance: fixed coefficient must be positive")
    elif ":" in cfg.balance:
        raise ConfigError(f"balance: only fixed takes a value, got {cfg.balance!r}")
    if not 0 < cfg.beta_min < cfg.beta_max:
        raise ConfigError(f"beta_min: need 0 < beta_min < beta_max, got [{cfg.beta_min}, {cfg.beta_max}]")
    if cfg.beta_max > BETA_MAX_WARN:
        warnings.warn(f"beta_max = {cfg.beta_max} exceeds {BETA_MAX_WARN}; very radical coefficients", stacklevel=2)
    if cfg.enc_dim <= 0 or cfg.enc_dim % 2:
        raise ConfigError("enc_dim: must be a positive even integer")
    # a resolved config file lists every key, so only a non-default value counts as a conflict
    if "expectile" in cfg.explicit and cfg.algo != "iql" and cfg.expectile != _FIELD_TYPES["expectile"]:
        raise ConfigError(f"expectile: only used by iql, not {cfg.algo}")
    if "alpha_cql" in cfg.explicit and cfg.algo != "cql" and cfg.alpha_cql != _FIELD_TYPES["alpha_cql"]:
        raise ConfigError(f"alpha_cql: only used by cql, not {cfg.algo}")
    if not 0.0 < cfg.expectile < 1.0:
        raise ConfigError("expectile: must lie in (0, 1)")
    if not 0.0 < cfg.gamma < 1.0:
        raise ConfigError("gamma: must lie in (0, 1)")
    if not 0.0 < cfg.soft_update <= 1.0:
        raise ConfigError("soft_update: must lie in (0, 1]")
    for key in ("batch_size", "buffer_capacity", "balance_update_freq", "log_interval",
                "eval_interval", "env_steps_per_update", "max_episode_steps"):
        if getattr(cfg, key) <= 0:
            raise ConfigError(f"{key}: must be positive")
    for key in ("n_offline", "n_online", "dataset_episodes"):
        if getattr(cfg, key) < 0:
            raise ConfigError(f"{key}: must be nonnegative")
    if cfg.n_offline + cfg.n_online == 0:
        raise ConfigError("n_offline: at least one training step is required")
    if not cfg.dataset_path and cfg.dataset_episodes == 0:
        raise ConfigError("dataset_episodes: must be positive when no dataset_path is given")
    if not cfg.hidden or any(h <= 0 for h in cfg.hidden):
        raise ConfigError("hidden: must list positive layer widths")
    cfg.balance_layers  # raises on a malformed value
    if not cfg.seeds:
        raise ConfigError("seeds: at least one seed is required")
    for key in ("lr", "lr_balance", "w_max"):
        if not getattr(cfg, key) > 0:
            raise ConfigError(f"{key}: must be positive")
    if cfg.alpha_cql < 0:
        raise ConfigError("alpha_cql: must be nonnegative")


def replace(cfg: RunConfig, **changes) -> RunConfig:
    return dataclasses.replace(cfg, **changes)
