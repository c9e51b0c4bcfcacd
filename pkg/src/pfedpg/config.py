"""Experiment configuration: a flat TOML file of typed scalars plus a ``seed`` triple."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .encoder import EncoderConfig
from .server import STRATEGIES

PARTITIONS = ("dirichlet", "disjoint", "domain")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # frozen encoder
    image_side: int = 16
    channels: int = 3
    patch_side: int = 4
    embed_dim: int = 32
    depth: int = 2
    heads: int = 2
    mlp_ratio: float = 2.0
    encoder_mode: str = "pretrained"
    encoder_path: str = ""
    pretrain_fraction: float = 0.25
    pretrain_epochs: int = 15
    pretrain_lr: float = 0.003
    # federated protocol
    strategy: str = "pfedpg"
    num_clients: int = 10
    num_prompts: int = 10
    key_dim: int = 0
    value_dim: int = 0
    mlp_hidden: int = 64
    client_lr: float = 0.25
    server_lr: float = 0.001
    weight_decay: float = 0.001
    batch_size: int = 64
    local_epochs: int = 5
    rounds: int = 30
    literal_sign: bool = False
    server_update_mode: str = "sequential"
    reset_head: bool = False
    # synthetic data
    num_classes: int = 20
    samples_per_class: int = 60
    noise_std: float = 0.1
    jitter: int = 2
    test_fraction: float = 0.25
    partition: str = "dirichlet"
    dirichlet_alpha: float = 0.1
    classes_per_client: int = 2
    # seeds: data, model, training
    seed: list = field(default_factory=lambda: [0, 0, 0])
    # execution
    workers: int = 1
    output_dir: str = "runs"
    log_wall_time: bool = False

    def __post_init__(self):
        self.validate()

    @property
    def data_seed(self) -> int:
        return int(self.seed[0])

    @property
    def model_seed(self) -> int:
        return int(self.seed[1])

    @property
    def train_seed(self) -> int:
        return int(self.seed[2])

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.image_side, self.channels, self.patch_side, self.embed_dim,
                             self.depth, self.heads, self.mlp_ratio, self.model_seed)

    def validate(self):
        if not (isinstance(self.seed, (list, tuple)) and len(self.seed) == 3
                and all(isinstance(s, int) and not isinstance(s, bool) for s in self.seed)):
            raise ConfigError("seed must be a list of three integers [data, model, training]")
        self.seed = [int(s) for s in self.seed]
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.partition not in PARTITIONS:
            raise ConfigError(f"partition must be one of {PARTITIONS}, got {self.partition!r}")
        if self.encoder_mode not in ("random", "pretrained"):
            raise ConfigError("encoder_mode must be 'random' or 'pretrained'")
        if self.server_update_mode not in ("sequential", "mean"):
            raise ConfigError("server_update_mode must be 'sequential' or 'mean'")
        if self.rounds < 1 or self.num_prompts < 1 or self.num_clients < 1:
            raise ConfigError("rounds, num_prompts and num_clients must be >= 1")
        if self.batch_size < 1 or self.local_epochs < 1:
            raise ConfigError("batch_size and local_epochs must be >= 1")
        if self.client_lr < 0 or self.server_lr < 0 or self.weight_decay < 0:
            raise ConfigError("learning rates and weight decay must be non-negative")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("test_fraction must lie in (0, 1)")
        if self.encoder_mode == "pretrained" and not 0 < self.pretrain_fraction < 1:
            raise ConfigError("pretrain_fraction must lie in (0, 1)")
        if self.key_dim < 0 or self.value_dim < 0:
            raise ConfigError("key_dim / value_dim must be >= 0 (0 means embed_dim)")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        try:
            self.encoder_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def replace(self, **changes) -> "ExperimentConfig":
        d = self.to_dict()
        d.update(changes)
        return from_dict(d)


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _coerce(name: str, value):
    default = getattr(ExperimentConfig(), name)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string, got {value!r}")
        return value
    return value


def from_dict(d: dict) -> ExperimentConfig:
    unknown = sorted(set(d) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return ExperimentConfig(**{k: _coerce(k, v) for k, v in d.items()})


def parse_config(text: str) -> ExperimentConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    nested = [k for k, v in raw.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"config must be flat; tables not allowed: {nested}")
    return from_dict(raw)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    return parse_config(text)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, int):
        return str(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot serialise {v!r}")


def dump_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {_toml_value(v)}\n" for k, v in cfg.to_dict().items())


def save_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.write_text(dump_config(cfg))
    return path
