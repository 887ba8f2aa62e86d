"""Declarative experiment configuration (YAML on disk)."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import ClientSpec, SyntheticTaskSpec, default_task_spec
from .errors import ConfigError
from .evidential import LossConfig
from .model import NetworkConfig

MODES = ("tuw", "fedavg")
OPTIMIZERS = ("adam", "sgd")


@dataclass(frozen=True)
class FederationConfig:
    rounds: int = 30
    epochs: int = 5
    lr: float = 0.001
    batch_size: int = 8
    mode: str = "tuw"
    participation: float = 1.0
    optimizer: str = "adam"
    psi_lr: float | None = None  # None: reuse lr
    psi_epochs: int = 1
    workers: int = 1

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigError("federation.rounds must be >= 1")
        if self.epochs < 0:
            raise ConfigError("federation.epochs must be >= 0")
        if not self.lr > 0:
            raise ConfigError("federation.lr must be > 0")
        if self.batch_size < 1:
            raise ConfigError("federation.batch_size must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"federation.mode must be one of {MODES}, got {self.mode!r}")
        if not 0 < self.participation <= 1:
            raise ConfigError("federation.participation must lie in (0, 1]")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"federation.optimizer must be one of {OPTIMIZERS}")
        if self.psi_lr is not None and self.psi_lr < 0:
            raise ConfigError("federation.psi_lr must be >= 0")
        if self.psi_epochs < 0:
            raise ConfigError("federation.psi_epochs must be >= 0")
        if self.workers < 1:
            raise ConfigError("federation.workers must be >= 1")

    @property
    def effective_psi_lr(self):
        return self.lr if self.psi_lr is None else self.psi_lr


@dataclass(frozen=True)
class AblationFlags:
    disable_cfe: bool = False
    disable_tuw: bool = False
    share_eu_head: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    network: NetworkConfig = field(default_factory=NetworkConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    data: SyntheticTaskSpec | None = None
    dataset_path: str | None = None
    output_dir: str = "runs/fedeu"
    ablation: AblationFlags = field(default_factory=AblationFlags)
    warmup_steps: int = 0

    def __post_init__(self):
        if (self.data is None) == (self.dataset_path is None):
            raise ConfigError("exactly one of 'data' and 'dataset_path' must be set")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        if self.warmup_steps and self.data is None:
            raise ConfigError("warmup_steps needs a 'data' spec to draw the warm-up pool from")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def default_config(seed=0, **changes) -> ExperimentConfig:
    return ExperimentConfig(seed=seed, data=default_task_spec(seed), **changes)


_SECTIONS = {
    "network": NetworkConfig,
    "loss": LossConfig,
    "federation": FederationConfig,
    "ablation": AblationFlags,
}


def _check_scalar_types(cls, raw, where):
    # type-check scalars against the field default so errors name the key
    for f in dataclasses.fields(cls):
        if f.name not in raw or f.default is dataclasses.MISSING or f.default is None:
            continue
        value, default = raw[f.name], f.default
        if isinstance(default, bool):
            ok = isinstance(value, bool)
        elif isinstance(default, int):
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif isinstance(default, float):
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        elif isinstance(default, str):
            ok = isinstance(value, str)
        else:
            continue
        if not ok:
            raise ConfigError(f"field '{where}.{f.name}' expects {type(default).__name__}, "
                              f"got {value!r}")


def _build(cls, raw, where):
    if not isinstance(raw, dict):
        raise ConfigError(f"'{where}' must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in names:
            raise ConfigError(f"unknown field '{where}.{key}'")
    _check_scalar_types(cls, raw, where)
    try:
        return cls(**raw)
    except ConfigError as exc:
        msg, base = str(exc), where.split("[")[0]
        if msg.startswith(base + "."):
            msg = where + msg[len(base):]  # keep the list index in the field path
        elif not msg.startswith(base):
            msg = f"{where}: {msg}"
        raise ConfigError(msg) from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _build_data(raw):
    if raw is None:
        return None
    if not isinstance(raw, dict):
        raise ConfigError("'data' must be a mapping")
    raw = dict(raw)
    clients = raw.pop("clients", None)
    if not isinstance(clients, list):
        raise ConfigError("'data.clients' must be a list of client specs")
    built = tuple(_build(ClientSpec, c, f"data.clients[{i}]") for i, c in enumerate(clients))
    return _build(SyntheticTaskSpec, {**raw, "clients": built}, "data")


def config_from_dict(raw) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    for key in raw:
        if key not in names:
            raise ConfigError(f"unknown field '{key}'")
    kwargs = {k: v for k, v in raw.items() if k not in _SECTIONS and k != "data"}
    for key, cls in _SECTIONS.items():
        if raw.get(key) is not None:
            kwargs[key] = _build(cls, raw[key], key)
    kwargs["data"] = _build_data(raw.get("data"))
    try:
        return ExperimentConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return _plain(cfg)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from None
    try:
        return config_from_dict(raw)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def dump_config(cfg: ExperimentConfig, path=None) -> str:
    text = yaml.safe_dump(config_to_dict(cfg), sort_keys=False)
    if path is not None:
        Path(path).write_text(text)
    return text


def _child(node, part, key):
    if isinstance(node, list):
        if not part.isdigit() or int(part) >= len(node):
            raise ConfigError(f"index '{part}' out of range in '{key}'")
        return node[int(part)]
    if not isinstance(node, dict) or part not in node:
        raise ConfigError(f"unknown field '{key}'")
    return node[part]


def apply_overrides(cfg: ExperimentConfig, assignments) -> ExperimentConfig:
    """Apply ``dotted.key=value`` overrides (values parsed as YAML scalars)."""
    raw = config_to_dict(cfg)
    for item in assignments:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} must look like key=value")
        node, parts = raw, key.split(".")
        for part in parts[:-1]:
            node = _child(node, part, key)
            if not isinstance(node, (dict, list)):
                raise ConfigError(f"unknown field '{key}'")
        last = parts[-1]
        if isinstance(node, list):
            _child(node, last, key)
            node[int(last)] = yaml.safe_load(value)
        elif last in node:
            node[last] = yaml.safe_load(value)
        else:
            raise ConfigError(f"unknown field '{key}'")
    return config_from_dict(raw)
