"""Scenario configuration: dataclasses, TOML loading and fingerprinting."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from fedtraffic.learner import LearnerConfig
from fedtraffic.traffic import IdmParams, TrafficParams

MODES = ("Baseline", "IRL", "FIRL", "FIRL-D", "FIRL-D-OR", "FIRL-D-LM")
LEARNING_MODES = MODES[1:]


class ConfigError(ValueError):
    """Invalid configuration; ``keys`` lists the offending dotted keys."""

    def __init__(self, message: str, keys: list[str]):
        super().__init__(f"{message}: {', '.join(keys)}")
        self.keys = keys


@dataclass(frozen=True)
class NetworkParams:
    """Federation transport settings.

    Delays are in epochs of ``epoch_duration`` seconds. ``server_learning_rate``
    of ``None`` means "same as the agents' learning rate".
    """

    up_delay_epochs: int = 4
    down_delay_epochs: int = 2
    extra_delay_max_epochs: int = 3
    merge_count: int = 6
    epoch_duration: float = 150.0
    gradient_period_steps: int = 256
    server_learning_rate: Optional[float] = None


@dataclass(frozen=True)
class ClaimThresholds:
    """Quantification of the qualitative comparison claims."""

    final_fraction: float = 0.2
    approach_fraction: float = 0.8
    trivial_fraction: float = 0.05
    degrade_fraction: float = 0.95
    min_seed_fraction: float = 0.8


@dataclass(frozen=True)
class ScenarioConfig:
    mode: str = "FIRL"
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    training_epochs: int = 300
    traffic: TrafficParams = field(default_factory=TrafficParams)
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    network: NetworkParams = field(default_factory=NetworkParams)
    claims: ClaimThresholds = field(default_factory=ClaimThresholds)
    output_dir: str = "runs"
    record_trace: bool = False

    def __post_init__(self):
        bad = []
        if self.mode not in MODES:
            bad.append("mode")
        if not self.seeds:
            bad.append("seeds")
        if self.training_epochs < 1:
            bad.append("training_epochs")
        n = self.network
        if min(n.up_delay_epochs, n.down_delay_epochs, n.extra_delay_max_epochs) < 0:
            bad.append("network.*_delay_epochs")
        if n.merge_count < 1:
            bad.append("network.merge_count")
        if n.gradient_period_steps < 1:
            bad.append("network.gradient_period_steps")
        if bad:
            raise ConfigError("invalid configuration values", bad)

    def with_mode(self, mode: str) -> "ScenarioConfig":
        return dataclasses.replace(self, mode=mode)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def fingerprint(self) -> str:
        """Hash of the canonicalised semantic fields (output settings excluded)."""
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("record_trace")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


_SECTIONS = {"traffic": TrafficParams, "learner": LearnerConfig, "network": NetworkParams,
             "claims": ClaimThresholds}


def _build(cls, data: dict, prefix: str, bad: list[str]):
    names = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        dotted = f"{prefix}{key}"
        if key not in names:
            bad.append(dotted)
            continue
        if cls is TrafficParams and key == "idm":
            if not isinstance(value, dict):
                bad.append(dotted)
                continue
            kwargs[key] = _build(IdmParams, value, dotted + ".", bad)
            continue
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        bad.append(f"{prefix.rstrip('.')} ({exc})")
        return cls()


def config_from_dict(data: dict) -> ScenarioConfig:
    bad: list[str] = []
    kwargs: dict[str, Any] = {}
    top = {f.name for f in dataclasses.fields(ScenarioConfig)}
    for key, value in data.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                bad.append(key)
                continue
            kwargs[key] = _build(_SECTIONS[key], value, key + ".", bad)
        elif key in top:
            kwargs[key] = tuple(value) if isinstance(value, list) else value
        else:
            bad.append(key)
    if bad:
        raise ConfigError("invalid configuration keys", bad)
    return ScenarioConfig(**kwargs)


def load_config(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    with path.open("rb") as fh:
        try:
            data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse {path}", [str(exc)]) from exc
    return config_from_dict(data)
