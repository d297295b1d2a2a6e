"""Experiment configuration: defaults, YAML loading and the resolved-config hash.

dB, dBm and degree values live only here; the ``ExperimentConfig`` accessor
methods turn them into the linear SI parameter objects used everywhere else.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .channel import AntennaPattern, ChannelParams, db_to_linear, dbm_to_watts
from .gnn import GnnHyperParams, Mode
from .hetgraph import GraphSettings
from .jcs import SystemParams
from .scenario import SensingParams


class ConfigError(ValueError):
    pass


@dataclass
class ChannelSection:
    carrier_frequency_hz: float = 1.05e12
    light_speed_mps: float = 3e8
    absorption_coefficient_per_m: float = 0.07512
    tx_power_dbm: float = 40.0
    bandwidth_hz: float = 5e9
    noise_floor_dbm: float = -77.0


@dataclass
class AntennaSection:
    horizontal_beamwidth_deg: float = 10.0
    vertical_beamwidth_deg: float = 10.0
    sidelobe_power_ratio: float = 0.1


@dataclass
class SensingSection:
    rcs_m2: float = 1.0
    min_sinr_db: float = 3.0
    roundtrip_absorption: bool = False


@dataclass
class GraphSection:
    blocker_radius_m: float = 1.0
    feature_rule: str = "segment"
    edge_range_m: float | None = None
    second_hop_per_node: bool = False


@dataclass
class GnnSection:
    embedding_dim: int = 64
    sample_sizes: list = field(default_factory=lambda: [10, 10])
    head_layer_sizes: list = field(default_factory=lambda: [32, 64, 64])
    learning_rate: float = 0.7
    batch_size: int = 64
    iterations: int = 20_000
    train_homogeneous: bool = True
    # keep the checkpoint with the lowest validation-split loss
    select_by_validation: bool = True
    validate_every: int = 500


@dataclass
class DataSection:
    counts: list = field(default_factory=lambda: [5, 2, 2])
    region_m: list = field(default_factory=lambda: [100.0, 100.0])
    n_train: int = 1500
    n_test: int = 1000
    n_validate: int = 1000
    enumeration_budget: int = 10**7
    max_draws_per_record: int = 200


@dataclass
class ExperimentConfig:
    seed: int = 0
    channel: ChannelSection = field(default_factory=ChannelSection)
    antenna: AntennaSection = field(default_factory=AntennaSection)
    sensing: SensingSection = field(default_factory=SensingSection)
    graph: GraphSection = field(default_factory=GraphSection)
    gnn: GnnSection = field(default_factory=GnnSection)
    data: DataSection = field(default_factory=DataSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    # resolved parameter objects

    def system_params(self) -> SystemParams:
        c, s = self.channel, self.sensing
        return SystemParams(
            channel=ChannelParams(
                carrier_frequency=c.carrier_frequency_hz,
                light_speed=c.light_speed_mps,
                absorption_coefficient=c.absorption_coefficient_per_m,
                noise_floor=float(dbm_to_watts(c.noise_floor_dbm)),
                bandwidth=c.bandwidth_hz,
            ),
            sensing=SensingParams(rcs=s.rcs_m2, min_sensing_sinr=float(db_to_linear(s.min_sinr_db))),
            roundtrip_absorption=s.roundtrip_absorption,
        )

    def antenna_pattern(self) -> AntennaPattern:
        a = self.antenna
        return AntennaPattern(math.radians(a.horizontal_beamwidth_deg),
                              math.radians(a.vertical_beamwidth_deg), a.sidelobe_power_ratio)

    def tx_power_w(self) -> float:
        return float(dbm_to_watts(self.channel.tx_power_dbm))

    def graph_settings(self) -> GraphSettings:
        g = self.graph
        return GraphSettings(g.blocker_radius_m, g.feature_rule, g.edge_range_m, g.second_hop_per_node)

    def hyper(self, mode: Mode = Mode.HETEROGENEOUS, embedding_dim: int | None = None) -> GnnHyperParams:
        g = self.gnn
        return GnnHyperParams(
            embedding_dim=embedding_dim or g.embedding_dim,
            sample_sizes=tuple(g.sample_sizes),
            head_layer_sizes=tuple(g.head_layer_sizes),
            learning_rate=g.learning_rate,
            batch_size=g.batch_size,
            iterations=g.iterations,
            mode=mode,
        )

    @property
    def counts(self) -> tuple[int, int, int]:
        return tuple(int(x) for x in self.data.counts)

    @property
    def n_targets(self) -> int:
        return self.counts[1] + self.counts[2]

    def validate(self) -> "ExperimentConfig":
        try:
            self.system_params()
            self.antenna_pattern()
            self.graph_settings()
            self.hyper()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if len(self.data.counts) != 3 or min(self.data.counts) < 0 or self.counts[0] < 1:
            raise ConfigError("data.counts must be [n_spv>=1, n_comm>=0, n_sense>=0]")
        if self.gnn.validate_every < 1:
            raise ConfigError("gnn.validate_every must be >= 1")
        if self.n_targets < 1:
            raise ConfigError("need at least one target")
        for name in ("n_train", "n_test", "n_validate"):
            if getattr(self.data, name) < 0:
                raise ConfigError(f"data.{name} must be >= 0")
        return self


SMOKE = {"gnn": {"iterations": 500, "validate_every": 100}, "data": {"n_train": 100, "n_test": 100, "n_validate": 100}}


def _merge(obj, overrides: dict, where: str):
    for key, value in overrides.items():
        if not hasattr(obj, key):
            raise ConfigError(f"unknown config key {where}{key}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}{key} must be a mapping")
            _merge(current, value, f"{where}{key}.")
        else:
            setattr(obj, key, value)


def build_config(overrides: dict | None = None, smoke: bool = False, seed: int | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if smoke:
        _merge(cfg, SMOKE, "")
    if overrides:
        _merge(cfg, overrides, "")
    if seed is not None:
        cfg.seed = int(seed)
    return cfg.validate()


def load_config(path=None, smoke: bool = False, seed: int | None = None) -> ExperimentConfig:
    """Defaults, then the smoke profile, then the YAML file, then an explicit seed."""
    overrides = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        try:
            overrides = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(overrides, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    return build_config(overrides, smoke, seed)


def config_from_dict(d: dict) -> ExperimentConfig:
    return build_config(d)
