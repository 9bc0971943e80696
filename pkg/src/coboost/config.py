"""Declarative experiment configuration.

A config file (YAML or JSON) mirrors :class:`ExperimentConfig` field names.
Model specs may be given as bare architecture names; their class count and
input shape are filled in from the dataset at run time.
"""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .datasets import PartitionSpec
from .distill import DistillConfig
from .ensemble import WeightUpdateConfig
from .local import LocalTrainConfig
from .synthesis import SynthesisConfig

METHODS = ("fedavg", "fedens", "plain_distill", "co_boosting")


@dataclass
class Toggles:
    GHS: bool = True
    DHS: bool = True
    EE: bool = True

    def label(self) -> str:
        on = [k for k in ("GHS", "DHS", "EE") if getattr(self, k)]
        return "+".join(on) if on else "none"


@dataclass
class ExperimentConfig:
    dataset: str = "synthetic_blobs"
    data_root: str | None = None
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    # entries are arch names or {arch, num_classes?, input_shape?} mappings;
    # a single entry is shared by every client
    client_specs: list[Any] = field(default_factory=lambda: ["mlp_tiny"])
    server_spec: Any = "mlp_tiny"
    local: LocalTrainConfig = field(default_factory=LocalTrainConfig)
    synth: SynthesisConfig = field(default_factory=SynthesisConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    weight_update: WeightUpdateConfig = field(default_factory=WeightUpdateConfig)
    toggles: Toggles = field(default_factory=Toggles)
    method: str = "co_boosting"
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    output_dir: str | None = None
    # sweep-only: methods to run side by side, in column order
    methods: list[str] | None = None
    # write a sample grid every this many epochs (0 disables)
    grid_every: int = 0
    save_clients: bool = False

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        for m in self.methods or []:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r} in methods")
        n = self.partition.num_clients
        if len(self.client_specs) not in (1, n):
            raise ValueError(f"{len(self.client_specs)} client specs for {n} clients")

    def client_arch_list(self) -> list[Any]:
        specs = list(self.client_specs)
        return specs * self.partition.num_clients if len(specs) == 1 else specs

    def homogeneous(self) -> bool:
        return len({json.dumps(s, sort_keys=True) for s in self.client_arch_list()}) == 1

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(copy.deepcopy(self), **changes)


_NESTED = {
    "partition": PartitionSpec,
    "local": LocalTrainConfig,
    "synth": SynthesisConfig,
    "distill": DistillConfig,
    "weight_update": WeightUpdateConfig,
    "toggles": Toggles,
}


def config_from_dict(doc: dict) -> ExperimentConfig:
    doc = dict(doc)
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    for key, cls in _NESTED.items():
        if key in doc and isinstance(doc[key], dict):
            sub_known = {f.name for f in dataclasses.fields(cls)}
            bad = set(doc[key]) - sub_known
            if bad:
                raise ValueError(f"unknown keys under {key}: {sorted(bad)}")
            doc[key] = cls(**doc[key])
    return ExperimentConfig(**doc)


def load_config(path: str | Path) -> ExperimentConfig:
    text = Path(path).read_text(encoding="utf-8")
    doc = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    return config_from_dict(doc or {})


def apply_overrides(cfg: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    """Apply ``a.b=value`` strings; values are parsed as YAML scalars/lists."""
    doc = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        node = doc
        parts = key.strip().split(".")
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ValueError(f"unknown override path {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ValueError(f"unknown override key {key!r}")
        node[parts[-1]] = yaml.safe_load(raw)
    return config_from_dict(doc)


def desk_profile(**changes) -> ExperimentConfig:
    """Small blobs setup that runs in well under a minute per seed on one CPU core."""
    cfg = ExperimentConfig(
        dataset="synthetic_blobs",
        partition=PartitionSpec(scheme="dirichlet", alpha=0.1, num_clients=10),
        client_specs=["mlp_tiny"],
        server_spec="mlp_tiny",
        local=LocalTrainConfig(epochs=10, batch_size=32, lr=0.01, momentum=0.9),
        synth=SynthesisConfig(generator_lr=1e-3, generator_iters=10, batch_size=64, noise_dim=32),
        distill=DistillConfig(server_lr=0.01, momentum=0.9, kd_temperature=4.0, batch_size=64, epochs=60),
        weight_update=WeightUpdateConfig(batch_size=128),
        seeds=[0, 1, 2],
    )
    return cfg.replace(**changes) if changes else cfg


def reference_profile(dataset: str = "MNIST", data_root: str | None = None, **changes) -> ExperimentConfig:
    """The published hyperparameters; far too slow for CI."""
    arch = "lenet5" if dataset in ("MNIST", "FMNIST") else "cnn5"
    cfg = ExperimentConfig(
        dataset=dataset,
        data_root=data_root,
        partition=PartitionSpec(scheme="dirichlet", alpha=0.1, num_clients=10),
        client_specs=[arch],
        server_spec=arch,
        local=LocalTrainConfig(epochs=300, batch_size=128, lr=0.01, momentum=0.9),
        synth=SynthesisConfig(generator_lr=1e-3, generator_iters=30, beta=1.0, epsilon=8 / 255, batch_size=128, noise_dim=100),
        distill=DistillConfig(server_lr=0.01, momentum=0.9, kd_temperature=4.0, batch_size=128, epochs=500),
        weight_update=WeightUpdateConfig(batch_size=128),
        seeds=[0, 1, 2],
    )
    return cfg.replace(**changes) if changes else cfg
