"""Run configuration: one JSON document with a section per component.

Unknown keys are rejected everywhere.  ``model`` only carries the network
hyperparameters; its geometry (M, K, tau) always comes from ``network``.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .channel import NetworkConfig
from .rdn import RDNConfig, TrainConfig
from .solver import SolverOptions

SEED_ENV = "CFPF_SEED"
_SECTIONS = {"seed", "network", "solver", "model", "train", "data", "paths"}


@dataclass(frozen=True)
class DataConfig:
    count: int = 12000
    train: int = 10000
    val: int = 1000
    test: int = 1000
    encoding: str = "db"

    def __post_init__(self):
        if self.encoding not in ("db", "linear"):
            raise ValueError("data.encoding must be 'db' or 'linear'")
        if self.train + self.val + self.test > self.count:
            raise ValueError("data split sizes exceed data.count")

    @property
    def encoding_flag(self) -> int:
        return 1 if self.encoding == "db" else 0


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    network: NetworkConfig = field(default_factory=NetworkConfig)
    solver: SolverOptions = field(default_factory=SolverOptions)
    model: dict = field(default_factory=lambda: {"G": 32, "L": 4, "inner": "tanh", "output": "sigmoid"})
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    paths: dict = field(default_factory=lambda: {"out": "runs"})

    @property
    def rdn(self) -> RDNConfig:
        n = self.network
        return RDNConfig(M=n.M, K=n.K, tau=n.tau, **self.model)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "network": self.network.to_dict(),
            "solver": self.solver.to_dict(),
            "model": dict(self.model),
            "train": self.train.to_dict(),
            "data": dict(vars(self.data)),
            "paths": dict(self.paths),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _check_keys(section: str, d: dict, allowed) -> None:
    unknown = set(d) - set(allowed)
    if unknown:
        raise ValueError(f"unknown {section} keys: {sorted(unknown)}")


def from_dict(d: dict) -> RunConfig:
    _check_keys("top-level", d, _SECTIONS)
    model = d.get("model", {})
    _check_keys("model", model, {"G", "L", "inner", "output"})
    model = {"G": 32, "L": 4, "inner": "tanh", "output": "sigmoid", **model}
    data = d.get("data", {})
    _check_keys("data", data, DataConfig.__dataclass_fields__)
    paths = d.get("paths", {})
    _check_keys("paths", paths, {"out"})
    cfg = RunConfig(
        seed=int(d.get("seed", 0)),
        network=NetworkConfig.from_dict(d.get("network", {})),
        solver=SolverOptions.from_dict(d.get("solver", {})),
        model=model,
        train=TrainConfig.from_dict(d.get("train", {})),
        data=DataConfig(**data),
        paths={"out": "runs", **paths},
    )
    cfg.rdn  # validates the model section
    return cfg


def preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("cfpf.presets").iterdir()
                  if p.name.endswith(".json"))


def load(path_or_preset: str, env=None) -> RunConfig:
    """Load a JSON file or a bundled preset name; ``CFPF_SEED`` overrides the seed."""
    env = os.environ if env is None else env
    p = Path(path_or_preset)
    if p.is_file():
        raw = json.loads(p.read_text())
    elif path_or_preset in preset_names():
        raw = json.loads(resources.files("cfpf.presets").joinpath(f"{path_or_preset}.json").read_text())
    else:
        raise FileNotFoundError(f"no config file or preset named {path_or_preset!r}")
    if env.get(SEED_ENV):
        raw = {**raw, "seed": int(env[SEED_ENV])}
    return from_dict(raw)
