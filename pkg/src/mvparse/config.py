"""Run configuration: one JSON document driving every CLI command.

Loading is strict: unknown keys are rejected, values are range-checked,
and save -> load round-trips to an identical configuration.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .metrics import LabelSpace
from .toyparser import FinetuneConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # fine-tuning (see FinetuneConfig)
    lam: float = 0.5
    beta: float = 0.30
    n_points: int = 50
    n_views: int = 4
    learning_rate: float = 3e-4
    batch_size: int = 8
    max_epochs: int = 20
    rng_seed: int = 0
    # annotation
    density: int = 50          # projected points per k-means seed
    k_min: int = 3
    k_max: int = 10
    tau_c: float = 30.0
    tau_d: float = 0.10
    tau_m: int = 5
    outlier_k: int = 20
    std_ratio: float = 2.0
    # scene generation
    n_people: int = 3
    overlap_target: float = 0.6
    image_size: int = 128
    cameras: int = 10
    frames: int = 5
    fuse_stride: int = 2
    # label space and paths
    label_space: dict = field(default_factory=lambda: LabelSpace().to_dict())
    paths: dict = field(default_factory=dict)

    def __post_init__(self):
        self.finetune_config()  # range checks on the shared fields
        for name in ("density", "k_min", "k_max", "tau_c", "tau_d", "tau_m",
                     "outlier_k", "std_ratio", "n_people", "image_size",
                     "cameras", "frames", "fuse_stride"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 <= self.overlap_target <= 1.0:
            raise ConfigError("overlap_target must be in [0, 1]")
        if self.k_min > self.k_max:
            raise ConfigError("k_min must not exceed k_max")
        LabelSpace.from_dict(self.label_space)  # validates

    def finetune_config(self) -> FinetuneConfig:
        try:
            return FinetuneConfig(
                lam=self.lam, beta=self.beta, n_points=self.n_points,
                n_views=self.n_views, learning_rate=self.learning_rate,
                batch_size=self.batch_size, max_epochs=self.max_epochs,
                rng_seed=self.rng_seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def labels(self) -> LabelSpace:
        return LabelSpace.from_dict(self.label_space)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def save_config(path, config: RunConfig) -> None:
    with open(path, "w") as f:
        json.dump(config.to_dict(), f, sort_keys=True, indent=2)
        f.write("\n")


def load_config(path) -> RunConfig:
    with open(path) as f:
        try:
            payload = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise ConfigError("config must be a JSON object")
    return RunConfig.from_dict(payload)
