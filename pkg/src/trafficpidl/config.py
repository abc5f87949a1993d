"""Experiment configuration schema (JSON), validated with pydantic."""

from __future__ import annotations

import hashlib
import json
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .physics import GreenshieldsARZParams, ThreeParamFD


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GridSpec(_Strict):
    L: float = Field(1.0, gt=0)
    T: float = Field(3.0, gt=0)
    nx: int = Field(240, ge=2)
    nt: int = Field(960, ge=2)


class InitialSpec(_Strict):
    """Bell-shaped density ``base + amplitude exp(-width (x - center)^2)`` and a uniform speed."""

    base: float = 0.1
    amplitude: float = 0.8
    width: float = 25.0
    center: float = 0.5
    u0: float = 0.5


class SensorSpec(_Strict):
    m: int = Field(5, ge=1)
    noise_std: float = Field(0.0, ge=0)
    probe_ratio: float | None = Field(None, ge=0, le=1)
    n_vehicles: int = Field(100, ge=1)


class CollocationSpec(_Strict):
    n_c: int = Field(5000, ge=0)
    rate: float | None = Field(None, gt=0, le=1)
    strategy: Literal["uniform-random", "grid-subsample"] = "uniform-random"
    n_b: int = Field(50, ge=0)


class NetworkSpec(_Strict):
    hidden: tuple[int, ...] = (20,) * 8


class TrainSpec(_Strict):
    alpha: float = Field(100.0, ge=0)
    beta: float = Field(100.0, ge=0)
    gamma: float = Field(100.0, ge=0)
    adam_iterations: int = Field(1000, ge=0)
    lr: float = Field(1e-3, gt=0)
    lbfgs_memory: int = Field(10, ge=1)
    lbfgs_tolerance: float = Field(1e-16, ge=0)
    lbfgs_max_iterations: int = Field(5000, ge=0)
    identify_physics: bool = False
    initial_guess: dict[str, float] = {}
    network: NetworkSpec = NetworkSpec()


class GANSpec(_Strict):
    variant: Literal["pi-gan", "pid-gan", "mean-gan", "pi-gan-fdl"] = "pi-gan"
    latent_dim: int = Field(1, ge=1)
    iterations: int = Field(5000, ge=0)
    lr_generator: float = Field(1e-3, gt=0)
    lr_discriminator: float = Field(1e-3, gt=0)
    alpha: float = Field(0.4, ge=0, le=1)
    gamma: float = Field(0.0, ge=0)
    n_mc: int = Field(50, ge=2)
    batch_size: int | None = Field(256, ge=1)
    physics_std: dict[str, float] = {}
    n_k: int = Field(10, ge=1)
    eval_stride: int = Field(4, ge=1)


class EKFSpec(_Strict):
    q_p: float = Field(1e-3, gt=0)
    r_o: float = Field(1e-2, gt=0)
    P0: float = Field(0.1, gt=0)
    jacobian_fd_step: float = Field(1e-6, gt=0)


class ExperimentConfig(_Strict):
    """One reproducible experiment; every random draw derives from ``seed``."""

    model: Literal["lwr3", "arz"] = "lwr3"
    physics: dict[str, float] = {}
    grid: GridSpec = GridSpec()
    initial: InitialSpec = InitialSpec()
    sensors: SensorSpec = SensorSpec()
    collocation: CollocationSpec = CollocationSpec()
    train: TrainSpec = TrainSpec()
    gan: GANSpec = GANSpec()
    ekf: EKFSpec = EKFSpec()
    seed: int = 0
    out: str = "out"

    @field_validator("physics", mode="after")
    @classmethod
    def _finite(cls, v):
        for k, x in v.items():
            if x != x or x in (float("inf"), float("-inf")):
                raise ValueError(f"physics.{k} must be finite")
        return v

    @model_validator(mode="after")
    def _physics_fields(self):
        # unknown parameter names and invalid values surface here
        self.physics_params()
        if self.train.initial_guess:
            self.physics_params(self.train.initial_guess)
        return self

    def physics_params(self, values: dict | None = None):
        cls = ThreeParamFD if self.model == "lwr3" else GreenshieldsARZParams
        values = self.physics if values is None else {**self.physics, **values}
        try:
            return cls(**values)
        except TypeError as exc:
            raise ValueError(f"bad physics parameters for {self.model}: {exc}") from None

    def semantic_dict(self) -> dict:
        """Everything that affects results; the output directory is excluded."""
        data = self.model_dump(mode="json")
        data.pop("out")
        return data

    def config_hash(self) -> str:
        text = json.dumps(self.semantic_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return ExperimentConfig.model_validate_json(fh.read())
