"""Run configuration shared by the trainer and the harness."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

from .collectives import ALGORITHMS
from .fusion import DEFAULT_THETA, parse_theta


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    ranks: int = 1
    transport: str = "inproc"
    algorithm: str = "ring"
    groups: int = 1  # ranks per group for hierarchical allreduce
    precision: str = "fp32"
    theta: float = DEFAULT_THETA
    overlap: bool = True
    csc: bool = False
    sparsity: float = 0.0
    warmup: int = 0
    chunk_size: int = 1000
    dims: list = field(default_factory=lambda: [32, 64, 1])
    task: str = "linear-regression"
    n_examples: int = 4096
    batch: int = 16
    iters: int = 10
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    noise: float = 0.1
    timeout: float = 30.0
    out: str | None = None

    def __post_init__(self):
        self.theta = parse_theta(self.theta)
        if self.algorithm == "hier":
            self.algorithm = "hierarchical"

    def validate(self, data: bool = True) -> "RunConfig":
        """Check flag combinations; ``data=False`` skips the dataset and optimiser checks."""
        if self.ranks < 1:
            raise ConfigError("--ranks must be >= 1")
        if self.transport not in ("inproc", "tcp"):
            raise ConfigError(f"unknown transport {self.transport!r}")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        if self.algorithm == "hierarchical":
            if self.groups < 1 or self.ranks % self.groups:
                raise ConfigError(
                    f"hierarchical allreduce needs --groups dividing --ranks ({self.groups} does not divide {self.ranks})"
                )
        if self.precision not in ("fp32", "fp16"):
            raise ConfigError(f"unknown precision {self.precision!r}")
        if self.theta < 0:
            raise ConfigError("--theta must be >= 0")
        if self.csc and not 0.0 <= self.sparsity < 1.0:
            raise ConfigError("--sparsity must lie in [0, 1)")
        if self.warmup < 0 or self.chunk_size < 1:
            raise ConfigError("--warmup must be >= 0 and --chunk-size >= 1")
        if self.task not in ("linear-regression", "two-class-logistic"):
            raise ConfigError(f"unknown task {self.task!r}")
        if len(self.dims) < 2:
            raise ConfigError("model needs at least input and output dims")
        if self.task == "two-class-logistic" and self.dims[-1] != 1:
            raise ConfigError("logistic task needs output dim 1")
        if not data:
            return self
        if self.n_examples % self.ranks:
            raise ConfigError(f"{self.n_examples} examples do not split evenly over {self.ranks} ranks")
        if self.n_examples // self.ranks < self.batch:
            raise ConfigError("per-rank shard smaller than the batch")
        if self.iters < 0 or self.batch < 1 or self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ConfigError("need iters >= 0, batch >= 1, lr > 0, momentum in [0, 1)")
        return self

    @property
    def group_size(self) -> int:
        return self.groups if self.algorithm == "hierarchical" else 1

    @property
    def final_sparsity(self) -> float:
        return self.sparsity if self.csc else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["theta"] = "inf" if math.isinf(self.theta) else self.theta
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))
