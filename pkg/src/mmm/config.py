"""Run configuration: sampler budgets, EM controls, seed and worker count."""

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace

from .errors import ValidationError
from .samplers import McmcConfig

INIT_METHODS = ("kmeanspp", "random")


@dataclass(frozen=True)
class EMConfig:
    max_iter: int = 100
    eps: float = 1e-3
    w1: int = 3
    w2: int = 3
    init: str = "kmeanspp"
    restarts: int = 5
    retries: int = 3

    def __post_init__(self):
        if self.eps <= 0:
            raise ValidationError("EMConfig.eps must be positive")
        if self.restarts < 1:
            raise ValidationError("EMConfig.restarts must be >= 1")
        if self.max_iter < 1 or self.w1 < 1 or self.w2 < 1 or self.retries < 0:
            raise ValidationError("EMConfig iteration counts must be positive")
        if self.init not in INIT_METHODS:
            raise ValidationError(f"EMConfig.init must be one of {INIT_METHODS}")


@dataclass(frozen=True)
class RunConfig:
    mcmc: McmcConfig = field(default_factory=McmcConfig)
    em: EMConfig = field(default_factory=EMConfig)
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if int(self.seed) < 0 or int(self.seed) >= 2 ** 64:
            raise ValidationError("seed must be a 64-bit unsigned integer")
        if int(self.threads) < 1:
            raise ValidationError("threads must be >= 1")

    def to_dict(self):
        return {"mcmc": asdict(self.mcmc), "em": asdict(self.em), "seed": int(self.seed), "threads": int(self.threads)}

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        unknown = set(d) - {"mcmc", "em", "seed", "threads"}
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(
            mcmc=_section(McmcConfig, d.get("mcmc")),
            em=_section(EMConfig, d.get("em")),
            seed=int(d.get("seed", 0)),
            threads=_threads(d.get("threads", 1)),
        )

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            try:
                return cls.from_dict(json.load(fh))
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}: invalid JSON ({exc})") from exc

    def with_overrides(self, seed=None, threads=None):
        return replace(
            self,
            seed=self.seed if seed is None else int(seed),
            threads=self.threads if threads is None else _threads(threads),
        )


def _section(cls, d):
    d = dict(d or {})
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ValidationError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


def _threads(value):
    if value in (None, "auto"):
        return os.cpu_count() or 1
    return int(value)
