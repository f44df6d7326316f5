"""Run configuration, its hash, and the manifest written next to every output."""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

from . import __version__
from .design_search import DEFAULT_GRID, SearchConfig
from .distributions import DesignPrior, InferencePrior, NoiseModel
from .errors import ConfigurationError
from .glucose_model import ModelConstants
from .utility import DEFAULT_T2, HORIZON, UtilitySetup


@dataclass(frozen=True)
class ExperimentConfig:
    consts: ModelConstants = ModelConstants()
    prior: InferencePrior = InferencePrior()
    design_prior_path: str | None = None  # JSON list of atoms; None: the three reference patients
    sigma: float = 5.0
    T1: int = 600
    T2: int = DEFAULT_T2
    T1_initial: int = 150
    T1_max: int = 600
    growth: float = 2.0
    alpha: float = 0.05
    grid: tuple[int, ...] = DEFAULT_GRID
    k_range: tuple[int, ...] = (3, 4, 5, 6)
    prefilter: bool = False
    horizon: float = HORIZON
    seed: int = 0
    out_dir: str = "out"

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["consts"] = self.consts.to_dict()
        d["prior"] = self.prior.to_dict()
        d["grid"] = list(self.grid)
        d["k_range"] = list(self.k_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        try:
            if "consts" in d:
                d["consts"] = ModelConstants(**d["consts"])
            if "prior" in d:
                d["prior"] = InferencePrior(**d["prior"])
            for key in ("grid", "k_range"):
                if key in d:
                    d[key] = tuple(int(v) for v in d[key])
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"bad configuration: {exc}") from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc

    def replace(self, **changes) -> "ExperimentConfig":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update({k: v for k, v in changes.items() if v is not None})
        return ExperimentConfig(**d)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]

    def setup(self) -> UtilitySetup:
        return UtilitySetup(consts=self.consts, noise=NoiseModel(self.sigma), prior=self.prior,
                            horizon=self.horizon)

    def design_prior(self) -> DesignPrior:
        if self.design_prior_path is None:
            return DesignPrior()
        try:
            return DesignPrior.load(self.design_prior_path)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read design prior {self.design_prior_path}: {exc}") from exc

    def search_config(self) -> SearchConfig:
        return SearchConfig(grid=self.grid, k_range=self.k_range, alpha=self.alpha,
                            T1_initial=self.T1_initial, T1_max=self.T1_max, growth=self.growth,
                            T2=self.T2, seed=self.seed, prefilter=self.prefilter)


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


@dataclass
class RunManifest:
    """Index of a run's outputs; written as ``manifest_<command>.json`` in the output directory."""

    command: str
    config: ExperimentConfig
    outputs: list[str] = field(default_factory=list)
    sample_stores: list[str] = field(default_factory=list)
    started: str = field(default_factory=_now)
    finished: str | None = None

    def to_dict(self) -> dict:
        return {"command": self.command, "config_hash": self.config.config_hash(),
                "code_version": __version__, "config": self.config.to_dict(),
                "outputs": self.outputs, "sample_stores": self.sample_stores,
                "started": self.started, "finished": self.finished}

    def write(self, out_dir) -> Path:
        self.finished = _now()
        path = Path(out_dir) / f"manifest_{self.command}.json"
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path
