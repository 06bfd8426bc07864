"""Run configuration: one JSON file drives the whole pipeline.

Unknown keys are rejected with a field-level message so typos fail fast.
"""

import dataclasses
import json
import os
from dataclasses import dataclass, field

from .diffusion import NoiseSchedule, PretrainHyper, ReflConfig
from .errors import ConfigError
from .gallery import Gallery, GeneratorProfile, default_gallery
from .prefs import RaterSpec
from .reward import RewardHyper
from .scene import CATEGORIES, OracleParams


def _check_keys(obj: dict, allowed, where: str) -> None:
    unknown = sorted(set(obj) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r} in {where}")


def _build(cls, obj: dict, where: str):
    names = [f.name for f in dataclasses.fields(cls)]
    _check_keys(obj, names, where)
    try:
        return cls(**obj)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{where}: {err}") from err


@dataclass(frozen=True)
class RewardOptions:
    epochs: int = 600
    lr: float = 1e-3
    batch: int = 64
    holdout_fraction: float = 0.1
    epochs_first_iteration: int = 600
    epochs_per_iteration: int = 200

    def hyper(self, epochs: int | None = None) -> RewardHyper:
        return RewardHyper(
            epochs=self.epochs if epochs is None else epochs,
            lr=self.lr,
            batch=self.batch,
            holdout_fraction=self.holdout_fraction,
        )


@dataclass(frozen=True)
class DiffusionOptions:
    timesteps: int = 40
    beta_start: float = 1e-4
    beta_end: float = 0.02
    pretrain_steps: int = 20000
    pretrain_lr: float = 1e-3
    pretrain_batch: int = 64

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.timesteps, self.beta_start, self.beta_end)

    def pretrain_hyper(self) -> PretrainHyper:
        return PretrainHyper(self.pretrain_steps, self.pretrain_lr, self.pretrain_batch)


@dataclass(frozen=True)
class ReflOptions:
    lam: float = 1e-3
    t_min: int = 1
    t_max: int = 10
    phi: str = "negate"
    margin: float = 1.0
    lr: float = 1e-5
    batch: int = 4
    reward_weights: dict = field(default_factory=lambda: {c: 1.0 for c in CATEGORIES})
    rho: float = 0.0
    prompts_per_category: int = 2000
    passes: int = 1

    def config(self) -> ReflConfig:
        return ReflConfig(
            lam=self.lam,
            t_min=self.t_min,
            t_max=self.t_max,
            phi=self.phi,
            margin=self.margin,
            lr=self.lr,
            batch=self.batch,
            reward_weights=dict(self.reward_weights),
            rho=self.rho,
        )


@dataclass(frozen=True)
class EvalOptions:
    prompts_per_category: int = 200
    bootstrap_samples: int = 1000


@dataclass
class RunConfig:
    seed: int = 0
    prompt_counts: dict = field(default_factory=lambda: {c: 500 for c in CATEGORIES})
    gallery: list = field(default_factory=lambda: default_gallery().profiles)
    raters: RaterSpec = field(default_factory=RaterSpec)
    oracles: OracleParams = field(default_factory=OracleParams)
    reward: RewardOptions = field(default_factory=RewardOptions)
    diffusion: DiffusionOptions = field(default_factory=DiffusionOptions)
    refl: ReflOptions = field(default_factory=ReflOptions)
    iterations: int = 3
    gallery_additions: dict = field(default_factory=dict)  # iteration k (int) -> [profiles]
    eval: EvalOptions = field(default_factory=EvalOptions)
    workdir: str = "runs/default"

    def __post_init__(self):
        _check_keys(self.prompt_counts, CATEGORIES, "prompt_counts")
        for cat, n in self.prompt_counts.items():
            if not isinstance(n, int) or n < 0:
                raise ConfigError(f"prompt_counts[{cat!r}] must be a non-negative integer")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        Gallery(self.gallery)  # validates uniqueness / sizes
        self.refl.config().validate(self.diffusion.timesteps)
        for k, profiles in self.gallery_additions.items():
            if not isinstance(k, int) or k < 1:
                raise ConfigError(f"gallery_additions key {k!r} must be an iteration >= 1")
            if not profiles:
                raise ConfigError(f"gallery_additions[{k}] must list at least one profile")

    def make_gallery(self) -> Gallery:
        return Gallery(list(self.gallery))

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "prompt_counts": dict(self.prompt_counts),
            "gallery": [p.to_json() for p in self.gallery],
            "raters": self.raters.to_json(),
            "oracles": dataclasses.asdict(self.oracles),
            "reward": dataclasses.asdict(self.reward),
            "diffusion": dataclasses.asdict(self.diffusion),
            "refl": dataclasses.asdict(self.refl),
            "iterations": self.iterations,
            "gallery_additions": {
                str(k): [p.to_json() for p in profiles]
                for k, profiles in sorted(self.gallery_additions.items())
            },
            "eval": dataclasses.asdict(self.eval),
            "workdir": self.workdir,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RunConfig":
        names = [f.name for f in dataclasses.fields(cls)]
        _check_keys(obj, names, "config")
        kwargs = {}
        for key, value in obj.items():
            if key == "gallery":
                kwargs[key] = [_build(GeneratorProfile, p, f"gallery[{i}]") for i, p in enumerate(value)]
            elif key == "raters":
                raters = dict(value)
                raters["weights"] = tuple(raters.get("weights", ()))
                kwargs[key] = _build(RaterSpec, raters, "raters")
            elif key == "oracles":
                kwargs[key] = _build(OracleParams, value, "oracles")
            elif key == "reward":
                kwargs[key] = _build(RewardOptions, value, "reward")
            elif key == "diffusion":
                kwargs[key] = _build(DiffusionOptions, value, "diffusion")
            elif key == "refl":
                kwargs[key] = _build(ReflOptions, value, "refl")
            elif key == "eval":
                kwargs[key] = _build(EvalOptions, value, "eval")
            elif key == "gallery_additions":
                additions = {}
                for k, profiles in value.items():
                    try:
                        ik = int(k)
                    except ValueError:
                        raise ConfigError(f"gallery_additions key {k!r} is not an iteration number")
                    additions[ik] = [
                        _build(GeneratorProfile, p, f"gallery_additions[{k}][{i}]")
                        for i, p in enumerate(profiles)
                    ]
                kwargs[key] = additions
            else:
                kwargs[key] = value
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as err:
            raise ConfigError(str(err)) from err


def default_config(seed: int = 0) -> RunConfig:
    return RunConfig(seed=seed)


def paper_scale_counts() -> dict:
    return {"attribute": 1500, "spatial": 1000, "nonspatial": 1000}


def save_config(config: RunConfig, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(config.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON ({err})") from err
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return RunConfig.from_json(obj)
