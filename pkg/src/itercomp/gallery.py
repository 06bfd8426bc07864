"""Synthetic generator gallery: six conditional generators with distinct
compositional strengths, each a noisy corruption of the canonical scene."""

from dataclasses import dataclass

import numpy as np

from .scene import (
    DEFAULT_ORACLE_PARAMS,
    F_ACTIVITY,
    F_HUE,
    F_PRESENT,
    F_SHAPE,
    F_X,
    F_Y,
    FIELDS_PER_SLOT,
    N_SLOTS,
    OracleParams,
    Prompt,
    Scene,
    canonical_scene,
    decode_scene,
)

__all__ = ["GeneratorProfile", "Gallery", "default_gallery", "generate", "gallery_sample"]


@dataclass(frozen=True)
class GeneratorProfile:
    name: str
    sigma_attr: float  # noise on hue/shape
    sigma_pos: float   # noise on x/y
    sigma_act: float   # noise on activity
    p_drop: float      # probability of dropping a required object

    def __post_init__(self):
        if min(self.sigma_attr, self.sigma_pos, self.sigma_act) < 0:
            raise ValueError("noise stds must be >= 0")
        if not 0.0 <= self.p_drop <= 1.0:
            raise ValueError("p_drop must be in [0, 1]")

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "sigma_attr": self.sigma_attr,
            "sigma_pos": self.sigma_pos,
            "sigma_act": self.sigma_act,
            "p_drop": self.p_drop,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "GeneratorProfile":
        return cls(obj["name"], obj["sigma_attr"], obj["sigma_pos"], obj["sigma_act"], obj["p_drop"])


@dataclass
class Gallery:
    profiles: list

    def __post_init__(self):
        if len(self.profiles) < 2:
            raise ValueError("gallery needs at least 2 generators")
        names = [p.name for p in self.profiles]
        if len(set(names)) != len(names):
            raise ValueError("generator names must be unique")

    def __len__(self):
        return len(self.profiles)

    def names(self):
        return [p.name for p in self.profiles]

    def extended(self, extra_profiles) -> "Gallery":
        return Gallery(list(self.profiles) + list(extra_profiles))


def default_gallery() -> Gallery:
    return Gallery(
        [
            GeneratorProfile("attr-strong", 0.02, 0.25, 0.15, 0.10),
            GeneratorProfile("spatial-strong", 0.20, 0.03, 0.15, 0.02),
            GeneratorProfile("nonspatial-strong", 0.15, 0.20, 0.02, 0.05),
            GeneratorProfile("balanced-good", 0.08, 0.10, 0.08, 0.05),
            GeneratorProfile("balanced-weak", 0.18, 0.20, 0.18, 0.15),
            GeneratorProfile("legacy-weak", 0.25, 0.30, 0.25, 0.25),
        ]
    )


def generate(profile: GeneratorProfile, prompt: Prompt, rng: np.random.Generator,
             params: OracleParams = DEFAULT_ORACLE_PARAMS) -> Scene:
    """One scene for the prompt: canonical scene + per-field noise + drops."""
    base = canonical_scene(prompt, rng, params).vec.reshape(N_SLOTS, FIELDS_PER_SLOT).copy()
    noise = rng.normal(0.0, 1.0, size=base.shape)
    base[:, F_HUE] += profile.sigma_attr * noise[:, F_HUE]
    base[:, F_SHAPE] += profile.sigma_attr * noise[:, F_SHAPE]
    base[:, F_X] += profile.sigma_pos * noise[:, F_X]
    base[:, F_Y] += profile.sigma_pos * noise[:, F_Y]
    base[:, F_ACTIVITY] += profile.sigma_act * noise[:, F_ACTIVITY]
    for i in prompt.required_slots():
        if rng.random() < profile.p_drop:
            base[i, F_PRESENT] = 0.0
    return decode_scene(base.reshape(-1))


def gallery_sample(gallery: Gallery, prompt: Prompt, rng: np.random.Generator,
                   params: OracleParams = DEFAULT_ORACLE_PARAMS) -> list:
    """One scene per generator, in gallery order, as (generator_index, scene)."""
    streams = rng.spawn(len(gallery))
    return [
        (idx, generate(profile, prompt, streams[idx], params))
        for idx, profile in enumerate(gallery.profiles)
    ]
