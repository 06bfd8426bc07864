"""Composition-aware iterative reward feedback learning on a toy scene domain."""

__version__ = "0.1.0"

from .config import RunConfig, default_config, load_config, save_config
from .diffusion import DiffusionModel, NoiseSchedule, ReflConfig
from .gallery import Gallery, GeneratorProfile, default_gallery
from .prefs import PreferenceDataset, PreferenceRanking, RaterSpec
from .reward import RewardModel, bt_loss
from .scene import Prompt, Scene, decode_scene, embed_prompt, sample_prompt

__all__ = [
    "__version__",
    "RunConfig",
    "default_config",
    "load_config",
    "save_config",
    "DiffusionModel",
    "NoiseSchedule",
    "ReflConfig",
    "Gallery",
    "GeneratorProfile",
    "default_gallery",
    "PreferenceDataset",
    "PreferenceRanking",
    "RaterSpec",
    "RewardModel",
    "bt_loss",
    "Prompt",
    "Scene",
    "decode_scene",
    "embed_prompt",
    "sample_prompt",
]
