"""Self-supervised multi-view transformer that learns cameras and a latent scene
from unposed images, plus a synthetic orbit dataset and evaluation tooling."""

from .config import ModelConfig, RunConfig, TrainConfig, preset_config
from .model import RayZer, build_model

__all__ = ["ModelConfig", "RunConfig", "TrainConfig", "RayZer", "build_model", "preset_config"]
__version__ = "0.1.0"
