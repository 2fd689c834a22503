from .env import ToyDynamicsConfig, Trajectory, generate_batch, generate_episode
from .model import DenoiserInput, ModelConfig, ToyDenoiser, smoothing_floor

__all__ = ["ToyDynamicsConfig", "Trajectory", "generate_batch", "generate_episode",
           "DenoiserInput", "ModelConfig", "ToyDenoiser", "smoothing_floor"]
