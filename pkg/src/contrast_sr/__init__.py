"""contrast-sr: hybrid convolution / state-space / windowed-attention
single-image super-resolution, built on a self-contained float64 autodiff
engine so every gradient is checkable against finite differences."""

from .config import ModelConfig, TrainConfig, model_preset, train_preset
from .model import ContrastNet, build_model, count_flops, count_params, upscale_image
from .tensor import Tensor, no_grad

__all__ = [
    "ModelConfig", "TrainConfig", "model_preset", "train_preset",
    "ContrastNet", "build_model", "count_params", "count_flops",
    "upscale_image", "Tensor", "no_grad",
]
