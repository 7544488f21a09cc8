"""Fixed-point pixel-attention super-resolution network and a cycle-level model of its block-convolution accelerator."""

from .hpan import FeatureMap, LayerWeights, Model, ModelConfig, forward, param_count
from .tiler import process_image, split

__all__ = ["FeatureMap", "LayerWeights", "Model", "ModelConfig", "forward", "param_count", "process_image", "split"]
__version__ = "0.1.0"
