"""Fine-grained mixture-of-experts language models at desk scale, on a small numpy autodiff."""

from .model import ModelConfig, MoETransformer, load_checkpoint, preset, save_checkpoint
from .moe import MoEConfig, moe_forward

__version__ = "0.1.0"
__all__ = ["MoEConfig", "ModelConfig", "MoETransformer", "load_checkpoint", "moe_forward", "preset",
           "save_checkpoint"]
