"""The OSIS network: residual BEV pyramid plus detection and embedding heads."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .network import (DET_FIELDS, N_DET, ModelConfig, NetworkOutput, NetworkParams, backward, forward,
                      init_params, param_shapes, variance, zeros_like_output)

__all__ = [
    "CheckpointError", "DET_FIELDS", "ModelConfig", "N_DET", "NetworkOutput", "NetworkParams",
    "backward", "forward", "init_params", "load_checkpoint", "param_shapes", "save_checkpoint",
    "variance", "zeros_like_output",
]
