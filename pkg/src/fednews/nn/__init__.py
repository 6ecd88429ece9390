from .layers import (additive_attention_pool, additive_weights, attention_weights, init_additive,
                     init_mhsa, init_mlp, mlp_forward, multi_head_self_attention)
from .optim import OptimizerState, clip_gradient_norm, global_norm, nadam_step
from .params import ParamStore, load_checkpoint, save_checkpoint
from .tensor import (ContractError, DimensionError, EmptySequenceError, Tensor, as_tensor, backward,
                     grad)

__all__ = [
    "ContractError", "DimensionError", "EmptySequenceError", "OptimizerState", "ParamStore",
    "Tensor", "additive_attention_pool", "additive_weights", "as_tensor", "attention_weights",
    "backward", "clip_gradient_norm", "global_norm", "grad", "init_additive", "init_mhsa",
    "init_mlp", "load_checkpoint", "mlp_forward", "multi_head_self_attention", "nadam_step",
    "save_checkpoint",
]
