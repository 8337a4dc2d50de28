from .tensor import ShapeMismatchError, Tensor, as_tensor, concat, stack
from .nn import (
    SCALE_FLOOR,
    AttentionBlock,
    FeedForward,
    LayerNorm,
    Linear,
    MLP,
    MultiHeadAttention,
    Parameter,
    ParamStore,
    bilinear_sample,
    layer_norm,
    linear,
    multi_head_attention,
    positional_encoding,
    positive_scale,
    softmax,
)
from .gradcheck import grad_check
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint

__all__ = [
    "ShapeMismatchError", "Tensor", "as_tensor", "concat", "stack",
    "SCALE_FLOOR", "AttentionBlock", "FeedForward", "LayerNorm", "Linear",
    "MLP", "MultiHeadAttention", "Parameter", "ParamStore", "bilinear_sample",
    "layer_norm", "linear", "multi_head_attention", "positional_encoding",
    "positive_scale", "softmax", "grad_check", "CheckpointError",
    "load_checkpoint", "save_checkpoint",
]
