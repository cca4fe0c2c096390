"""CoTFormer, Block Universal and standard transformers with mixture-of-repeats
adaptive depth, an analytic MAC cost model and a desk-scale training harness."""

from .config import ModelConfig
from .model import (
    ForwardResult,
    PassState,
    apply_depth_embedding,
    block_stack_forward,
    build_mask,
    but_forward,
    cotformer_forward,
    forward,
    init_params,
    standard_forward,
)
from .decode import incremental_decode

__all__ = [
    "ModelConfig",
    "ForwardResult",
    "PassState",
    "apply_depth_embedding",
    "block_stack_forward",
    "build_mask",
    "but_forward",
    "cotformer_forward",
    "forward",
    "incremental_decode",
    "init_params",
    "standard_forward",
]
