"""Multi-instance shading mechanisms in a toy latent-diffusion sampler.

The package is a plain numpy library: attention primitives, toy encoders,
the instance/refined shading stack, a small multi-resolution denoiser with
a deterministic Euler sampler, consistency tooling for iterative edits,
finite-difference training utilities and a benchmark evaluation harness.
"""

from .attention import masked_softmax, multi_head_attention, scaled_dot_attention
from .encoders import (
    Box,
    ImageAttribute,
    InstanceDescription,
    MaskPosition,
    ReferenceImageStore,
    TextAttribute,
    encode_text,
    fourier_embed,
    make_grounding_embedding,
    mask_to_bbox,
    rasterize_position,
)
from .shading import (
    background_mask,
    enhance_attention,
    layout_attention,
    layout_attention_mask,
    merge_shaders,
    multimodal_enhance,
    refined_aggregate,
    refined_instance_shading,
    shading_aggregation,
)

__version__ = "0.1.0"
