import numpy as np
import pytest

from multishade.encoders import (
    GroundingMlpParams,
    ProjectorParams,
    ReferenceImageStore,
)
from multishade.shading import ShaderParams, ShadingContext

TOY_C = 4
TOY_D_EMBED = 8
TOY_D_ATTN = 4
TOY_FREQS = 2
TOY_CAPACITY = 5


@pytest.fixture
def toy_ctx():
    rng = np.random.default_rng(42)
    return ShadingContext(
        store=ReferenceImageStore(),
        grounding=GroundingMlpParams.seeded(8 * TOY_FREQS, 4, 1, TOY_D_EMBED, rng),
        projector=ProjectorParams.seeded(TOY_D_EMBED, 4, rng),
        d_embed=TOY_D_EMBED,
        fourier_frequencies=TOY_FREQS,
        heads=1,
        n_image_tokens=2,
    )


@pytest.fixture
def toy_shader():
    rng = np.random.default_rng(43)
    return ShaderParams.seeded(TOY_C, TOY_D_EMBED, TOY_D_ATTN, TOY_CAPACITY, rng)
