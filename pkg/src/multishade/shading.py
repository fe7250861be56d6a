"""Multi-instance shading mechanisms.

A "shading" is a cross-attention output added residually to an image
feature.  This module implements the full divide-and-conquer stack:

* enhance attention   - trainable per-instance cross-attention whose output
                        is zeroed outside the instance's position map;
* layout attention    - masked self-attention where tokens only see tokens
                        sharing a region, producing the bridging template;
* aggregation control - CBAM-style controller fusing n instance shadings
                        plus the template with a per-pixel softmax;
* refined shading     - training-free per-instance shading with the frozen
                        base cross-attention / image-projector weights,
                        fused by softmaxed weight maps;
* merge               - learned tanh-scalar combination of the two shaders.

All functions are pure; parameters are plain dataclasses of float64 arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .attention import (
    as_tensor,
    attention_probs,
    ensure_finite,
    multi_head_attention,
)
from .encoders import (
    GroundingEmbedding,
    GroundingMlpParams,
    ImageAttribute,
    InstanceDescription,
    Position,
    ProjectorParams,
    ReferenceImageStore,
    TextAttribute,
    encode_text,
    fourier_embed,
    grounding_mlp,
    is_null_position,
    make_grounding_embedding,
    position_as_box,
    project_image,
    rasterize_at_resolution,
)
from .errors import (
    CapacityError,
    InvalidArgumentError,
    ShapeError,
)

NEG_INF = float("-inf")


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


@dataclass
class CrossAttnWeights:
    """Q/K/V projections for one attention layer.

    wq maps the image feature (width C) to the attention width d; wk/wv map
    the conditioning sequence (or the feature itself, for self-attention).
    """

    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray

    @classmethod
    def seeded(cls, q_in: int, kv_in: int, d: int, v_out: int, rng, sigma=0.02):
        return cls(
            sigma * rng.standard_normal((q_in, d)),
            np.zeros(d),
            sigma * rng.standard_normal((kv_in, d)),
            np.zeros(d),
            sigma * rng.standard_normal((kv_in, v_out)),
            np.zeros(v_out),
        )

    @classmethod
    def identity(cls, c: int):
        """Identity projections (square, bias-free); useful in tests."""
        eye = np.eye(c)
        return cls(eye.copy(), np.zeros(c), eye.copy(), np.zeros(c), eye.copy(), np.zeros(c))


@dataclass
class KVWeights:
    """K/V projections of the image-projector attention (Q is shared)."""

    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray

    @classmethod
    def seeded(cls, kv_in: int, d: int, v_out: int, rng, sigma=0.02):
        return cls(
            sigma * rng.standard_normal((kv_in, d)),
            np.zeros(d),
            sigma * rng.standard_normal((kv_in, v_out)),
            np.zeros(v_out),
        )


@dataclass
class SacParams:
    """Aggregation-controller weights.

    One 1x1 conv shared by all inputs, a channel (slot) attention perceptron
    at reduction ratio 4 and a 3x3 spatial-attention conv over the two pooled
    maps.  ``capacity`` is the padded slot count N.
    """

    conv_w: np.ndarray
    conv_b: np.ndarray
    mlp_w1: np.ndarray
    mlp_w2: np.ndarray
    spatial_w: np.ndarray
    spatial_b: np.ndarray
    capacity: int

    @classmethod
    def seeded(cls, c: int, capacity: int, rng, sigma=0.02, reduction: int = 4):
        hidden = max(1, capacity // reduction)
        return cls(
            sigma * rng.standard_normal((c, c)),
            np.zeros(c),
            sigma * rng.standard_normal((capacity, hidden)),
            sigma * rng.standard_normal((hidden, capacity)),
            sigma * rng.standard_normal((3, 3, 2)),
            np.zeros(()),
            capacity,
        )


@dataclass
class ShaderParams:
    """Trainable weights of one instance shader.

    ``ea_text``/``ea_image`` are the modality-specific enhance attentions,
    ``la`` the layout attention, ``sac`` the aggregation controller and
    ``gamma_merge`` the merge scalar (initialized to exactly 0).
    """

    ea_text: CrossAttnWeights
    ea_image: CrossAttnWeights
    la: CrossAttnWeights
    sac: SacParams
    gamma_merge: np.ndarray

    @classmethod
    def seeded(cls, c: int, d_embed: int, d_attn: int, capacity: int, rng, sigma=0.02):
        return cls(
            ea_text=CrossAttnWeights.seeded(c, d_embed, d_attn, c, rng, sigma),
            ea_image=CrossAttnWeights.seeded(c, d_embed, d_attn, c, rng, sigma),
            la=CrossAttnWeights.seeded(c, c, d_attn, c, rng, sigma),
            sac=SacParams.seeded(c, capacity, rng, sigma),
            gamma_merge=np.zeros(()),
        )


@dataclass
class ShadingContext:
    """Shared encoder state and dimensions used by the shading ops."""

    store: ReferenceImageStore
    grounding: GroundingMlpParams
    projector: ProjectorParams
    d_embed: int
    fourier_frequencies: int
    heads: int = 1
    n_image_tokens: int = 4


# ---------------------------------------------------------------------------
# small numeric helpers
# ---------------------------------------------------------------------------


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _conv3x3(maps: np.ndarray, kernel: np.ndarray, bias) -> np.ndarray:
    """Same-padded 3x3 convolution of (H, W, k) maps down to one (H, W) map."""
    H, W, k = maps.shape
    padded = np.pad(maps, ((1, 1), (1, 1), (0, 0)))
    out = np.full((H, W), float(np.asarray(bias)))
    for dy in range(3):
        for dx in range(3):
            patch = padded[dy : dy + H, dx : dx + W, :]
            out += patch @ kernel[dy, dx, :]
    return out


def _check_feature(X, name="feature") -> np.ndarray:
    X = as_tensor(X, name)
    if X.ndim != 3:
        raise ShapeError(f"{name} must be H x W x C, got shape {X.shape}")
    return X


def _check_binary_map(M, hw, name="position map") -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    if M.shape != tuple(hw):
        raise ShapeError(f"{name} resolution {M.shape} != feature resolution {tuple(hw)}")
    if not np.all((M == 0.0) | (M == 1.0)):
        raise InvalidArgumentError(f"{name} must be strictly binary")
    return M


# ---------------------------------------------------------------------------
# enhance attention
# ---------------------------------------------------------------------------


def enhance_attention(
    X,
    G: GroundingEmbedding,
    M,
    weights: CrossAttnWeights,
    heads: int = 1,
) -> np.ndarray:
    """Single-instance shading: cross-attention over G, zeroed outside M."""
    X = _check_feature(X)
    H, W, C = X.shape
    M = _check_binary_map(M, (H, W))
    flat = X.reshape(H * W, C)
    Q = flat @ weights.wq + weights.bq
    K = G.vectors @ weights.wk + weights.bk
    V = G.vectors @ weights.wv + weights.bv
    out = multi_head_attention(Q, K, V, heads)
    return ensure_finite(out.reshape(H, W, -1) * M[:, :, None], "enhance attention")


def _grounding_for_instance(
    instance: InstanceDescription, shader: ShaderParams, ctx: ShadingContext
) -> Tuple[GroundingEmbedding, CrossAttnWeights]:
    box = position_as_box(instance.position)
    W_pos = grounding_mlp(
        fourier_embed(box, ctx.fourier_frequencies), ctx.grounding
    )
    if isinstance(instance.attribute, TextAttribute):
        W_attr = encode_text(instance.attribute.tokens, ctx.d_embed)
        return make_grounding_embedding(W_pos, W_attr), shader.ea_text
    if isinstance(instance.attribute, ImageAttribute):
        raw = ctx.store.encode_image(
            instance.attribute.image_id, ctx.d_embed, ctx.n_image_tokens
        )
        W_attr = project_image(raw, ctx.projector)
        return make_grounding_embedding(W_pos, W_attr), shader.ea_image
    raise InvalidArgumentError(f"unsupported attribute: {instance.attribute!r}")


def multimodal_enhance(
    X,
    instance: InstanceDescription,
    shader: ShaderParams,
    ctx: ShadingContext,
) -> np.ndarray:
    """Dispatch enhance attention by attribute modality.

    Null-padded instances (all-zero position) short-circuit to a zero map;
    positions are rasterized at the feature resolution and standardized to a
    box for the grounding embedding.
    """
    X = _check_feature(X)
    H, W, _ = X.shape
    if is_null_position(instance.position):
        return np.zeros_like(X)
    M = rasterize_at_resolution(instance.position, H, W)
    G, weights = _grounding_for_instance(instance, shader, ctx)
    return enhance_attention(X, G, M, weights, ctx.heads)


# ---------------------------------------------------------------------------
# layout attention
# ---------------------------------------------------------------------------


def background_mask(instance_maps: Sequence[np.ndarray], hw: Tuple[int, int]) -> np.ndarray:
    """Complement of the union of instance maps: 1 where every map is 0."""
    H, W = hw
    out = np.ones((H, W))
    for M in instance_maps:
        M = _check_binary_map(M, (H, W))
        out *= 1.0 - M
    return out


def layout_attention_mask(
    instance_maps: Sequence[np.ndarray], bg: np.ndarray
) -> np.ndarray:
    """Additive (HW x HW) mask allowing token pairs that share a region.

    Entry (p, q) is 0 when some map (instance or background) contains both
    tokens and -inf otherwise.  ``bg`` must be the complement of the union
    of the instance maps.
    """
    maps = list(instance_maps)
    if maps:
        hw = np.asarray(maps[0]).shape
    else:
        hw = np.asarray(bg).shape
    bg = _check_binary_map(bg, hw, "background map")
    expected_bg = background_mask(maps, hw)
    if not np.array_equal(bg, expected_bg):
        raise InvalidArgumentError(
            "background map is not the complement of the instance maps"
        )
    stack = np.stack([_check_binary_map(M, hw) for M in maps] + [bg])
    flat = stack.reshape(stack.shape[0], -1) > 0.5
    allowed = flat.T @ flat  # (HW, HW) boolean: share at least one region
    np.fill_diagonal(allowed, True)
    return np.where(allowed, 0.0, NEG_INF)


def layout_attention(
    X, A_la: np.ndarray, weights: CrossAttnWeights, heads: int = 1
) -> np.ndarray:
    """Masked self-attention over the flattened feature (the template)."""
    X = _check_feature(X)
    H, W, C = X.shape
    A_la = np.asarray(A_la, dtype=np.float64)
    if A_la.shape != (H * W, H * W):
        raise ShapeError(f"layout mask {A_la.shape}, expected {(H * W, H * W)}")
    flat = X.reshape(H * W, C)
    Q = flat @ weights.wq + weights.bq
    K = flat @ weights.wk + weights.bk
    V = flat @ weights.wv + weights.bv
    out = multi_head_attention(Q, K, V, heads, additive_mask=A_la)
    return ensure_finite(out.reshape(H, W, -1), "layout attention")


# ---------------------------------------------------------------------------
# shading aggregation controller
# ---------------------------------------------------------------------------


def shading_aggregation(
    shading_instances: Sequence[np.ndarray],
    template,
    sac: SacParams,
) -> Tuple[np.ndarray, np.ndarray]:
    """Fuse n instance shadings and one template into one result.

    Pipeline: shared 1x1 conv per input, zero-pad the stack to ``capacity``
    slots, CBAM-style channel (slot) and spatial attention to score slots,
    then a per-pixel softmax over the n+1 *real* slots only (padded slots get
    exactly zero weight) and a weighted sum of the post-conv inputs.  Returns
    the fused map and the (H, W, n+1) weights; every output pixel is a convex
    combination of the post-conv input pixels.
    """
    template = _check_feature(template, "template")
    H, W, C = template.shape
    inputs = [
        _check_feature(x, f"shading instance {i}")
        for i, x in enumerate(shading_instances)
    ]
    for i, x in enumerate(inputs):
        if x.shape != (H, W, C):
            raise ShapeError(
                f"shading instance {i} shape {x.shape} != template {(H, W, C)}"
            )
    n_real = len(inputs) + 1
    N = sac.capacity
    if n_real > N:
        raise CapacityError(f"{n_real} slots exceed aggregation capacity {N}")

    post = np.stack([x @ sac.conv_w + sac.conv_b for x in inputs + [template]])
    padded = np.zeros((N, H, W, C))
    padded[:n_real] = post

    # channel (slot) attention: mean+max pooled through the shared perceptron
    avg_pool = padded.mean(axis=(1, 2, 3))
    max_pool = padded.max(axis=(1, 2, 3))

    def perceptron(v):
        return np.maximum(v @ sac.mlp_w1, 0.0) @ sac.mlp_w2

    slot_gate = _sigmoid(perceptron(avg_pool) + perceptron(max_pool))
    gated = padded * slot_gate[:, None, None, None]

    # spatial attention: 3x3 conv over the slot-pooled mean/max maps
    pooled = np.stack([gated.mean(axis=(0, 3)), gated.max(axis=(0, 3))], axis=-1)
    pixel_gate = _sigmoid(_conv3x3(pooled, sac.spatial_w, sac.spatial_b))
    gated = gated * pixel_gate[None, :, :, None]

    # per-pixel softmax over the real slots only
    scores = gated[:n_real].mean(axis=3)  # (n+1, H, W)
    scores = scores - scores.max(axis=0, keepdims=True)
    e = np.exp(scores)
    weights = e / e.sum(axis=0, keepdims=True)

    fused = np.einsum("khw,khwc->hwc", weights, post[:n_real])
    return ensure_finite(fused, "aggregation"), weights.transpose(1, 2, 0)


# ---------------------------------------------------------------------------
# refined shading (training-free, frozen weights)
# ---------------------------------------------------------------------------


def refined_instance_shading(
    X,
    attribute,
    ca: CrossAttnWeights,
    ip: KVWeights,
    ctx: ShadingContext,
) -> np.ndarray:
    """Unmasked shading of one attribute with the frozen base weights.

    Text attributes go through the frozen cross-attention; image attributes
    go through the frozen image-projector attention (same query projection).
    """
    X = _check_feature(X)
    H, W, C = X.shape
    flat = X.reshape(H * W, C)
    Q = flat @ ca.wq + ca.bq
    if isinstance(attribute, TextAttribute):
        emb = encode_text(attribute.tokens, ctx.d_embed)
        K = emb @ ca.wk + ca.bk
        V = emb @ ca.wv + ca.bv
    elif isinstance(attribute, ImageAttribute):
        raw = ctx.store.encode_image(attribute.image_id, ctx.d_embed, ctx.n_image_tokens)
        emb = project_image(raw, ctx.projector)
        K = emb @ ip.wk + ip.bk
        V = emb @ ip.wv + ip.bv
    else:
        raise InvalidArgumentError(f"unsupported attribute: {attribute!r}")
    out = multi_head_attention(Q, K, V, ctx.heads)
    return ensure_finite(out.reshape(H, W, -1), "refined shading")


def refined_weight_maps(
    positions: Sequence[np.ndarray],
    alpha: float,
    beta: float,
    hw: Tuple[int, int],
) -> np.ndarray:
    """Per-pixel softmaxed weight maps, global first then one per instance.

    The global map is ``beta`` everywhere; instance i's map is ``alpha``
    inside its position and 0 elsewhere.  The softmax runs across the n+1
    maps at each pixel, so the returned (n+1, H, W) stack sums to 1 per pixel.
    """
    H, W = hw
    raw = [np.full((H, W), float(beta))]
    for M in positions:
        M = _check_binary_map(M, (H, W))
        raw.append(float(alpha) * M)
    stack = np.stack(raw)
    stack = stack - stack.max(axis=0, keepdims=True)
    e = np.exp(stack)
    return e / e.sum(axis=0, keepdims=True)


def refined_aggregate(
    R_global,
    R_instances: Sequence[np.ndarray],
    positions: Sequence[np.ndarray],
    alpha: float,
    beta: float,
) -> np.ndarray:
    """Softmax-weighted sum of the global and per-instance shading results."""
    R_global = _check_feature(R_global, "global shading")
    H, W, C = R_global.shape
    shadings = [R_global]
    for i, R in enumerate(R_instances):
        R = _check_feature(R, f"instance shading {i}")
        if R.shape != (H, W, C):
            raise ShapeError(f"instance shading {i} shape {R.shape} != {(H, W, C)}")
        shadings.append(R)
    if len(R_instances) != len(positions):
        raise ShapeError("one position map is required per instance shading")
    weights = refined_weight_maps(positions, alpha, beta, (H, W))
    out = np.einsum("khw,khwc->hwc", weights, np.stack(shadings))
    return ensure_finite(out, "refined aggregate")


def merge_shaders(R_inst, R_ref, gamma_merge) -> np.ndarray:
    """R_inst * tanh(gamma) + R_ref; the exact identity on R_ref at gamma=0."""
    R_inst = _check_feature(R_inst, "instance result")
    R_ref = _check_feature(R_ref, "refined result")
    if R_inst.shape != R_ref.shape:
        raise ShapeError(f"shape mismatch: {R_inst.shape} vs {R_ref.shape}")
    scale = np.tanh(float(np.asarray(gamma_merge)))
    if scale == 0.0:
        return R_ref.copy()
    return R_inst * scale + R_ref


# ---------------------------------------------------------------------------
# full pipelines used by the denoiser
# ---------------------------------------------------------------------------


def real_instances(instances: Sequence[InstanceDescription]) -> List[InstanceDescription]:
    """Drop null pads so they contribute nothing downstream."""
    return [inst for inst in instances if not is_null_position(inst.position)]


def instance_shader(
    X,
    instances: Sequence[InstanceDescription],
    shader: ShaderParams,
    ctx: ShadingContext,
) -> Tuple[np.ndarray, np.ndarray]:
    """Full divide-and-conquer pass: enhance, layout template, aggregate."""
    X = _check_feature(X)
    H, W, _ = X.shape
    active = real_instances(instances)
    maps = [rasterize_at_resolution(inst.position, H, W) for inst in active]
    shadings = [multimodal_enhance(X, inst, shader, ctx) for inst in active]
    bg = background_mask(maps, (H, W))
    A_la = layout_attention_mask(maps, bg)
    template = layout_attention(X, A_la, shader.la, ctx.heads)
    return shading_aggregation(shadings, template, shader.sac)


def refined_shader(
    X,
    global_text_embedding: np.ndarray,
    instances: Sequence[InstanceDescription],
    ca: CrossAttnWeights,
    ip: KVWeights,
    ctx: ShadingContext,
    alpha: float,
    beta: float,
) -> np.ndarray:
    """Training-free pass: frozen global + per-instance shading, then fuse."""
    X = _check_feature(X)
    H, W, C = X.shape
    flat = X.reshape(H * W, C)
    Q = flat @ ca.wq + ca.bq
    K = global_text_embedding @ ca.wk + ca.bk
    V = global_text_embedding @ ca.wv + ca.bv
    R_global = multi_head_attention(Q, K, V, ctx.heads).reshape(H, W, -1)
    active = real_instances(instances)
    R_insts = [
        refined_instance_shading(X, inst.attribute, ca, ip, ctx) for inst in active
    ]
    positions = [rasterize_at_resolution(inst.position, H, W) for inst in active]
    return refined_aggregate(R_global, R_insts, positions, alpha, beta)


def refined_attention_maps(
    X,
    instances: Sequence[InstanceDescription],
    ca: CrossAttnWeights,
    ip: KVWeights,
    ctx: ShadingContext,
) -> List[np.ndarray]:
    """Per-instance H x W attention maps from the frozen refined shading.

    Head-averaged probabilities are additionally averaged over the attribute
    tokens, giving one spatial map per real instance (used by the background
    inhibition penalty during training).
    """
    X = _check_feature(X)
    H, W, C = X.shape
    flat = X.reshape(H * W, C)
    Q = flat @ ca.wq + ca.bq
    maps = []
    for inst in real_instances(instances):
        if isinstance(inst.attribute, TextAttribute):
            emb = encode_text(inst.attribute.tokens, ctx.d_embed)
            K = emb @ ca.wk + ca.bk
        elif isinstance(inst.attribute, ImageAttribute):
            raw = ctx.store.encode_image(
                inst.attribute.image_id, ctx.d_embed, ctx.n_image_tokens
            )
            K = project_image(raw, ctx.projector) @ ip.wk + ip.bk
        else:
            raise InvalidArgumentError(f"unsupported attribute: {inst.attribute!r}")
        probs = attention_probs(Q, K, ctx.heads)
        maps.append(probs.mean(axis=1).reshape(H, W))
    return maps
