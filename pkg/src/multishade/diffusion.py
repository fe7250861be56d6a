"""Toy multi-resolution denoiser with pluggable shader slots.

The network mirrors the 3-down / mid / 3-up shape of latent-diffusion
backbones at desk scale: every block runs a frozen self-attention, one
conditioning slot (instance shader, refined shader, their merge, or the
vanilla frozen cross-attention) whose output is added residually, and a
frozen feed-forward.  Sampling is a deterministic Euler walk down a linear
sigma ramp with classifier-free guidance.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .attention import as_tensor, ensure_finite, multi_head_attention
from .consistency import KVCache, kv_concat_self_attention, modify_mask, blend_latents, self_attention_kv
from .encoders import GroundingMlpParams, ProjectorParams, encode_prompt
from .errors import CapacityError, ConfigError, InvalidArgumentError, ShapeError
from .scenes import SceneSpec
from .shading import (
    CrossAttnWeights,
    KVWeights,
    ShaderParams,
    ShadingContext,
    instance_shader,
    merge_shaders,
    real_instances,
    refined_shader,
)

DOWN_BLOCKS = ("down-0", "down-1", "down-2")
UP_BLOCKS = ("up-1", "up-2", "up-3")
BLOCK_IDS = DOWN_BLOCKS + ("mid",) + UP_BLOCKS


# ---------------------------------------------------------------------------
# configuration types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DenoiserConfig:
    """Shapes and widths of the toy denoiser.

    ``block_channels`` are the down-path widths (shallow to deep); the up
    path mirrors them and the mid block uses the deepest width.  Resolutions
    halve at each depth, so the latent size must be divisible by 8.
    """

    latent_size: int = 32
    latent_channels: int = 4
    block_channels: Tuple[int, int, int] = (8, 16, 32)
    d_attn: int = 8
    heads: int = 2
    d_embed: int = 16
    fourier_frequencies: int = 8
    grounding_hidden: int = 32
    n_pos: int = 1
    n_image_tokens: int = 4
    projector_hidden: int = 16
    capacity: int = 10
    alpha: float = 1.0
    beta: float = 0.0

    def __post_init__(self):
        if self.latent_size % 8 != 0 or self.latent_size < 8:
            raise ConfigError("latent_size must be a positive multiple of 8")
        if self.d_attn % self.heads != 0:
            raise ConfigError("d_attn must be divisible by the head count")
        for c in self.block_channels:
            if c % self.heads != 0:
                raise ConfigError("block channels must be divisible by the head count")
        if self.capacity < 1:
            raise ConfigError("aggregation capacity must be >= 1")

    def resolution(self, block_id: str) -> int:
        s = self.latent_size
        table = {
            "down-0": s,
            "down-1": s // 2,
            "down-2": s // 4,
            "mid": s // 8,
            "up-1": s // 4,
            "up-2": s // 2,
            "up-3": s,
        }
        return table[block_id]

    def channels(self, block_id: str) -> int:
        c0, c1, c2 = self.block_channels
        table = {
            "down-0": c0,
            "down-1": c1,
            "down-2": c2,
            "mid": c2,
            "up-1": c2,
            "up-2": c1,
            "up-3": c0,
        }
        return table[block_id]


@dataclass(frozen=True)
class DeploymentPlan:
    """Where the shaders replace cross-attention, and for how many steps.

    Defaults follow the best-performing placement: instance shader in the
    mid and deepest up block for the first half of the sampling steps, the
    refined shader everywhere.
    """

    instance_shader_blocks: frozenset = frozenset({"mid", "up-1"})
    refined_shader_blocks: frozenset = frozenset(BLOCK_IDS)
    control_fraction: float = 0.5

    def __post_init__(self):
        for b in self.instance_shader_blocks | self.refined_shader_blocks:
            if b not in BLOCK_IDS:
                raise ConfigError(f"unknown block id {b!r}")
        if not (0.0 < self.control_fraction <= 1.0):
            raise ConfigError("control_fraction must be in (0, 1]")


@dataclass(frozen=True)
class SamplerSchedule:
    """Sigma ladder, guidance scale and seed for one sampling run."""

    steps: int
    sigmas: Tuple[float, ...]
    cfg_scale: float = 7.5
    seed: int = 0

    def __post_init__(self):
        if self.steps != len(self.sigmas):
            raise ConfigError("steps must equal the sigma sequence length")
        if self.steps < 1:
            raise ConfigError("need at least one step")
        arr = np.asarray(self.sigmas)
        if np.any(arr <= 0.0):
            raise ConfigError("sigmas must be positive")
        if np.any(np.diff(arr) >= 0.0):
            raise ConfigError("sigmas must be strictly decreasing")

    @classmethod
    def linear(
        cls,
        steps: int = 50,
        sigma_max: float = 1.0,
        sigma_min: float = 0.02,
        cfg_scale: float = 7.5,
        seed: int = 0,
    ) -> "SamplerSchedule":
        if steps == 1:
            sigmas = (float(sigma_max),)
        else:
            sigmas = tuple(np.linspace(sigma_max, sigma_min, steps))
        return cls(steps=steps, sigmas=sigmas, cfg_scale=cfg_scale, seed=seed)


@dataclass
class LatentState:
    z: np.ndarray
    t_index: int


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


@dataclass
class BlockFrozen:
    """Frozen base weights of one block (the pretrained stand-in)."""

    self_attn: CrossAttnWeights
    ca: CrossAttnWeights
    ip: KVWeights
    ff_w1: np.ndarray
    ff_b1: np.ndarray
    ff_w2: np.ndarray
    ff_b2: np.ndarray


@dataclass
class DenoiserParams:
    config: DenoiserConfig
    lift_w: np.ndarray
    lift_b: np.ndarray
    proj_w: np.ndarray
    proj_b: np.ndarray
    transitions: Dict[str, Tuple[np.ndarray, np.ndarray]]
    blocks: Dict[str, BlockFrozen]
    shaders: Dict[str, ShaderParams]
    grounding: GroundingMlpParams
    projector: ProjectorParams

    def context(self, store) -> ShadingContext:
        cfg = self.config
        return ShadingContext(
            store=store,
            grounding=self.grounding,
            projector=self.projector,
            d_embed=cfg.d_embed,
            fourier_frequencies=cfg.fourier_frequencies,
            heads=cfg.heads,
            n_image_tokens=cfg.n_image_tokens,
        )

    def trainable_arrays(self, modality: Optional[str] = None) -> List[Tuple[str, np.ndarray]]:
        """Named trainable arrays: all shader weights plus the grounding MLP.

        ``modality='image'`` freezes the text enhance-attention weights (and
        vice versa), matching the staged training protocol.
        """
        out = []
        for block_id in BLOCK_IDS:
            sp = self.shaders[block_id]
            groups = [("ea_text", sp.ea_text), ("ea_image", sp.ea_image), ("la", sp.la)]
            for gname, w in groups:
                if modality == "image" and gname == "ea_text":
                    continue
                if modality == "text" and gname == "ea_image":
                    continue
                for f in ("wq", "bq", "wk", "bk", "wv", "bv"):
                    out.append((f"{block_id}.{gname}.{f}", getattr(w, f)))
            for f in ("conv_w", "conv_b", "mlp_w1", "mlp_w2", "spatial_w", "spatial_b"):
                out.append((f"{block_id}.sac.{f}", getattr(sp.sac, f)))
            out.append((f"{block_id}.gamma_merge", sp.gamma_merge))
        for f in ("w1", "b1", "w2", "b2"):
            out.append((f"grounding.{f}", getattr(self.grounding, f)))
        return out


def init_denoiser_params(config: DenoiserConfig, seed: int = 0, sigma: float = 0.02) -> DenoiserParams:
    """Seeded initialization; every weight is N(0, sigma^2) except the merge
    scalars, which start at exactly 0."""
    rng = np.random.default_rng(seed)
    cz = config.latent_channels
    c_first = config.channels("down-0")
    c_last = config.channels("up-3")

    transitions = {}
    chain = list(DOWN_BLOCKS) + ["mid"] + list(UP_BLOCKS)
    for src, dst in zip(chain[:-1], chain[1:]):
        transitions[dst] = (
            sigma * rng.standard_normal((config.channels(src), config.channels(dst))),
            np.zeros(config.channels(dst)),
        )

    blocks = {}
    shaders = {}
    for block_id in BLOCK_IDS:
        c = config.channels(block_id)
        blocks[block_id] = BlockFrozen(
            self_attn=CrossAttnWeights.seeded(c, c, config.d_attn, c, rng, sigma),
            ca=CrossAttnWeights.seeded(c, config.d_embed, config.d_attn, c, rng, sigma),
            ip=KVWeights.seeded(config.d_embed, config.d_attn, c, rng, sigma),
            ff_w1=sigma * rng.standard_normal((c, c)),
            ff_b1=np.zeros(c),
            ff_w2=sigma * rng.standard_normal((c, c)),
            ff_b2=np.zeros(c),
        )
        shaders[block_id] = ShaderParams.seeded(
            c, config.d_embed, config.d_attn, config.capacity, rng, sigma
        )

    grounding = GroundingMlpParams.seeded(
        8 * config.fourier_frequencies,
        config.grounding_hidden,
        config.n_pos,
        config.d_embed,
        rng,
        sigma,
    )
    projector = ProjectorParams.seeded(config.d_embed, config.projector_hidden, rng, sigma)
    return DenoiserParams(
        config=config,
        lift_w=sigma * rng.standard_normal((cz, c_first)),
        lift_b=np.zeros(c_first),
        proj_w=sigma * rng.standard_normal((c_last, cz)),
        proj_b=np.zeros(cz),
        transitions=transitions,
        blocks=blocks,
        shaders=shaders,
        grounding=grounding,
        projector=projector,
    )


# ---------------------------------------------------------------------------
# scheduling and the block pipeline
# ---------------------------------------------------------------------------


def shader_active(block_id: str, step_index: int, total_steps: int, plan: DeploymentPlan) -> bool:
    """True iff the instance shader runs in this block at this step.

    The step boundary is exclusive, so a fraction of 0.5 over 50 steps
    activates exactly steps 0..24.
    """
    if block_id not in BLOCK_IDS:
        raise ConfigError(f"unknown block id {block_id!r}")
    if not (0 <= step_index < total_steps):
        raise InvalidArgumentError("step_index must satisfy 0 <= step < total_steps")
    if block_id not in plan.instance_shader_blocks:
        return False
    return step_index / total_steps < plan.control_fraction


def _downsample2x(h: np.ndarray) -> np.ndarray:
    H, W, C = h.shape
    return h.reshape(H // 2, 2, W // 2, 2, C).mean(axis=(1, 3))


def _upsample2x(h: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(h, 2, axis=0), 2, axis=1)


def _run_block(
    block_id: str,
    h: np.ndarray,
    scene: SceneSpec,
    plan: DeploymentPlan,
    params: DenoiserParams,
    ctx: ShadingContext,
    step_index: int,
    total_steps: int,
    branch: str,
    kv_prev: Optional[KVCache],
    kv_record: Optional[KVCache],
) -> np.ndarray:
    frozen = params.blocks[block_id]
    cfg = params.config
    H, W, C = h.shape

    # frozen self-attention, with previous-iteration K/V concatenated when
    # an edit session provides them
    key = (branch, block_id, step_index)
    prev = kv_prev.get(key) if kv_prev is not None else None
    if kv_record is not None:
        k_cur, v_cur = self_attention_kv(h, frozen.self_attn, cfg.heads)
        kv_record.put(key, k_cur, v_cur)
    if prev is not None:
        attn = kv_concat_self_attention(h, prev[0], prev[1], frozen.self_attn, cfg.heads)
    else:
        attn = kv_concat_self_attention(h, None, None, frozen.self_attn, cfg.heads)
    h = h + attn

    # conditioning slot
    inst_on = shader_active(block_id, step_index, total_steps, plan)
    ref_on = block_id in plan.refined_shader_blocks
    shader = params.shaders[block_id]
    if inst_on:
        r_inst, _ = instance_shader(h, scene.instances, shader, ctx)
    if ref_on:
        emb = encode_prompt(scene.global_text, cfg.d_embed)
        r_ref = refined_shader(
            h, emb, scene.instances, frozen.ca, frozen.ip, ctx, cfg.alpha, cfg.beta
        )
    if inst_on and ref_on:
        r = merge_shaders(r_inst, r_ref, shader.gamma_merge)
    elif inst_on:
        r = r_inst
    elif ref_on:
        r = r_ref
    else:
        emb = encode_prompt(scene.global_text, cfg.d_embed)
        flat = h.reshape(H * W, C)
        r = multi_head_attention(
            flat @ frozen.ca.wq + frozen.ca.bq,
            emb @ frozen.ca.wk + frozen.ca.bk,
            emb @ frozen.ca.wv + frozen.ca.bv,
            cfg.heads,
        ).reshape(H, W, C)
    h = h + r

    # frozen feed-forward
    h = h + np.tanh(h @ frozen.ff_w1 + frozen.ff_b1) @ frozen.ff_w2 + frozen.ff_b2
    return ensure_finite(h, f"block {block_id}")


def denoise(
    z: np.ndarray,
    scene: SceneSpec,
    plan: DeploymentPlan,
    params: DenoiserParams,
    step_index: int,
    total_steps: int,
    *,
    branch: str = "cond",
    kv_prev: Optional[KVCache] = None,
    kv_record: Optional[KVCache] = None,
) -> np.ndarray:
    """One noise-prediction pass through the block pipeline."""
    z = as_tensor(z, "latent")
    cfg = params.config
    if z.shape != (cfg.latent_size, cfg.latent_size, cfg.latent_channels):
        raise ShapeError(
            f"latent shape {z.shape} does not match config "
            f"({cfg.latent_size}, {cfg.latent_size}, {cfg.latent_channels})"
        )
    if len(scene.instances) > cfg.capacity:
        raise CapacityError(
            f"{len(scene.instances)} instances exceed capacity {cfg.capacity}"
        )
    ctx = params.context(scene.store)

    h = z @ params.lift_w + params.lift_b
    skips = []
    for block_id in DOWN_BLOCKS:
        h = _run_block(
            block_id, h, scene, plan, params, ctx, step_index, total_steps,
            branch, kv_prev, kv_record,
        )
        skips.append(h)
        w, b = params.transitions["mid" if block_id == "down-2" else f"down-{int(block_id[-1]) + 1}"]
        h = _downsample2x(h) @ w + b
    h = _run_block(
        "mid", h, scene, plan, params, ctx, step_index, total_steps,
        branch, kv_prev, kv_record,
    )
    for block_id, skip in zip(UP_BLOCKS, reversed(skips)):
        w, b = params.transitions[block_id]
        h = _upsample2x(h) @ w + b
        h = h + skip
        h = _run_block(
            block_id, h, scene, plan, params, ctx, step_index, total_steps,
            branch, kv_prev, kv_record,
        )
    eps = h @ params.proj_w + params.proj_b
    return ensure_finite(eps, "noise prediction")


def cfg_combine(eps_cond: np.ndarray, eps_uncond: np.ndarray, scale: float) -> np.ndarray:
    """Classifier-free interpolation of the two noise predictions."""
    eps_cond = as_tensor(eps_cond, "eps_cond")
    eps_uncond = as_tensor(eps_uncond, "eps_uncond")
    if eps_cond.shape != eps_uncond.shape:
        raise ShapeError(f"shape mismatch: {eps_cond.shape} vs {eps_uncond.shape}")
    return eps_uncond + scale * (eps_cond - eps_uncond)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


@dataclass
class SampleResult:
    final: LatentState
    trajectory: np.ndarray  # (steps + 1, H, W, C), initial noise included
    kv: KVCache
    scene: SceneSpec
    schedule: SamplerSchedule


def sample(
    scene: SceneSpec,
    schedule: SamplerSchedule,
    plan: DeploymentPlan,
    params: DenoiserParams,
    *,
    prev_session=None,
    record_kv: bool = True,
) -> SampleResult:
    """Deterministic Euler sampling; optionally consistent with a previous run.

    With ``prev_session`` set (an EditSession), unmodified regions are
    replaced from the previous trajectory after the initial draw and after
    every step, and each block's self-attention sees the previous iteration's
    K/V concatenated to its own.
    """
    cfg = params.config
    if scene.resolution != (cfg.latent_size, cfg.latent_size):
        raise ConfigError(
            f"scene resolution {scene.resolution} does not match the "
            f"denoiser latent size {cfg.latent_size}"
        )
    rng = np.random.default_rng(schedule.seed)
    z = schedule.sigmas[0] * rng.standard_normal(
        (cfg.latent_size, cfg.latent_size, cfg.latent_channels)
    )

    m_modify = None
    kv_prev = None
    if prev_session is not None:
        if prev_session.trajectory.shape[0] != schedule.steps + 1:
            raise ConfigError(
                "previous session used a different schedule "
                f"({prev_session.trajectory.shape[0] - 1} steps vs {schedule.steps})"
            )
        m_modify = modify_mask(prev_session.scene, scene, cfg.latent_size, cfg.latent_size)
        kv_prev = prev_session.kv
        z = blend_latents(z, prev_session.trajectory[0], m_modify)

    kv_record = KVCache() if record_kv else None
    uncond = scene.empty_variant()
    trajectory = [z.copy()]
    for i in range(schedule.steps):
        eps_c = denoise(
            z, scene, plan, params, i, schedule.steps,
            branch="cond", kv_prev=kv_prev, kv_record=kv_record,
        )
        eps_u = denoise(
            z, uncond, plan, params, i, schedule.steps,
            branch="uncond", kv_prev=kv_prev, kv_record=kv_record,
        )
        d = cfg_combine(eps_c, eps_u, schedule.cfg_scale)
        sigma_next = schedule.sigmas[i + 1] if i + 1 < schedule.steps else 0.0
        z = z + (sigma_next - schedule.sigmas[i]) * d
        if m_modify is not None:
            z = blend_latents(z, prev_session.trajectory[i + 1], m_modify)
        trajectory.append(z.copy())

    return SampleResult(
        final=LatentState(z, schedule.steps),
        trajectory=np.stack(trajectory),
        kv=kv_record if kv_record is not None else KVCache(),
        scene=scene,
        schedule=schedule,
    )
