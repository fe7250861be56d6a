"""Consistency across editing iterations.

Two mechanisms keep iterative generation stable: latents outside the
modified region are replaced by the previous iteration's values after every
sampler step (exact replacement, so unmodified regions are bit-identical),
and every self-attention sees the previous iteration's keys/values
concatenated with its own to carry identity forward.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from .attention import as_tensor, ensure_finite, multi_head_attention
from .encoders import (
    Box,
    ImageAttribute,
    InstanceDescription,
    MaskPosition,
    TextAttribute,
    rasterize_at_resolution,
)
from .errors import InvalidArgumentError, ShapeError


class KVCache:
    """Per-(branch, block, step) key/value arrays from one sampling run."""

    def __init__(self):
        self._store: Dict[tuple, Tuple[np.ndarray, np.ndarray]] = {}

    def put(self, key: tuple, K: np.ndarray, V: np.ndarray) -> None:
        self._store[key] = (np.array(K), np.array(V))

    def get(self, key: tuple) -> Optional[Tuple[np.ndarray, np.ndarray]]:
        return self._store.get(key)

    def __contains__(self, key: tuple) -> bool:
        return key in self._store

    def __len__(self) -> int:
        return len(self._store)

    def items(self):
        return self._store.items()


@dataclass
class EditSession:
    """Previous-iteration state needed to run a consistent follow-up."""

    scene: object  # SceneSpec
    trajectory: np.ndarray  # (steps + 1, H, W, C)
    kv: KVCache
    schedule: object = None  # SamplerSchedule of the recorded run, if known


# ---------------------------------------------------------------------------
# modify mask
# ---------------------------------------------------------------------------


def _instance_key(inst: InstanceDescription) -> tuple:
    if isinstance(inst.attribute, TextAttribute):
        attr = ("text", inst.attribute.tokens)
    elif isinstance(inst.attribute, ImageAttribute):
        attr = ("image", inst.attribute.image_id)
    else:
        raise InvalidArgumentError(f"unsupported attribute: {inst.attribute!r}")
    if isinstance(inst.position, Box):
        pos = ("box", inst.position.as_tuple())
    elif isinstance(inst.position, MaskPosition):
        pos = ("mask", inst.position.shape, inst.position.grid.tobytes())
    else:
        raise InvalidArgumentError(f"unsupported position: {inst.position!r}")
    return (attr, pos)


def modify_mask(prev_scene, cur_scene, H: int, W: int) -> np.ndarray:
    """Union of position maps of every added, removed or changed instance.

    Instances are diffed as a multiset of (attribute, position) pairs, so
    an instance that appears unchanged in both scenes contributes nothing; a
    moved or re-attributed instance contributes both its old and new maps.
    """
    if prev_scene.resolution != cur_scene.resolution:
        raise ShapeError(
            f"scene resolutions differ: {prev_scene.resolution} vs {cur_scene.resolution}"
        )
    prev = Counter(_instance_key(i) for i in prev_scene.instances)
    cur = Counter(_instance_key(i) for i in cur_scene.instances)
    changed_keys = set((prev - cur).keys()) | set((cur - prev).keys())

    out = np.zeros((H, W))
    for scene in (prev_scene, cur_scene):
        for inst in scene.instances:
            if _instance_key(inst) in changed_keys:
                out = np.maximum(out, rasterize_at_resolution(inst.position, H, W))
    return out


# ---------------------------------------------------------------------------
# latent blending
# ---------------------------------------------------------------------------


def blend_latents(z_cur, z_prev, m_modify) -> np.ndarray:
    """m * current + (1 - m) * previous, pixelwise with a binary mask."""
    z_cur = as_tensor(z_cur, "current latent")
    z_prev = as_tensor(z_prev, "previous latent")
    if z_cur.shape != z_prev.shape:
        raise ShapeError(f"latent shapes differ: {z_cur.shape} vs {z_prev.shape}")
    m = np.asarray(m_modify, dtype=np.float64)
    if m.shape != z_cur.shape[:2]:
        raise ShapeError(f"mask shape {m.shape} != latent spatial {z_cur.shape[:2]}")
    if not np.all((m == 0.0) | (m == 1.0)):
        raise InvalidArgumentError("modify mask must be strictly binary")
    m3 = m[:, :, None]
    return m3 * z_cur + (1.0 - m3) * z_prev


# ---------------------------------------------------------------------------
# key/value concatenation
# ---------------------------------------------------------------------------


def self_attention_kv(X, weights, heads: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """Current K/V of a self-attention layer (what a session records)."""
    X = as_tensor(X, "feature")
    if X.ndim != 3:
        raise ShapeError("feature must be H x W x C")
    H, W, C = X.shape
    flat = X.reshape(H * W, C)
    return flat @ weights.wk + weights.bk, flat @ weights.wv + weights.bv


def kv_concat_self_attention(
    X_cur,
    K_prev: Optional[np.ndarray],
    V_prev: Optional[np.ndarray],
    weights,
    heads: int = 1,
) -> np.ndarray:
    """Self-attention with the previous iteration's K/V appended.

    With no previous cache this is plain self-attention; the output shape is
    always that of the current feature.
    """
    X_cur = as_tensor(X_cur, "feature")
    if X_cur.ndim != 3:
        raise ShapeError("feature must be H x W x C")
    H, W, C = X_cur.shape
    flat = X_cur.reshape(H * W, C)
    Q = flat @ weights.wq + weights.bq
    K, V = self_attention_kv(X_cur, weights, heads)
    if (K_prev is None) != (V_prev is None):
        raise InvalidArgumentError("previous K and V must be supplied together")
    if K_prev is not None:
        K_prev = as_tensor(K_prev, "previous K")
        V_prev = as_tensor(V_prev, "previous V")
        if K_prev.ndim != 2 or K_prev.shape[1] != K.shape[1]:
            raise ShapeError(
                f"previous K width {K_prev.shape} incompatible with {K.shape[1]}"
            )
        if V_prev.ndim != 2 or V_prev.shape[1] != V.shape[1]:
            raise ShapeError(
                f"previous V width {V_prev.shape} incompatible with {V.shape[1]}"
            )
        if K_prev.shape[0] != V_prev.shape[0]:
            raise ShapeError("previous K and V must have the same token count")
        K = np.concatenate([K, K_prev], axis=0)
        V = np.concatenate([V, V_prev], axis=0)
    out = multi_head_attention(Q, K, V, heads)
    return ensure_finite(out.reshape(H, W, C), "kv-concat self-attention")
