"""Dense tensor substrate and attention primitives.

Tensors are float64, C-contiguous numpy arrays throughout the package;
``as_tensor`` is the single entry point that enforces dtype, layout and
finiteness.  Attention masks are *additive*: an entry of 0 leaves the logit
untouched, ``-inf`` removes the pair from the softmax entirely.  Rows whose
entries are all masked yield all-zero probability rows (not NaN), so
null-padded instances contribute nothing downstream.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import InvalidArgumentError, NumericError, ShapeError

NEG_INF = float("-inf")


def as_tensor(data, name: str = "tensor") -> np.ndarray:
    """Coerce to a float64 C-order array and reject non-finite values."""
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite values")
    return arr


def ensure_finite(arr: np.ndarray, name: str = "result") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} produced non-finite values")
    return arr


def _validate_additive_mask(mask: np.ndarray, name: str = "additive_mask") -> np.ndarray:
    mask = np.ascontiguousarray(mask, dtype=np.float64)
    ok = (mask == 0.0) | np.isneginf(mask)
    if not np.all(ok):
        raise InvalidArgumentError(f"{name} entries must be 0 or -inf")
    return mask


def masked_softmax(logits, additive_mask=None) -> np.ndarray:
    """Softmax along the last axis under an optional additive 0/-inf mask.

    Unmasked entries of each row are nonnegative and sum to 1; fully-masked
    rows come back as all zeros.
    """
    x = as_tensor(logits, "logits")
    if x.shape[-1] < 1:
        raise ShapeError("softmax needs a last axis of length >= 1")
    if additive_mask is not None:
        mask = _validate_additive_mask(additive_mask)
        if mask.shape != x.shape:
            raise ShapeError(
                f"mask shape {mask.shape} does not match logits shape {x.shape}"
            )
        z = x + mask
    else:
        z = x

    top = np.max(z, axis=-1, keepdims=True)
    # a fully-masked row has top == -inf; shift by 0 there so exp() sees -inf
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.exp(z - top)
    denom = np.sum(e, axis=-1, keepdims=True)
    out = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0.0)
    return ensure_finite(out, "softmax")


def scaled_dot_attention(Q, K, V, additive_mask=None) -> np.ndarray:
    """Softmax(Q K^T / sqrt(d)) V with an optional additive mask on the logits.

    Q is (LQ, d), K is (LK, d), V is (LK, c); the result is (LQ, c) and every
    row is a convex combination of the rows of V (zero for fully-masked rows).
    """
    Q = as_tensor(Q, "Q")
    K = as_tensor(K, "K")
    V = as_tensor(V, "V")
    if Q.ndim != 2 or K.ndim != 2 or V.ndim != 2:
        raise ShapeError("Q, K, V must all be rank-2")
    d = Q.shape[1]
    if d == 0:
        raise InvalidArgumentError("attention width d must be >= 1")
    if K.shape[1] != d:
        raise ShapeError(f"K width {K.shape[1]} != Q width {d}")
    if V.shape[0] != K.shape[0]:
        raise ShapeError(f"V has {V.shape[0]} rows but K has {K.shape[0]}")
    if additive_mask is not None:
        additive_mask = _validate_additive_mask(additive_mask)
        expected = (Q.shape[0], K.shape[0])
        if additive_mask.shape != expected:
            raise ShapeError(
                f"mask shape {additive_mask.shape}, expected {expected}"
            )
    logits = (Q @ K.T) / math.sqrt(d)
    probs = masked_softmax(logits, additive_mask)
    return ensure_finite(probs @ V, "attention")


def multi_head_attention(Q, K, V, heads: int = 1, additive_mask=None) -> np.ndarray:
    """Run ``heads`` independent attentions over d/heads-wide slices.

    Q and K are split along their width, V along its output columns; the
    per-head outputs are concatenated back in order.  heads=1 reduces to
    scaled_dot_attention exactly.
    """
    if heads < 1:
        raise InvalidArgumentError("heads must be >= 1")
    Q = as_tensor(Q, "Q")
    K = as_tensor(K, "K")
    V = as_tensor(V, "V")
    if heads == 1:
        return scaled_dot_attention(Q, K, V, additive_mask)
    if Q.ndim != 2 or V.ndim != 2:
        raise ShapeError("Q, K, V must all be rank-2")
    if Q.shape[1] % heads != 0:
        raise InvalidArgumentError(
            f"attention width {Q.shape[1]} not divisible by {heads} heads"
        )
    if V.shape[1] % heads != 0:
        raise InvalidArgumentError(
            f"value width {V.shape[1]} not divisible by {heads} heads"
        )
    dh = Q.shape[1] // heads
    ch = V.shape[1] // heads
    pieces = []
    for h in range(heads):
        qs = Q[:, h * dh : (h + 1) * dh]
        ks = K[:, h * dh : (h + 1) * dh]
        vs = V[:, h * ch : (h + 1) * ch]
        pieces.append(scaled_dot_attention(qs, ks, vs, additive_mask))
    return np.concatenate(pieces, axis=1)


def attention_probs(Q, K, heads: int = 1, additive_mask=None) -> np.ndarray:
    """Head-averaged attention probabilities, shape (LQ, LK).

    Used where the attention *weights* themselves are needed (background
    inhibition during training, diagnostics).
    """
    Q = as_tensor(Q, "Q")
    K = as_tensor(K, "K")
    if heads < 1:
        raise InvalidArgumentError("heads must be >= 1")
    if Q.shape[1] % heads != 0 or K.shape[1] != Q.shape[1]:
        raise ShapeError("Q/K widths must match and divide the head count")
    dh = Q.shape[1] // heads
    acc = np.zeros((Q.shape[0], K.shape[0]))
    for h in range(heads):
        qs = Q[:, h * dh : (h + 1) * dh]
        ks = K[:, h * dh : (h + 1) * dh]
        logits = (qs @ ks.T) / math.sqrt(dh)
        acc += masked_softmax(logits, additive_mask)
    return acc / heads
