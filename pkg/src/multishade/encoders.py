"""Toy encoders and the position pipeline.

Text and reference-image encoders are deterministic stand-ins for pretrained
models: every token (or image id + content digest) is expanded through a
keyed blake2b hash into a unit-norm vector, so equal inputs are bit-identical
across runs and platforms while distinct inputs stay distinct.  The position
side turns boxes into Fourier features, lifts them through a small MLP, and
rasterizes boxes/masks into binary position maps with a cell-center rule.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .attention import as_tensor
from .errors import (
    ConfigError,
    InvalidArgumentError,
    NotFoundError,
    ShapeError,
)

NULL_TOKEN = "<null>"
BLANK_IMAGE_ID = "blank-white"
_BLANK_IMAGE_DIGEST = "builtin:blank-white"


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in normalized [0,1] coordinates, x1<=x2 and y1<=y2.

    The all-zero box is the null pad: it rasterizes to an empty map.
    """

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for name, v in zip(("x1", "y1", "x2", "y2"), self.as_tuple()):
            if not (0.0 <= v <= 1.0):
                raise InvalidArgumentError(f"box coordinate {name}={v} outside [0, 1]")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise InvalidArgumentError(
                f"degenerate box ordering: {self.as_tuple()}"
            )

    def as_tuple(self) -> tuple:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def is_null(self) -> bool:
        return self.as_tuple() == (0.0, 0.0, 0.0, 0.0)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple:
        return ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)


class MaskPosition:
    """Binary H x W grid position; strictly 0/1 valued and immutable."""

    def __init__(self, grid):
        g = np.ascontiguousarray(grid, dtype=np.float64)
        if g.ndim != 2:
            raise ShapeError("mask grid must be 2-D")
        if not np.all((g == 0.0) | (g == 1.0)):
            raise InvalidArgumentError("mask grid must be strictly binary")
        g.flags.writeable = False
        self.grid = g

    @property
    def shape(self) -> tuple:
        return self.grid.shape

    def __eq__(self, other):
        return isinstance(other, MaskPosition) and np.array_equal(self.grid, other.grid)

    def __hash__(self):
        return hash((self.grid.shape, self.grid.tobytes()))


Position = Union[Box, MaskPosition]


@dataclass(frozen=True)
class TextAttribute:
    tokens: tuple

    def __init__(self, tokens):
        object.__setattr__(self, "tokens", tuple(tokens))


@dataclass(frozen=True)
class ImageAttribute:
    image_id: str


Attribute = Union[TextAttribute, ImageAttribute]


@dataclass(frozen=True)
class InstanceDescription:
    """One instance: what it is (text tokens or a reference image) and where."""

    attribute: Attribute
    position: Position


@dataclass
class GroundingEmbedding:
    """Sequence [position vectors ; attribute vectors], position first."""

    vectors: np.ndarray
    position_prefix_len: int


# ---------------------------------------------------------------------------
# hash-seeded embeddings
# ---------------------------------------------------------------------------


def _hash_component(context: str, index: int) -> float:
    digest = hashlib.blake2b(
        f"{context}|{index}".encode("utf-8"), digest_size=8
    ).digest()
    u = int.from_bytes(digest, "little")
    return u / float(1 << 63) - 1.0  # [-1, 1)


def _hash_unit_vector(context: str, d: int) -> np.ndarray:
    v = np.array([_hash_component(context, j) for j in range(d)])
    norm = np.linalg.norm(v)
    if norm < 1e-12:  # unreachable in practice, keeps the contract airtight
        v[0] = 1.0
        norm = 1.0
    return v / norm


def tokenize(text: str) -> list:
    """Whitespace tokenization; nothing fancier by design."""
    return text.split()


def encode_text(tokens, d: int) -> np.ndarray:
    """Encode tokens as L x d unit-norm rows, deterministically."""
    tokens = list(tokens)
    if not tokens:
        raise InvalidArgumentError("token list must be non-empty")
    if d < 2:
        raise InvalidArgumentError("embedding dimension must be >= 2")
    return np.stack([_hash_unit_vector(f"text|{t}", d) for t in tokens])


def encode_prompt(text: str, d: int) -> np.ndarray:
    """Encode free text; an empty prompt falls back to the null token."""
    tokens = tokenize(text)
    return encode_text(tokens if tokens else [NULL_TOKEN], d)


# ---------------------------------------------------------------------------
# reference-image store and projector
# ---------------------------------------------------------------------------


class ReferenceImageStore:
    """Read-only id -> image file mapping with a built-in blank-white pad.

    Images are PNG/PPM files; the embedding is keyed on the id together with
    a digest of the file bytes, so renaming content changes nothing while
    editing pixels does.
    """

    def __init__(self, images: Optional[dict] = None, base_dir: Optional[Path] = None):
        self._digests = {BLANK_IMAGE_ID: _BLANK_IMAGE_DIGEST}
        base = Path(base_dir) if base_dir is not None else None
        for image_id, path in (images or {}).items():
            self.register(image_id, (base / path) if base else Path(path))

    def register(self, image_id: str, path) -> None:
        path = Path(path)
        if not path.is_file():
            raise NotFoundError(f"reference image file missing: {path}")
        from PIL import Image

        with Image.open(path) as im:
            im.verify()
        self._digests[image_id] = hashlib.sha256(path.read_bytes()).hexdigest()

    def ids(self) -> list:
        return sorted(self._digests)

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._digests

    def encode_image(self, image_id: str, d: int, n_tokens: int = 4) -> np.ndarray:
        """Deterministic L x d embedding for a registered image id."""
        if image_id not in self._digests:
            raise NotFoundError(f"unknown reference image id: {image_id!r}")
        if d < 2:
            raise InvalidArgumentError("embedding dimension must be >= 2")
        if n_tokens < 1:
            raise InvalidArgumentError("n_tokens must be >= 1")
        digest = self._digests[image_id]
        return np.stack(
            [
                _hash_unit_vector(f"image|{image_id}|{digest}|{i}", d)
                for i in range(n_tokens)
            ]
        )


@dataclass
class ProjectorParams:
    """Residual two-layer perceptron refining raw image embeddings.

    out = x + tanh(x w1 + b1) w2 + b2, so zeroing w2/b2 makes it the
    identity (the documented identity initialization).
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def identity(cls, d: int, hidden: Optional[int] = None) -> "ProjectorParams":
        h = hidden or d
        return cls(np.zeros((d, h)), np.zeros(h), np.zeros((h, d)), np.zeros(d))

    @classmethod
    def seeded(cls, d: int, hidden: int, rng, sigma: float = 0.02) -> "ProjectorParams":
        return cls(
            sigma * rng.standard_normal((d, hidden)),
            np.zeros(hidden),
            sigma * rng.standard_normal((hidden, d)),
            np.zeros(d),
        )


def project_image(embeddings, params: ProjectorParams) -> np.ndarray:
    x = as_tensor(embeddings, "image embeddings")
    if x.ndim != 2 or x.shape[1] != params.w1.shape[0]:
        raise ShapeError(
            f"embeddings {x.shape} incompatible with projector width {params.w1.shape[0]}"
        )
    return x + np.tanh(x @ params.w1 + params.b1) @ params.w2 + params.b2


# ---------------------------------------------------------------------------
# Fourier features and the grounding MLP
# ---------------------------------------------------------------------------


def fourier_embed(box: Box, frequencies: int) -> np.ndarray:
    """Fourier features of the four box coordinates.

    For each coordinate v and each k in [0, frequencies) the pair
    (sin(2^k pi v), cos(2^k pi v)) is emitted, coordinate-major, giving a
    vector of length 4 * 2 * frequencies.
    """
    if frequencies < 1:
        raise InvalidArgumentError("frequencies must be >= 1")
    out = np.empty(4 * 2 * frequencies)
    i = 0
    for v in box.as_tuple():
        for k in range(frequencies):
            angle = (2.0**k) * np.pi * v
            out[i] = np.sin(angle)
            out[i + 1] = np.cos(angle)
            i += 2
    return out


@dataclass
class GroundingMlpParams:
    """Two-layer tanh MLP lifting Fourier features to n_pos position vectors."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    n_pos: int
    d: int

    @classmethod
    def seeded(
        cls, in_dim: int, hidden: int, n_pos: int, d: int, rng, sigma: float = 0.02
    ) -> "GroundingMlpParams":
        return cls(
            sigma * rng.standard_normal((in_dim, hidden)),
            np.zeros(hidden),
            sigma * rng.standard_normal((hidden, n_pos * d)),
            np.zeros(n_pos * d),
            n_pos,
            d,
        )


def grounding_mlp(fourier_vec, params: GroundingMlpParams) -> np.ndarray:
    """Map a Fourier feature vector to (n_pos, d) position vectors."""
    vec = as_tensor(fourier_vec, "fourier features")
    if vec.ndim != 1 or vec.shape[0] != params.w1.shape[0]:
        raise ConfigError(
            f"fourier length {vec.shape} does not match MLP input {params.w1.shape[0]}"
        )
    hidden = np.tanh(vec @ params.w1 + params.b1)
    out = hidden @ params.w2 + params.b2
    return out.reshape(params.n_pos, params.d)


def make_grounding_embedding(W_pos, W_attr) -> GroundingEmbedding:
    """Concatenate position vectors (first) with attribute vectors."""
    pos = as_tensor(W_pos, "position vectors")
    attr = as_tensor(W_attr, "attribute vectors")
    if pos.ndim != 2 or attr.ndim != 2:
        raise ShapeError("grounding inputs must be rank-2")
    if attr.shape[0] < 1:
        raise InvalidArgumentError("attribute sequence must be non-empty")
    if pos.shape[1] != attr.shape[1]:
        raise ShapeError(
            f"dimension mismatch: position d={pos.shape[1]}, attribute d={attr.shape[1]}"
        )
    return GroundingEmbedding(
        vectors=np.concatenate([pos, attr], axis=0),
        position_prefix_len=pos.shape[0],
    )


# ---------------------------------------------------------------------------
# position maps
# ---------------------------------------------------------------------------


def rasterize_position(position: Position, H: int, W: int) -> np.ndarray:
    """Rasterize a box or mask to a binary H x W map.

    Boxes use cell-center inclusion: a cell is 1 iff its center lies inside
    the closed box.  Masks must already be at the target resolution.
    """
    if H < 1 or W < 1:
        raise InvalidArgumentError("resolution must be >= 1 in both axes")
    if isinstance(position, Box):
        cx = (np.arange(W) + 0.5) / W
        cy = (np.arange(H) + 0.5) / H
        in_x = (position.x1 <= cx) & (cx <= position.x2)
        in_y = (position.y1 <= cy) & (cy <= position.y2)
        return np.outer(in_y, in_x).astype(np.float64)
    if isinstance(position, MaskPosition):
        if position.shape != (H, W):
            raise ShapeError(
                f"mask resolution {position.shape} != requested ({H}, {W})"
            )
        return position.grid.copy()
    raise InvalidArgumentError(f"unsupported position type: {type(position)!r}")


def mask_to_bbox(grid) -> Box:
    """Tight bounding box (on cell edges) of a binary map's support.

    An all-zero map returns the null box (0, 0, 0, 0).
    """
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 2:
        raise ShapeError("mask grid must be 2-D")
    ys, xs = np.nonzero(g)
    if ys.size == 0:
        return Box(0.0, 0.0, 0.0, 0.0)
    H, W = g.shape
    return Box(
        xs.min() / W,
        ys.min() / H,
        (xs.max() + 1) / W,
        (ys.max() + 1) / H,
    )


def scale_position_map(grid, H: int, W: int) -> np.ndarray:
    """Nearest-neighbor resample of a binary map to H x W."""
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 2:
        raise ShapeError("mask grid must be 2-D")
    if H < 1 or W < 1:
        raise InvalidArgumentError("resolution must be >= 1 in both axes")
    sh, sw = g.shape
    rows = np.minimum(((np.arange(H) + 0.5) * sh / H).astype(int), sh - 1)
    cols = np.minimum(((np.arange(W) + 0.5) * sw / W).astype(int), sw - 1)
    return g[np.ix_(rows, cols)].copy()


def rasterize_at_resolution(position: Position, H: int, W: int) -> np.ndarray:
    """Rasterize at any resolution: boxes directly, masks by resampling."""
    if isinstance(position, MaskPosition):
        if position.shape == (H, W):
            return position.grid.copy()
        return scale_position_map(position.grid, H, W)
    return rasterize_position(position, H, W)


def position_as_box(position: Position) -> Box:
    """Standardize any position format to a bounding box."""
    if isinstance(position, Box):
        return position
    return mask_to_bbox(position.grid)


def is_null_position(position: Position) -> bool:
    if isinstance(position, Box):
        return position.is_null
    return not np.any(position.grid)
