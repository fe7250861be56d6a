"""Scene specifications and their strict, versioned JSON form.

A scene is the unit of generation: one global text, a list of instance
descriptions (text-or-image attribute, box-or-mask position), the feature
resolution and a seed.  Parsing is strict: unknown fields anywhere are
rejected with a JSON-pointer-style path.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .encoders import (
    Box,
    ImageAttribute,
    InstanceDescription,
    MaskPosition,
    ReferenceImageStore,
    TextAttribute,
    tokenize,
)
from .errors import InvalidArgumentError, SchemaError

SCENE_SCHEMA_VERSION = 1


@dataclass
class SceneSpec:
    """Global description plus per-instance attribute/position pairs."""

    global_text: str
    instances: Tuple[InstanceDescription, ...]
    height: int
    width: int
    seed: int
    store: ReferenceImageStore = field(default_factory=ReferenceImageStore)
    reference_image_paths: dict = field(default_factory=dict)
    version: int = SCENE_SCHEMA_VERSION

    def empty_variant(self) -> "SceneSpec":
        """The unconditional counterpart: no text, no instances."""
        return replace(self, global_text="", instances=())

    @property
    def resolution(self) -> Tuple[int, int]:
        return (self.height, self.width)


# ---------------------------------------------------------------------------
# strict JSON parsing
# ---------------------------------------------------------------------------


def _check_keys(obj, required, optional, path):
    if not isinstance(obj, dict):
        raise SchemaError("expected an object", path)
    for key in obj:
        if key not in required and key not in optional:
            raise SchemaError(f"unknown field {key!r}", f"{path}/{key}")
    for key in required:
        if key not in obj:
            raise SchemaError(f"missing required field {key!r}", path)


def _as_int(value, path, minimum=None):
    if not isinstance(value, int) or isinstance(value, bool):
        raise SchemaError("expected an integer", path)
    if minimum is not None and value < minimum:
        raise SchemaError(f"must be >= {minimum}", path)
    return value


def _as_str(value, path):
    if not isinstance(value, str):
        raise SchemaError("expected a string", path)
    return value


def _as_number(value, path):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaError("expected a number", path)
    return float(value)


def _parse_attribute(obj, path):
    _check_keys(obj, ["type"], ["text", "image_id"], path)
    kind = _as_str(obj["type"], f"{path}/type")
    if kind == "text":
        if "text" not in obj:
            raise SchemaError("text attribute needs a 'text' field", path)
        return TextAttribute(tokenize(_as_str(obj["text"], f"{path}/text")))
    if kind == "image":
        if "image_id" not in obj:
            raise SchemaError("image attribute needs an 'image_id' field", path)
        return ImageAttribute(_as_str(obj["image_id"], f"{path}/image_id"))
    raise SchemaError(f"unknown attribute type {kind!r}", f"{path}/type")


def _parse_position(obj, path, resolution):
    _check_keys(obj, ["type"], ["box", "grid"], path)
    kind = _as_str(obj["type"], f"{path}/type")
    if kind == "box":
        coords = obj.get("box")
        if not isinstance(coords, list) or len(coords) != 4:
            raise SchemaError("box must be a list of four numbers", f"{path}/box")
        vals = [_as_number(v, f"{path}/box/{i}") for i, v in enumerate(coords)]
        try:
            return Box(*vals)
        except InvalidArgumentError as exc:
            raise SchemaError(str(exc), f"{path}/box") from exc
    if kind == "mask":
        grid = obj.get("grid")
        if not isinstance(grid, list) or not grid:
            raise SchemaError("mask needs a non-empty 'grid' of rows", f"{path}/grid")
        H, W = resolution
        if len(grid) != H:
            raise SchemaError(f"mask has {len(grid)} rows, scene height is {H}", f"{path}/grid")
        rows = []
        for i, row in enumerate(grid):
            if not isinstance(row, list) or len(row) != W:
                raise SchemaError(f"row must have {W} entries", f"{path}/grid/{i}")
            for j, v in enumerate(row):
                if v not in (0, 1):
                    raise SchemaError("mask entries must be 0 or 1", f"{path}/grid/{i}/{j}")
            rows.append([float(v) for v in row])
        return MaskPosition(np.array(rows))
    raise SchemaError(f"unknown position type {kind!r}", f"{path}/type")


def parse_scene(doc: dict, base_dir: Optional[Path] = None) -> SceneSpec:
    """Validate and materialize a scene document (strict mode)."""
    _check_keys(
        doc,
        ["version", "global_text", "resolution", "seed", "instances"],
        ["reference_images"],
        "",
    )
    version = _as_int(doc["version"], "/version", minimum=1)
    if version != SCENE_SCHEMA_VERSION:
        raise SchemaError(
            f"unsupported scene schema version {version}", "/version"
        )
    res = doc["resolution"]
    _check_keys(res, ["height", "width"], [], "/resolution")
    height = _as_int(res["height"], "/resolution/height", minimum=1)
    width = _as_int(res["width"], "/resolution/width", minimum=1)
    seed = _as_int(doc["seed"], "/seed", minimum=0)
    global_text = _as_str(doc["global_text"], "/global_text")

    ref_paths = {}
    refs = doc.get("reference_images", {})
    if not isinstance(refs, dict):
        raise SchemaError("expected an object of id -> path", "/reference_images")
    for image_id, rel in refs.items():
        ref_paths[image_id] = _as_str(rel, f"/reference_images/{image_id}")
    store = ReferenceImageStore(ref_paths, base_dir=base_dir)

    if not isinstance(doc["instances"], list):
        raise SchemaError("expected a list", "/instances")
    instances = []
    for i, inst in enumerate(doc["instances"]):
        path = f"/instances/{i}"
        _check_keys(inst, ["attribute", "position"], [], path)
        attribute = _parse_attribute(inst["attribute"], f"{path}/attribute")
        position = _parse_position(inst["position"], f"{path}/position", (height, width))
        if isinstance(attribute, ImageAttribute) and attribute.image_id not in store:
            raise SchemaError(
                f"image id {attribute.image_id!r} not in reference_images",
                f"{path}/attribute/image_id",
            )
        instances.append(InstanceDescription(attribute, position))

    return SceneSpec(
        global_text=global_text,
        instances=tuple(instances),
        height=height,
        width=width,
        seed=seed,
        store=store,
        reference_image_paths=ref_paths,
        version=version,
    )


def scene_to_dict(scene: SceneSpec) -> dict:
    """Serialize back to the JSON document form (round-trips parse_scene)."""
    instances = []
    for inst in scene.instances:
        if isinstance(inst.attribute, TextAttribute):
            attribute = {"type": "text", "text": " ".join(inst.attribute.tokens)}
        else:
            attribute = {"type": "image", "image_id": inst.attribute.image_id}
        if isinstance(inst.position, Box):
            position = {"type": "box", "box": list(inst.position.as_tuple())}
        else:
            position = {
                "type": "mask",
                "grid": [[int(v) for v in row] for row in inst.position.grid],
            }
        instances.append({"attribute": attribute, "position": position})
    doc = {
        "version": scene.version,
        "global_text": scene.global_text,
        "resolution": {"height": scene.height, "width": scene.width},
        "seed": scene.seed,
        "instances": instances,
    }
    if scene.reference_image_paths:
        doc["reference_images"] = dict(scene.reference_image_paths)
    return doc
