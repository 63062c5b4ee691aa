"""Scene and dataset file formats.

A scene is stored as one JSON manifest (detections, expressions, intrinsics,
vocabulary) plus a 16-bit grayscale PNG depth image in millimeters.  The
manifest writer is canonical (sorted keys, two-space indent, stable float
formatting), so load -> save -> load is a byte-level fixed point and outputs
are diffable across runs and tools.

Masks are run-length encoded column-major, alternating background/foreground
counts starting with background.  See docs/formats.md for the field-by-field
schema.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np
from PIL import Image

from .errors import (
    DataIoError,
    DimensionMismatch,
    ParseError,
    ValidationError,
)

MULTICLASS = "multiclass"
MULTILABEL = "multilabel"

# Relation synonyms accepted on input surfaces (CLI, service); the stored
# names are always the canonical ones.
_RELATION_ALIASES = {
    "left of": "left",
    "to the left of": "left",
    "right of": "right",
    "to the right of": "right",
    "on top of": "on",
    "inside": "in",
    "in front": "in front of",
    "front": "in front of",
}


def canonical_relation(name: str) -> str:
    key = name.strip().lower()
    return _RELATION_ALIASES.get(key, key)


@dataclass(frozen=True)
class RelationVocabulary:
    """Ordered relation label set; index positions are stable."""

    names: tuple[str, ...]
    mode: str = MULTILABEL

    def __post_init__(self):
        if not self.names:
            raise ValidationError("vocabulary.names: must be non-empty")
        if len(set(self.names)) != len(self.names):
            raise ValidationError("vocabulary.names: duplicate relation name")
        if self.mode not in (MULTICLASS, MULTILABEL):
            raise ValidationError(f"vocabulary.mode: unknown mode {self.mode!r}")

    def __len__(self) -> int:
        return len(self.names)

    def __contains__(self, name: str) -> bool:
        return name in self.names

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ValidationError(f"relation {name!r} not in vocabulary") from None


# Directional six used for real-indoor-style multilabel annotation.
VOCAB_DIRECTIONAL = RelationVocabulary(
    ("right", "left", "above", "below", "behind", "in front of"), MULTILABEL
)
# Surface-contact six used for synthetic-room-style multiclass annotation.
VOCAB_SURFACE = RelationVocabulary(
    ("on", "in", "left", "right", "behind", "in front of"), MULTICLASS
)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError("intrinsics.fx/fy: focal lengths must be > 0")
        if not (0 <= self.cx < self.width):
            raise ValidationError("intrinsics.cx: principal point outside image")
        if not (0 <= self.cy < self.height):
            raise ValidationError("intrinsics.cy: principal point outside image")


@dataclass
class DepthImage:
    """Depth grid in integer millimeters; 0 marks invalid pixels."""

    values: np.ndarray  # (height, width) uint16

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.uint16)
        if self.values.ndim != 2:
            raise ValidationError("depth.values: expected a 2D grid")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def meters(self) -> np.ndarray:
        """Float depth in meters with invalid pixels as 0.0."""
        return self.values.astype(np.float64) / 1000.0


@dataclass(frozen=True)
class BBox2D:
    """Axis-aligned 2D box, top-left corner plus extents, in pixels."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise ValidationError("bbox.w/h: extents must be >= 0")

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    def clamped(self, width: int, height: int) -> "BBox2D":
        x0 = min(max(self.x, 0.0), float(width))
        y0 = min(max(self.y, 0.0), float(height))
        x1 = min(max(self.x + self.w, 0.0), float(width))
        y1 = min(max(self.y + self.h, 0.0), float(height))
        return BBox2D(x0, y0, x1 - x0, y1 - y0)

    def as_list(self) -> list[float]:
        return [float(self.x), float(self.y), float(self.w), float(self.h)]


@dataclass(frozen=True)
class BinaryMask:
    """Column-major RLE mask: counts alternate background/foreground,
    starting with background."""

    width: int
    height: int
    runs: tuple[int, ...]

    def __post_init__(self):
        if any(r < 0 for r in self.runs):
            raise ValidationError("mask.runs: counts must be >= 0")
        if sum(self.runs) != self.width * self.height:
            raise ValidationError("mask.runs: counts must sum to width*height")

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "BinaryMask":
        """Encode a (height, width) boolean array."""
        arr = np.asarray(arr, dtype=bool)
        h, w = arr.shape
        flat = arr.flatten(order="F").astype(np.int8)
        if flat.size == 0:
            return cls(w, h, ())
        changes = np.flatnonzero(np.diff(flat)) + 1
        bounds = np.concatenate(([0], changes, [flat.size]))
        runs = np.diff(bounds).tolist()
        if flat[0] == 1:  # convention: first count is background
            runs = [0] + runs
        return cls(w, h, tuple(int(r) for r in runs))

    @classmethod
    def from_pixels(cls, pixels: Iterable[tuple[int, int]], width: int, height: int) -> "BinaryMask":
        arr = np.zeros((height, width), dtype=bool)
        for x, y in pixels:
            arr[y, x] = True
        return cls.from_array(arr)

    def to_array(self) -> np.ndarray:
        """Decode to a (height, width) boolean array."""
        flat = np.zeros(self.width * self.height, dtype=bool)
        pos = 0
        fg = False
        for count in self.runs:
            if fg:
                flat[pos : pos + count] = True
            pos += count
            fg = not fg
        return flat.reshape((self.height, self.width), order="F")

    def decode(self) -> set[tuple[int, int]]:
        """Foreground pixel coordinates as a set of (x, y)."""
        ys, xs = np.nonzero(self.to_array())
        return set(zip(xs.tolist(), ys.tolist()))

    def foreground_count(self) -> int:
        return sum(self.runs[1::2])


@dataclass(frozen=True)
class Detection2D:
    """One scored candidate box from a detector query."""

    label: str
    score: float
    bbox: BBox2D
    mask: Optional[BinaryMask] = None

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValidationError(f"detection.score: {self.score} outside [0, 1]")


@dataclass(frozen=True)
class Expression:
    """A referring triplet <target, relation, reference> with optional
    ground truth.  gt_target_alts carries additional acceptable target boxes
    when several instances satisfy the same triplet."""

    target_label: str
    relation: str
    reference_label: str
    gt_target_bbox: Optional[BBox2D] = None
    gt_reference_bbox: Optional[BBox2D] = None
    gt_target_alts: tuple[BBox2D, ...] = ()

    def triplet(self) -> tuple[str, str, str]:
        return (self.target_label, self.relation, self.reference_label)

    def gt_target_boxes(self) -> tuple[BBox2D, ...]:
        boxes = () if self.gt_target_bbox is None else (self.gt_target_bbox,)
        return boxes + self.gt_target_alts


@dataclass
class SceneManifest:
    """One RGB-D frame with its detections and expressions."""

    scene_id: str
    rgb_path: str
    depth_path: str
    intrinsics: CameraIntrinsics
    detections: dict[str, list[Detection2D]] = field(default_factory=dict)
    expressions: list[Expression] = field(default_factory=list)
    vocabulary: RelationVocabulary = VOCAB_DIRECTIONAL

    def validate(self) -> None:
        for label, dets in self.detections.items():
            for i, det in enumerate(dets):
                if not (0.0 <= det.score <= 1.0):
                    raise ValidationError(
                        f"detections[{label!r}][{i}].score: outside [0, 1]"
                    )
        for i, expr in enumerate(self.expressions):
            if expr.relation not in self.vocabulary:
                raise ValidationError(
                    f"expressions[{i}].relation: {expr.relation!r} not in vocabulary"
                )
            for role, lbl in (("target", expr.target_label), ("reference", expr.reference_label)):
                if lbl not in self.detections:
                    raise ValidationError(
                        f"expressions[{i}].{role}: label {lbl!r} missing from detections"
                    )


# ---------------------------------------------------------------------------
# Canonical JSON serialization


def dumps_canonical(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=True) + "\n"


def _bbox_from_list(v, where: str) -> BBox2D:
    if not (isinstance(v, list) and len(v) == 4):
        raise ValidationError(f"{where}: expected [x, y, w, h]")
    try:
        return BBox2D(*(float(c) for c in v))
    except (TypeError, ValueError):
        raise ValidationError(f"{where}: non-numeric box component") from None


def _mask_from_dict(v, where: str) -> BinaryMask:
    if not isinstance(v, dict) or "size" not in v or "runs" not in v:
        raise ValidationError(f"{where}: expected {{size: [h, w], runs: [...]}}")
    size = v["size"]
    if not (isinstance(size, list) and len(size) == 2):
        raise ValidationError(f"{where}.size: expected [height, width]")
    runs = v["runs"]
    if not isinstance(runs, list) or any(not isinstance(r, int) or r < 0 for r in runs):
        raise ValidationError(f"{where}.runs: expected non-negative integers")
    h, w = int(size[0]), int(size[1])
    if sum(runs) != w * h:
        raise ValidationError(f"{where}.runs: counts must sum to width*height")
    return BinaryMask(w, h, tuple(runs))


def manifest_from_dict(doc: dict) -> SceneManifest:
    """Build and validate a SceneManifest from a parsed manifest document."""
    if not isinstance(doc, dict):
        raise ValidationError("manifest: top level must be an object")
    for key in ("scene_id", "rgb_path", "depth_path", "intrinsics", "detections", "expressions"):
        if key not in doc:
            raise ValidationError(f"manifest.{key}: missing required field")

    intr = doc["intrinsics"]
    if not isinstance(intr, dict):
        raise ValidationError("intrinsics: expected an object")
    try:
        intrinsics = CameraIntrinsics(
            fx=float(intr["fx"]),
            fy=float(intr["fy"]),
            cx=float(intr["cx"]),
            cy=float(intr["cy"]),
            width=int(intr["width"]),
            height=int(intr["height"]),
        )
    except KeyError as e:
        raise ValidationError(f"intrinsics.{e.args[0]}: missing field") from None

    vdoc = doc.get("vocabulary", {"names": list(VOCAB_DIRECTIONAL.names), "mode": MULTILABEL})
    if not isinstance(vdoc, dict) or "names" not in vdoc:
        raise ValidationError("vocabulary: expected {names: [...], mode: ...}")
    vocabulary = RelationVocabulary(tuple(vdoc["names"]), vdoc.get("mode", MULTILABEL))

    detections: dict[str, list[Detection2D]] = {}
    ddoc = doc["detections"]
    if not isinstance(ddoc, dict):
        raise ValidationError("detections: expected a label -> list map")
    for label, lst in ddoc.items():
        if not isinstance(lst, list):
            raise ValidationError(f"detections[{label!r}]: expected a list")
        out = []
        for i, d in enumerate(lst):
            where = f"detections[{label!r}][{i}]"
            if not isinstance(d, dict):
                raise ValidationError(f"{where}: expected an object")
            score = d.get("score")
            if not isinstance(score, (int, float)) or not (0.0 <= float(score) <= 1.0):
                raise ValidationError(f"{where}.score: {score!r} outside [0, 1]")
            bbox = _bbox_from_list(d.get("bbox"), f"{where}.bbox").clamped(
                intrinsics.width, intrinsics.height
            )
            mask = None
            if d.get("mask") is not None:
                mask = _mask_from_dict(d["mask"], f"{where}.mask")
                if mask.width != intrinsics.width or mask.height != intrinsics.height:
                    raise ValidationError(f"{where}.mask: size differs from image size")
            out.append(Detection2D(str(d.get("label", label)), float(score), bbox, mask))
        detections[str(label)] = out

    expressions = []
    edoc = doc["expressions"]
    if not isinstance(edoc, list):
        raise ValidationError("expressions: expected a list")
    for i, e in enumerate(edoc):
        where = f"expressions[{i}]"
        if not isinstance(e, dict):
            raise ValidationError(f"{where}: expected an object")
        for key in ("target", "relation", "reference"):
            if key not in e:
                raise ValidationError(f"{where}.{key}: missing field")
        gt_t = _bbox_from_list(e["gt_target_bbox"], f"{where}.gt_target_bbox") if e.get("gt_target_bbox") is not None else None
        gt_r = _bbox_from_list(e["gt_reference_bbox"], f"{where}.gt_reference_bbox") if e.get("gt_reference_bbox") is not None else None
        alts = tuple(
            _bbox_from_list(b, f"{where}.gt_target_alts[{j}]")
            for j, b in enumerate(e.get("gt_target_alts", []))
        )
        expressions.append(
            Expression(str(e["target"]), str(e["relation"]), str(e["reference"]), gt_t, gt_r, alts)
        )

    manifest = SceneManifest(
        scene_id=str(doc["scene_id"]),
        rgb_path=str(doc["rgb_path"]),
        depth_path=str(doc["depth_path"]),
        intrinsics=intrinsics,
        detections=detections,
        expressions=expressions,
        vocabulary=vocabulary,
    )
    manifest.validate()
    return manifest


def manifest_to_dict(m: SceneManifest) -> dict:
    def det_doc(d: Detection2D) -> dict:
        doc = {"label": d.label, "score": float(d.score), "bbox": d.bbox.as_list()}
        if d.mask is not None:
            doc["mask"] = {"size": [d.mask.height, d.mask.width], "runs": list(d.mask.runs)}
        return doc

    def expr_doc(e: Expression) -> dict:
        doc = {"target": e.target_label, "relation": e.relation, "reference": e.reference_label}
        if e.gt_target_bbox is not None:
            doc["gt_target_bbox"] = e.gt_target_bbox.as_list()
        if e.gt_reference_bbox is not None:
            doc["gt_reference_bbox"] = e.gt_reference_bbox.as_list()
        if e.gt_target_alts:
            doc["gt_target_alts"] = [b.as_list() for b in e.gt_target_alts]
        return doc

    return {
        "scene_id": m.scene_id,
        "rgb_path": m.rgb_path,
        "depth_path": m.depth_path,
        "intrinsics": {
            "fx": float(m.intrinsics.fx),
            "fy": float(m.intrinsics.fy),
            "cx": float(m.intrinsics.cx),
            "cy": float(m.intrinsics.cy),
            "width": int(m.intrinsics.width),
            "height": int(m.intrinsics.height),
        },
        "detections": {label: [det_doc(d) for d in dets] for label, dets in m.detections.items()},
        "expressions": [expr_doc(e) for e in m.expressions],
        "vocabulary": {"names": list(m.vocabulary.names), "mode": m.vocabulary.mode},
    }


def load_manifest(path: str | os.PathLike) -> SceneManifest:
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise DataIoError(f"cannot read manifest {path}: {e}") from e
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"malformed manifest {path}: {e}") from e
    return manifest_from_dict(doc)


def save_manifest(m: SceneManifest, path: str | os.PathLike) -> None:
    try:
        with open(path, "w", encoding="utf-8") as f:
            f.write(dumps_canonical(manifest_to_dict(m)))
    except OSError as e:
        raise DataIoError(f"cannot write manifest {path}: {e}") from e


# ---------------------------------------------------------------------------
# Depth files: 16-bit grayscale PNG, millimeters, 0 = invalid.


def load_depth(path: str | os.PathLike, width: int, height: int) -> DepthImage:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except OSError as e:
        raise DataIoError(f"cannot read depth image {path}: {e}") from e
    if arr.ndim != 2:
        raise DimensionMismatch(f"depth image {path}: expected single channel")
    if arr.shape != (height, width):
        raise DimensionMismatch(
            f"depth image {path}: got {arr.shape[1]}x{arr.shape[0]}, expected {width}x{height}"
        )
    if arr.dtype not in (np.uint16, np.int32, np.uint8):
        raise DimensionMismatch(f"depth image {path}: unsupported dtype {arr.dtype}")
    values = arr.astype(np.uint16)
    if np.any(arr.astype(np.int64) != values.astype(np.int64)):
        raise DimensionMismatch(f"depth image {path}: values exceed 16-bit range")
    return DepthImage(values)


def save_depth(depth: DepthImage, path: str | os.PathLike) -> None:
    try:
        Image.fromarray(depth.values.astype(np.uint16)).save(path, format="PNG")
    except OSError as e:
        raise DataIoError(f"cannot write depth image {path}: {e}") from e


def depth_path_for(manifest: SceneManifest, manifest_path: str | os.PathLike) -> str:
    """Resolve the manifest's depth file relative to the manifest location."""
    base = os.path.dirname(os.fspath(manifest_path))
    return os.path.join(base, manifest.depth_path)


# ---------------------------------------------------------------------------
# Dataset index: a directory of manifests plus one index document.


@dataclass
class DatasetIndex:
    """Lists the manifests of one dataset split plus bookkeeping counts."""

    scenes: list[str]  # manifest paths relative to the index file
    vocabulary: RelationVocabulary
    relation_counts: dict[str, int] = field(default_factory=dict)

    def scene_paths(self, index_path: str | os.PathLike) -> list[str]:
        base = os.path.dirname(os.fspath(index_path))
        return [os.path.join(base, rel) for rel in self.scenes]


def save_index(index: DatasetIndex, path: str | os.PathLike) -> None:
    doc = {
        "scenes": list(index.scenes),
        "vocabulary": {"names": list(index.vocabulary.names), "mode": index.vocabulary.mode},
        "relation_counts": {k: int(v) for k, v in index.relation_counts.items()},
    }
    try:
        with open(path, "w", encoding="utf-8") as f:
            f.write(dumps_canonical(doc))
    except OSError as e:
        raise DataIoError(f"cannot write index {path}: {e}") from e


def load_index(path: str | os.PathLike) -> DatasetIndex:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except OSError as e:
        raise DataIoError(f"cannot read index {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ParseError(f"malformed index {path}: {e}") from e
    if not isinstance(doc, dict) or "scenes" not in doc or "vocabulary" not in doc:
        raise ValidationError("index: expected {scenes, vocabulary, relation_counts}")
    vocab = RelationVocabulary(
        tuple(doc["vocabulary"]["names"]), doc["vocabulary"].get("mode", MULTILABEL)
    )
    counts = {str(k): int(v) for k, v in doc.get("relation_counts", {}).items()}
    return DatasetIndex([str(s) for s in doc["scenes"]], vocab, counts)
