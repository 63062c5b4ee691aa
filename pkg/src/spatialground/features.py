"""Classifier input vectors built from box geometry and word embeddings.

Schemas:
  GEOM2D      normalized 2D box centers and extents, target then reference (8)
  GEOM3D      T, row-major R, D for target then reference, meters (30)
  *_LNG       the geometric vector plus the two label embeddings (2*E more)

2D values are normalized by the image size so the classifier is resolution
independent; 3D values stay in meters because physical scale matters for
relations like "on".  Multiword labels embed as the mean of their per-word
vectors; out-of-vocabulary words map to the zero vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import BBox2D
from .errors import DataIoError, ParseError, SchemaMismatch, ValidationError
from .geometry import OrientedBox3D

GEOM2D = "GEOM2D"
GEOM3D = "GEOM3D"
GEOM2D_LNG = "GEOM2D_LNG"
GEOM3D_LNG = "GEOM3D_LNG"

SCHEMAS = (GEOM2D, GEOM3D, GEOM2D_LNG, GEOM3D_LNG)
_BASE_LENGTH = {GEOM2D: 8, GEOM3D: 30}


def schema_length(schema_id: str, embedding_dim: int = 0) -> int:
    if schema_id in _BASE_LENGTH:
        return _BASE_LENGTH[schema_id]
    if schema_id == GEOM2D_LNG:
        return 8 + 2 * embedding_dim
    if schema_id == GEOM3D_LNG:
        return 30 + 2 * embedding_dim
    raise ValidationError(f"unknown feature schema {schema_id!r}")


def needs_language(schema_id: str) -> bool:
    return schema_id.endswith("_LNG")


def base_schema(schema_id: str) -> str:
    return schema_id[:-4] if needs_language(schema_id) else schema_id


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    schema_id: str

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64).reshape(-1))
        if self.schema_id not in SCHEMAS:
            raise ValidationError(f"unknown feature schema {self.schema_id!r}")
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("feature vector contains non-finite values")

    def __len__(self) -> int:
        return len(self.values)


class EmbeddingTable:
    """Fixed word -> vector lookup loaded from a text table.

    File format: a header line "E N" followed by N lines "word v1 ... vE".
    """

    def __init__(self, dimension: int, entries: dict[str, np.ndarray]):
        self.dimension = dimension
        self.entries = {}
        for word, vec in entries.items():
            vec = np.asarray(vec, dtype=np.float64).reshape(-1)
            if vec.shape[0] != dimension:
                raise ValidationError(f"embedding for {word!r} has wrong dimension")
            self.entries[word] = vec

    @classmethod
    def load(cls, path: str) -> "EmbeddingTable":
        try:
            with open(path, "r", encoding="utf-8") as f:
                lines = f.read().splitlines()
        except OSError as e:
            raise DataIoError(f"cannot read embedding table {path}: {e}") from e
        if not lines:
            raise ParseError(f"embedding table {path}: empty file")
        header = lines[0].split()
        if len(header) != 2:
            raise ParseError(f"embedding table {path}: header must be 'E N'")
        try:
            dim, count = int(header[0]), int(header[1])
        except ValueError:
            raise ParseError(f"embedding table {path}: non-integer header") from None
        entries: dict[str, np.ndarray] = {}
        for ln in lines[1 : count + 1]:
            parts = ln.split()
            if len(parts) != dim + 1:
                raise ParseError(f"embedding table {path}: bad row {ln[:40]!r}")
            entries[parts[0]] = np.array([float(v) for v in parts[1:]])
        if len(entries) != count:
            raise ParseError(f"embedding table {path}: expected {count} rows")
        return cls(dim, entries)

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"{self.dimension} {len(self.entries)}\n")
            for word in sorted(self.entries):
                vec = " ".join(repr(float(v)) for v in self.entries[word])
                f.write(f"{word} {vec}\n")

    def embed(self, label: str) -> np.ndarray:
        """Mean of per-word vectors; unknown words contribute zeros."""
        words = label.split()
        if not words:
            return np.zeros(self.dimension)
        vecs = [self.entries.get(w, np.zeros(self.dimension)) for w in words]
        return np.mean(vecs, axis=0)


def feat3d(target: OrientedBox3D, reference: OrientedBox3D) -> FeatureVector:
    """[T, R row-major, D] for target then reference; length 30."""
    def flat(box: OrientedBox3D) -> np.ndarray:
        return np.concatenate([box.T, box.R.reshape(-1), box.D])

    return FeatureVector(np.concatenate([flat(target), flat(reference)]), GEOM3D)


def feat2d(target: BBox2D, reference: BBox2D, image_width: int, image_height: int) -> FeatureVector:
    """[x_c, y_c, w, h] normalized by image size, target then reference."""
    if image_width <= 0 or image_height <= 0:
        raise ValidationError("image size must be positive")

    def flat(box: BBox2D) -> list[float]:
        cx, cy = box.center
        return [cx / image_width, cy / image_height, box.w / image_width, box.h / image_height]

    return FeatureVector(np.array(flat(target) + flat(reference)), GEOM2D)


def with_language(
    base: FeatureVector,
    target_label: str,
    reference_label: str,
    table: EmbeddingTable,
) -> FeatureVector:
    """Append the two label embeddings and upgrade the schema to *_LNG."""
    if base.schema_id not in (GEOM2D, GEOM3D):
        raise SchemaMismatch(f"cannot add language to schema {base.schema_id!r}")
    values = np.concatenate([base.values, table.embed(target_label), table.embed(reference_label)])
    return FeatureVector(values, base.schema_id + "_LNG")


def build_pair_features(
    schema_id: str,
    target_bbox: BBox2D,
    reference_bbox: BBox2D,
    target_box3d: OrientedBox3D | None,
    reference_box3d: OrientedBox3D | None,
    image_width: int,
    image_height: int,
    target_label: str = "",
    reference_label: str = "",
    table: EmbeddingTable | None = None,
) -> FeatureVector:
    """Assemble the feature vector a model with `schema_id` expects."""
    if base_schema(schema_id) == GEOM3D:
        if target_box3d is None or reference_box3d is None:
            raise ValidationError("3D feature schema requires lifted boxes")
        vec = feat3d(target_box3d, reference_box3d)
    else:
        vec = feat2d(target_bbox, reference_bbox, image_width, image_height)
    if needs_language(schema_id):
        if table is None:
            raise ValidationError(f"schema {schema_id} requires an embedding table")
        vec = with_language(vec, target_label, reference_label, table)
    return vec
