"""HTTP service exposing the grounding engine.

The server loads one relation model at startup and answers grounding and
classification queries against it; scene manifests are referenced by path
(the service shares a filesystem with its clients, as in an on-robot
deployment).  Batch dataset work stays in the CLI.
"""

from __future__ import annotations

import os
from typing import Optional

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import __version__
from .classifier import MlpParams, RelationDistribution, forward, load_model
from .dataio import (
    canonical_relation,
    depth_path_for,
    Expression,
    load_depth,
    load_manifest,
)
from .errors import (
    NoCandidates,
    NoValidPairs,
    ParseError,
    PipelineError,
    SchemaMismatch,
    ValidationError,
)
from .features import EmbeddingTable, base_schema, feat3d, GEOM3D, needs_language, with_language
from .geometry import OrientedBox3D
from .ranking import RankingConfig, ground, result_record


class Box3DModel(BaseModel):
    """Oriented 3D box: translation, row-major rotation, extents."""

    t: list[float] = Field(min_length=3, max_length=3)
    r: list[float] = Field(min_length=9, max_length=9, description="row-major 3x3 rotation")
    d: list[float] = Field(min_length=3, max_length=3)

    def to_box(self) -> OrientedBox3D:
        import numpy as np

        return OrientedBox3D(np.array(self.t), np.array(self.r).reshape(3, 3), np.array(self.d))


class ClassifyRequest(BaseModel):
    target_box: Box3DModel
    reference_box: Box3DModel
    target_label: str = ""
    reference_label: str = ""


class ClassifyResponse(BaseModel):
    probs: dict[str, float]
    mode: str


class GroundRequest(BaseModel):
    manifest_path: str
    target: str
    relation: str
    reference: str
    k: int = 3
    detector_profile: str = "detic"
    explain: bool = False


class GroundResponse(BaseModel):
    scene_id: str
    expression: dict
    target_bbox: Optional[list[float]]
    reference_bbox: Optional[list[float]]
    joint_score: Optional[float]
    relation_prob: Optional[float]
    status: str
    per_pair_table: Optional[list[dict]] = None


class ModelInfo(BaseModel):
    schema_id: str
    mode: str
    vocabulary: list[str]
    input_dim: int
    hidden_dims: tuple[int, int]


class HealthResponse(BaseModel):
    status: str
    version: str
    model_loaded: bool


class ModelStore:
    def __init__(self, model_path: Optional[str] = None, embeddings_path: Optional[str] = None):
        self.params: Optional[MlpParams] = None
        self.table: Optional[EmbeddingTable] = None
        if model_path:
            self.params = load_model(model_path)
        if embeddings_path:
            self.table = EmbeddingTable.load(embeddings_path)

    def require(self) -> MlpParams:
        if self.params is None:
            raise HTTPException(status_code=409, detail="no relation model loaded")
        if needs_language(self.params.schema_id) and self.table is None:
            raise HTTPException(
                status_code=409,
                detail=f"model schema {self.params.schema_id} needs an embedding table",
            )
        return self.params


def create_app(model_path: Optional[str] = None, embeddings_path: Optional[str] = None) -> FastAPI:
    app = FastAPI(title="spatialground", version=__version__)
    store = ModelStore(model_path, embeddings_path)
    app.state.store = store

    @app.get("/health", response_model=HealthResponse)
    def health():
        return HealthResponse(status="ok", version=__version__, model_loaded=store.params is not None)

    @app.get("/model", response_model=ModelInfo)
    def model_info():
        params = store.require()
        return ModelInfo(
            schema_id=params.schema_id,
            mode=params.mode,
            vocabulary=list(params.vocabulary.names),
            input_dim=params.input_dim,
            hidden_dims=params.hidden_dims,
        )

    @app.post("/classify", response_model=ClassifyResponse)
    def classify(req: ClassifyRequest):
        params = store.require()
        if base_schema(params.schema_id) != GEOM3D:
            raise HTTPException(
                status_code=409,
                detail=f"loaded model expects {params.schema_id} features, not 3D boxes",
            )
        try:
            vec = feat3d(req.target_box.to_box(), req.reference_box.to_box())
            if needs_language(params.schema_id):
                vec = with_language(vec, req.target_label, req.reference_label, store.table)
            dist: RelationDistribution = forward(params, vec)
        except (ValidationError, SchemaMismatch) as e:
            raise HTTPException(status_code=400, detail=str(e)) from e
        return ClassifyResponse(
            probs={name: float(p) for name, p in zip(params.vocabulary.names, dist.probs)},
            mode=dist.mode,
        )

    @app.post("/ground", response_model=GroundResponse)
    def ground_endpoint(req: GroundRequest):
        params = store.require()
        if not os.path.exists(req.manifest_path):
            raise HTTPException(status_code=404, detail=f"manifest {req.manifest_path} not found")
        try:
            manifest = load_manifest(req.manifest_path)
        except (ParseError, ValidationError) as e:
            raise HTTPException(status_code=400, detail=str(e)) from e
        expr = Expression(req.target, canonical_relation(req.relation), req.reference)
        if expr.relation not in manifest.vocabulary:
            raise HTTPException(
                status_code=400, detail=f"relation {req.relation!r} not in scene vocabulary"
            )
        try:
            depth = None
            if base_schema(params.schema_id) == GEOM3D:
                depth = load_depth(
                    depth_path_for(manifest, req.manifest_path),
                    manifest.intrinsics.width,
                    manifest.intrinsics.height,
                )
            cfg = RankingConfig(k=req.k, detector_profile=req.detector_profile)
            result = ground(manifest, expr, params, depth, cfg, table=store.table, explain=req.explain)
            rec = result_record(manifest.scene_id, expr, result, "ok", explain=req.explain)
        except NoCandidates as e:
            rec = result_record(manifest.scene_id, expr, None, f"no_candidates:{e.role}")
        except NoValidPairs:
            rec = result_record(manifest.scene_id, expr, None, "no_valid_pairs")
        except (ParseError, ValidationError) as e:
            raise HTTPException(status_code=400, detail=str(e)) from e
        except PipelineError as e:
            raise HTTPException(status_code=500, detail=str(e)) from e
        return GroundResponse(**rec)

    return app
