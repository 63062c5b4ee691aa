"""Dataset-level plumbing: turn labeled scene manifests into classifier
training matrices, and run grounding over every expression of a dataset.

Training pairs are assembled the same way the annotations were produced:
re-lift every detection, enumerate ordered pairs within the labeling
distance, and run the relation rules on the lifted boxes.  The stored
expression list is the grounding query set (it is deduplicated per triplet,
so it cannot reconstruct complete per-pair label sets when labels repeat);
re-running the deterministic rules reproduces the full annotation exactly.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autolabel import RelationRuleConfig, lift_scene, relation_oracle
from .classifier import LabeledFeatures, MlpParams
from .dataio import (
    MULTICLASS,
    BBox2D,
    Expression,
    SceneManifest,
    depth_path_for,
    load_depth,
    load_index,
    load_manifest,
)
from .errors import EmptyDataset, NoCandidates, NoValidPairs, PipelineError, ValidationError
from .features import EmbeddingTable, FeatureVector, build_pair_features, needs_language
from .geometry import DenoiseConfig
from .ranking import GroundingResult, RankingConfig, ground, ground_detector_only, result_record

logger = logging.getLogger(__name__)


def _bbox_key(b: BBox2D) -> tuple:
    return (b.x, b.y, b.w, b.h)


def scene_pair_samples(
    manifest: SceneManifest,
    manifest_path: str,
    schema_id: str,
    table: EmbeddingTable | None = None,
    denoise_cfg: DenoiseConfig = DenoiseConfig(),
    rules: RelationRuleConfig = RelationRuleConfig(),
) -> list[tuple[FeatureVector, object]]:
    """Labeled feature samples for one scene, one per annotated pair."""
    if needs_language(schema_id) and table is None:
        raise ValidationError(f"schema {schema_id} requires an embedding table")
    lifted = lift_scene(manifest, manifest_path, denoise_cfg)
    vocab = manifest.vocabulary

    samples: list[tuple[FeatureVector, object]] = []
    for i, t in enumerate(lifted):
        for j, r in enumerate(lifted):
            if i == j:
                continue
            if np.linalg.norm(t.box.T - r.box.T) > rules.max_pair_distance_m:
                continue
            rels = relation_oracle(t.box, r.box, rules, vocab)
            if not rels:
                continue
            vec = build_pair_features(
                schema_id,
                t.detection.bbox,
                r.detection.bbox,
                t.box,
                r.box,
                manifest.intrinsics.width,
                manifest.intrinsics.height,
                t.detection.label,
                r.detection.label,
                table,
            )
            indices = sorted(vocab.index(rel) for rel in rels)
            if vocab.mode == MULTICLASS:
                for y in indices:
                    samples.append((vec, y))
            else:
                samples.append((vec, frozenset(indices)))
    return samples


def _scene_samples_job(args) -> list[tuple[FeatureVector, object]]:
    path, schema_id, table_path, denoise_cfg, rules = args
    table = EmbeddingTable.load(table_path) if table_path else None
    manifest = load_manifest(path)
    return scene_pair_samples(manifest, path, schema_id, table, denoise_cfg, rules)


def build_feature_dataset(
    index_path: str,
    schema_id: str,
    table: EmbeddingTable | None = None,
    table_path: str | None = None,
    denoise_cfg: DenoiseConfig = DenoiseConfig(),
    rules: RelationRuleConfig = RelationRuleConfig(),
    threads: int = 1,
) -> LabeledFeatures:
    """Assemble (features, labels) for every scene listed in a dataset index."""
    index = load_index(index_path)
    paths = index.scene_paths(index_path)
    if not paths:
        raise EmptyDataset(f"index {index_path} lists no scenes")
    pairs: list[tuple[FeatureVector, object]] = []
    if threads > 1:
        jobs = [(p, schema_id, table_path, denoise_cfg, rules) for p in paths]
        with ProcessPoolExecutor(max_workers=threads) as ex:
            for chunk in ex.map(_scene_samples_job, jobs):
                pairs.extend(chunk)
    else:
        for path in paths:
            manifest = load_manifest(path)
            pairs.extend(scene_pair_samples(manifest, path, schema_id, table, denoise_cfg, rules))
    if not pairs:
        raise EmptyDataset(f"index {index_path} produced no labeled pairs")
    return LabeledFeatures.from_pairs(pairs, index.vocabulary)


@dataclass
class GroundedExpression:
    scene_id: str
    expression: Expression
    result: Optional[GroundingResult]
    status: str

    def predicted_bbox(self) -> Optional[BBox2D]:
        return self.result.target.bbox if self.result is not None else None

    def record(self, explain: bool = False) -> dict:
        return result_record(self.scene_id, self.expression, self.result, self.status, explain)


def ground_scene(
    manifest: SceneManifest,
    manifest_path: str,
    model: MlpParams | None,
    cfg: RankingConfig = RankingConfig(),
    denoise_cfg: DenoiseConfig = DenoiseConfig(),
    table: EmbeddingTable | None = None,
    explain: bool = False,
    detector_only: bool = False,
) -> list[GroundedExpression]:
    """Ground every expression of one scene; failures become typed statuses
    instead of aborting the batch."""
    depth = None
    if not detector_only and model is not None and model.schema_id.startswith("GEOM3D"):
        depth = load_depth(
            depth_path_for(manifest, manifest_path),
            manifest.intrinsics.width,
            manifest.intrinsics.height,
        )
    out = []
    for expr in manifest.expressions:
        try:
            if detector_only:
                result = ground_detector_only(manifest, expr, cfg)
            else:
                result = ground(manifest, expr, model, depth, cfg, denoise_cfg, table, explain)
            out.append(GroundedExpression(manifest.scene_id, expr, result, "ok"))
        except NoCandidates as e:
            out.append(GroundedExpression(manifest.scene_id, expr, None, f"no_candidates:{e.role}"))
        except NoValidPairs:
            out.append(GroundedExpression(manifest.scene_id, expr, None, "no_valid_pairs"))
        except PipelineError as e:
            out.append(GroundedExpression(manifest.scene_id, expr, None, f"error:{type(e).__name__}"))
    return out


def _ground_scene_job(args) -> list[GroundedExpression]:
    path, model, cfg, denoise_cfg, table_path, explain, detector_only = args
    table = EmbeddingTable.load(table_path) if table_path else None
    manifest = load_manifest(path)
    return ground_scene(manifest, path, model, cfg, denoise_cfg, table, explain, detector_only)


def ground_dataset(
    index_path: str,
    model: MlpParams | None,
    cfg: RankingConfig = RankingConfig(),
    denoise_cfg: DenoiseConfig = DenoiseConfig(),
    table: EmbeddingTable | None = None,
    table_path: str | None = None,
    explain: bool = False,
    detector_only: bool = False,
    threads: int = 1,
) -> list[GroundedExpression]:
    """Ground every expression of every scene in a dataset index, in index
    order (scene-level parallelism preserves that order)."""
    index = load_index(index_path)
    paths = index.scene_paths(index_path)
    if not paths:
        raise EmptyDataset(f"index {index_path} lists no scenes")
    results: list[GroundedExpression] = []
    if threads > 1:
        jobs = [(p, model, cfg, denoise_cfg, table_path, explain, detector_only) for p in paths]
        with ProcessPoolExecutor(max_workers=threads) as ex:
            for chunk in ex.map(_ground_scene_job, jobs):
                results.extend(chunk)
    else:
        for path in paths:
            manifest = load_manifest(path)
            results.extend(
                ground_scene(manifest, path, model, cfg, denoise_cfg, table, explain, detector_only)
            )
    return results


def grounding_ground_truths(results: list[GroundedExpression]) -> list[tuple[BBox2D, ...]]:
    """Acceptable target boxes per grounded expression, for eval_grounding."""
    gts = []
    for g in results:
        boxes = g.expression.gt_target_boxes()
        if not boxes:
            raise ValidationError(
                f"scene {g.scene_id}: expression {g.expression.triplet()} has no ground truth"
            )
        gts.append(boxes)
    return gts
