"""Automatic spatial-expression labeling from pairs of 3D boxes.

Directional relations are decided on centroid deltas in the camera frame
(x right, y down, z forward) with a per-axis margin proportional to the
mean half-extent of the two boxes along that axis, so the rules scale with
object size.  With y pointing down, "above" means a negative y delta; the
generator keeps the camera roll-free so image-vertical equals gravity.

"on" requires the target to rest above the reference within a small
vertical gap and with its center over the reference footprint; "in"
requires most of the target volume to fall inside the reference.  In
multiclass mode the rules reduce to the single strongest relation, with
in/on taking priority over directionals.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .dataio import (
    MULTICLASS,
    DatasetIndex,
    Detection2D,
    Expression,
    RelationVocabulary,
    SceneManifest,
    depth_path_for,
    load_depth,
    load_manifest,
    save_index,
    save_manifest,
)
from .errors import EmptyCloud, EmptyDataset, ValidationError
from .geometry import DenoiseConfig, OrientedBox3D, lift_detection

logger = logging.getLogger(__name__)

_AXES = np.eye(3)


@dataclass(frozen=True)
class RelationRuleConfig:
    margin_fraction: float = 0.5
    max_pair_distance_m: float = 3.0
    support_gap_m: float = 0.05
    containment_fraction: float = 0.9

    def __post_init__(self):
        for name in ("margin_fraction", "max_pair_distance_m", "support_gap_m", "containment_fraction"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"rules.{name}: must be positive")
        if self.margin_fraction >= 10:
            raise ValidationError("rules.margin_fraction: must be < 10")


@dataclass
class LiftedDetection:
    """A 2D detection together with its fitted 3D box."""

    detection: Detection2D
    box: OrientedBox3D


def _axis_margins(target: OrientedBox3D, reference: OrientedBox3D, fraction: float) -> np.ndarray:
    halves = np.array(
        [
            (target.half_extent_along(_AXES[i]) + reference.half_extent_along(_AXES[i])) / 2.0
            for i in range(3)
        ]
    )
    return fraction * halves


def _volume_fraction_inside(target: OrientedBox3D, reference: OrientedBox3D, n: int = 5) -> float:
    """Fraction of the target box volume inside the reference, estimated on
    a deterministic n^3 grid of interior sample points."""
    ticks = (np.arange(n) + 0.5) / n - 0.5
    gx, gy, gz = np.meshgrid(ticks, ticks, ticks, indexing="ij")
    local = np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()]) * target.D
    world = target.T + local @ target.R.T
    return float(np.mean(reference.contains(world, atol=0.0)))


def _directional_scores(delta: np.ndarray, margins: np.ndarray) -> dict[str, float]:
    """Margin exceedance |delta|/margin per triggered directional relation."""
    out: dict[str, float] = {}
    checks = [
        ("left", delta[0] < -margins[0], abs(delta[0]) / margins[0] if margins[0] > 0 else np.inf),
        ("right", delta[0] > margins[0], abs(delta[0]) / margins[0] if margins[0] > 0 else np.inf),
        ("above", delta[1] < -margins[1], abs(delta[1]) / margins[1] if margins[1] > 0 else np.inf),
        ("below", delta[1] > margins[1], abs(delta[1]) / margins[1] if margins[1] > 0 else np.inf),
        ("behind", delta[2] > margins[2], abs(delta[2]) / margins[2] if margins[2] > 0 else np.inf),
        ("in front of", delta[2] < -margins[2], abs(delta[2]) / margins[2] if margins[2] > 0 else np.inf),
    ]
    for name, hit, score in checks:
        if hit:
            out[name] = score
    return out


def _on_triggered(target: OrientedBox3D, reference: OrientedBox3D, cfg: RelationRuleConfig) -> bool:
    delta = target.T - reference.T
    if delta[1] >= 0:  # y-down: target center must be above
        return False
    target_bottom = target.T[1] + target.half_extent_along(_AXES[1])
    reference_top = reference.T[1] - reference.half_extent_along(_AXES[1])
    if abs(reference_top - target_bottom) > cfg.support_gap_m:
        return False
    # horizontal center over the reference footprint
    return (
        abs(delta[0]) <= reference.half_extent_along(_AXES[0])
        and abs(delta[2]) <= reference.half_extent_along(_AXES[2])
    )


def relation_oracle(
    target: OrientedBox3D,
    reference: OrientedBox3D,
    cfg: RelationRuleConfig,
    vocab: RelationVocabulary,
) -> set[str]:
    """Relations that hold for (target, reference), restricted to `vocab`.

    Multilabel vocabularies may receive several labels; multiclass ones get
    at most one (the strongest by normalized margin exceedance, with in/on
    winning over directionals).  An empty set means no relation is
    annotated."""
    delta = target.T - reference.T
    margins = _axis_margins(target, reference, cfg.margin_fraction)
    scores = _directional_scores(delta, margins)

    in_hit = "in" in vocab and _volume_fraction_inside(target, reference) >= cfg.containment_fraction
    on_hit = "on" in vocab and _on_triggered(target, reference, cfg)

    if vocab.mode == MULTICLASS:
        if in_hit:
            return {"in"}
        if on_hit:
            return {"on"}
        directional = {k: v for k, v in scores.items() if k in vocab}
        if not directional:
            return set()
        best = max(directional.items(), key=lambda kv: (kv[1], -vocab.index(kv[0])))
        return {best[0]}

    out = {k for k in scores if k in vocab}
    if in_hit:
        out.add("in")
    if on_hit:
        out.add("on")
    return out


def generate_expressions(
    lifted: list[LiftedDetection],
    vocab: RelationVocabulary,
    cfg: RelationRuleConfig = RelationRuleConfig(),
) -> list[Expression]:
    """Expressions for every ordered pair within range, deduplicated on the
    (target_label, relation, reference_label) triplet keeping the
    highest-score pair; other matching target boxes are kept as
    alternates."""
    per_triplet: dict[tuple[str, str, str], list[tuple[float, Detection2D, Detection2D]]] = {}
    triplet_order: list[tuple[str, str, str]] = []
    for i, ti in enumerate(lifted):
        for j, tj in enumerate(lifted):
            if i == j:
                continue
            if np.linalg.norm(ti.box.T - tj.box.T) > cfg.max_pair_distance_m:
                continue
            for rel in sorted(relation_oracle(ti.box, tj.box, cfg, vocab), key=vocab.index):
                key = (ti.detection.label, rel, tj.detection.label)
                if key not in per_triplet:
                    per_triplet[key] = []
                    triplet_order.append(key)
                score = ti.detection.score * tj.detection.score
                per_triplet[key].append((score, ti.detection, tj.detection))

    expressions = []
    for key in triplet_order:
        entries = per_triplet[key]
        best_idx = max(range(len(entries)), key=lambda n: entries[n][0])
        _, tdet, rdet = entries[best_idx]
        alts = tuple(
            e[1].bbox for n, e in enumerate(entries) if n != best_idx and e[1].bbox != tdet.bbox
        )
        expressions.append(
            Expression(
                target_label=key[0],
                relation=key[1],
                reference_label=key[2],
                gt_target_bbox=tdet.bbox,
                gt_reference_bbox=rdet.bbox,
                gt_target_alts=alts,
            )
        )
    return expressions


def lift_scene(
    manifest: SceneManifest,
    manifest_path: str,
    denoise_cfg: DenoiseConfig = DenoiseConfig(),
) -> list[LiftedDetection]:
    """Lift every detection of a scene; detections with no usable depth are
    skipped with a log line."""
    depth = load_depth(
        depth_path_for(manifest, manifest_path),
        manifest.intrinsics.width,
        manifest.intrinsics.height,
    )
    out = []
    for label in sorted(manifest.detections):
        dets = sorted(
            manifest.detections[label], key=lambda d: (d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h)
        )
        for det in dets:
            try:
                out.append(LiftedDetection(det, lift_detection(det, depth, manifest.intrinsics, denoise_cfg)))
            except EmptyCloud:
                logger.warning("scene %s: no depth for %s box, skipped", manifest.scene_id, label)
    return out


@dataclass
class DatasetStats:
    scenes_total: int = 0
    scenes_labeled: int = 0
    expressions: int = 0
    relation_counts: dict[str, int] = field(default_factory=dict)


def _label_scene_job(args) -> SceneManifest | None:
    path, cfg, denoise_cfg, vocab = args
    try:
        manifest = load_manifest(path)
        if vocab is not None:
            manifest.vocabulary = vocab
        lifted = lift_scene(manifest, path, denoise_cfg)
        if len(lifted) < 2:
            logger.warning("scene %s: fewer than 2 lifted detections, skipped", path)
            return None
        manifest.expressions = generate_expressions(lifted, manifest.vocabulary, cfg)
        return manifest
    except Exception as e:  # per-scene isolation
        logger.error("scene %s failed: %s", path, e)
        return None


def build_dataset(
    scene_paths: list[str],
    out_dir: str,
    cfg: RelationRuleConfig = RelationRuleConfig(),
    denoise_cfg: DenoiseConfig = DenoiseConfig(),
    vocab: RelationVocabulary | None = None,
    threads: int = 1,
) -> DatasetStats:
    """Lift -> fit -> oracle over every scene; writes relabeled manifests
    plus an index with per-relation counts to `out_dir`.

    Per-scene work is independent (parallel when threads > 1, order kept);
    writing is serialized.  Per-scene failures are logged and skipped;
    raises EmptyDataset only when no scene succeeds."""
    if not scene_paths:
        raise EmptyDataset("no scenes to label")
    os.makedirs(out_dir, exist_ok=True)
    stats = DatasetStats(scenes_total=len(scene_paths))
    active_vocab = vocab
    if active_vocab is None:
        active_vocab = load_manifest(scene_paths[0]).vocabulary

    jobs = [(path, cfg, denoise_cfg, active_vocab) for path in scene_paths]
    if threads > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=threads) as ex:
            labeled = list(ex.map(_label_scene_job, jobs))
    else:
        labeled = [_label_scene_job(job) for job in jobs]

    index_scenes = []
    for path, manifest in zip(scene_paths, labeled):
        if manifest is None:
            continue
        # copy the depth/rgb files alongside so the output is self-contained
        _copy_scene_assets(manifest, path, out_dir)
        out_path = os.path.join(out_dir, os.path.basename(path))
        save_manifest(manifest, out_path)
        index_scenes.append(os.path.basename(path))
        stats.scenes_labeled += 1
        stats.expressions += len(manifest.expressions)
        for e in manifest.expressions:
            stats.relation_counts[e.relation] = stats.relation_counts.get(e.relation, 0) + 1
    if stats.scenes_labeled == 0:
        raise EmptyDataset("labeling failed for every scene")
    save_index(
        DatasetIndex(index_scenes, active_vocab, dict(sorted(stats.relation_counts.items()))),
        os.path.join(out_dir, "index.json"),
    )
    return stats


def _copy_scene_assets(manifest: SceneManifest, manifest_path: str, out_dir: str) -> None:
    import shutil

    for rel in (manifest.depth_path, manifest.rgb_path):
        src = os.path.join(os.path.dirname(manifest_path), rel)
        dst = os.path.join(out_dir, rel)
        if os.path.abspath(src) != os.path.abspath(dst) and os.path.exists(src):
            os.makedirs(os.path.dirname(dst) or out_dir, exist_ok=True)
            shutil.copyfile(src, dst)
