"""Candidate selection and probabilistic pair ranking.

Given per-role detector candidates, every (target, reference) pair is scored
by the product of the two detector confidences and the classifier's
probability for the queried relation; the argmax pair wins.  Scores are used
as given (no renormalization): positive per-role scaling cannot change the
argmax.  Pairs built on degenerate (fallback) 3D boxes are down-weighted by
a configurable penalty instead of excluded, unless strict mode is on.

All tie-breaks are pinned so identical inputs always produce identical
results: candidates sort by (score desc, bbox.x asc, bbox.y asc); pairs by
(joint desc, target score desc, reference score desc, bbox lexicographic).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .classifier import MlpParams, forward
from .dataio import BBox2D, CameraIntrinsics, Detection2D, DepthImage, Expression, SceneManifest
from .errors import EmptyCloud, NoCandidates, NoValidPairs, ValidationError
from .features import EmbeddingTable, base_schema, build_pair_features, GEOM3D
from .geometry import DenoiseConfig, OrientedBox3D, lift_detection


@dataclass(frozen=True)
class RankingConfig:
    k: int = 3
    detector_profile: str = "detic"  # selects which score threshold applies
    detic_score_threshold: float = 0.02
    gdino_box_threshold: float = 0.15
    gdino_text_threshold: float = 0.10
    degenerate_penalty: float = 0.5
    strict: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ValidationError("ranking.k: must be >= 1")
        for name in ("detic_score_threshold", "gdino_box_threshold", "gdino_text_threshold"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValidationError(f"ranking.{name}: must be in [0, 1]")
        if self.detector_profile not in ("detic", "gdino"):
            raise ValidationError(f"ranking.detector_profile: unknown {self.detector_profile!r}")

    @property
    def score_threshold(self) -> float:
        return self.detic_score_threshold if self.detector_profile == "detic" else self.gdino_box_threshold


@dataclass
class RankCandidate:
    """A selected detection with its lifted box (None when unavailable)."""

    detection: Detection2D
    box3d: Optional[OrientedBox3D] = None


@dataclass
class PairScore:
    target_index: int
    reference_index: int
    target_score: float
    reference_score: float
    relation_prob: float
    penalty: float
    joint: float


@dataclass
class GroundingResult:
    target: Detection2D
    reference: Detection2D
    joint_score: float
    relation_prob: float
    penalty: float = 1.0
    per_pair_table: Optional[list[PairScore]] = None


def select_candidates(
    detections: list[Detection2D], cfg: RankingConfig, role: str = "candidate"
) -> list[Detection2D]:
    """Threshold, sort by descending score (ties by bbox.x then bbox.y),
    truncate to k.  Raises NoCandidates when nothing survives."""
    kept = [d for d in detections if d.score >= cfg.score_threshold]
    if not kept:
        raise NoCandidates(role, f"no {role} detection above threshold {cfg.score_threshold}")
    kept.sort(key=lambda d: (-d.score, d.bbox.x, d.bbox.y))
    return kept[: cfg.k]


def _same_physical(a: Detection2D, b: Detection2D) -> bool:
    return a.label == b.label and a.bbox == b.bbox


def _bbox_key(b: BBox2D) -> tuple:
    return (b.x, b.y, b.w, b.h)


def rank_pairs(
    targets: list[RankCandidate],
    references: list[RankCandidate],
    expr: Expression,
    model: MlpParams,
    intrinsics: CameraIntrinsics,
    cfg: RankingConfig = RankingConfig(),
    table: EmbeddingTable | None = None,
    explain: bool = False,
) -> GroundingResult:
    """Score every admissible pair and return the argmax.

    A detection cannot pair with itself; pairs missing a required 3D box are
    excluded; degenerate boxes multiply the penalty (or exclude the pair in
    strict mode)."""
    if not targets or not references:
        raise NoValidPairs("empty candidate list")
    rel_index = model.vocabulary.index(expr.relation)
    needs3d = base_schema(model.schema_id) == GEOM3D

    pairs: list[PairScore] = []
    for i, t in enumerate(targets):
        for j, r in enumerate(references):
            if _same_physical(t.detection, r.detection):
                continue
            penalty = 1.0
            if needs3d:
                if t.box3d is None or r.box3d is None:
                    continue  # no usable depth: cannot featurize this pair
                n_degenerate = int(t.box3d.degenerate) + int(r.box3d.degenerate)
                if n_degenerate:
                    if cfg.strict:
                        continue
                    penalty = cfg.degenerate_penalty**n_degenerate
            vec = build_pair_features(
                model.schema_id,
                t.detection.bbox,
                r.detection.bbox,
                t.box3d,
                r.box3d,
                intrinsics.width,
                intrinsics.height,
                expr.target_label,
                expr.reference_label,
                table,
            )
            rel_prob = float(forward(model, vec).probs[rel_index])
            joint = t.detection.score * r.detection.score * rel_prob * penalty
            pairs.append(
                PairScore(i, j, t.detection.score, r.detection.score, rel_prob, penalty, joint)
            )
    if not pairs:
        raise NoValidPairs("every (target, reference) pair was excluded")

    best = min(
        pairs,
        key=lambda p: (
            -p.joint,
            -p.target_score,
            -p.reference_score,
            _bbox_key(targets[p.target_index].detection.bbox),
            _bbox_key(references[p.reference_index].detection.bbox),
        ),
    )
    return GroundingResult(
        target=targets[best.target_index].detection,
        reference=references[best.reference_index].detection,
        joint_score=best.joint,
        relation_prob=best.relation_prob,
        penalty=best.penalty,
        per_pair_table=pairs if explain else None,
    )


def _lift_candidates(
    selected: dict[str, list[Detection2D]],
    depth: DepthImage,
    intrinsics: CameraIntrinsics,
    denoise_cfg: DenoiseConfig,
) -> dict[tuple, OrientedBox3D | None]:
    boxes: dict[tuple, OrientedBox3D | None] = {}
    for label, dets in selected.items():
        for det in dets:
            key = (label, _bbox_key(det.bbox))
            if key in boxes:
                continue
            try:
                boxes[key] = lift_detection(det, depth, intrinsics, denoise_cfg)
            except EmptyCloud:
                boxes[key] = None
    return boxes


def ground(
    manifest: SceneManifest,
    expr: Expression,
    model: MlpParams,
    depth: DepthImage | None = None,
    cfg: RankingConfig = RankingConfig(),
    denoise_cfg: DenoiseConfig = DenoiseConfig(),
    table: EmbeddingTable | None = None,
    explain: bool = False,
) -> GroundingResult:
    """End-to-end grounding: select candidates per role, lift them when the
    model uses 3D features, rank all pairs.

    Raises NoCandidates with role attribution or NoValidPairs, so failures
    are diagnosable per module."""
    t_dets = manifest.detections.get(expr.target_label, [])
    r_dets = manifest.detections.get(expr.reference_label, [])
    if not t_dets:
        raise NoCandidates("target", f"no detections for target label {expr.target_label!r}")
    if not r_dets:
        raise NoCandidates("reference", f"no detections for reference label {expr.reference_label!r}")
    t_sel = select_candidates(t_dets, cfg, role="target")
    r_sel = select_candidates(r_dets, cfg, role="reference")

    needs3d = base_schema(model.schema_id) == GEOM3D
    boxes: dict[tuple, OrientedBox3D | None] = {}
    if needs3d:
        if depth is None:
            raise ValidationError("3D feature model requires the scene depth image")
        boxes = _lift_candidates(
            {expr.target_label: t_sel, expr.reference_label: r_sel},
            depth,
            manifest.intrinsics,
            denoise_cfg,
        )

    def candidates(label: str, dets: list[Detection2D]) -> list[RankCandidate]:
        return [RankCandidate(d, boxes.get((label, _bbox_key(d.bbox)))) for d in dets]

    return rank_pairs(
        candidates(expr.target_label, t_sel),
        candidates(expr.reference_label, r_sel),
        expr,
        model,
        manifest.intrinsics,
        cfg,
        table,
        explain,
    )


def ground_detector_only(
    manifest: SceneManifest, expr: Expression, cfg: RankingConfig = RankingConfig()
) -> GroundingResult:
    """Baseline that ranks by detector confidence alone (no relation model):
    the top-scoring target and reference candidates win."""
    t_dets = manifest.detections.get(expr.target_label, [])
    r_dets = manifest.detections.get(expr.reference_label, [])
    if not t_dets:
        raise NoCandidates("target", f"no detections for target label {expr.target_label!r}")
    if not r_dets:
        raise NoCandidates("reference", f"no detections for reference label {expr.reference_label!r}")
    t_sel = select_candidates(t_dets, cfg, role="target")
    r_sel = select_candidates(r_dets, cfg, role="reference")
    pairs = [
        (t, r)
        for t in t_sel
        for r in r_sel
        if not _same_physical(t, r)
    ]
    if not pairs:
        raise NoValidPairs("every (target, reference) pair was excluded")
    t, r = min(pairs, key=lambda p: (-p[0].score, -p[1].score, _bbox_key(p[0].bbox), _bbox_key(p[1].bbox)))
    return GroundingResult(t, r, joint_score=t.score * r.score, relation_prob=1.0)


def result_record(
    scene_id: str,
    expr: Expression,
    result: GroundingResult | None,
    status: str = "ok",
    explain: bool = False,
) -> dict:
    """Stable-keyed record emitted per grounded expression."""
    rec = {
        "scene_id": scene_id,
        "expression": {
            "target": expr.target_label,
            "relation": expr.relation,
            "reference": expr.reference_label,
        },
        "target_bbox": result.target.bbox.as_list() if result else None,
        "reference_bbox": result.reference.bbox.as_list() if result else None,
        "joint_score": result.joint_score if result else None,
        "relation_prob": result.relation_prob if result else None,
        "status": status,
    }
    if explain and result is not None and result.per_pair_table is not None:
        rec["per_pair_table"] = [
            {
                "target_index": p.target_index,
                "reference_index": p.reference_index,
                "target_score": p.target_score,
                "reference_score": p.reference_score,
                "relation_prob": p.relation_prob,
                "penalty": p.penalty,
                "joint": p.joint,
            }
            for p in result.per_pair_table
        ]
    return rec
