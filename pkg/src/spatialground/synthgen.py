"""Deterministic synthetic RGB-D scene generator.

Axis-aligned boxes are placed in a desk-scale room in front of an upright,
roll-free camera; depth is rendered by per-pixel ray/box intersection
(nearest hit wins) at 160x120 by default.  A floor and a back wall provide
background depth but are not detected objects.  No RGB is rendered: the
rgb_path points at a flat placeholder, since all downstream features are
geometric.

Each scene derives every random draw from its own seeded generator, so a
(seed, index) pair reproduces manifests and depth images byte for byte.

The detector noise model (applied when building "noised" manifests):
the true box is dropped with probability `detector_noise`, kept boxes are
jittered by up to +/-5% of their extent and scored uniform(0.5, 1.0) while
keeping the true mask, and each queried label additionally gets
`n_distractors` random unmasked boxes scored uniform(0.0, 0.6).  Scores are
rounded to 4 decimals.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image

from .autolabel import LiftedDetection, RelationRuleConfig, generate_expressions
from .dataio import (
    BBox2D,
    BinaryMask,
    CameraIntrinsics,
    DatasetIndex,
    DepthImage,
    Detection2D,
    RelationVocabulary,
    SceneManifest,
    VOCAB_DIRECTIONAL,
    save_depth,
    save_index,
    save_manifest,
)
from .errors import PlacementFailure, ValidationError
from .geometry import OrientedBox3D, lift_detection

DEFAULT_INTRINSICS = CameraIntrinsics(fx=130.0, fy=130.0, cx=80.0, cy=60.0, width=160, height=120)

LABEL_POOL = ("mug", "book", "bottle", "box", "can", "bowl")

_MIN_VISIBLE_PIXELS = 20
_MAX_PLACEMENT_ATTEMPTS = 10_000


@dataclass(frozen=True)
class SceneSpec:
    seed: object = 0  # anything np.random.default_rng accepts
    n_objects_min: int = 4
    n_objects_max: int = 10
    room_extent_m: tuple[float, float, float] = (2.4, 0.75, 1.6)
    # camera height over the field and distance to it vary per scene, so 2D
    # cues (box size, image height) cannot resolve absolute depth
    room_center_y_range_m: tuple[float, float] = (0.48, 0.72)
    room_near_range_m: tuple[float, float] = (1.5, 2.3)
    # objects keep their top faces below the camera horizon by at least this
    # much, so lifted clouds see the tops and recover depth centers well
    min_top_clearance_m: float = 0.15
    object_size_range_m: tuple[float, float] = (0.14, 0.60)
    intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS
    occlusion_rate: float = 0.3  # max projected-box IoU between two objects
    with_room_surfaces: bool = True
    vocabulary: RelationVocabulary = VOCAB_DIRECTIONAL
    rules: RelationRuleConfig = RelationRuleConfig()
    label_pool: tuple[str, ...] = LABEL_POOL
    # detector noise model
    detector_noise: float = 0.02  # probability the true detection is missing
    n_distractors: int = 2
    jitter_fraction: float = 0.05
    true_score_range: tuple[float, float] = (0.5, 1.0)
    distractor_score_range: tuple[float, float] = (0.0, 0.6)

    def __post_init__(self):
        if self.n_objects_min < 1 or self.n_objects_max < self.n_objects_min:
            raise ValidationError("scene.n_objects: need 1 <= min <= max")
        if not (0.0 <= self.detector_noise <= 1.0):
            raise ValidationError("scene.detector_noise: must be in [0, 1]")
        lo, hi = self.object_size_range_m
        if not (0 < lo <= hi):
            raise ValidationError("scene.object_size_range_m: need 0 < min <= max")


@dataclass(eq=False)
class PlacedObject:
    label: str
    center: np.ndarray  # camera frame, meters
    size: np.ndarray
    box3d: OrientedBox3D  # true placed box
    mask: BinaryMask | None = None
    bbox: BBox2D | None = None
    visible_pixels: int = 0
    lifted_box3d: OrientedBox3D | None = None  # fit to the rendered depth


@dataclass(eq=False)
class SceneResult:
    scene_id: str
    manifest: SceneManifest  # perfect detections
    depth: DepthImage
    objects: list[PlacedObject]  # visible objects (the detected ones)
    zbuffer: np.ndarray  # float meters, 0 where no hit
    object_ids: np.ndarray  # index into `placed`, -1 where no hit
    placed: list[PlacedObject] = field(default_factory=list)  # all rendered
    spec: SceneSpec = field(repr=False, default=None)


def _ray_dirs(intr: CameraIntrinsics) -> np.ndarray:
    us, vs = np.meshgrid(np.arange(intr.width), np.arange(intr.height))
    dirs = np.stack(
        [(us - intr.cx) / intr.fx, (vs - intr.cy) / intr.fy, np.ones_like(us, dtype=np.float64)],
        axis=-1,
    ).reshape(-1, 3)
    dirs[np.abs(dirs) < 1e-12] = 1e-12  # avoid 0/0 in the slab test
    return dirs


def ray_box_distance(dirs: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Nearest-hit ray parameter per direction (camera at the origin);
    inf where the ray misses.  With unnormalized directions of unit z the
    parameter equals the hit depth."""
    t1 = lo / dirs
    t2 = hi / dirs
    tmin = np.minimum(t1, t2).max(axis=1)
    tmax = np.maximum(t1, t2).min(axis=1)
    hit = (tmax >= tmin) & (tmax > 0) & (tmin > 0)
    return np.where(hit, tmin, np.inf)


def render_depth(
    boxes: list[tuple[np.ndarray, np.ndarray]], intr: CameraIntrinsics
) -> tuple[np.ndarray, np.ndarray]:
    """Z-buffer (meters, 0 = no hit) and per-pixel box index (-1 = no hit)."""
    dirs = _ray_dirs(intr)
    zbuf = np.full(dirs.shape[0], np.inf)
    ids = np.full(dirs.shape[0], -1, dtype=np.int32)
    for k, (lo, hi) in enumerate(boxes):
        t = ray_box_distance(dirs, lo, hi)
        closer = t < zbuf
        zbuf[closer] = t[closer]
        ids[closer] = k
    zbuf[ids < 0] = 0.0
    shape = (intr.height, intr.width)
    return zbuf.reshape(shape), ids.reshape(shape)


def _project_aabb_bbox(lo: np.ndarray, hi: np.ndarray, intr: CameraIntrinsics) -> BBox2D:
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    u = corners[:, 0] * intr.fx / corners[:, 2] + intr.cx
    v = corners[:, 1] * intr.fy / corners[:, 2] + intr.cy
    return BBox2D(float(u.min()), float(v.min()), float(u.max() - u.min()), float(v.max() - v.min()))


def _bbox_iou(a: BBox2D, b: BBox2D) -> float:
    x0, y0 = max(a.x, b.x), max(a.y, b.y)
    x1, y1 = min(a.x + a.w, b.x + b.w), min(a.y + a.h, b.y + b.h)
    inter = max(0.0, x1 - x0) * max(0.0, y1 - y0)
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


def _draw_room(spec: SceneSpec, rng: np.random.Generator) -> tuple[float, float]:
    """Per-scene camera height over the field and near distance."""
    center_y = rng.uniform(*spec.room_center_y_range_m)
    near = rng.uniform(*spec.room_near_range_m)
    return center_y, near


def _place_objects(
    spec: SceneSpec, rng: np.random.Generator, center_y: float, near: float
) -> list[PlacedObject]:
    ex, ey, ez = spec.room_extent_m
    z0, z1 = near, near + ez
    y_lo = max(center_y - ey / 2, spec.min_top_clearance_m)
    y_hi = center_y + ey / 2
    smin, smax = spec.object_size_range_m
    n = int(rng.integers(spec.n_objects_min, spec.n_objects_max + 1))
    labels = [str(spec.label_pool[i]) for i in rng.integers(0, len(spec.label_pool), size=n)]

    placed: list[PlacedObject] = []
    attempts = 0
    for label in labels:
        while True:
            attempts += 1
            if attempts > _MAX_PLACEMENT_ATTEMPTS:
                raise PlacementFailure(f"could not place {n} objects in {attempts - 1} attempts")
            size = rng.uniform(smin, smax, size=3)
            half = size / 2.0
            if y_lo + half[1] > y_hi - half[1]:
                continue
            center = np.array(
                [
                    rng.uniform(-ex / 2 + half[0], ex / 2 - half[0]),
                    rng.uniform(y_lo + half[1], y_hi - half[1]),
                    rng.uniform(z0 + half[2], z1 - half[2]),
                ]
            )
            lo, hi = center - half, center + half
            bbox = _project_aabb_bbox(lo, hi, spec.intrinsics)
            if (
                bbox.x < 1
                or bbox.y < 1
                or bbox.x + bbox.w > spec.intrinsics.width - 1
                or bbox.y + bbox.h > spec.intrinsics.height - 1
            ):
                continue
            overlap3d = any(
                np.all(np.abs(center - p.center) < (size + p.size) / 2.0) for p in placed
            )
            if overlap3d:
                continue
            if any(_bbox_iou(bbox, _project_aabb_bbox(p.center - p.size / 2, p.center + p.size / 2, spec.intrinsics)) > spec.occlusion_rate for p in placed):
                continue
            placed.append(
                PlacedObject(label, center, size, OrientedBox3D.axis_aligned(center, size))
            )
            break
    return placed


def _room_surfaces(spec: SceneSpec, center_y: float, near: float) -> list[tuple[np.ndarray, np.ndarray]]:
    ex, ey, ez = spec.room_extent_m
    z1 = near + ez
    floor_y = center_y + ey / 2 + 0.15
    wall_z = z1 + 0.3
    floor = (np.array([-6.0, floor_y, 0.2]), np.array([6.0, floor_y + 0.1, wall_z]))
    wall = (np.array([-6.0, -6.0, wall_z]), np.array([6.0, 6.0, wall_z + 0.1]))
    return [floor, wall]


def generate_scene(spec: SceneSpec, scene_id: str = "scene_0000") -> SceneResult:
    """Place, render, and annotate one scene with perfect detections."""
    rng = np.random.default_rng(spec.seed)
    center_y, near = _draw_room(spec, rng)
    objects = _place_objects(spec, rng, center_y, near)

    boxes = [(o.center - o.size / 2, o.center + o.size / 2) for o in objects]
    n_objects = len(boxes)
    if spec.with_room_surfaces:
        boxes = boxes + _room_surfaces(spec, center_y, near)
    zbuf, ids = render_depth(boxes, spec.intrinsics)
    ids = np.where(ids >= n_objects, -1, ids)  # room surfaces are background

    depth_mm = np.round(zbuf * 1000.0)
    depth_mm[depth_mm > np.iinfo(np.uint16).max] = 0
    depth = DepthImage(depth_mm.astype(np.uint16))

    visible: list[PlacedObject] = []
    for k, obj in enumerate(objects):
        mask_arr = ids == k
        count = int(mask_arr.sum())
        if count < _MIN_VISIBLE_PIXELS:
            continue  # stays in the depth render as clutter only
        ys, xs = np.nonzero(mask_arr)
        obj.mask = BinaryMask.from_array(mask_arr)
        obj.bbox = BBox2D(
            float(xs.min()), float(ys.min()), float(xs.max() - xs.min() + 1), float(ys.max() - ys.min() + 1)
        )
        obj.visible_pixels = count
        visible.append(obj)

    # expressions are labeled from depth-lifted boxes (what the downstream
    # feature pipeline sees), not the simulator's true boxes; the true boxes
    # stay available on PlacedObject for geometry ground-truth checks.
    # Pairs are enumerated in the canonical (label, bbox) order so relabeling
    # a written scene reproduces the same expression list.
    detections: dict[str, list[Detection2D]] = {}
    for obj in visible:
        det = Detection2D(obj.label, 1.0, obj.bbox, obj.mask)
        detections.setdefault(obj.label, []).append(det)
        obj.lifted_box3d = lift_detection(det, depth, spec.intrinsics)
    ordered = sorted(visible, key=lambda o: (o.label, o.bbox.x, o.bbox.y, o.bbox.w, o.bbox.h))
    lifted = [
        LiftedDetection(Detection2D(o.label, 1.0, o.bbox, o.mask), o.lifted_box3d) for o in ordered
    ]
    expressions = generate_expressions(lifted, spec.vocabulary, spec.rules)

    manifest = SceneManifest(
        scene_id=scene_id,
        rgb_path=f"{scene_id}_rgb.png",
        depth_path=f"{scene_id}_depth.png",
        intrinsics=spec.intrinsics,
        detections=dict(sorted(detections.items())),
        expressions=expressions,
        vocabulary=spec.vocabulary,
    )
    manifest.validate()
    return SceneResult(scene_id, manifest, depth, visible, zbuf, ids, objects, spec)


def noised_manifest(result: SceneResult, noise_seed: object) -> SceneManifest:
    """Detector-noise variant of a scene: jittered/missing true boxes plus
    same-label distractors; expressions and their ground truth unchanged."""
    spec = result.spec
    rng = np.random.default_rng(noise_seed)
    intr = spec.intrinsics
    detections: dict[str, list[Detection2D]] = {o.label: [] for o in result.objects}
    for obj in result.objects:
        if rng.uniform() < spec.detector_noise:
            continue  # missed detection
        b = obj.bbox
        jx, jy, jw, jh = rng.uniform(-spec.jitter_fraction, spec.jitter_fraction, size=4)
        jittered = BBox2D(
            round(b.x + jx * b.w), round(b.y + jy * b.h),
            max(1.0, round(b.w * (1 + jw))), max(1.0, round(b.h * (1 + jh))),
        ).clamped(intr.width, intr.height)
        score = round(float(rng.uniform(*spec.true_score_range)), 4)
        detections[obj.label].append(Detection2D(obj.label, score, jittered, obj.mask))
    for label in sorted(detections):
        for _ in range(spec.n_distractors):
            w = float(rng.integers(12, int(intr.width * 0.45)))
            h = float(rng.integers(12, int(intr.height * 0.45)))
            x = float(rng.integers(0, int(intr.width - w)))
            y = float(rng.integers(0, int(intr.height - h)))
            score = round(float(rng.uniform(*spec.distractor_score_range)), 4)
            detections[label].append(Detection2D(label, score, BBox2D(x, y, w, h), None))

    manifest = SceneManifest(
        scene_id=result.scene_id,
        rgb_path=result.manifest.rgb_path,
        depth_path=result.manifest.depth_path,
        intrinsics=intr,
        detections=dict(sorted(detections.items())),
        expressions=list(result.manifest.expressions),
        vocabulary=spec.vocabulary,
    )
    manifest.validate()
    return manifest


def write_scene(result: SceneResult, out_dir: str, manifest: SceneManifest | None = None) -> str:
    """Write manifest + depth + placeholder RGB; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    m = manifest if manifest is not None else result.manifest
    save_depth(result.depth, os.path.join(out_dir, m.depth_path))
    intr = result.spec.intrinsics
    Image.new("RGB", (intr.width, intr.height), (128, 128, 128)).save(
        os.path.join(out_dir, m.rgb_path), format="PNG"
    )
    path = os.path.join(out_dir, f"{result.scene_id}.json")
    save_manifest(m, path)
    return path


def _write_split(results: list[SceneResult], out_dir: str, noised: bool, master_seed: int) -> DatasetIndex:
    os.makedirs(out_dir, exist_ok=True)
    names = []
    counts: dict[str, int] = {}
    vocab = results[0].spec.vocabulary if results else VOCAB_DIRECTIONAL
    for res in results:
        m = noised_manifest(res, [master_seed, int(res.scene_id.split("_")[-1]), 1]) if noised else None
        write_scene(res, out_dir, m)
        names.append(f"{res.scene_id}.json")
        for e in (m or res.manifest).expressions:
            counts[e.relation] = counts.get(e.relation, 0) + 1
    index = DatasetIndex(names, vocab, dict(sorted(counts.items())))
    save_index(index, os.path.join(out_dir, "index.json"))
    return index


def generate_benchmark(
    n_scenes: int,
    seed: int,
    out_dir: str,
    spec: SceneSpec | None = None,
) -> dict[str, DatasetIndex]:
    """Benchmark layout: train/val/test splits (80/10/10 by scene) with
    perfect detections plus a test_noisy split sharing the test scenes'
    geometry but with detector noise applied."""
    if n_scenes < 10:
        raise ValidationError("benchmark needs at least 10 scenes")
    base = spec if spec is not None else SceneSpec()
    results = []
    for i in range(n_scenes):
        s = replace(base, seed=[seed, i])
        results.append(generate_scene(s, scene_id=f"scene_{i:05d}"))

    n_train = int(n_scenes * 0.8)
    n_val = int(n_scenes * 0.1)
    splits = {
        "train": results[:n_train],
        "val": results[n_train : n_train + n_val],
        "test": results[n_train + n_val :],
    }
    out = {}
    for name, rs in splits.items():
        out[name] = _write_split(rs, os.path.join(out_dir, name), noised=False, master_seed=seed)
    out["test_noisy"] = _write_split(
        splits["test"], os.path.join(out_dir, "test_noisy"), noised=True, master_seed=seed
    )
    return out
