"""3D lifting: masked depth -> point cloud -> oriented bounding box.

Point clouds are plain float64 arrays of shape (N, 3) in the camera frame
(x right, y down, z along the optical axis), in meters.  Boxes are fitted
with PCA; the eigenvector sign/ordering convention below is part of the
feature contract, since trained classifier weights depend on it:

* axes are ordered by descending extent (tie-stable on eigenvalue order),
* the first two axes are flipped so their largest-magnitude component is
  positive, the third is their cross product (det = +1),
* eigenvalue ties are resolved by aligning the tied subspace with the
  camera axes (x, then y, then z),
* extents are max-min of point projections, so the fitted box contains
  every input point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .dataio import BBox2D, BinaryMask, CameraIntrinsics, Detection2D, DepthImage
from .errors import DegenerateCloud, EmptyCloud, ValidationError

_EIGEN_TIE_TOL = 1e-9


@dataclass(frozen=True)
class DenoiseConfig:
    """Statistical outlier removal parameters plus a depth range gate."""

    k_neighbors: int = 20
    std_ratio: float = 2.0
    min_depth_mm: float = 300.0
    max_depth_mm: float = 10000.0

    def __post_init__(self):
        if self.k_neighbors < 1:
            raise ValidationError("denoise.k_neighbors: must be >= 1")
        if self.std_ratio <= 0:
            raise ValidationError("denoise.std_ratio: must be > 0")
        if not (0 <= self.min_depth_mm < self.max_depth_mm):
            raise ValidationError("denoise.min/max_depth_mm: need 0 <= min < max")


@dataclass(frozen=True)
class OrientedBox3D:
    """Object pose and extents: translation T, rotation R (columns are the
    box axes), extents D sorted descending.  `degenerate` marks fallback
    boxes built without a usable PCA fit."""

    T: np.ndarray
    R: np.ndarray
    D: np.ndarray
    degenerate: bool = False

    def __post_init__(self):
        object.__setattr__(self, "T", np.asarray(self.T, dtype=np.float64).reshape(3))
        object.__setattr__(self, "R", np.asarray(self.R, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "D", np.asarray(self.D, dtype=np.float64).reshape(3))
        if not np.allclose(self.R.T @ self.R, np.eye(3), atol=1e-6):
            raise ValidationError("box.R: not orthonormal")
        if abs(np.linalg.det(self.R) - 1.0) > 1e-6:
            raise ValidationError("box.R: determinant must be +1")
        if np.any(self.D < 0):
            raise ValidationError("box.D: extents must be >= 0")
        if np.any(self.D[:-1] < self.D[1:] - 1e-9):
            raise ValidationError("box.D: extents must be sorted descending")

    @classmethod
    def axis_aligned(cls, center, size, degenerate: bool = False) -> "OrientedBox3D":
        """Camera-axis-aligned box, axes permuted to the descending-extent,
        right-handed convention used by the PCA fitter."""
        center = np.asarray(center, dtype=np.float64)
        size = np.asarray(size, dtype=np.float64)
        order = np.argsort(-size, kind="stable")
        r = np.eye(3)[:, order]
        if np.linalg.det(r) < 0:
            r[:, 2] = -r[:, 2]
        return cls(center, r, size[order], degenerate)

    def half_extent_along(self, axis: np.ndarray) -> float:
        """Projection radius of the box onto a unit direction (support)."""
        axis = np.asarray(axis, dtype=np.float64)
        return float(0.5 * np.sum(np.abs(axis @ self.R) * self.D))

    def contains(self, points: np.ndarray, atol: float = 1e-9) -> np.ndarray:
        local = (np.asarray(points, dtype=np.float64) - self.T) @ self.R
        return np.all(np.abs(local) <= self.D / 2.0 + atol, axis=1)

    def corners(self) -> np.ndarray:
        signs = np.array(
            [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
            dtype=np.float64,
        )
        return self.T + (signs * (self.D / 2.0)) @ self.R.T


def _region_mask(region, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Boolean (height, width) pixel selection from a mask or a 2D box."""
    w, h = intrinsics.width, intrinsics.height
    if isinstance(region, BinaryMask):
        if region.width != w or region.height != h:
            raise ValidationError("mask size differs from intrinsics image size")
        return region.to_array()
    if isinstance(region, BBox2D):
        b = region.clamped(w, h)
        sel = np.zeros((h, w), dtype=bool)
        x0, y0 = int(np.floor(b.x)), int(np.floor(b.y))
        x1, y1 = int(np.ceil(b.x + b.w)), int(np.ceil(b.y + b.h))
        sel[y0:y1, x0:x1] = True
        return sel
    raise ValidationError(f"unsupported region type {type(region).__name__}")


def backproject(depth: DepthImage, region, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Lift the region's valid-depth pixels into the camera frame (meters).

    Raises EmptyCloud when no pixel has a valid (nonzero) depth.
    """
    if depth.width != intrinsics.width or depth.height != intrinsics.height:
        raise ValidationError("depth size differs from intrinsics image size")
    sel = _region_mask(region, intrinsics)
    z = depth.meters()
    valid = sel & (z > 0)
    vs, us = np.nonzero(valid)
    if us.size == 0:
        raise EmptyCloud("no valid depth pixels in region")
    d = z[vs, us]
    x = (us - intrinsics.cx) * d / intrinsics.fx
    y = (vs - intrinsics.cy) * d / intrinsics.fy
    return np.column_stack([x, y, d])


def project(points: np.ndarray, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Forward pinhole projection to (u, v) pixel coordinates."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if np.any(pts[:, 2] <= 0):
        raise ValidationError("cannot project points at or behind the camera")
    u = pts[:, 0] * intrinsics.fx / pts[:, 2] + intrinsics.cx
    v = pts[:, 1] * intrinsics.fy / pts[:, 2] + intrinsics.cy
    return np.column_stack([u, v])


def denoise(cloud: np.ndarray, cfg: DenoiseConfig = DenoiseConfig()) -> np.ndarray:
    """Depth-range gate followed by statistical outlier removal.

    A point is kept when its mean distance to the k nearest neighbors is at
    most (global mean + std_ratio * global std).  Output rows are a subset
    of input rows.
    """
    cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if cloud.shape[0] == 0:
        raise EmptyCloud("denoise received an empty cloud")
    zmin, zmax = cfg.min_depth_mm / 1000.0, cfg.max_depth_mm / 1000.0
    pts = cloud[(cloud[:, 2] >= zmin) & (cloud[:, 2] <= zmax)]
    if pts.shape[0] == 0:
        raise EmptyCloud("all points outside the depth range gate")
    if pts.shape[0] == 1:
        return pts
    k = min(cfg.k_neighbors, pts.shape[0] - 1)
    dists, _ = cKDTree(pts).query(pts, k=k + 1)
    mean_d = dists[:, 1:].mean(axis=1)  # column 0 is the point itself
    threshold = mean_d.mean() + cfg.std_ratio * mean_d.std()
    kept = pts[mean_d <= threshold]
    if kept.shape[0] == 0:
        raise EmptyCloud("outlier removal dropped every point")
    return kept


def _align_tied_eigenvectors(evecs: np.ndarray, evals: np.ndarray) -> np.ndarray:
    """Within groups of equal eigenvalues the basis is arbitrary; replace it
    with the orthonormal basis of the same subspace closest to the camera
    axes (x, then y, then z) so symmetric clouds fit deterministically."""
    out = evecs.copy()
    scale = max(evals[0], 1e-30)
    i = 0
    while i < 3:
        j = i + 1
        while j < 3 and abs(evals[j] - evals[i]) <= _EIGEN_TIE_TOL * scale:
            j += 1
        if j - i > 1:
            basis = out[:, i:j]
            proj = basis @ basis.T
            picked: list[np.ndarray] = []
            for axis in np.eye(3):
                v = proj @ axis
                for u in picked:
                    v = v - (u @ v) * u
                norm = np.linalg.norm(v)
                if norm > 1e-8:
                    picked.append(v / norm)
                if len(picked) == j - i:
                    break
            out[:, i:j] = np.column_stack(picked)
        i = j
    return out


def pca_fit_box(cloud: np.ndarray) -> OrientedBox3D:
    """Fit an oriented box: axes from the covariance eigenvectors, extents
    from min/max projections.  Raises DegenerateCloud for < 4 points or a
    rank-0 covariance; callers fall back to degenerate_box_from_bbox."""
    pts = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] < 4:
        raise DegenerateCloud(f"need >= 4 points, got {pts.shape[0]}")
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    cov = centered.T @ centered / (pts.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    evals, evecs = evals[::-1], evecs[:, ::-1]  # descending
    if evals[0] <= 1e-16:
        raise DegenerateCloud("covariance has rank 0 (all points coincide)")
    evecs = _align_tied_eigenvectors(evecs, evals)

    proj = centered @ evecs
    extents = proj.max(axis=0) - proj.min(axis=0)
    order = np.argsort(-extents, kind="stable")
    axes = evecs[:, order]
    for c in range(2):
        v = axes[:, c]
        if v[np.argmax(np.abs(v))] < 0:
            axes[:, c] = -v
    axes[:, 2] = np.cross(axes[:, 0], axes[:, 1])

    proj = centered @ axes
    pmin, pmax = proj.min(axis=0), proj.max(axis=0)
    T = centroid + axes @ ((pmin + pmax) / 2.0)
    return OrientedBox3D(T, axes, pmax - pmin)


def degenerate_box_from_bbox(
    bbox: BBox2D,
    depth: DepthImage,
    intrinsics: CameraIntrinsics,
    epsilon_m: float = 0.01,
) -> OrientedBox3D:
    """Fallback box on the 2D box's center ray at the region's median depth.

    Used when the PCA fit is degenerate; flagged so ranking can down-weight
    it.  Raises EmptyCloud when the region has no valid depth at all.
    """
    sel = _region_mask(bbox, intrinsics)
    z = depth.meters()
    valid = z[sel & (z > 0)]
    if valid.size == 0:
        raise EmptyCloud("no valid depth pixels under the 2D box")
    zmed = float(np.median(valid))
    cx_b, cy_b = bbox.center
    center = np.array(
        [
            (cx_b - intrinsics.cx) * zmed / intrinsics.fx,
            (cy_b - intrinsics.cy) * zmed / intrinsics.fy,
            zmed,
        ]
    )
    return OrientedBox3D(center, np.eye(3), np.full(3, epsilon_m), degenerate=True)


def lift_detection(
    det: Detection2D,
    depth: DepthImage,
    intrinsics: CameraIntrinsics,
    cfg: DenoiseConfig = DenoiseConfig(),
) -> OrientedBox3D:
    """Mask (or box region) -> cloud -> denoise -> PCA box, with the
    degenerate fallback applied automatically.  Raises EmptyCloud when the
    detection has no usable depth."""
    region = det.mask if det.mask is not None else det.bbox
    cloud = backproject(depth, region, intrinsics)
    try:
        cloud = denoise(cloud, cfg)
        return pca_fit_box(cloud)
    except DegenerateCloud:
        return degenerate_box_from_bbox(det.bbox, depth, intrinsics)


def iou_2d(a: BBox2D, b: BBox2D) -> float:
    """Intersection over union of two 2D boxes; 0 when both are zero-area."""
    x0 = max(a.x, b.x)
    y0 = max(a.y, b.y)
    x1 = min(a.x + a.w, b.x + b.w)
    y1 = min(a.y + a.h, b.y + b.h)
    inter = max(0.0, x1 - x0) * max(0.0, y1 - y0)
    union = a.w * a.h + b.w * b.h - inter
    if union <= 0:
        return 0.0
    return inter / union


def dump_cloud(cloud: np.ndarray, path: str) -> None:
    """Debug dump: one 'x y z' line per point, meters."""
    pts = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    with open(path, "w", encoding="utf-8") as f:
        for x, y, z in pts:
            f.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")
