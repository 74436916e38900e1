"""Augment LiDAR point scores with projected image segmentation and detections."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .core import FusionConfig, argmax_class, check_probability, one_hot, renormalize
from .geometry import (
    BEHIND_CAMERA,
    INSIDE,
    Calibration,
    RigExtrinsics,
    RigidTransform,
    Trajectory,
    TrajectoryCoverageError,
    bilinear_sample,
    chain_transform,
)

log = logging.getLogger(__name__)

FRAMES = ("lidar", "world")


@dataclass(frozen=True)
class LidarScan:
    """One LiDAR sweep with raw per-point class probabilities.

    ``positions`` are in the sensor frame at each point's capture time
    ``stamp + stamp_offsets``.
    """

    stamp: float
    positions: np.ndarray
    scores: np.ndarray
    intensity: np.ndarray | None = None
    stamp_offsets: np.ndarray | None = None
    gt_labels: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.positions)
        if self.intensity is None:
            object.__setattr__(self, "intensity", np.zeros(n))
        if self.stamp_offsets is None:
            object.__setattr__(self, "stamp_offsets", np.zeros(n))
        if self.scores.shape[0] != n or len(self.intensity) != n or len(self.stamp_offsets) != n:
            raise ValueError("scan arrays differ in length")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def point_stamps(self) -> np.ndarray:
        return self.stamp + self.stamp_offsets


class SemanticPoint(NamedTuple):
    position: np.ndarray
    intensity: float
    stamp_offset: float
    scores: np.ndarray
    argmax_class: int


@dataclass(frozen=True)
class SemanticCloud:
    scan_stamp: float
    positions: np.ndarray
    scores: np.ndarray
    intensity: np.ndarray
    stamp_offsets: np.ndarray
    frame: str = "lidar"
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        if self.frame not in FRAMES:
            raise ValueError(f"frame must be one of {FRAMES}, got {self.frame!r}")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("cloud positions must be finite")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def labels(self) -> np.ndarray:
        return argmax_class(self.scores)

    def point(self, i: int) -> SemanticPoint:
        return SemanticPoint(
            self.positions[i], float(self.intensity[i]), float(self.stamp_offsets[i]),
            self.scores[i], int(np.argmax(self.scores[i])),
        )

    def subset(self, idx) -> "SemanticCloud":
        return replace(
            self,
            positions=self.positions[idx],
            scores=self.scores[idx],
            intensity=self.intensity[idx],
            stamp_offsets=self.stamp_offsets[idx],
        )

    @classmethod
    def from_scan(cls, scan: LidarScan, scores=None) -> "SemanticCloud":
        return cls(
            float(scan.stamp),
            np.asarray(scan.positions, dtype=np.float64),
            np.asarray(scan.scores if scores is None else scores, dtype=np.float64),
            np.asarray(scan.intensity, dtype=np.float64),
            np.asarray(scan.stamp_offsets, dtype=np.float64),
        )

    def to_world(self, trajectory: Trajectory, extr: RigExtrinsics, slack: float = 0.1) -> "SemanticCloud":
        if self.frame == "world":
            return self
        world_T_base, _ = trajectory.poses_at(self.scan_stamp + self.stamp_offsets, slack)
        pts = world_T_base.apply(extr.base_T_lidar.apply(self.positions))
        return replace(self, positions=pts, frame="world")


@dataclass(frozen=True)
class DetectionBox:
    class_id: int
    score: float
    box: tuple[float, float, float, float]  # u_min, v_min, u_max, v_max
    camera_id: str = "rgb"
    stamp: float = 0.0

    def __post_init__(self):
        u0, v0, u1, v1 = (float(b) for b in self.box)
        object.__setattr__(self, "box", (u0, v0, u1, v1))
        if not (u0 < u1 and v0 < v1):
            raise ValueError(f"degenerate detection box {self.box}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score {self.score} outside [0, 1]")

    @property
    def center(self) -> tuple[float, float]:
        u0, v0, u1, v1 = self.box
        return 0.5 * (u0 + u1), 0.5 * (v0 + v1)

    @property
    def sigma(self) -> tuple[float, float]:
        u0, v0, u1, v1 = self.box
        return 0.5 * (u1 - u0), 0.5 * (v1 - v0)

    def contains(self, u, v) -> np.ndarray:
        u0, v0, u1, v1 = self.box
        u = np.asarray(u)
        v = np.asarray(v)
        return (u >= u0) & (u <= u1) & (v >= v0) & (v <= v1)


def detection_weight(box: DetectionBox, u, v) -> np.ndarray:
    """Detector score times an unnormalized Gaussian centred on the box.

    The standard deviations are half the box width and height, so the
    weight peaks at ``box.score`` in the centre.
    """
    cu, cv = box.center
    su, sv = box.sigma
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return box.score * np.exp(-((u - cu) ** 2) / (2 * su * su)) * np.exp(-((v - cv) ** 2) / (2 * sv * sv))


def fuse_point_scores(c_lidar, c_img, w_img: float) -> np.ndarray:
    if not 0.0 <= w_img <= 1.0:
        raise ValueError(f"w_img must be in [0, 1], got {w_img}")
    c_lidar = np.asarray(c_lidar, dtype=np.float64)
    c_img = np.asarray(c_img, dtype=np.float64)
    return renormalize((1.0 - w_img) * c_lidar + w_img * c_img)


def fuse_detection(c_fused, c_det, w_det) -> np.ndarray:
    w = np.asarray(w_det, dtype=np.float64)
    if np.any((w < 0) | (w > 1)):
        raise ValueError("w_det must be in [0, 1]")
    if w.ndim:
        w = w[..., None]
    c_fused = np.asarray(c_fused, dtype=np.float64)
    c_det = np.asarray(c_det, dtype=np.float64)
    return renormalize((1.0 - w) * c_fused + w * c_det)


def detection_vector(class_id: int, num_classes: int, epsilon_prob: float = 1e-9) -> np.ndarray:
    return one_hot(class_id, num_classes, epsilon_prob)


def foreground_filter(distances: Sequence[float], q: float = 0.25, margin: float = 0.5) -> np.ndarray:
    """Indices of points not farther than the ``q``-quantile distance plus ``margin``."""
    d = np.asarray(distances, dtype=np.float64)
    if d.size == 0:
        return np.zeros(0, dtype=np.intp)
    if not 0.0 < q <= 1.0:
        raise ValueError(f"quantile must be in (0, 1], got {q}")
    threshold = np.quantile(d, q) + margin
    keep = np.flatnonzero(d <= threshold)
    if keep.size == 0:
        keep = np.array([int(np.argmin(d))])
    return keep


def order_detections(detections: Sequence[DetectionBox]) -> list[DetectionBox]:
    """Descending score; ties keep camera then input order."""
    indexed = list(enumerate(detections))
    indexed.sort(key=lambda item: (-item[1].score, item[1].camera_id, item[0]))
    return [d for _, d in indexed]


class _Projector:
    """Caches per-(camera, stamp) projections of one scan."""

    def __init__(self, scan: LidarScan, calib: Calibration, trajectory: Trajectory, cfg: FusionConfig):
        self.positions = np.asarray(scan.positions, dtype=np.float64)
        self.t_l = scan.point_stamps if cfg.per_point_chain else np.float64(scan.stamp)
        self.calib = calib
        self.trajectory = trajectory
        self.slack = cfg.trajectory_slack
        self._cache = {}

    def __call__(self, camera_id: str, t_c: float):
        key = (camera_id, float(t_c))
        if key not in self._cache:
            T = chain_transform(self.calib.extrinsics, camera_id, self.trajectory, t_c, self.t_l, self.slack)
            p_cam = T.apply(self.positions)
            u, v, z, status = self.calib.cameras[camera_id].project(p_cam)
            self._cache[key] = (p_cam, u, v, z, status)
        return self._cache[key]


def _depth_consistent(depth, u, v, z, tol: float) -> np.ndarray:
    img = np.asarray(depth.depth)
    H, W = img.shape
    ui = np.clip(np.rint(u).astype(np.intp), 0, W - 1)
    vi = np.clip(np.rint(v).astype(np.intp), 0, H - 1)
    d = img[vi, ui]
    return (d > 0) & (np.abs(z - d) <= tol)


def augment_scan(
    scan: LidarScan,
    masks: Mapping[str, "object"],
    detections: Mapping[str, Sequence[DetectionBox]] | Sequence[DetectionBox],
    depth: Mapping[str, "object"] | None,
    trajectory: Trajectory,
    calib: Calibration,
    cfg: FusionConfig,
    expected_masks: Sequence[str] = (),
) -> SemanticCloud:
    """Fuse image scores and detections into the scan's per-point scores.

    ``masks`` and ``depth`` map camera ids to ScoreMask/DepthImage frames
    (their ``stamp`` selects the camera time of the transformation chain).
    When a depth image is given for a camera, image scores are only fused
    into points whose depth agrees with the camera depth within
    ``cfg.occlusion_tol``. Points outside every camera keep their scores
    untouched.
    """
    scores = check_probability(scan.scores, "LiDAR scores").copy()
    n, C = scores.shape
    warnings = []
    t_l = scan.point_stamps if cfg.per_point_chain else np.float64(scan.stamp)
    if n and not trajectory.covers(t_l, cfg.trajectory_slack):
        raise TrajectoryCoverageError(f"scan at {scan.stamp:.6f} is not covered by the trajectory")
    project = _Projector(scan, calib, trajectory, cfg)
    depth = depth or {}

    for cam_id in expected_masks:
        if cam_id not in masks:
            warnings.append(f"no segmentation mask for camera {cam_id!r}; skipped")

    for cam_id in sorted(masks):
        mask = masks[cam_id]
        if cam_id not in calib.cameras:
            warnings.append(f"mask from uncalibrated camera {cam_id!r}; skipped")
            continue
        if mask.scores.shape[-1] != C:
            raise ValueError(f"mask for {cam_id!r} has {mask.scores.shape[-1]} classes, scan has {C}")
        _, u, v, z, status = project(cam_id, mask.stamp)
        sel = status == INSIDE
        d = depth.get(cam_id)
        if d is not None and cfg.occlusion_tol is not None and sel.any():
            idx = np.flatnonzero(sel)
            sel[idx] = _depth_consistent(d, u[idx], v[idx], z[idx], cfg.occlusion_tol)
        idx = np.flatnonzero(sel)
        if idx.size == 0:
            continue
        c_img, ok = bilinear_sample(mask.scores, u[idx], v[idx])
        idx, c_img = idx[ok], c_img[ok]
        scores[idx] = fuse_point_scores(scores[idx], c_img, cfg.w_img)

    if isinstance(detections, Mapping):
        boxes = [b for dets in detections.values() for b in dets]
    else:
        boxes = list(detections)
    for box in order_detections(boxes):
        if box.camera_id not in calib.cameras:
            warnings.append(f"detection from uncalibrated camera {box.camera_id!r}; skipped")
            continue
        p_cam, u, v, z, status = project(box.camera_id, box.stamp)
        in_box = np.flatnonzero((status != BEHIND_CAMERA) & box.contains(u, v))
        if in_box.size == 0:
            continue
        dist = np.linalg.norm(p_cam[in_box], axis=1)
        sel = in_box[foreground_filter(dist, cfg.quantile_q, cfg.foreground_margin)]
        w = detection_weight(box, u[sel], v[sel])
        c_det = detection_vector(box.class_id, C, cfg.epsilon_prob)
        scores[sel] = fuse_detection(scores[sel], c_det, w)

    for w in warnings:
        log.warning(w)
    cloud = SemanticCloud.from_scan(scan, scores)
    return replace(cloud, warnings=tuple(warnings))
