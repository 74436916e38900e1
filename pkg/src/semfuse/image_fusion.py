"""Fused 2D segmentation: depth-based history warp, per-class exponential
smoothing and detection overlay from RGB and thermal boxes."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .cloud_fusion import DetectionBox, detection_vector, detection_weight, order_detections
from .core import FusionConfig, renormalize
from .geometry import BEHIND_CAMERA, Calibration, CameraModel, RigidTransform, Trajectory, camera_pose


@dataclass(frozen=True)
class ScoreMask:
    stamp: float
    scores: np.ndarray  # (H, W, C)
    camera_id: str = "rgb"

    def __post_init__(self):
        if np.ndim(self.scores) != 3:
            raise ValueError("score mask must be (H, W, C)")

    @property
    def height(self) -> int:
        return self.scores.shape[0]

    @property
    def width(self) -> int:
        return self.scores.shape[1]

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.scores, axis=-1)


@dataclass(frozen=True)
class DepthImage:
    stamp: float
    depth: np.ndarray  # (H, W) metres, 0 = invalid
    camera_id: str = "rgb"

    def __post_init__(self):
        d = np.asarray(self.depth)
        if d.ndim != 2:
            raise ValueError("depth image must be (H, W)")
        if not np.all(np.isfinite(d)) or np.any(d < 0):
            raise ValueError("depth values must be finite and non-negative")

    @property
    def valid(self) -> np.ndarray:
        return self.depth > 0


@dataclass(frozen=True)
class FusedMask:
    stamp: float
    scores: np.ndarray  # (H, W, C)
    valid: np.ndarray  # (H, W) bool
    camera_id: str = "rgb"

    @classmethod
    def from_mask(cls, mask: ScoreMask) -> "FusedMask":
        return cls(mask.stamp, np.asarray(mask.scores, dtype=np.float64).copy(),
                   np.ones(mask.scores.shape[:2], dtype=bool), mask.camera_id)

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.scores, axis=-1)

    def export(self, prefix: str | Path) -> tuple[Path, Path]:
        """Write ``<prefix>_labels.png`` (argmax index map) and ``<prefix>_scores.npy``."""
        from PIL import Image

        prefix = Path(prefix)
        labels = self.labels
        if labels.max(initial=0) > 255:
            raise ValueError("more than 256 classes do not fit an 8-bit index map")
        png = prefix.with_name(prefix.name + "_labels.png")
        npy = prefix.with_name(prefix.name + "_scores.npy")
        Image.fromarray(labels.astype(np.uint8), mode="L").save(png)
        np.save(npy, self.scores)
        return png, npy


def warp_previous(
    prev: FusedMask,
    prev_depth: DepthImage,
    pose_prev: RigidTransform,
    pose_cur: RigidTransform,
    cam: CameraModel,
) -> FusedMask:
    """Forward-scatter the previous fused mask into the current view.

    ``pose_prev``/``pose_cur`` are ``world_T_cam``. Each pixel with valid
    depth is unprojected, moved into the current camera and written to the
    nearest pixel; the closest source wins. Pixels nobody lands on are
    marked invalid.
    """
    H, W, C = prev.scores.shape
    if (H, W) != cam.shape or prev_depth.depth.shape != (H, W):
        raise ValueError("mask, depth and camera shapes differ")
    out = np.zeros_like(prev.scores, dtype=np.float64)
    valid = np.zeros((H, W), dtype=bool)
    src = prev_depth.valid & prev.valid
    if not src.any():
        return FusedMask(prev.stamp, out, valid, prev.camera_id)
    vs, us = np.nonzero(src)
    pts = cam.unproject(us.astype(np.float64), vs.astype(np.float64), prev_depth.depth[vs, us])
    cur_T_prev = pose_cur.inverse() @ pose_prev
    moved = cur_T_prev.apply(pts)
    u, v, z, status = cam.project(moved)
    ok = status != BEHIND_CAMERA
    ut = np.rint(np.where(ok, u, -1.0)).astype(np.intp)
    vt = np.rint(np.where(ok, v, -1.0)).astype(np.intp)
    ok &= (ut >= 0) & (ut < W) & (vt >= 0) & (vt < H)
    if ok.any():
        target = vt[ok] * W + ut[ok]
        order = np.lexsort((z[ok], target))
        first = order[np.unique(target[order], return_index=True)[1]]
        src_idx = np.flatnonzero(ok)[first]
        tv, tu = vt[src_idx], ut[src_idx]
        out[tv, tu] = prev.scores[vs[src_idx], us[src_idx]]
        valid[tv, tu] = True
    return FusedMask(prev.stamp, out, valid, prev.camera_id)


def temporal_smooth(cur: ScoreMask, warped_prev: FusedMask | None, alpha: Sequence[float]) -> FusedMask:
    """Per-class exponential smoothing where warped history exists."""
    scores = np.asarray(cur.scores, dtype=np.float64)
    a = np.asarray(alpha, dtype=np.float64)
    if a.shape != (scores.shape[-1],):
        raise ValueError(f"alpha has length {a.size}, masks have {scores.shape[-1]} classes")
    if warped_prev is None or not warped_prev.valid.any():
        return FusedMask(cur.stamp, scores.copy(), np.ones(scores.shape[:2], dtype=bool), cur.camera_id)
    if warped_prev.scores.shape != scores.shape:
        raise ValueError("current mask and warped history differ in shape")
    hv = warped_prev.valid
    out = scores.copy()
    out[hv] = renormalize(a * scores[hv] + (1.0 - a) * warped_prev.scores[hv])
    return FusedMask(cur.stamp, out, np.ones(scores.shape[:2], dtype=bool), cur.camera_id)


def _thermal_pixels(
    depth: DepthImage,
    calib: Calibration,
    rgb_id: str,
    thermal_id: str,
    motion: RigidTransform,
):
    """Project every RGB pixel with valid depth into the thermal image."""
    cam = calib.cameras[rgb_id]
    vs, us = np.nonzero(depth.valid)
    pts = cam.unproject(us.astype(np.float64), vs.astype(np.float64), depth.depth[vs, us])
    ext = calib.extrinsics
    thermal_T_rgb = ext.camera(thermal_id) @ motion @ ext.camera(rgb_id).inverse()
    ut, vt, _, status = calib.cameras[thermal_id].project(thermal_T_rgb.apply(pts))
    return vs, us, ut, vt, status


def overlay_detections(
    mask: FusedMask,
    rgb_dets: Sequence[DetectionBox],
    thermal_dets: Sequence[DetectionBox],
    depth: DepthImage | None,
    calib: Calibration,
    rgb_id: str = "rgb",
    thermal_id: str = "thermal",
    motions: dict | None = None,
    epsilon_prob: float = 1e-9,
) -> FusedMask:
    """Blend detection one-hots into the mask, strongest detection first.

    RGB boxes weight pixels directly. Thermal boxes are tested per RGB pixel
    after lifting it with its depth into the thermal camera; ``motions``
    maps a thermal stamp to ``base(t_thermal)_T_base(t_rgb)`` (identity when
    absent). Pixels without depth are skipped for thermal boxes.
    """
    scores = mask.scores.copy()
    H, W, C = scores.shape
    boxes = order_detections(list(rgb_dets) + list(thermal_dets))
    if not boxes:
        return replace(mask, scores=scores)
    u_grid, v_grid = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))
    thermal_cache = {}
    for box in boxes:
        c_det = detection_vector(box.class_id, C, epsilon_prob)
        if box.camera_id == rgb_id:
            inside = box.contains(u_grid, v_grid)
            if not inside.any():
                continue
            w = detection_weight(box, u_grid[inside], v_grid[inside])
            scores[inside] = renormalize((1.0 - w)[:, None] * scores[inside] + w[:, None] * c_det)
            continue
        if depth is None or box.camera_id not in calib.cameras:
            continue
        key = (box.camera_id, float(box.stamp))
        if key not in thermal_cache:
            motion = (motions or {}).get(key[1], RigidTransform.identity())
            thermal_cache[key] = _thermal_pixels(depth, calib, rgb_id, box.camera_id, motion)
        vs, us, ut, vt, status = thermal_cache[key]
        hit = (status != BEHIND_CAMERA) & box.contains(ut, vt)
        if not hit.any():
            continue
        w = detection_weight(box, ut[hit], vt[hit])
        py, px = vs[hit], us[hit]
        scores[py, px] = renormalize((1.0 - w)[:, None] * scores[py, px] + w[:, None] * c_det)
    return replace(mask, scores=scores)


@dataclass
class ImageHistory:
    fused: FusedMask
    depth: DepthImage


def fuse_image_frame(
    cur_mask: ScoreMask,
    cur_depth: DepthImage | None,
    history: ImageHistory | None,
    rgb_dets: Sequence[DetectionBox],
    thermal_dets: Sequence[DetectionBox],
    trajectory: Trajectory,
    calib: Calibration,
    cfg: FusionConfig,
    thermal_id: str = "thermal",
) -> tuple[FusedMask, ImageHistory | None]:
    """Warp history, smooth, overlay detections. Returns the fused mask and the next history."""
    cam_id = cur_mask.camera_id
    cam = calib.cameras[cam_id]
    slack = cfg.trajectory_slack
    warped = None
    if history is not None:
        pose_prev = camera_pose(trajectory, calib.extrinsics, cam_id, history.fused.stamp, slack)
        pose_cur = camera_pose(trajectory, calib.extrinsics, cam_id, cur_mask.stamp, slack)
        warped = warp_previous(history.fused, history.depth, pose_prev, pose_cur, cam)
    smoothed = temporal_smooth(cur_mask, warped, cfg.alpha)
    motions = {}
    if thermal_dets:
        base_rgb, _ = trajectory.poses_at(cur_mask.stamp, slack)
        for st in sorted({float(b.stamp) for b in thermal_dets}):
            base_th, _ = trajectory.poses_at(st, slack)
            motions[st] = base_th.inverse() @ base_rgb
    fused = overlay_detections(
        smoothed, rgb_dets, thermal_dets, cur_depth, calib, cam_id, thermal_id, motions, cfg.epsilon_prob
    )
    next_history = ImageHistory(fused, cur_depth) if cur_depth is not None else None
    return fused, next_history


class ImageFusionStream:
    """Sequential per-camera image fusion keeping the one-frame history."""

    def __init__(self, calib: Calibration, trajectory: Trajectory, cfg: FusionConfig, thermal_id: str = "thermal"):
        self.calib = calib
        self.trajectory = trajectory
        self.cfg = cfg
        self.thermal_id = thermal_id
        self.history: ImageHistory | None = None

    def reset(self) -> None:
        self.history = None

    def process(self, mask: ScoreMask, depth: DepthImage | None, rgb_dets=(), thermal_dets=()) -> FusedMask:
        fused, self.history = fuse_image_frame(
            mask, depth, self.history, rgb_dets, thermal_dets, self.trajectory, self.calib, self.cfg, self.thermal_id
        )
        return fused
