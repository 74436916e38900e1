"""Rigid transforms, pose interpolation, the LiDAR-to-camera chain and pinhole projection.

Quaternions are stored as ``[w, x, y, z]`` (Hamilton convention). A
:class:`RigidTransform` maps points from its source frame into its target
frame; ``a @ b`` applies ``b`` first. Transforms may be batched: rotation
``(..., 4)`` and translation ``(..., 3)``.

Camera frames are optical (x right, y down, z forward); body frames are
x forward, y left, z up.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .core import renormalize

log = logging.getLogger(__name__)

BEHIND_DEPTH = 1e-6

# projection status codes
INSIDE = 0
OUTSIDE_IMAGE = 1
BEHIND_CAMERA = 2


class TrajectoryCoverageError(ValueError):
    """Raised when a stamp is not covered by the trajectory (or it is empty)."""


# --------------------------------------------------------------------------
# quaternion helpers


def quat_mul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conj(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("zero quaternion")
    return q / n


def quat_to_matrix(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        axis=-2,
    )


def matrix_to_quat(R) -> np.ndarray:
    """Rotation matrix to unit quaternion with non-negative w (single matrix)."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.asarray(q)
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


def quat_from_axis_angle(axis, angle) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * np.asarray(angle, dtype=np.float64)
    return np.concatenate([np.cos(half)[..., None], np.sin(half)[..., None] * axis], axis=-1)


def quat_from_euler(roll=0.0, pitch=0.0, yaw=0.0) -> np.ndarray:
    """Intrinsic z-y'-x'' (yaw, pitch, roll) angles in radians."""
    qz = quat_from_axis_angle([0, 0, 1], yaw)
    qy = quat_from_axis_angle([0, 1, 0], pitch)
    qx = quat_from_axis_angle([1, 0, 0], roll)
    return quat_mul(quat_mul(qz, qy), qx)


def quat_angle(q0, q1) -> np.ndarray:
    """Rotation angle (radians) between two orientations."""
    d = np.abs(np.sum(np.asarray(q0) * np.asarray(q1), axis=-1))
    return 2.0 * np.arccos(np.clip(d, -1.0, 1.0))


def slerp(q0, q1, t) -> np.ndarray:
    """Shortest-arc spherical interpolation, broadcasting over leading axes."""
    q0 = np.asarray(q0, dtype=np.float64)
    q1 = np.asarray(q1, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)[..., None]
    dot = np.sum(q0 * q1, axis=-1, keepdims=True)
    q1 = np.where(dot < 0.0, -q1, q1)
    dot = np.clip(np.abs(dot), 0.0, 1.0)
    theta = np.arccos(dot)
    sin_theta = np.sin(theta)
    small = sin_theta < 1e-9
    safe = np.where(small, 1.0, sin_theta)
    w0 = np.where(small, 1.0 - t, np.sin((1.0 - t) * theta) / safe)
    w1 = np.where(small, t, np.sin(t * theta) / safe)
    return quat_normalize(w0 * q0 + w1 * q1)


# --------------------------------------------------------------------------
# rigid transforms


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if q.shape[-1] != 4 or t.shape[-1] != 3:
            raise ValueError("rotation must be (..., 4) and translation (..., 3)")
        n = np.linalg.norm(q, axis=-1)
        if np.any(np.abs(n - 1.0) > 1e-9):
            q = quat_normalize(q)
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, M) -> "RigidTransform":
        M = np.asarray(M, dtype=np.float64)
        return cls(matrix_to_quat(M[:3, :3]), M[:3, 3].copy())

    @classmethod
    def from_euler(cls, roll=0.0, pitch=0.0, yaw=0.0, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(quat_from_euler(roll, pitch, yaw), np.asarray(translation, dtype=np.float64))

    @property
    def shape(self) -> tuple[int, ...]:
        return np.broadcast_shapes(self.rotation.shape[:-1], self.translation.shape[:-1])

    def __len__(self) -> int:
        return self.shape[0]

    def __getitem__(self, idx) -> "RigidTransform":
        return RigidTransform(self.rotation[idx], self.translation[idx])

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def as_matrix(self) -> np.ndarray:
        shape = self.shape
        M = np.zeros(shape + (4, 4))
        M[..., :3, :3] = self.rotation_matrix()
        M[..., :3, 3] = self.translation
        M[..., 3, 3] = 1.0
        return M

    def apply(self, points) -> np.ndarray:
        """Map ``(..., 3)`` points; batched transforms pair up with leading axes."""
        p = np.asarray(points, dtype=np.float64)
        R = self.rotation_matrix()
        return np.einsum("...ij,...j->...i", R, p) + self.translation

    def rotate(self, vectors) -> np.ndarray:
        return np.einsum("...ij,...j->...i", self.rotation_matrix(), np.asarray(vectors, dtype=np.float64))

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        q = quat_mul(self.rotation, other.rotation)
        t = self.rotate(other.translation) + self.translation
        return RigidTransform(q, t)

    __matmul__ = compose

    def inverse(self) -> "RigidTransform":
        qi = quat_conj(self.rotation)
        ti = -np.einsum("...ij,...j->...i", quat_to_matrix(qi), self.translation)
        return RigidTransform(qi, ti)

    def to_dict(self) -> dict:
        return {"quaternion": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "RigidTransform":
        return cls(np.asarray(doc["quaternion"], dtype=np.float64), np.asarray(doc["translation"], dtype=np.float64))

    def allclose(self, other: "RigidTransform", atol: float = 1e-9) -> bool:
        # q and -q are the same rotation
        d = np.abs(np.sum(self.rotation * other.rotation, axis=-1))
        return bool(np.all(np.abs(d - 1.0) <= atol) and np.allclose(self.translation, other.translation, atol=atol, rtol=0))

    def __repr__(self) -> str:
        return f"RigidTransform(q={np.round(self.rotation, 6).tolist()}, t={np.round(self.translation, 6).tolist()})"


def stack_transforms(transforms: Sequence[RigidTransform]) -> RigidTransform:
    return RigidTransform(
        np.stack([t.rotation for t in transforms]), np.stack([t.translation for t in transforms])
    )


# --------------------------------------------------------------------------
# trajectories


@dataclass(frozen=True)
class TrajectorySample:
    stamp: float
    pose: RigidTransform


class Trajectory:
    """Stamp-sorted base poses in the world frame (``world_T_base``)."""

    def __init__(self, stamps, rotations, translations):
        self.stamps = np.asarray(stamps, dtype=np.float64).reshape(-1)
        self.rotations = np.asarray(rotations, dtype=np.float64).reshape(-1, 4)
        if len(self.rotations) and np.any(np.abs(np.linalg.norm(self.rotations, axis=1) - 1.0) > 1e-12):
            self.rotations = quat_normalize(self.rotations)
        self.translations = np.asarray(translations, dtype=np.float64).reshape(-1, 3)
        if not (len(self.stamps) == len(self.rotations) == len(self.translations)):
            raise ValueError("stamps, rotations and translations differ in length")
        if len(self.stamps) > 1 and np.any(np.diff(self.stamps) <= 0):
            raise ValueError("trajectory stamps must be strictly increasing")

    @classmethod
    def from_samples(cls, samples: Sequence[TrajectorySample]) -> "Trajectory":
        if not samples:
            return cls(np.zeros(0), np.zeros((0, 4)), np.zeros((0, 3)))
        return cls(
            [s.stamp for s in samples],
            np.stack([s.pose.rotation for s in samples]),
            np.stack([s.pose.translation for s in samples]),
        )

    def __len__(self) -> int:
        return len(self.stamps)

    def samples(self) -> list[TrajectorySample]:
        return [
            TrajectorySample(float(s), RigidTransform(q, t))
            for s, q, t in zip(self.stamps, self.rotations, self.translations)
        ]

    @property
    def start(self) -> float:
        return float(self.stamps[0])

    @property
    def end(self) -> float:
        return float(self.stamps[-1])

    def covers(self, t, slack: float = 0.1) -> bool:
        t = np.asarray(t)
        return bool(len(self) and np.all(t >= self.start - slack) and np.all(t <= self.end + slack))

    def poses_at(self, times, slack: float = 0.1) -> tuple[RigidTransform, np.ndarray]:
        """Interpolated poses for an array of stamps plus a mask of clamped stamps."""
        if len(self) == 0:
            raise TrajectoryCoverageError("trajectory is empty")
        t = np.asarray(times, dtype=np.float64)
        lo, hi = self.start, self.end
        if np.any(t < lo - slack) or np.any(t > hi + slack):
            bad = t[(t < lo - slack) | (t > hi + slack)].ravel()[0]
            raise TrajectoryCoverageError(
                f"stamp {bad:.6f} outside trajectory [{lo:.6f}, {hi:.6f}] by more than {slack} s"
            )
        clamped = (t < lo) | (t > hi)
        if np.any(clamped):
            log.debug("clamped %d stamps to the trajectory range", int(clamped.sum()))
        tc = np.clip(t, lo, hi)
        if len(self) == 1:
            shape = tc.shape
            return RigidTransform(
                np.broadcast_to(self.rotations[0], shape + (4,)).copy(),
                np.broadcast_to(self.translations[0], shape + (3,)).copy(),
            ), clamped
        i = np.clip(np.searchsorted(self.stamps, tc, side="right") - 1, 0, len(self) - 2)
        t0, t1 = self.stamps[i], self.stamps[i + 1]
        f = (tc - t0) / (t1 - t0)
        q = slerp(self.rotations[i], self.rotations[i + 1], f)
        tr = (1.0 - f)[..., None] * self.translations[i] + f[..., None] * self.translations[i + 1]
        # exact sample at sample stamps
        at0 = (f == 0.0)[..., None]
        at1 = (f == 1.0)[..., None]
        q = np.where(at0, self.rotations[i], np.where(at1, self.rotations[i + 1], q))
        tr = np.where(at0, self.translations[i], np.where(at1, self.translations[i + 1], tr))
        return RigidTransform(q, tr), clamped

    def to_array(self) -> np.ndarray:
        """``(N, 8)`` rows of stamp, qw, qx, qy, qz, tx, ty, tz."""
        return np.column_stack([self.stamps, self.rotations, self.translations])

    @classmethod
    def from_array(cls, arr) -> "Trajectory":
        arr = np.asarray(arr, dtype=np.float64).reshape(-1, 8)
        return cls(arr[:, 0], arr[:, 1:5], arr[:, 5:8])


def interpolate_pose(trajectory: Trajectory | Sequence[TrajectorySample], t: float, slack: float = 0.1) -> RigidTransform:
    if not isinstance(trajectory, Trajectory):
        trajectory = Trajectory.from_samples(list(trajectory))
    pose, _ = trajectory.poses_at(np.float64(t), slack)
    return pose


# --------------------------------------------------------------------------
# cameras and rig


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point lies outside the image")

    @classmethod
    def from_fov(cls, width: int, height: int, hfov_deg: float) -> "CameraModel":
        f = 0.5 * width / np.tan(np.radians(hfov_deg) / 2)
        return cls(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def inside(self, u, v) -> np.ndarray:
        u = np.asarray(u)
        v = np.asarray(v)
        return (u >= 0) & (u <= self.width - 1) & (v >= 0) & (v <= self.height - 1)

    def project(self, points) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Vectorized projection: ``(u, v, depth, status)``."""
        p = np.asarray(points, dtype=np.float64)
        z = p[..., 2]
        behind = z <= BEHIND_DEPTH
        zs = np.where(behind, 1.0, z)
        u = self.fx * p[..., 0] / zs + self.cx
        v = self.fy * p[..., 1] / zs + self.cy
        status = np.where(behind, BEHIND_CAMERA, np.where(self.inside(u, v), INSIDE, OUTSIDE_IMAGE))
        u = np.where(behind, np.nan, u)
        v = np.where(behind, np.nan, v)
        return u, v, z, status

    def unproject(self, u, v, depth) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        d = np.asarray(depth, dtype=np.float64)
        return np.stack([(u - self.cx) / self.fx * d, (v - self.cy) / self.fy * d, d], axis=-1)

    def pixel_grid(self) -> tuple[np.ndarray, np.ndarray]:
        v, u = np.mgrid[0 : self.height, 0 : self.width]
        return u.astype(np.float64), v.astype(np.float64)

    def unproject_depth(self, depth) -> np.ndarray:
        u, v = self.pixel_grid()
        return self.unproject(u, v, depth)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy, "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, doc: dict) -> "CameraModel":
        return cls(float(doc["fx"]), float(doc["fy"]), float(doc["cx"]), float(doc["cy"]), int(doc["width"]), int(doc["height"]))


class Projection(NamedTuple):
    u: float
    v: float
    depth: float
    status: int

    @property
    def behind(self) -> bool:
        return self.status == BEHIND_CAMERA

    @property
    def inside(self) -> bool:
        return self.status == INSIDE


def project_point(cam: CameraModel, p_cam) -> Projection:
    u, v, z, s = cam.project(np.asarray(p_cam, dtype=np.float64))
    return Projection(float(u), float(v), float(z), int(s))


def unproject(cam: CameraModel, u, v, depth) -> np.ndarray:
    return cam.unproject(u, v, depth)


@dataclass(frozen=True)
class RigExtrinsics:
    """Static sensor mounting: ``base_T_lidar`` and ``cam_T_base`` per camera."""

    base_T_lidar: RigidTransform = field(default_factory=RigidTransform)
    cam_T_base: dict = field(default_factory=dict)

    def camera(self, camera_id: str) -> RigidTransform:
        try:
            return self.cam_T_base[camera_id]
        except KeyError:
            raise KeyError(f"no extrinsics for camera {camera_id!r}") from None

    def to_dict(self) -> dict:
        return {
            "base_T_lidar": self.base_T_lidar.to_dict(),
            "cam_T_base": {k: v.to_dict() for k, v in self.cam_T_base.items()},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RigExtrinsics":
        return cls(
            RigidTransform.from_dict(doc["base_T_lidar"]),
            {k: RigidTransform.from_dict(v) for k, v in doc.get("cam_T_base", {}).items()},
        )


@dataclass(frozen=True)
class Calibration:
    extrinsics: RigExtrinsics
    cameras: dict

    def to_dict(self) -> dict:
        return {
            "extrinsics": self.extrinsics.to_dict(),
            "cameras": {k: c.to_dict() for k, c in self.cameras.items()},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Calibration":
        try:
            return cls(
                RigExtrinsics.from_dict(doc["extrinsics"]),
                {k: CameraModel.from_dict(c) for k, c in doc["cameras"].items()},
            )
        except KeyError as exc:
            raise ValueError(f"calibration document is missing {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "Calibration":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def camera_pose(trajectory: Trajectory, extr: RigExtrinsics, camera_id: str, t, slack: float = 0.1) -> RigidTransform:
    """``world_T_cam`` at stamp(s) ``t``."""
    world_T_base, _ = trajectory.poses_at(t, slack)
    return world_T_base @ extr.camera(camera_id).inverse()


def chain_transform(
    extr: RigExtrinsics,
    camera_id: str,
    trajectory: Trajectory,
    t_c: float,
    t_l,
    slack: float = 0.1,
) -> RigidTransform:
    """LiDAR -> camera chain ``cam_T_base · base(t_c)_T_base(t_l) · base_T_lidar``.

    ``t_l`` may be an array of per-point stamps; the result is then batched.
    Where ``t_l == t_c`` the motion factor is skipped entirely.
    """
    static_tail = extr.base_T_lidar
    cam_T_base = extr.camera(camera_id)
    t_l = np.asarray(t_l, dtype=np.float64)
    if t_l.ndim == 0 and t_l == t_c:
        return cam_T_base @ static_tail
    pose_c = interpolate_pose(trajectory, t_c, slack)
    pose_l, _ = trajectory.poses_at(t_l, slack)
    motion = pose_c.inverse() @ pose_l
    same = (t_l == t_c)
    if np.any(same):
        motion = RigidTransform(
            np.where(same[..., None], np.array([1.0, 0.0, 0.0, 0.0]), motion.rotation),
            np.where(same[..., None], 0.0, motion.translation),
        )
    return cam_T_base @ (motion @ static_tail)


def bilinear_sample(scores, u, v) -> tuple[np.ndarray, np.ndarray]:
    """Sample an ``(H, W, C)`` score mask at sub-pixel locations.

    Returns ``(values, valid)``; rows for locations outside
    ``[0, W-1] x [0, H-1]`` are NaN and flagged invalid.
    """
    scores = np.asarray(scores, dtype=np.float64)
    H, W, C = scores.shape
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    v = np.atleast_1d(np.asarray(v, dtype=np.float64))
    valid = np.isfinite(u) & np.isfinite(v) & (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)
    out = np.full(u.shape + (C,), np.nan)
    if not valid.any():
        return out, valid
    uu, vv = u[valid], v[valid]
    u0 = np.minimum(np.floor(uu).astype(np.intp), max(W - 2, 0))
    v0 = np.minimum(np.floor(vv).astype(np.intp), max(H - 2, 0))
    u1 = np.minimum(u0 + 1, W - 1)
    v1 = np.minimum(v0 + 1, H - 1)
    fu = (uu - u0)[:, None]
    fv = (vv - v0)[:, None]
    top = (1.0 - fu) * scores[v0, u0] + fu * scores[v0, u1]
    bottom = (1.0 - fu) * scores[v1, u0] + fu * scores[v1, u1]
    out[valid] = renormalize((1.0 - fv) * top + fv * bottom)
    return out, valid
