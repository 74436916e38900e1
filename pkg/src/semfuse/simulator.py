"""Deterministic synthetic scenes and sensor emulation.

Scenes are built from a ground plane, boxes and vertical cylinders, each
carrying one semantic class. Rendering is analytic ray casting; all random
draws come from generators seeded by ``(seed, stream, frame index)`` so any
frame can be re-rendered on its own.

Scene spec (JSON)::

    {
      "ground": {"height": 0.0, "class": "road", "extent": 100.0},
      "primitives": [
        {"shape": "box", "class": "building", "position": [x, y, z],
         "size": [sx, sy, sz], "yaw_deg": 0.0},
        {"shape": "cylinder", "class": "person", "position": [x, y, z],
         "radius": 0.3, "height": 1.8, "path": [[t, x, y, z], ...]}
      ],
      "random": {"region": [[xmin, ymin], [xmax, ymax]],
                 "counts": {"vegetation": 4, "person": 2}, "min_spacing": 2.0}
    }

``position`` is the bottom centre. A ``path`` moves the bottom centre
through timestamped waypoints (held constant outside them).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .cloud_fusion import DetectionBox, LidarScan
from .core import DETECTION_ALIASES, ClassRegistry, as_registry, one_hot
from .geometry import Calibration, CameraModel, RigExtrinsics, RigidTransform, Trajectory, quat_from_euler
from .image_fusion import DepthImage, ScoreMask

SHAPES = ("box", "cylinder", "ground")
STREAM_IDS = {"lidar": 1, "rgb": 2, "thermal": 3, "scene": 4}


class SceneSpecError(ValueError):
    """Invalid scene spec; the message starts with the offending field path."""


@dataclass(frozen=True)
class ScenePrimitive:
    shape: str
    class_id: int
    position: tuple[float, float, float]
    dimensions: tuple[float, ...]  # box (sx, sy, sz); cylinder (radius, height); ground (extent,)
    yaw: float = 0.0
    path: tuple[tuple[float, float, float, float], ...] | None = None

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if any(d <= 0 for d in self.dimensions):
            raise ValueError("primitive dimensions must be positive")

    def positions_at(self, t) -> np.ndarray:
        """Bottom-centre position at stamp(s) ``t``: ``(..., 3)``."""
        t = np.asarray(t, dtype=np.float64)
        if not self.path:
            return np.broadcast_to(np.asarray(self.position, dtype=np.float64), t.shape + (3,))
        wp = np.asarray(self.path, dtype=np.float64)
        return np.stack([np.interp(t, wp[:, 0], wp[:, k]) for k in (1, 2, 3)], axis=-1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["path"] = [list(p) for p in self.path] if self.path else None
        return d


@dataclass(frozen=True)
class Scene:
    registry: ClassRegistry
    primitives: tuple[ScenePrimitive, ...]

    def digest(self) -> str:
        doc = {"classes": list(self.registry.names), "primitives": [p.to_dict() for p in self.primitives]}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()

    @property
    def sky_class(self) -> int | None:
        return self.registry.names.index("sky") if "sky" in self.registry.names else None


def _field(cond: bool, path: str, msg: str) -> None:
    if not cond:
        raise SceneSpecError(f"{path}: {msg}")


def _vec(value, n: int, path: str, positive: bool = False) -> tuple[float, ...]:
    ok = isinstance(value, (list, tuple)) and len(value) == n and all(isinstance(v, (int, float)) for v in value)
    _field(ok, path, f"expected {n} numbers")
    if positive:
        _field(all(v > 0 for v in value), path, "values must be positive")
    return tuple(float(v) for v in value)


def _class_id(registry: ClassRegistry, name, path: str) -> int:
    _field(isinstance(name, str) and name in registry.names, path, f"unknown class {name!r}")
    return registry.index(name)


def _primitive_from_spec(p: dict, registry: ClassRegistry, path: str) -> ScenePrimitive:
    _field(isinstance(p, dict), path, "expected an object")
    shape = p.get("shape")
    _field(shape in ("box", "cylinder"), f"{path}.shape", "must be 'box' or 'cylinder'")
    cid = _class_id(registry, p.get("class"), f"{path}.class")
    pos = _vec(p.get("position"), 3, f"{path}.position")
    if shape == "box":
        dims = _vec(p.get("size"), 3, f"{path}.size", positive=True)
    else:
        r, h = p.get("radius"), p.get("height")
        _field(isinstance(r, (int, float)) and r > 0, f"{path}.radius", "must be a positive number")
        _field(isinstance(h, (int, float)) and h > 0, f"{path}.height", "must be a positive number")
        dims = (float(r), float(h))
    yaw = p.get("yaw_deg", 0.0)
    _field(isinstance(yaw, (int, float)), f"{path}.yaw_deg", "must be a number")
    wp = None
    if p.get("path") is not None:
        raw = p["path"]
        _field(isinstance(raw, list) and len(raw) >= 1, f"{path}.path", "expected a list of [t, x, y, z]")
        wp = tuple(_vec(w, 4, f"{path}.path[{i}]") for i, w in enumerate(raw))
        _field(all(b[0] > a[0] for a, b in zip(wp, wp[1:])), f"{path}.path", "stamps must increase")
    return ScenePrimitive(shape, cid, pos, dims, float(np.radians(yaw)), wp)


def generate_scene(spec: dict | None, seed: int = 0, registry: ClassRegistry | None = None) -> Scene:
    """Build a scene from a spec dict; random clutter is drawn from ``seed``."""
    registry = as_registry(registry)
    spec = spec or {}
    _field(isinstance(spec, dict), "$", "scene spec must be an object")
    unknown = set(spec) - {"ground", "primitives", "random"}
    _field(not unknown, "$", f"unknown keys {sorted(unknown)}")
    g = spec.get("ground", {})
    _field(isinstance(g, dict), "ground", "expected an object")
    height = g.get("height", 0.0)
    _field(isinstance(height, (int, float)), "ground.height", "must be a number")
    extent = g.get("extent", 100.0)
    _field(isinstance(extent, (int, float)) and extent > 0, "ground.extent", "must be positive")
    gcls = _class_id(registry, g.get("class", "road"), "ground.class")
    prims = [ScenePrimitive("ground", gcls, (0.0, 0.0, float(height)), (float(extent),))]
    plist = spec.get("primitives", [])
    _field(isinstance(plist, list), "primitives", "expected a list")
    for i, p in enumerate(plist):
        prims.append(_primitive_from_spec(p, registry, f"primitives[{i}]"))
    rnd = spec.get("random")
    if rnd:
        prims.extend(_random_clutter(rnd, registry, float(height), seed, prims))
    return Scene(registry, tuple(prims))


# default sizes for random clutter: shape, dims
_CLUTTER = {
    "person": ("cylinder", (0.3, 1.8)),
    "vegetation": ("cylinder", (1.2, 4.0)),
    "pole": ("cylinder", (0.15, 5.0)),
    "vehicle": ("box", (4.2, 1.8, 1.5)),
    "car": ("box", (4.2, 1.8, 1.5)),
    "bicycle": ("box", (1.7, 0.5, 1.1)),
    "building": ("box", (8.0, 8.0, 6.0)),
    "barrier": ("box", (2.0, 0.3, 1.0)),
    "object": ("box", (0.8, 0.8, 0.8)),
}


def _footprint(p: ScenePrimitive) -> float:
    if p.shape == "cylinder":
        return p.dimensions[0]
    return 0.5 * float(np.hypot(p.dimensions[0], p.dimensions[1]))


def _random_clutter(rnd: dict, registry: ClassRegistry, ground_z: float, seed: int, existing) -> list[ScenePrimitive]:
    _field(isinstance(rnd, dict), "random", "expected an object")
    (x0, y0), (x1, y1) = (_vec(c, 2, f"random.region[{i}]") for i, c in enumerate(rnd.get("region", [[-20, -20], [20, 20]])))
    _field(x1 > x0 and y1 > y0, "random.region", "max corner must exceed min corner")
    spacing = float(rnd.get("min_spacing", 1.0))
    counts = rnd.get("counts", {})
    _field(isinstance(counts, dict), "random.counts", "expected an object")
    rng = np.random.default_rng([seed, STREAM_IDS["scene"]])
    placed = [p for p in existing if p.shape != "ground"]
    out = []
    for name in sorted(counts):
        cid = _class_id(registry, name, f"random.counts.{name}")
        shape, dims = _CLUTTER.get(name, ("box", (1.0, 1.0, 1.0)))
        for k in range(int(counts[name])):
            for _ in range(200):
                x, y = rng.uniform(x0, x1), rng.uniform(y0, y1)
                yaw = rng.uniform(-np.pi, np.pi) if shape == "box" else 0.0
                cand = ScenePrimitive(shape, cid, (x, y, ground_z), dims, yaw)
                if all(np.hypot(x - q.position[0], y - q.position[1]) >= _footprint(cand) + _footprint(q) + spacing for q in placed):
                    break
            else:
                raise SceneSpecError(f"random.counts.{name}: could not place instance {k} without overlap")
            placed.append(cand)
            out.append(cand)
    return out


# --------------------------------------------------------------------------
# ray casting


def _intersect(prim: ScenePrimitive, o: np.ndarray, d: np.ndarray, times) -> np.ndarray:
    """Ray parameter of the first hit in front of the origin (inf on miss)."""
    n = len(o)
    t_hit = np.full(n, np.inf)
    base = prim.positions_at(times)
    if prim.shape == "ground":
        h, ext = prim.position[2], prim.dimensions[0]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (h - o[:, 2]) / d[:, 2]
        hit = np.isfinite(t) & (t > 1e-9)
        p = o + np.where(hit, t, 0.0)[:, None] * d
        hit &= (np.abs(p[:, 0]) <= ext) & (np.abs(p[:, 1]) <= ext)
        t_hit[hit] = t[hit]
        return t_hit
    c, s = np.cos(prim.yaw), np.sin(prim.yaw)
    rel = o - base
    # rotate into the primitive frame (yaw about z)
    lo = np.column_stack([c * rel[:, 0] + s * rel[:, 1], -s * rel[:, 0] + c * rel[:, 1], rel[:, 2]])
    ld = np.column_stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1], d[:, 2]])
    if prim.shape == "box":
        half = np.array([prim.dimensions[0] / 2, prim.dimensions[1] / 2, prim.dimensions[2] / 2])
        lo = lo - np.array([0.0, 0.0, half[2]])
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / ld
            t1 = (-half - lo) * inv
            t2 = (half - lo) * inv
        t1 = np.where(np.isnan(t1), -np.inf, t1)
        t2 = np.where(np.isnan(t2), np.inf, t2)
        tnear = np.minimum(t1, t2).max(axis=1)
        tfar = np.maximum(t1, t2).min(axis=1)
        hit = (tnear <= tfar) & (tnear > 1e-9)
        t_hit[hit] = tnear[hit]
        return t_hit
    r, height = prim.dimensions
    a = ld[:, 0] ** 2 + ld[:, 1] ** 2
    b = 2 * (lo[:, 0] * ld[:, 0] + lo[:, 1] * ld[:, 1])
    cc = lo[:, 0] ** 2 + lo[:, 1] ** 2 - r * r
    disc = b * b - 4 * a * cc
    ok = (a > 1e-15) & (disc >= 0)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        ts = np.where(ok, (-b - sq) / (2 * np.where(a > 0, a, 1.0)), np.inf)
        z = lo[:, 2] + ts * ld[:, 2]
    side = ok & (ts > 1e-9) & (z >= 0) & (z <= height)
    t_hit[side] = ts[side]
    for zc in (height, 0.0):
        with np.errstate(divide="ignore", invalid="ignore"):
            tc = (zc - lo[:, 2]) / ld[:, 2]
        cap = np.isfinite(tc) & (tc > 1e-9)
        pc = lo + np.where(cap, tc, 0.0)[:, None] * ld
        cap &= pc[:, 0] ** 2 + pc[:, 1] ** 2 <= r * r
        t_hit = np.where(cap & (tc < t_hit), tc, t_hit)
    return t_hit


def cast_rays(scene: Scene, origins, directions, times=0.0) -> tuple[np.ndarray, np.ndarray]:
    """First hit along each ray: ``(t, primitive_index)`` with ``(inf, -1)`` on miss.

    Directions need not be unit length; ``t`` is in units of the direction.
    """
    o = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    d = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    o = np.broadcast_to(o, d.shape)
    times = np.broadcast_to(np.asarray(times, dtype=np.float64), (len(d),))
    best = np.full(len(d), np.inf)
    idx = np.full(len(d), -1, dtype=np.int64)
    for k, prim in enumerate(scene.primitives):
        t = _intersect(prim, o, d, times)
        closer = t < best
        best[closer] = t[closer]
        idx[closer] = k
    return best, idx


def class_at_rays(scene: Scene, prim_idx: np.ndarray, miss: int | None = None) -> np.ndarray:
    classes = np.array([p.class_id for p in scene.primitives] + [-1 if miss is None else miss])
    return classes[np.where(prim_idx < 0, len(scene.primitives), prim_idx)]


# --------------------------------------------------------------------------
# sensor and noise models


@dataclass(frozen=True)
class ChannelNormalization:
    """Per-channel (range, x, y, z, intensity) mean/std used for LiDAR network inputs."""

    mean: tuple[float, ...] = (12.12, 10.88, 0.23, -1.04, 0.21)
    std: tuple[float, ...] = (12.32, 11.47, 6.91, 0.86, 0.16)

    def apply(self, positions, intensity) -> np.ndarray:
        p = np.asarray(positions, dtype=np.float64)
        ch = np.column_stack([np.linalg.norm(p, axis=1), p, np.asarray(intensity, dtype=np.float64)])
        return (ch - np.asarray(self.mean)) / np.asarray(self.std)


@dataclass(frozen=True)
class LidarModel:
    rings: int = 128
    beams: int = 1024
    vfov_deg: tuple[float, float] = (-45.0, 45.0)
    rate_hz: float = 10.0
    min_range: float = 0.3
    max_range: float = 60.0
    normalization: ChannelNormalization = field(default_factory=ChannelNormalization)

    @property
    def period(self) -> float:
        return 1.0 / self.rate_hz

    def directions(self) -> tuple[np.ndarray, np.ndarray]:
        """Unit ray directions ``(beams, rings, 3)`` and per-column time offsets."""
        el = np.radians(np.linspace(self.vfov_deg[0], self.vfov_deg[1], self.rings))
        az = 2 * np.pi * np.arange(self.beams) / self.beams
        A, E = np.meshgrid(az, el, indexing="ij")
        d = np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1)
        return d, np.arange(self.beams) / self.beams * self.period

    def to_dict(self) -> dict:
        d = asdict(self)
        d["vfov_deg"] = list(self.vfov_deg)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "LidarModel":
        doc = dict(doc)
        norm = doc.pop("normalization", None)
        if "vfov_deg" in doc:
            doc["vfov_deg"] = tuple(doc["vfov_deg"])
        if norm:
            doc["normalization"] = ChannelNormalization(tuple(norm["mean"]), tuple(norm["std"]))
        return cls(**doc)


@dataclass(frozen=True)
class SensorNoiseModel:
    """Score sampler around the true class plus range and detection noise.

    ``score_concentration`` = inf gives exact one-hot scores. ``confusion``
    maps a true class name to ``{confused class: probability}``.
    """

    score_concentration: float = 20.0
    mislabel_rate: float = 0.0
    confusion: dict = field(default_factory=dict)
    detection_recall: float = 1.0
    detection_score_range: tuple[float, float] = (0.6, 0.95)
    range_noise_sigma: float = 0.0

    def __post_init__(self):
        if not self.score_concentration > 0:
            raise ValueError("score_concentration must be positive")
        if not 0 <= self.mislabel_rate <= 1 or not 0 <= self.detection_recall <= 1:
            raise ValueError("rates must be in [0, 1]")
        lo, hi = self.detection_score_range
        if not 0 <= lo <= hi <= 1:
            raise ValueError("detection_score_range must satisfy 0 <= lo <= hi <= 1")
        if self.range_noise_sigma < 0:
            raise ValueError("range_noise_sigma must be non-negative")
        for src, row in self.confusion.items():
            if any(not 0 <= p <= 1 for p in row.values()) or sum(row.values()) > 1 + 1e-12:
                raise ValueError(f"confusion probabilities for {src!r} must be in [0, 1] and sum to <= 1")

    @classmethod
    def noiseless(cls) -> "SensorNoiseModel":
        return cls(float("inf"), 0.0, {}, 1.0, (1.0, 1.0), 0.0)

    @property
    def is_noiseless(self) -> bool:
        return np.isinf(self.score_concentration) and self.mislabel_rate == 0 and not self.confusion

    def to_dict(self) -> dict:
        d = asdict(self)
        d["detection_score_range"] = list(self.detection_score_range)
        d["score_concentration"] = "inf" if np.isinf(self.score_concentration) else self.score_concentration
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "SensorNoiseModel":
        doc = dict(doc)
        if doc.get("score_concentration") == "inf":
            doc["score_concentration"] = float("inf")
        if "detection_score_range" in doc:
            doc["detection_score_range"] = tuple(doc["detection_score_range"])
        return cls(**doc)


def sample_scores(labels, num_classes: int, noise: SensorNoiseModel, rng: np.random.Generator,
                  registry: ClassRegistry | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Score vectors concentrated on a (possibly confused) target class.

    Returns ``(scores, target)``. Each vector is Dirichlet distributed with
    concentration 1 on every class plus ``score_concentration`` on the target.
    """
    labels = np.asarray(labels, dtype=np.int64)
    target = labels.copy()
    flat = target.reshape(-1)
    u = rng.random(flat.shape)
    if noise.confusion:
        reg = as_registry(registry)
        for src, row in sorted(noise.confusion.items()):
            s = reg.index(src)
            acc = 0.0
            is_src = labels.reshape(-1) == s
            for dst, p in sorted(row.items()):
                sel = is_src & (u >= acc) & (u < acc + p)
                flat[sel] = reg.index(dst)
                acc += p
    if noise.mislabel_rate > 0:
        flip = rng.random(flat.shape) < noise.mislabel_rate
        other = rng.integers(0, num_classes - 1, flat.shape)
        other = np.where(other >= flat, other + 1, other)
        flat[flip] = other[flip]
    if np.isinf(noise.score_concentration):
        return one_hot(target, num_classes), target
    alpha = np.ones(flat.shape + (num_classes,))
    alpha[np.arange(flat.size), flat] += noise.score_concentration
    g = rng.standard_gamma(alpha)
    scores = g / g.sum(axis=1, keepdims=True)
    return scores.reshape(labels.shape + (num_classes,)), target


def frame_rng(seed: int, stream: str, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), STREAM_IDS[stream], int(index)])


# --------------------------------------------------------------------------
# rendering


def _as_trajectory(pose_or_traj) -> Trajectory:
    if isinstance(pose_or_traj, Trajectory):
        return pose_or_traj
    p = pose_or_traj
    return Trajectory([0.0], p.rotation[None], p.translation[None])


def render_lidar(
    scene: Scene,
    trajectory: Trajectory | RigidTransform,
    t: float,
    model: LidarModel,
    noise: SensorNoiseModel,
    base_T_lidar: RigidTransform | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[LidarScan, np.ndarray]:
    """One sweep starting at ``t``; each column is cast from the pose at its own time.

    Returns the scan (positions in the sensor frame at capture time) and the
    true class per point.
    """
    traj = _as_trajectory(trajectory)
    base_T_lidar = RigidTransform() if base_T_lidar is None else base_T_lidar
    rng = rng or np.random.default_rng(0)
    dirs, offsets = model.directions()
    B, R, _ = dirs.shape
    col_t = t + offsets
    world_T_base, _ = traj.poses_at(col_t, slack=np.inf if len(traj) == 1 else 0.1)
    world_T_lidar = world_T_base @ base_T_lidar
    origins = np.repeat(world_T_lidar.translation, R, axis=0)
    wdirs = np.einsum("bij,brj->bri", world_T_lidar.rotation_matrix(), dirs).reshape(-1, 3)
    ray_t = np.repeat(col_t, R)
    dist, prim = cast_rays(scene, origins, wdirs, ray_t)
    hit = np.isfinite(dist) & (dist >= model.min_range) & (dist <= model.max_range)
    rng_noise = rng.normal(0.0, noise.range_noise_sigma, dist.shape) if noise.range_noise_sigma > 0 else 0.0
    r = np.where(hit, dist + rng_noise, 0.0)
    hit &= r > 0
    local = dirs.reshape(-1, 3)[hit] * r[hit, None]
    labels = class_at_rays(scene, prim[hit])
    scores, _ = sample_scores(labels, scene.registry.count, noise, rng, scene.registry)
    reflect = 0.2 + 0.6 * (labels % 5) / 4.0
    intensity = reflect / (1.0 + 0.01 * r[hit] ** 2)
    offs = np.repeat(offsets, R)[hit]
    scan = LidarScan(float(t), local, scores, intensity, offs, labels.astype(np.int64))
    return scan, labels


@dataclass
class CameraRender:
    mask: ScoreMask | None
    depth: DepthImage
    detections: list
    gt_labels: np.ndarray  # (H, W), -1 where nothing was hit and there is no sky class
    instance: np.ndarray  # (H, W) primitive index, -1 for misses


def detection_labels(registry: ClassRegistry) -> dict:
    """Registry class index -> detector label for detectable classes."""
    out = {}
    for label in DETECTION_ALIASES:
        try:
            out[registry.detection_class(label)] = label
        except KeyError:
            pass
    return out


def silhouette_boxes(instance: np.ndarray, min_pixels: int = 4) -> dict:
    """Primitive index -> tight box around its visible pixels (pixel-edge coordinates)."""
    out = {}
    for k in np.unique(instance):
        if k < 0:
            continue
        vs, us = np.nonzero(instance == k)
        if len(vs) < min_pixels:
            continue
        out[int(k)] = (us.min() - 0.5, vs.min() - 0.5, us.max() + 0.5, vs.max() + 0.5)
    return out


def render_camera(
    scene: Scene,
    trajectory: Trajectory | RigidTransform,
    t: float,
    cam: CameraModel,
    cam_T_base: RigidTransform,
    noise: SensorNoiseModel,
    camera_id: str = "rgb",
    with_mask: bool = True,
    rng: np.random.Generator | None = None,
    min_box_pixels: int = 4,
) -> CameraRender:
    traj = _as_trajectory(trajectory)
    rng = rng or np.random.default_rng(0)
    world_T_base, _ = traj.poses_at(np.float64(t), slack=np.inf if len(traj) == 1 else 0.1)
    world_T_cam = world_T_base @ cam_T_base.inverse()
    u, v = cam.pixel_grid()
    d_cam = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u)], axis=-1).reshape(-1, 3)
    d_world = world_T_cam.rotate(d_cam)
    dist, prim = cast_rays(scene, world_T_cam.translation, d_world, t)
    hit = np.isfinite(dist)
    depth = np.where(hit, dist, 0.0).reshape(cam.shape)  # unnormalized rays: t is the optical depth
    instance = prim.reshape(cam.shape)
    gt = class_at_rays(scene, prim, scene.sky_class).reshape(cam.shape)
    mask = None
    if with_mask:
        labels = np.where(gt < 0, 0, gt)
        scores, _ = sample_scores(labels, scene.registry.count, noise, rng, scene.registry)
        mask = ScoreMask(float(t), scores, camera_id)
    dets = []
    det_classes = detection_labels(scene.registry)
    boxes = silhouette_boxes(instance, min_box_pixels)
    for k in sorted(boxes):
        cid = scene.primitives[k].class_id
        if cid not in det_classes:
            continue
        keep = rng.random() < noise.detection_recall
        lo, hi = noise.detection_score_range
        score = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
        if keep:
            dets.append(DetectionBox(cid, score, boxes[k], camera_id, float(t)))
    return CameraRender(mask, DepthImage(float(t), depth, camera_id), dets, gt, instance)


# --------------------------------------------------------------------------
# rigs, trajectories and flights


def optical_from_body(pitch_down_deg: float = 0.0, yaw_deg: float = 0.0) -> RigidTransform:
    """``cam_T_body`` rotation for a camera looking along body x, pitched down."""
    body_T_opt = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
    tilt = RigidTransform(quat_from_euler(0.0, np.radians(pitch_down_deg), np.radians(yaw_deg)))
    M = np.eye(4)
    M[:3, :3] = tilt.rotation_matrix() @ body_T_opt
    return RigidTransform.from_matrix(M).inverse()


def default_rig(rgb_size=(160, 120), thermal_size=(96, 72), pitch_down_deg: float = 25.0) -> Calibration:
    """LiDAR below the base, RGB-D camera (87 deg HFOV) and thermal camera (50 deg HFOV) in front."""
    rgb = CameraModel.from_fov(rgb_size[0], rgb_size[1], 87.0)
    thermal = CameraModel.from_fov(thermal_size[0], thermal_size[1], 50.0)
    mount_rgb = RigidTransform(translation=[0.15, 0.0, -0.05])
    mount_th = RigidTransform(translation=[0.15, -0.06, -0.08])
    cam_T_base = {
        "rgb": optical_from_body(pitch_down_deg) @ mount_rgb.inverse(),
        "thermal": optical_from_body(pitch_down_deg) @ mount_th.inverse(),
    }
    extr = RigExtrinsics(RigidTransform(translation=[0.0, 0.0, -0.2]), cam_T_base)
    return Calibration(extr, {"rgb": rgb, "thermal": thermal})


def trajectory_from_waypoints(waypoints: Sequence[Sequence[float]], rate: float = 100.0) -> Trajectory:
    """Sample ``[t, x, y, z, yaw_deg]`` waypoints (piecewise linear) at ``rate``."""
    wp = np.asarray(waypoints, dtype=np.float64)
    if wp.ndim != 2 or wp.shape[1] != 5 or len(wp) < 2:
        raise ValueError("waypoints must be at least two rows of [t, x, y, z, yaw_deg]")
    if np.any(np.diff(wp[:, 0]) <= 0):
        raise ValueError("waypoint stamps must increase")
    n = int(np.floor((wp[-1, 0] - wp[0, 0]) * rate + 1e-9)) + 1
    ts = wp[0, 0] + np.arange(n) / rate
    if ts[-1] < wp[-1, 0]:
        ts = np.append(ts, wp[-1, 0])
    xyz = np.stack([np.interp(ts, wp[:, 0], wp[:, k]) for k in (1, 2, 3)], axis=-1)
    yaw = np.radians(np.interp(ts, wp[:, 0], wp[:, 4]))
    q = quat_from_euler(np.zeros_like(yaw), np.zeros_like(yaw), yaw)
    return Trajectory(ts, q, xyz)


@dataclass(frozen=True)
class SensorRates:
    lidar: float = 10.0
    rgb: float = 30.0
    thermal: float = 9.0


def frame_stamps(rate: float, start: float, end: float) -> np.ndarray:
    k = np.arange(int(np.ceil((end - start) * rate - 1e-9)))
    return start + k / rate


def generate_flight(
    scene: Scene,
    trajectory: Trajectory | dict,
    calib: Calibration | None = None,
    lidar: LidarModel | None = None,
    rates: SensorRates | None = None,
    noise: dict | None = None,
    seed: int = 0,
    duration: float | None = None,
    voxel_size: float = 0.25,
):
    """Render a multi-rate recording plus the noiseless ground-truth map.

    ``noise`` maps ``"lidar"``, ``"rgb"`` and ``"thermal"`` to
    :class:`SensorNoiseModel`. Scans are published at the end of their
    sweep; the flight covers ``[trajectory.start, trajectory.start + duration)``.
    """
    from .io_replay import CameraFrame, Message, Recording
    from .voxel_map import VoxelMap

    if isinstance(trajectory, dict):
        trajectory = trajectory_from_waypoints(trajectory["waypoints"], trajectory.get("rate", 100.0))
    calib = calib or default_rig()
    lidar = lidar or LidarModel()
    rates = rates or SensorRates(lidar=lidar.rate_hz)
    if not np.isclose(rates.lidar, lidar.rate_hz):
        lidar = replace(lidar, rate_hz=rates.lidar)
    noise = noise or {}
    n_lidar = noise.get("lidar", SensorNoiseModel())
    n_rgb = noise.get("rgb", SensorNoiseModel())
    n_th = noise.get("thermal", SensorNoiseModel())
    t0 = trajectory.start
    t1 = trajectory.end if duration is None else t0 + duration
    if t1 > trajectory.end + 1e-9:
        raise ValueError("trajectory does not cover the requested duration")
    reg = scene.registry
    gt_map = VoxelMap(voxel_size, reg.count, horizon=0, mode="fold")
    messages = [Message("trajectory", float(s), p) for s, p in zip(trajectory.stamps, trajectory.samples())]
    for k, ts in enumerate(frame_stamps(rates.lidar, t0, t1 - lidar.period + 1e-9)):
        scan, labels = render_lidar(scene, trajectory, float(ts), lidar, n_lidar,
                                    calib.extrinsics.base_T_lidar, frame_rng(seed, "lidar", k))
        messages.append(Message("lidar", float(ts) + lidar.period, scan))
        gt_cloud = _gt_cloud(scan, labels, reg.count).to_world(trajectory, calib.extrinsics)
        gt_map.integrate_cloud(gt_cloud, k)
    for stream, rate, nm, with_mask in (("rgb", rates.rgb, n_rgb, True), ("thermal", rates.thermal, n_th, False)):
        if stream not in calib.cameras:
            continue
        for k, ts in enumerate(frame_stamps(rate, t0, t1)):
            rend = render_camera(scene, trajectory, float(ts), calib.cameras[stream], calib.extrinsics.camera(stream),
                                 nm, stream, with_mask, frame_rng(seed, stream, k))
            frame = CameraFrame(stream, float(ts), rend.mask, rend.depth if with_mask else None, tuple(rend.detections))
            messages.append(Message(stream, float(ts), frame))
    manifest = {
        "classes": reg.to_dict(),
        "calibration": calib.to_dict(),
        "rates": asdict(rates),
        "lidar_model": lidar.to_dict(),
        "noise": {"lidar": n_lidar.to_dict(), "rgb": n_rgb.to_dict(), "thermal": n_th.to_dict()},
        "seed": int(seed),
        "scene_digest": scene.digest(),
        "voxel_size": voxel_size,
        "mask_cameras": ["rgb"] if "rgb" in calib.cameras else [],
    }
    return Recording(manifest, messages, gt_map.export(reg))


def _gt_cloud(scan: LidarScan, labels: np.ndarray, num_classes: int):
    from .cloud_fusion import SemanticCloud

    return SemanticCloud.from_scan(scan, one_hot(labels, num_classes, 1e-9))
