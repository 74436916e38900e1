"""Sparse voxel semantic map with log-space Bayesian class fusion.

Every voxel keeps an infinite-horizon log-posterior plus a bounded deque of
per-scan log-likelihoods. Scans leaving the deque are folded into the
infinite-horizon state or dropped, depending on ``mode``.

Binary export layout (little-endian)::

    magic      4 bytes   b"SVXM"
    version    u32       1
    voxel_size f64       metres
    C          u32       number of classes
    C times:   u16 byte length + UTF-8 class name
    V          u64       number of voxels
    V records: key i64[3], mean f64[3], count u64, posterior f64[C]
"""

from __future__ import annotations

import io
import json
import struct
import threading
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .core import ClassRegistry, from_log, logsumexp, normalize_log, to_log

MAGIC = b"SVXM"
FORMAT_VERSION = 1


def voxel_key(position, voxel_size: float) -> np.ndarray:
    """Integer grid index by componentwise floor division (works for negatives)."""
    p = np.asarray(position, dtype=np.float64)
    return np.floor(p / voxel_size).astype(np.int64)


def log_bayes_update(L_prev, L_obs) -> np.ndarray:
    """Fuse two normalized log-probability vectors with Bayes' rule.

    Sum of logs, then normalize by the max-shifted log-sum-exp: the max term
    contributes exp(0) = 1 and only the remaining classes enter the log1p.
    """
    C = np.asarray(L_prev, dtype=np.float64) + np.asarray(L_obs, dtype=np.float64)
    idx = np.argmax(C, axis=-1)[..., None]
    M = np.take_along_axis(C, idx, axis=-1)
    rest = np.exp(C - M)
    np.put_along_axis(rest, idx, 0.0, axis=-1)
    N = np.log1p(rest.sum(axis=-1, keepdims=True))
    return C - (M + N)


def naive_bayes_update(P_prev, P_obs) -> np.ndarray:
    """Probability-space Bayes step (product, then normalize).

    Returns NaNs when every product underflowed to zero.
    """
    prod = np.asarray(P_prev, dtype=np.float64) * np.asarray(P_obs, dtype=np.float64)
    s = prod.sum(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(s > 0, prod / s, np.nan)


class NaiveProductFusion:
    """Reference fuser that multiplies probabilities and normalizes on read.

    Kept for comparison with the log-space path; long observation
    sequences drive the running product to all zeros.
    """

    def __init__(self, num_classes: int):
        self.product = np.full(num_classes, 1.0 / num_classes)

    def update(self, p_obs) -> None:
        self.product = self.product * np.asarray(p_obs, dtype=np.float64)

    @property
    def normalizable(self) -> bool:
        return bool(self.product.sum() > 0)

    def posterior(self) -> np.ndarray:
        s = self.product.sum()
        if not s > 0:
            raise FloatingPointError("all class products underflowed to zero")
        return self.product / s


class ScanObservation(NamedTuple):
    scan_id: int
    L: np.ndarray
    count: int


@dataclass
class Voxel:
    L: np.ndarray
    position_sum: np.ndarray = field(default_factory=lambda: np.zeros(3))
    point_count: int = 0
    scan_deque: deque = field(default_factory=deque)
    cached_L: np.ndarray | None = None  # posterior over L and the deque; None when stale

    @property
    def mean_position(self) -> np.ndarray:
        return self.position_sum / max(self.point_count, 1)


class QueryResult(NamedTuple):
    posterior: np.ndarray
    argmax: int
    point_count: int


@dataclass(frozen=True)
class IntegrationSummary:
    scan_id: int
    points: int
    voxels_touched: int
    voxels_created: int
    folded: int
    dropped: int


@dataclass
class MapExport:
    voxel_size: float
    class_names: tuple[str, ...]
    keys: np.ndarray  # (V, 3) int64
    means: np.ndarray  # (V, 3)
    counts: np.ndarray  # (V,)
    posteriors: np.ndarray  # (V, C)

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.posteriors, axis=1) if len(self) else np.zeros(0, dtype=np.intp)

    def records(self):
        for k, m, c, p, a in zip(self.keys, self.means, self.counts, self.posteriors, self.labels):
            yield {
                "key": [int(x) for x in k],
                "mean": [float(x) for x in m],
                "count": int(c),
                "posterior": [float(x) for x in p],
                "argmax": self.class_names[int(a)],
            }

    def write_ndjson(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w") as fh:
            for rec in self.records():
                fh.write(json.dumps(rec) + "\n")
        return path

    def to_bytes(self) -> bytes:
        C = len(self.class_names)
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<IdI", FORMAT_VERSION, self.voxel_size, C))
        for name in self.class_names:
            b = name.encode("utf-8")
            buf.write(struct.pack("<H", len(b)))
            buf.write(b)
        buf.write(struct.pack("<Q", len(self)))
        rec = np.zeros(len(self), dtype=_record_dtype(C))
        rec["key"] = self.keys
        rec["mean"] = self.means
        rec["count"] = self.counts
        rec["posterior"] = self.posteriors
        buf.write(rec.tobytes())
        return buf.getvalue()

    def write_binary(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def from_bytes(cls, data: bytes) -> "MapExport":
        if data[:4] != MAGIC:
            raise ValueError("not a voxel map file (bad magic)")
        version, voxel_size, C = struct.unpack_from("<IdI", data, 4)
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported voxel map version {version}")
        off = 4 + struct.calcsize("<IdI")
        names = []
        for _ in range(C):
            (n,) = struct.unpack_from("<H", data, off)
            off += 2
            names.append(data[off : off + n].decode("utf-8"))
            off += n
        (V,) = struct.unpack_from("<Q", data, off)
        off += 8
        dt = _record_dtype(C)
        if len(data) - off != V * dt.itemsize:
            raise ValueError("voxel map file is truncated or has trailing bytes")
        rec = np.frombuffer(data, dtype=dt, count=V, offset=off)
        return cls(
            voxel_size, tuple(names),
            rec["key"].astype(np.int64), rec["mean"].astype(np.float64),
            rec["count"].astype(np.int64), rec["posterior"].astype(np.float64).reshape(V, C),
        )

    @classmethod
    def read_binary(cls, path: str | Path) -> "MapExport":
        return cls.from_bytes(Path(path).read_bytes())


def _record_dtype(C: int) -> np.dtype:
    return np.dtype([("key", "<i8", (3,)), ("mean", "<f8", (3,)), ("count", "<u8"), ("posterior", "<f8", (C,))])


class VoxelMap:
    """Sparse hash of voxels keyed by integer grid index."""

    def __init__(
        self,
        voxel_size: float = 0.25,
        num_classes: int = 15,
        horizon: int = 10,
        mode: str = "fold",
        scan_merge: str = "bayes",
        epsilon_prob: float = 1e-9,
    ):
        if voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if mode not in ("fold", "drop"):
            raise ValueError(f"mode must be 'fold' or 'drop', got {mode!r}")
        if horizon < 0 or (horizon == 0 and mode == "drop"):
            raise ValueError("horizon must be >= 0 (and > 0 in drop mode)")
        if scan_merge not in ("bayes", "mean"):
            raise ValueError(f"scan_merge must be 'bayes' or 'mean', got {scan_merge!r}")
        self.voxel_size = float(voxel_size)
        self.num_classes = int(num_classes)
        self.horizon = int(horizon)
        self.mode = mode
        self.scan_merge = scan_merge
        self.epsilon_prob = epsilon_prob
        self._voxels: dict[tuple[int, int, int], Voxel] = {}
        self._lock = threading.RLock()

    @classmethod
    def from_config(cls, cfg, num_classes: int) -> "VoxelMap":
        return cls(cfg.voxel_size, num_classes, cfg.deque_len, cfg.map_mode, cfg.scan_merge, cfg.epsilon_prob)

    def __len__(self) -> int:
        return len(self._voxels)

    def __contains__(self, key) -> bool:
        return tuple(int(k) for k in key) in self._voxels

    def keys(self):
        return list(self._voxels)

    def voxel(self, key) -> Voxel | None:
        return self._voxels.get(tuple(int(k) for k in key))

    @property
    def uniform_L(self) -> np.ndarray:
        return np.full(self.num_classes, -np.log(self.num_classes))

    def _merge_scan(self, scores: np.ndarray, inverse: np.ndarray, n_groups: int) -> np.ndarray:
        if self.scan_merge == "mean":
            sums = np.zeros((n_groups, scores.shape[1]))
            np.add.at(sums, inverse, scores)
            return to_log(sums / np.bincount(inverse, minlength=n_groups)[:, None], self.epsilon_prob)
        Lp = to_log(scores, self.epsilon_prob)
        acc = np.zeros((n_groups, scores.shape[1]))
        np.add.at(acc, inverse, Lp)
        return acc - logsumexp(acc)[:, None]

    def integrate_cloud(self, cloud, scan_id: int) -> IntegrationSummary:
        """Fold one world-frame cloud into the map as a single scan observation."""
        if getattr(cloud, "frame", "world") != "world":
            raise ValueError("clouds must be transformed to the world frame before integration")
        positions = np.asarray(cloud.positions, dtype=np.float64)
        scores = np.asarray(cloud.scores, dtype=np.float64)
        if scores.ndim != 2 or scores.shape[1] != self.num_classes:
            raise ValueError(f"cloud has {scores.shape[-1]} classes, map expects {self.num_classes}")
        if len(positions) == 0:
            return IntegrationSummary(scan_id, 0, 0, 0, 0, 0)
        keys = voxel_key(positions, self.voxel_size)
        ukeys, inverse = np.unique(keys, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        G = len(ukeys)
        L_scan = self._merge_scan(scores, inverse, G)
        counts = np.bincount(inverse, minlength=G)
        psum = np.zeros((G, 3))
        np.add.at(psum, inverse, positions)
        created = folded = dropped = 0
        fold_vox, fold_L = [], []
        touched = []
        with self._lock:
            for g, key in enumerate(map(tuple, ukeys.tolist())):
                vox = self._voxels.get(key)
                if vox is None:
                    vox = Voxel(self.uniform_L.copy())
                    self._voxels[key] = vox
                    created += 1
                vox.position_sum = vox.position_sum + psum[g]
                vox.point_count += int(counts[g])
                vox.cached_L = None
                touched.append(vox)
                dq = vox.scan_deque
                if dq and dq[-1].scan_id == scan_id:
                    last = dq.pop()
                    dq.append(ScanObservation(scan_id, log_bayes_update(last.L, L_scan[g]), last.count + int(counts[g])))
                else:
                    dq.append(ScanObservation(scan_id, L_scan[g], int(counts[g])))
                while len(dq) > self.horizon:
                    old = dq.popleft()
                    if self.mode == "fold":
                        fold_vox.append(vox)
                        fold_L.append(old.L)
                    else:
                        dropped += 1
            if fold_vox:
                # a voxel gains at most one observation per call, so it folds at most once
                new_L = log_bayes_update(np.stack([v.L for v in fold_vox]), np.stack(fold_L))
                for v, L in zip(fold_vox, new_L):
                    v.L = L
                folded = len(fold_vox)
            self._refresh(touched)
        return IntegrationSummary(scan_id, len(positions), G, created, folded, dropped)

    def _refresh(self, voxels) -> None:
        stale = [v for v in voxels if v.cached_L is None]
        if not stale:
            return
        acc = np.stack([v.L + sum(o.L for o in v.scan_deque) if v.scan_deque else v.L for v in stale])
        for v, L in zip(stale, normalize_log(acc)):
            v.cached_L = L

    def _posterior_L(self, vox: Voxel) -> np.ndarray:
        if vox.cached_L is None:
            self._refresh([vox])
        return vox.cached_L

    def query_key(self, key) -> QueryResult | None:
        with self._lock:
            vox = self.voxel(key)
            if vox is None:
                return None
            p = from_log(self._posterior_L(vox))
            return QueryResult(p, int(np.argmax(p)), vox.point_count)

    def query(self, position) -> QueryResult | None:
        return self.query_key(voxel_key(position, self.voxel_size))

    def export(self, class_names: Sequence[str] | ClassRegistry | None = None) -> MapExport:
        if isinstance(class_names, ClassRegistry):
            names = class_names.names
        elif class_names is None:
            names = tuple(str(i) for i in range(self.num_classes))
        else:
            names = tuple(class_names)
        if len(names) != self.num_classes:
            raise ValueError("class name count does not match the map")
        with self._lock:
            keys = sorted(self._voxels)
            V = len(keys)
            out_keys = np.array(keys, dtype=np.int64).reshape(V, 3)
            means = np.zeros((V, 3))
            counts = np.zeros(V, dtype=np.int64)
            post = np.zeros((V, self.num_classes))
            self._refresh(self._voxels.values())
            for i, k in enumerate(keys):
                vox = self._voxels[k]
                means[i] = vox.mean_position
                counts[i] = vox.point_count
            if V:
                post = from_log(np.stack([self._voxels[k].cached_L for k in keys]))
        return MapExport(self.voxel_size, names, out_keys, means, counts, post)

    @classmethod
    def from_export(cls, exp: MapExport, epsilon_prob: float = 1e-9, **kwargs) -> "VoxelMap":
        """Rebuild a map whose infinite-horizon state is the exported posterior."""
        m = cls(exp.voxel_size, len(exp.class_names), epsilon_prob=epsilon_prob, **kwargs)
        Ls = to_log(exp.posteriors, epsilon_prob) if len(exp) else np.zeros((0, m.num_classes))
        for k, mean, c, L in zip(exp.keys.tolist(), exp.means, exp.counts, Ls):
            m._voxels[tuple(k)] = Voxel(L, mean * int(c), int(c))
        return m

    def label_lookup(self) -> dict:
        """Voxel key -> argmax class of the current posterior."""
        with self._lock:
            if not self._voxels:
                return {}
            self._refresh(self._voxels.values())
            labels = np.argmax(np.stack([v.cached_L for v in self._voxels.values()]), axis=1).tolist()
            return dict(zip(self._voxels, labels))


def integrate_cloud(voxel_map: VoxelMap, cloud, scan_id: int) -> IntegrationSummary:
    return voxel_map.integrate_cloud(cloud, scan_id)


def query(voxel_map: VoxelMap, position) -> QueryResult | None:
    return voxel_map.query(position)


def export_map(voxel_map: VoxelMap, class_names=None) -> MapExport:
    return voxel_map.export(class_names)
