"""Per-class IoU of segmented clouds against a ground-truth voxel map."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .cloud_fusion import SemanticCloud
from .core import ClassRegistry
from .geometry import INSIDE, CameraModel, RigidTransform
from .voxel_map import VoxelMap, voxel_key

UNMATCHED = -1


_PACK_BITS = 21
_PACK_OFF = 1 << (_PACK_BITS - 1)


def _pack_keys(keys: np.ndarray) -> np.ndarray:
    """Injective int64 code for voxel keys with every component in [-2^20, 2^20)."""
    k = keys.astype(np.int64) + _PACK_OFF
    return (k[:, 0] << (2 * _PACK_BITS)) | (k[:, 1] << _PACK_BITS) | k[:, 2]


def _packable(keys: np.ndarray) -> bool:
    return keys.size == 0 or (keys.min() >= -_PACK_OFF and keys.max() < _PACK_OFF)


def label_against_map(cloud: SemanticCloud, gt_map: VoxelMap, voxel_size: float | None = None, lookup: dict | None = None):
    """Pair each point's argmax with the label of its ground-truth voxel.

    Returns ``(predicted, gt)``; ``gt`` is ``UNMATCHED`` where the point's
    voxel is absent from the map.
    """
    if cloud.frame != "world":
        raise ValueError("evaluation needs world-frame clouds")
    if voxel_size is not None and not np.isclose(voxel_size, gt_map.voxel_size):
        raise ValueError(f"ground-truth map voxel size {gt_map.voxel_size} != evaluation voxel size {voxel_size}")
    pred = cloud.labels
    gt = np.full(len(cloud), UNMATCHED, dtype=np.int64)
    if len(gt_map) == 0 or len(cloud) == 0:
        return pred, gt
    lookup = gt_map.label_lookup() if lookup is None else lookup
    map_keys = np.array(list(lookup), dtype=np.int64).reshape(-1, 3)
    map_labels = np.fromiter(lookup.values(), dtype=np.int64, count=len(lookup))
    keys = voxel_key(cloud.positions, gt_map.voxel_size)
    if not (_packable(map_keys) and _packable(keys)):
        gt[:] = [lookup.get(tuple(k), UNMATCHED) for k in keys.tolist()]
        return pred, gt
    code = _pack_keys(map_keys)
    order = np.argsort(code)
    code, map_labels = code[order], map_labels[order]
    q = _pack_keys(keys)
    pos = np.clip(np.searchsorted(code, q), 0, len(code) - 1)
    hit = code[pos] == q
    gt[hit] = map_labels[pos[hit]]
    return pred, gt


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    unmatched: int = 0

    @classmethod
    def zeros(cls, num_classes: int) -> "ConfusionCounts":
        z = np.zeros(num_classes, dtype=np.int64)
        return cls(z.copy(), z.copy(), z.copy())

    @classmethod
    def from_labels(cls, pred, gt, num_classes: int) -> "ConfusionCounts":
        pred = np.asarray(pred, dtype=np.int64)
        gt = np.asarray(gt, dtype=np.int64)
        m = gt != UNMATCHED
        p, g = pred[m], gt[m]
        hit = p == g
        tp = np.bincount(g[hit], minlength=num_classes)
        fp = np.bincount(p[~hit], minlength=num_classes)
        fn = np.bincount(g[~hit], minlength=num_classes)
        return cls(tp, fp, fn, int((~m).sum()))

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn,
                               self.unmatched + other.unmatched)

    @property
    def matched(self) -> int:
        return int(self.tp.sum() + self.fn.sum())


@dataclass
class IoUResult:
    per_class: np.ndarray  # NaN where undefined
    mean: float

    @property
    def defined(self) -> np.ndarray:
        return ~np.isnan(self.per_class)


def iou(counts: ConfusionCounts) -> IoUResult:
    denom = (counts.tp + counts.fp + counts.fn).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        per = np.where(denom > 0, counts.tp / denom, np.nan)
    defined = ~np.isnan(per)
    mean = float(per[defined].mean()) if defined.any() else float("nan")
    return IoUResult(per, mean)


def restrict_to_fov(cloud: SemanticCloud, camera: CameraModel, chain: RigidTransform) -> SemanticCloud:
    """Keep the points that project inside ``camera`` with positive depth."""
    if len(cloud) == 0:
        return cloud
    _, _, _, status = camera.project(chain.apply(cloud.positions))
    return cloud.subset(np.flatnonzero(status == INSIDE))


def evaluate_clouds(clouds: Sequence[SemanticCloud], gt_map: VoxelMap, num_classes: int) -> ConfusionCounts:
    """Pooled counts over a whole sequence of world-frame clouds."""
    total = ConfusionCounts.zeros(num_classes)
    lookup = gt_map.label_lookup()
    for cloud in clouds:
        total = total + ConfusionCounts.from_labels(*label_against_map(cloud, gt_map, lookup=lookup), num_classes)
    return total


def _pct(x: float) -> str:
    return "-" if np.isnan(x) else f"{100.0 * x:.1f}"


def results_rows(results: Mapping[str, IoUResult], registry: ClassRegistry, classes: Sequence[str] | None = None):
    if classes is None:
        present = np.zeros(registry.count, dtype=bool)
        for r in results.values():
            present |= r.defined
        classes = [n for n, p in zip(registry.names, present) if p]
    idx = [registry.index(c) for c in classes]
    header = ["method", *classes, "mean"]
    rows = [[name, *(r.per_class[i] for i in idx), r.mean] for name, r in results.items()]
    return header, rows


def format_table(results: Mapping[str, IoUResult], registry: ClassRegistry, classes=None) -> str:
    """Text table of IoU in percent, one row per segmentation method."""
    header, rows = results_rows(results, registry, classes)
    cells = [header] + [[r[0], *(_pct(x) for x in r[1:])] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    lines = []
    for j, row in enumerate(cells):
        lines.append("  ".join(c.ljust(widths[0]) if i == 0 else c.rjust(widths[i]) for i, c in enumerate(row)))
        if j == 0:
            lines.append("-" * len(lines[0]))
    return "\n".join(lines)


def to_csv(results: Mapping[str, IoUResult], registry: ClassRegistry, classes=None, path: str | Path | None = None) -> str:
    header, rows = results_rows(results, registry, classes)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([r[0], *("" if np.isnan(x) else f"{x:.6f}" for x in r[1:])])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text
