"""Class registry, probability/log-probability vectors and the shared fusion config.

All score vectors live on the last axis of a numpy array, so a single
``(C,)`` vector, an ``(N, C)`` cloud and an ``(H, W, C)`` mask go through the
same functions.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEFAULT_CLASSES = (
    "road",
    "sidewalk",
    "building",
    "barrier",
    "vegetation",
    "terrain",
    "sky",
    "person",
    "bicycle",
    "vehicle",
    "water",
    "pole",
    "traffic-sign",
    "animal",
    "object",
)
DEFAULT_DYNAMIC = frozenset({"person", "bicycle", "vehicle", "animal"})

# detector label -> candidate registry names, first match wins
DETECTION_ALIASES = {
    "person": ("person", "pedestrian"),
    "vehicle": ("vehicle", "car"),
    "bicycle": ("bicycle", "bike"),
}
DETECTION_LABELS = tuple(DETECTION_ALIASES)

# renormalization only kicks in for rows that drifted further than this
RENORM_TOL = 1e-12


class InvalidScoresError(ValueError):
    """Raised for score vectors that cannot be turned into probabilities."""


@dataclass(frozen=True)
class ClassRegistry:
    names: tuple[str, ...] = DEFAULT_CLASSES
    dynamic: tuple[bool, ...] = field(default=())

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if not names:
            raise ValueError("class registry is empty")
        if any(not isinstance(n, str) or not n for n in names):
            raise ValueError("class names must be non-empty strings")
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate class names in {names}")
        dyn = tuple(bool(d) for d in self.dynamic) if self.dynamic else tuple(
            n in DEFAULT_DYNAMIC for n in names
        )
        if len(dyn) != len(names):
            raise ValueError("dynamic flags must match the number of classes")
        object.__setattr__(self, "dynamic", dyn)

    @property
    def count(self) -> int:
        return len(self.names)

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown class {name!r}") from None

    def detection_class(self, label: str) -> int:
        """Map a detector label (person/vehicle/bicycle) to a registry index."""
        for candidate in DETECTION_ALIASES.get(label, (label,)):
            if candidate in self.names:
                return self.names.index(candidate)
        raise KeyError(f"detector label {label!r} has no counterpart in the registry")

    def to_dict(self) -> dict:
        return {"classes": [{"name": n, "dynamic": d} for n, d in zip(self.names, self.dynamic)]}

    @classmethod
    def from_dict(cls, doc: dict) -> "ClassRegistry":
        try:
            entries = doc["classes"]
            names = tuple(e["name"] for e in entries)
            dyn = tuple(bool(e.get("dynamic", False)) for e in entries)
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed class registry document: {exc}") from exc
        return cls(names, dyn)

    @classmethod
    def load(cls, path: str | Path) -> "ClassRegistry":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


DEFAULT_REGISTRY = ClassRegistry()


def default_alpha(registry: ClassRegistry, dynamic: float = 0.8, static: float = 0.3) -> tuple[float, ...]:
    """Per-class smoothing weights: larger (less smoothing) for dynamic classes."""
    return tuple(dynamic if d else static for d in registry.dynamic)


@dataclass(frozen=True)
class FusionConfig:
    """Knobs shared by cloud fusion, image fusion and the voxel map."""

    w_img: float = 0.5
    alpha: tuple[float, ...] = field(default_factory=lambda: default_alpha(DEFAULT_REGISTRY))
    quantile_q: float = 0.25
    foreground_margin: float = 0.5
    epsilon_prob: float = 1e-9
    voxel_size: float = 0.25
    deque_len: int = 10
    map_mode: str = "fold"  # "fold" or "drop" for scans leaving the deque
    scan_merge: str = "bayes"  # "bayes" or "mean" for points sharing a voxel in one scan
    occlusion_tol: float | None = 0.5
    per_point_chain: bool = True
    trajectory_slack: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        if not 0.0 <= self.w_img <= 1.0:
            raise ValueError(f"w_img must be in [0, 1], got {self.w_img}")
        if any(not 0.0 <= a <= 1.0 for a in self.alpha):
            raise ValueError("alpha entries must be in [0, 1]")
        if not 0.0 < self.quantile_q <= 1.0:
            raise ValueError(f"quantile_q must be in (0, 1], got {self.quantile_q}")
        if self.foreground_margin < 0:
            raise ValueError("foreground_margin must be non-negative")
        if not self.epsilon_prob > 0:
            raise ValueError("epsilon_prob must be positive")
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        if int(self.deque_len) != self.deque_len or self.deque_len < 0:
            raise ValueError("deque_len must be a non-negative integer")
        if self.map_mode not in ("fold", "drop"):
            raise ValueError(f"map_mode must be 'fold' or 'drop', got {self.map_mode!r}")
        if self.scan_merge not in ("bayes", "mean"):
            raise ValueError(f"scan_merge must be 'bayes' or 'mean', got {self.scan_merge!r}")
        if self.occlusion_tol is not None and self.occlusion_tol <= 0:
            raise ValueError("occlusion_tol must be positive or None")
        if self.trajectory_slack < 0:
            raise ValueError("trajectory_slack must be non-negative")

    @classmethod
    def for_registry(cls, registry: ClassRegistry, **overrides) -> "FusionConfig":
        overrides.setdefault("alpha", default_alpha(registry))
        return cls(**overrides)

    def check_registry(self, registry: ClassRegistry) -> None:
        if len(self.alpha) != registry.count:
            raise ValueError(
                f"alpha has {len(self.alpha)} entries but the registry has {registry.count} classes"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["alpha"] = list(self.alpha)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "FusionConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown fusion config keys: {sorted(unknown)}")
        return cls(**doc)


def logsumexp(x, axis: int = -1) -> np.ndarray:
    """Stable ``log(sum(exp(x)))`` along ``axis``.

    Split as max + log1p(sum of the remaining shifted exponentials); the max
    term contributes exactly exp(0) = 1, which is the ``1 +`` inside log1p.
    """
    x = np.asarray(x, dtype=np.float64)
    idx = np.argmax(x, axis=axis)
    m = np.take_along_axis(x, np.expand_dims(idx, axis), axis=axis)
    shifted = np.exp(x - m)
    np.put_along_axis(shifted, np.expand_dims(idx, axis), 0.0, axis=axis)
    return np.squeeze(m, axis=axis) + np.log1p(shifted.sum(axis=axis))


def soft_max(raw_scores, axis: int = -1) -> np.ndarray:
    x = np.asarray(raw_scores, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        bad = np.argwhere(~np.isfinite(x))
        raise InvalidScoresError(f"non-finite raw scores at {bad[:5].tolist()}")
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def renormalize(p, tol: float = RENORM_TOL) -> np.ndarray:
    """Divide rows by their sum, leaving rows already within ``tol`` of 1 untouched."""
    p = np.asarray(p, dtype=np.float64)
    s = p.sum(axis=-1, keepdims=True)
    drift = np.abs(s - 1.0) > tol
    if not drift.any():
        return p
    return np.where(drift, p / np.where(s > 0, s, 1.0), p)


def normalize_log(L) -> np.ndarray:
    L = np.asarray(L, dtype=np.float64)
    return L - logsumexp(L)[..., None]


def to_log(p, epsilon_prob: float = 1e-9) -> np.ndarray:
    """Clamp to ``epsilon_prob``, take the log and renormalize in log space."""
    p = np.asarray(p, dtype=np.float64)
    return normalize_log(np.log(np.maximum(p, epsilon_prob)))


def from_log(L) -> np.ndarray:
    return renormalize(np.exp(np.asarray(L, dtype=np.float64)))


def one_hot(index: int | np.ndarray, count: int, epsilon_prob: float = 0.0) -> np.ndarray:
    """One-hot vector(s) with ``epsilon_prob`` on the other classes, renormalized."""
    index = np.asarray(index)
    out = np.full(index.shape + (count,), float(epsilon_prob))
    np.put_along_axis(out, index[..., None], 1.0, axis=-1)
    return out / out.sum(axis=-1, keepdims=True)


def is_probability(p, atol: float = 1e-6) -> bool:
    p = np.asarray(p, dtype=np.float64)
    return bool(
        np.all(np.isfinite(p))
        and np.all(p >= 0.0)
        and np.all(p <= 1.0 + atol)
        and np.all(np.abs(p.sum(axis=-1) - 1.0) <= atol)
    )


def check_probability(p, what: str = "scores", atol: float = 1e-6) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if not is_probability(p, atol):
        raise InvalidScoresError(f"{what} are not valid probability vectors (pass raw scores through soft_max)")
    return p


def argmax_class(p) -> np.ndarray:
    return np.argmax(np.asarray(p), axis=-1)


def class_names(registry: ClassRegistry, indices: Iterable[int]) -> list[str]:
    return [registry.names[int(i)] for i in indices]


def as_registry(classes: ClassRegistry | Sequence[str] | None) -> ClassRegistry:
    if classes is None:
        return DEFAULT_REGISTRY
    if isinstance(classes, ClassRegistry):
        return classes
    return ClassRegistry(tuple(classes))
