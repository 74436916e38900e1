"""JSON run configuration shared by the command-line tools.

Top-level keys (all optional)::

    classes      list of names, or {"classes": [{"name", "dynamic"}]}
    fusion       FusionConfig fields
    pipeline     PipelineOptions fields (queue_capacity, camera_buffer, ...)
    noise        {"lidar" | "rgb" | "thermal": SensorNoiseModel fields}
    scene        scene spec (see semfuse.simulator)
    flight       {"waypoints": [[t, x, y, z, yaw_deg], ...], "duration": s, "rate": Hz}
    lidar_model  LidarModel fields
    rig          {"rgb_size": [w, h], "thermal_size": [w, h], "pitch_down_deg": deg}
    rates        {"lidar": Hz, "rgb": Hz, "thermal": Hz}
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .core import DEFAULT_REGISTRY, ClassRegistry, FusionConfig, default_alpha
from .io_replay import PipelineOptions
from .simulator import LidarModel, SensorNoiseModel, SensorRates

KEYS = ("classes", "fusion", "pipeline", "noise", "scene", "flight", "lidar_model", "rig", "rates")

DEFAULT_SCENE = {
    "ground": {"class": "road"},
    "primitives": [
        {"shape": "cylinder", "class": "person", "position": [9, -1.5, 0], "radius": 0.3, "height": 1.8},
        {"shape": "cylinder", "class": "person", "position": [11, 1.5, 0], "radius": 0.3, "height": 1.8,
         "path": [[0, 11, 1.5, 0], [2, 11, 3.5, 0]]},
        {"shape": "cylinder", "class": "vegetation", "position": [15, 4, 0], "radius": 1.5, "height": 5},
        {"shape": "box", "class": "building", "position": [22, -6, 0], "size": [6, 6, 8]},
        {"shape": "box", "class": "vehicle", "position": [-9, 5, 0], "size": [4.2, 1.8, 1.5], "yaw_deg": 20},
    ],
}
DEFAULT_FLIGHT = {"waypoints": [[0, 0, 0, 6, 0], [2, 4, 0, 6, 0]], "duration": 2.0, "rate": 100.0}


class ConfigError(ValueError):
    pass


def _check_keys(doc: dict, allowed, where: str) -> None:
    unknown = set(doc) - set(allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")


@dataclass
class RunConfig:
    registry: ClassRegistry = DEFAULT_REGISTRY
    fusion: FusionConfig = field(default_factory=FusionConfig)
    pipeline: PipelineOptions = field(default_factory=PipelineOptions)
    noise: dict = field(default_factory=dict)
    scene: dict = field(default_factory=lambda: dict(DEFAULT_SCENE))
    flight: dict = field(default_factory=lambda: dict(DEFAULT_FLIGHT))
    lidar_model: LidarModel = field(default_factory=LidarModel)
    rig: dict = field(default_factory=dict)
    rates: SensorRates = field(default_factory=SensorRates)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        _check_keys(doc, KEYS, "config")
        try:
            reg = DEFAULT_REGISTRY
            if "classes" in doc:
                c = doc["classes"]
                reg = ClassRegistry(tuple(c)) if isinstance(c, list) else ClassRegistry.from_dict(c)
            fusion_doc = dict(doc.get("fusion", {}))
            fusion_doc.setdefault("alpha", default_alpha(reg))
            fusion = FusionConfig.from_dict(fusion_doc)
            fusion.check_registry(reg)
            pipe = doc.get("pipeline", {})
            _check_keys(pipe, [f.name for f in fields(PipelineOptions)], "pipeline")
            noise = {}
            for name, nd in doc.get("noise", {}).items():
                _check_keys(nd, [f.name for f in fields(SensorNoiseModel)], f"noise.{name}")
                noise[name] = SensorNoiseModel.from_dict(nd)
            flight = dict(DEFAULT_FLIGHT, **doc.get("flight", {}))
            _check_keys(flight, ("waypoints", "duration", "rate"), "flight")
            lm = doc.get("lidar_model", {})
            _check_keys(lm, [f.name for f in fields(LidarModel)], "lidar_model")
            rig = doc.get("rig", {})
            _check_keys(rig, ("rgb_size", "thermal_size", "pitch_down_deg"), "rig")
            rates = doc.get("rates", {})
            _check_keys(rates, ("lidar", "rgb", "thermal"), "rates")
            return cls(reg, fusion, PipelineOptions(**pipe), noise, doc.get("scene", dict(DEFAULT_SCENE)), flight,
                       LidarModel.from_dict(lm), rig, SensorRates(**rates))
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: invalid JSON ({exc})") from exc
        return cls.from_dict(doc)
