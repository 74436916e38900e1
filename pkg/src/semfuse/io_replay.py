"""Recording format, time-ordered replay and the threaded fusion pipeline.

A recording is a directory::

    manifest.json    manifest (classes, calibration, rates, stream list, checksums)
    <stream>.bin     one file per stream
    gt_map.bin       optional ground-truth voxel map

Stream files start with ``b"SFRS"`` and a u32 version, followed by records
``f64 stamp, u32 length, payload``. A payload is ``u32 n`` + ``n`` bytes of
JSON metadata (which lists the arrays) + the raw little-endian arrays.
Scores, depth and intensity are stored as float32; positions and poses as
float64.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import logging
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .cloud_fusion import DetectionBox, LidarScan, SemanticCloud, augment_scan
from .core import ClassRegistry, FusionConfig
from .evaluation import ConfusionCounts, IoUResult, evaluate_clouds, iou
from .geometry import INSIDE, Calibration, RigidTransform, Trajectory, TrajectorySample, chain_transform
from .image_fusion import DepthImage, FusedMask, ImageFusionStream, ScoreMask
from .voxel_map import MapExport, VoxelMap

log = logging.getLogger(__name__)

STREAM_MAGIC = b"SFRS"
STREAM_VERSION = 1
MANIFEST = "manifest.json"
GT_MAP = "gt_map.bin"
_REC = struct.Struct("<dI")


class RecordingError(ValueError):
    """Missing, corrupt or inconsistent recording data."""


@dataclass(frozen=True)
class CameraFrame:
    camera_id: str
    stamp: float
    mask: ScoreMask | None = None
    depth: DepthImage | None = None
    detections: tuple[DetectionBox, ...] = ()


@dataclass(frozen=True)
class Message:
    stream: str
    stamp: float
    data: object


def stream_kind(name: str, data=None) -> str:
    if name == "trajectory" or isinstance(data, TrajectorySample):
        return "trajectory"
    if name == "lidar" or isinstance(data, LidarScan):
        return "lidar"
    return "camera"


# --------------------------------------------------------------------------
# payload encoding


def _pack(meta: dict, arrays: dict) -> bytes:
    descr = []
    blobs = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr)
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        descr.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape)})
        blobs.append(a.tobytes())
    head = json.dumps({**meta, "arrays": descr}, sort_keys=True).encode()
    return struct.pack("<I", len(head)) + head + b"".join(blobs)


def _unpack(payload: bytes) -> tuple[dict, dict]:
    (n,) = struct.unpack_from("<I", payload, 0)
    meta = json.loads(payload[4 : 4 + n])
    off = 4 + n
    arrays = {}
    for d in meta.pop("arrays"):
        dt = np.dtype(d["dtype"])
        count = int(np.prod(d["shape"], dtype=np.int64))
        end = off + count * dt.itemsize
        if end > len(payload):
            raise RecordingError(f"payload array {d['name']!r} is truncated")
        arrays[d["name"]] = np.frombuffer(payload, dtype=dt, count=count, offset=off).reshape(d["shape"])
        off = end
    if off != len(payload):
        raise RecordingError("payload has trailing bytes")
    return meta, arrays


def _box_to_dict(b: DetectionBox) -> dict:
    return {"class_id": b.class_id, "score": b.score, "box": list(b.box), "camera_id": b.camera_id, "stamp": b.stamp}


def _box_from_dict(d: dict) -> DetectionBox:
    return DetectionBox(int(d["class_id"]), float(d["score"]), tuple(d["box"]), d["camera_id"], float(d["stamp"]))


def encode_message(msg: Message) -> bytes:
    data = msg.data
    if isinstance(data, TrajectorySample):
        return _pack({"type": "pose"}, {"rotation": data.pose.rotation, "translation": data.pose.translation})
    if isinstance(data, LidarScan):
        arrays = {
            "positions": np.asarray(data.positions, dtype="<f8"),
            "scores": np.asarray(data.scores, dtype="<f4"),
            "intensity": np.asarray(data.intensity, dtype="<f4"),
            "stamp_offsets": np.asarray(data.stamp_offsets, dtype="<f8"),
        }
        if data.gt_labels is not None:
            arrays["gt_labels"] = np.asarray(data.gt_labels, dtype="<i2")
        return _pack({"type": "scan", "scan_start": data.stamp}, arrays)
    if isinstance(data, CameraFrame):
        arrays = {}
        if data.mask is not None:
            arrays["mask"] = np.asarray(data.mask.scores, dtype="<f4")
        if data.depth is not None:
            arrays["depth"] = np.asarray(data.depth.depth, dtype="<f4")
        meta = {"type": "camera", "camera_id": data.camera_id, "frame_stamp": data.stamp,
                "detections": [_box_to_dict(b) for b in data.detections]}
        return _pack(meta, arrays)
    raise TypeError(f"cannot encode {type(data).__name__}")


def decode_message(stream: str, stamp: float, payload: bytes) -> Message:
    meta, a = _unpack(payload)
    kind = meta.get("type")
    if kind == "pose":
        data = TrajectorySample(stamp, RigidTransform(a["rotation"].astype(np.float64), a["translation"].astype(np.float64)))
    elif kind == "scan":
        gt = a["gt_labels"].astype(np.int64) if "gt_labels" in a else None
        data = LidarScan(float(meta["scan_start"]), a["positions"].astype(np.float64), a["scores"].astype(np.float64),
                         a["intensity"].astype(np.float64), a["stamp_offsets"].astype(np.float64), gt)
    elif kind == "camera":
        cid, fs = meta["camera_id"], float(meta["frame_stamp"])
        mask = ScoreMask(fs, a["mask"].astype(np.float64), cid) if "mask" in a else None
        depth = DepthImage(fs, a["depth"].astype(np.float64), cid) if "depth" in a else None
        data = CameraFrame(cid, fs, mask, depth, tuple(_box_from_dict(d) for d in meta["detections"]))
    else:
        raise RecordingError(f"unknown payload type {kind!r} in stream {stream!r}")
    return Message(stream, stamp, data)


def quantize_storage(data):
    """Round a payload to its stored precision so in-memory and on-disk replays agree."""
    from dataclasses import replace

    f32 = lambda x: np.asarray(x, dtype=np.float32).astype(np.float64)  # noqa: E731
    if isinstance(data, LidarScan):
        return replace(data, scores=f32(data.scores), intensity=f32(data.intensity))
    if isinstance(data, CameraFrame):
        mask = replace(data.mask, scores=f32(data.mask.scores)) if data.mask is not None else None
        depth = replace(data.depth, depth=f32(data.depth.depth)) if data.depth is not None else None
        return replace(data, mask=mask, depth=depth)
    return data


# --------------------------------------------------------------------------
# stream files


def write_stream(path: Path, messages: Iterable[Message]) -> tuple[int, str]:
    h = hashlib.sha256()
    n = 0
    with open(path, "wb") as fh:
        head = STREAM_MAGIC + struct.pack("<I", STREAM_VERSION)
        fh.write(head)
        h.update(head)
        for m in messages:
            payload = encode_message(m)
            rec = _REC.pack(m.stamp, len(payload)) + payload
            fh.write(rec)
            h.update(rec)
            n += 1
    return n, h.hexdigest()


def iter_stream(path: Path, stream: str) -> Iterator[Message]:
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) < 8 or head[:4] != STREAM_MAGIC:
            raise RecordingError(f"stream {stream!r} ({path.name}): bad header")
        (version,) = struct.unpack("<I", head[4:])
        if version != STREAM_VERSION:
            raise RecordingError(f"stream {stream!r} ({path.name}): unsupported version {version}")
        offset = 8
        while True:
            rec = fh.read(_REC.size)
            if not rec:
                return
            if len(rec) < _REC.size:
                raise RecordingError(f"stream {stream!r} ({path.name}): truncated record header at byte {offset}")
            stamp, n = _REC.unpack(rec)
            payload = fh.read(n)
            if len(payload) < n:
                raise RecordingError(f"stream {stream!r} ({path.name}): truncated payload at byte {offset}")
            try:
                yield decode_message(stream, stamp, payload)
            except (ValueError, KeyError, json.JSONDecodeError) as exc:
                raise RecordingError(f"stream {stream!r} ({path.name}): corrupt record at byte {offset}: {exc}") from exc
            offset += _REC.size + n


def _file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# --------------------------------------------------------------------------
# recordings


def _order_key(msg: Message, priority: dict, seq: int):
    return (msg.stamp, priority[msg.stream], seq)


class Recording:
    """Sensor messages plus the metadata needed to fuse them.

    ``manifest`` carries ``classes``, ``calibration`` and free-form metadata.
    Messages are replayed in global stamp order; ties go by stream order in
    ``stream_names`` and then by position within the stream.
    """

    def __init__(self, manifest: dict, messages: Sequence[Message] = (), gt_map: MapExport | None = None,
                 root: Path | None = None):
        self.manifest = dict(manifest)
        self.gt_map = gt_map
        self.root = root
        self._messages = [Message(m.stream, float(m.stamp), quantize_storage(m.data)) for m in messages]
        if root is None:
            names = list(self.manifest.get("streams_order", []))
            for m in self._messages:
                if m.stream not in names:
                    names.append(m.stream)
            self.manifest["streams_order"] = names
        self._trajectory = None

    # metadata -----------------------------------------------------------
    @property
    def stream_names(self) -> list[str]:
        return list(self.manifest.get("streams_order", []))

    @property
    def registry(self) -> ClassRegistry:
        return ClassRegistry.from_dict(self.manifest["classes"])

    @property
    def calibration(self) -> Calibration:
        return Calibration.from_dict(self.manifest["calibration"])

    @property
    def mask_cameras(self) -> list[str]:
        return list(self.manifest.get("mask_cameras", []))

    def stream_messages(self, name: str) -> Iterator[Message]:
        if self.root is None:
            return (m for m in self._messages if m.stream == name)
        entry = self.manifest["streams"][name]
        return iter_stream(self.root / entry["file"], name)

    def iter_messages(self) -> Iterator[Message]:
        """All messages in global order, read lazily from disk when possible."""
        prio = {n: i for i, n in enumerate(self.stream_names)}
        its = []
        for name in self.stream_names:
            its.append(((_order_key(m, prio, k), m) for k, m in enumerate(self.stream_messages(name))))
        for _, m in heapq.merge(*its, key=lambda x: x[0]):
            yield m

    @property
    def trajectory(self) -> Trajectory:
        if self._trajectory is None:
            samples = [m.data for m in self.stream_messages("trajectory")] if "trajectory" in self.stream_names else []
            self._trajectory = Trajectory.from_samples(samples)
        return self._trajectory

    # persistence ---------------------------------------------------------
    def write(self, path: str | Path) -> str:
        """Write the recording directory and return its digest."""
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        streams = {}
        for name in self.stream_names:
            fname = f"{name}.bin"
            count, digest = write_stream(path / fname, self.stream_messages(name))
            streams[name] = {"file": fname, "count": count, "sha256": digest}
        manifest = {k: v for k, v in self.manifest.items() if k not in ("streams", "gt_map", "digest")}
        manifest["format"] = "semfuse-recording"
        manifest["version"] = 1
        manifest["streams"] = streams
        if self.gt_map is not None:
            data = self.gt_map.to_bytes()
            (path / GT_MAP).write_bytes(data)
            manifest["gt_map"] = {"file": GT_MAP, "sha256": hashlib.sha256(data).hexdigest()}
        manifest["digest"] = manifest_digest(manifest)
        (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
        return manifest["digest"]

    @property
    def digest(self) -> str:
        if "digest" in self.manifest:
            return self.manifest["digest"]
        h = hashlib.sha256()
        for name in self.stream_names:
            h.update(name.encode())
            for m in self.stream_messages(name):
                h.update(_REC.pack(m.stamp, 0) + encode_message(m))
        return h.hexdigest()

    @classmethod
    def read(cls, path: str | Path, verify: bool = True) -> "Recording":
        path = Path(path)
        mpath = path / MANIFEST
        if not mpath.is_file():
            raise RecordingError(f"{mpath}: manifest not found")
        try:
            manifest = json.loads(mpath.read_text())
        except json.JSONDecodeError as exc:
            raise RecordingError(f"{mpath}: invalid JSON ({exc})") from exc
        for key in ("classes", "calibration", "streams", "streams_order"):
            if key not in manifest:
                raise RecordingError(f"{mpath}: missing field {key!r}")
        if manifest.get("digest") != manifest_digest(manifest):
            raise RecordingError(f"{mpath}: manifest digest mismatch")
        for name in manifest["streams_order"]:
            entry = manifest["streams"].get(name)
            if entry is None:
                raise RecordingError(f"{mpath}: stream {name!r} listed without an entry")
            f = path / entry["file"]
            if not f.is_file():
                raise RecordingError(f"stream {name!r}: file {entry['file']} is missing")
            if verify and _file_sha256(f) != entry["sha256"]:
                raise RecordingError(f"stream {name!r}: file {entry['file']} fails its checksum")
        gt = None
        if "gt_map" in manifest:
            f = path / manifest["gt_map"]["file"]
            if not f.is_file():
                raise RecordingError(f"ground-truth map {f.name} is missing")
            data = f.read_bytes()
            if verify and hashlib.sha256(data).hexdigest() != manifest["gt_map"]["sha256"]:
                raise RecordingError(f"ground-truth map {f.name} fails its checksum")
            try:
                gt = MapExport.from_bytes(data)
            except (ValueError, struct.error) as exc:
                raise RecordingError(f"ground-truth map {f.name}: {exc}") from exc
        return cls(manifest, (), gt, root=path)


def manifest_digest(manifest: dict) -> str:
    body = {k: v for k, v in manifest.items() if k != "digest"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


def write_recording(recording: Recording, path: str | Path) -> str:
    return recording.write(path)


def read_recording(path: str | Path, verify: bool = True) -> Recording:
    return Recording.read(path, verify)


# --------------------------------------------------------------------------
# pipeline


class StageQueue:
    """Bounded FIFO. ``drop_oldest`` evicts the head when full; otherwise puts block."""

    def __init__(self, capacity: int, drop_oldest: bool):
        if capacity < 1:
            raise ValueError("queue capacity must be at least 1")
        self.capacity = capacity
        self.drop_oldest = drop_oldest
        self._items: deque = deque()
        self._cv = threading.Condition()
        self._closed = False
        self.dropped = 0
        self.peak = 0

    def put(self, item) -> None:
        with self._cv:
            if self._closed:
                return
            if self.drop_oldest:
                if len(self._items) >= self.capacity:
                    self._items.popleft()
                    self.dropped += 1
            else:
                while len(self._items) >= self.capacity and not self._closed:
                    self._cv.wait()
            self._items.append(item)
            self.peak = max(self.peak, len(self._items))
            self._cv.notify_all()

    def get(self):
        """Next item, or ``None`` once the queue is closed and drained."""
        with self._cv:
            while not self._items and not self._closed:
                self._cv.wait()
            if not self._items:
                return None
            item = self._items.popleft()
            self._cv.notify_all()
            return item

    def close(self) -> None:
        with self._cv:
            self._closed = True
            self._cv.notify_all()

    def __len__(self) -> int:
        with self._cv:
            return len(self._items)


@dataclass(frozen=True)
class PipelineOptions:
    mode: str = "offline"  # "offline" blocks on full queues, "realtime" drops the oldest item
    realtime_factor: float = 1.0
    queue_capacity: int = 8
    camera_buffer: int = 6
    assoc_window: float = 0.12  # max |camera stamp - scan middle| for a camera frame to be used
    write_masks: bool = True

    def __post_init__(self):
        if self.mode not in ("offline", "realtime"):
            raise ValueError(f"mode must be 'offline' or 'realtime', got {self.mode!r}")
        if not self.realtime_factor > 0:
            raise ValueError("realtime_factor must be positive")
        if self.queue_capacity < 1 or self.camera_buffer < 1:
            raise ValueError("queue_capacity and camera_buffer must be at least 1")


STAGES = ("image", "cloud", "map")
STAGE_OUTPUT = {"image": "fused_mask", "cloud": "fused_cloud", "map": "map"}


@dataclass(frozen=True)
class StageSpec:
    inputs: tuple[str, ...]
    capacity: int = 8


@dataclass(frozen=True)
class PipelineGraph:
    """Stages with their input streams and queue capacities.

    ``image`` fuses 2D masks, ``cloud`` augments scans and ``map`` integrates
    fused clouds (its input is the ``fused_cloud`` output of ``cloud``).
    """

    stages: dict

    @classmethod
    def default(cls, camera_streams: Sequence[str] = ("rgb", "thermal"), capacity: int = 8,
                lidar: bool = True) -> "PipelineGraph":
        cams = tuple(camera_streams)
        return cls({
            "image": StageSpec(cams, capacity),
            "cloud": StageSpec((("lidar",) if lidar else ()) + cams, capacity),
            "map": StageSpec(("fused_cloud",), capacity),
        })

    def consumers(self, stream: str) -> list[str]:
        return [name for name in STAGES if name in self.stages and stream in self.stages[name].inputs]

    def validate(self, streams: Sequence[str]) -> None:
        unknown = set(self.stages) - set(STAGES)
        if unknown:
            raise ValueError(f"unknown pipeline stages {sorted(unknown)}")
        produced = {STAGE_OUTPUT[n]: n for n in self.stages}
        for name, spec in self.stages.items():
            if spec.capacity < 1:
                raise ValueError(f"stage {name!r}: queue capacity must be at least 1")
            for src in spec.inputs:
                if src not in streams and src not in produced:
                    raise ValueError(f"stage {name!r} consumes unknown stream {src!r}")
        if "map" in self.stages and "cloud" not in self.stages:
            raise ValueError("the map stage needs the cloud stage")
        # Kahn's algorithm over stage -> stage edges
        deps = {n: {produced[i] for i in s.inputs if i in produced} for n, s in self.stages.items()}
        ready = [n for n, d in deps.items() if not d]
        seen = 0
        while ready:
            n = ready.pop()
            seen += 1
            for m, d in deps.items():
                if n in d:
                    d.discard(n)
                    if not d:
                        ready.append(m)
        if seen != len(self.stages):
            raise ValueError("pipeline graph has a cycle")

    @property
    def total_capacity(self) -> int:
        return sum(s.capacity for s in self.stages.values())


@dataclass
class _Tagged:
    item: object
    released: float  # wall-clock time the source released the message


@dataclass
class StageStats:
    processed: int = 0
    latencies: list = field(default_factory=list)
    busy: float = 0.0

    def summary(self, queue: StageQueue | None) -> dict:
        lat = np.asarray(self.latencies) if self.latencies else np.zeros(1)
        return {
            "processed": self.processed,
            "dropped": queue.dropped if queue else 0,
            "queue_peak": queue.peak if queue else 0,
            "queue_capacity": queue.capacity if queue else 0,
            "latency_ms": {
                "p50": float(np.percentile(lat, 50) * 1e3),
                "p95": float(np.percentile(lat, 95) * 1e3),
                "max": float(lat.max() * 1e3),
            },
            "throughput_hz": float(self.processed / self.busy) if self.busy > 0 else 0.0,
        }


@dataclass
class PipelineResult:
    clouds: list  # world-frame fused SemanticClouds in scan order
    masks: list  # FusedMasks in frame order
    voxel_map: VoxelMap
    report: dict


def _nearest(frames: Iterable[CameraFrame], t: float, window: float) -> CameraFrame | None:
    best = None
    for f in frames:
        d = abs(f.stamp - t)
        if d <= window and (best is None or d < abs(best.stamp - t)):
            best = f
    return best


def _save_cloud(fh, cloud: SemanticCloud, lidar_positions: np.ndarray) -> None:
    payload = _pack({"type": "fused_cloud", "scan_start": cloud.scan_stamp}, {
        "positions_lidar": lidar_positions,
        "positions_world": cloud.positions,
        "scores": cloud.scores,
        "stamp_offsets": cloud.stamp_offsets,
        "labels": cloud.labels.astype("<u2"),
    })
    fh.write(_REC.pack(cloud.scan_stamp, len(payload)) + payload)


def read_fused_clouds(path: str | Path) -> list[SemanticCloud]:
    """Load the world-frame clouds written by :func:`run_pipeline`."""
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != STREAM_MAGIC:
        raise RecordingError(f"{path.name}: bad header")
    off, out = 8, []
    while off < len(data):
        if off + _REC.size > len(data):
            raise RecordingError(f"{path.name}: truncated record at byte {off}")
        stamp, n = _REC.unpack_from(data, off)
        meta, a = _unpack(data[off + _REC.size : off + _REC.size + n])
        out.append(SemanticCloud(float(meta["scan_start"]), a["positions_world"].copy(), a["scores"].copy(),
                                 np.zeros(len(a["scores"])), a["stamp_offsets"].copy(), "world"))
        off += _REC.size + n
    return out


def check_class_count(recording: Recording, count: int) -> None:
    """Compare the first scan and mask of each stream against the registry size."""
    for name in recording.stream_names:
        if name == "trajectory":
            continue
        for m in recording.stream_messages(name):
            d = m.data
            C = d.scores.shape[-1] if isinstance(d, LidarScan) else (d.mask.scores.shape[-1] if d.mask is not None else None)
            if C is None:
                continue
            if C != count:
                raise RecordingError(f"stream {name!r} carries {C} classes, the registry has {count}")
            break


def run_pipeline(
    recording: Recording,
    cfg: FusionConfig | None = None,
    out_dir: str | Path | None = None,
    options: PipelineOptions | None = None,
    graph: PipelineGraph | None = None,
) -> PipelineResult:
    """Replay a recording through image fusion, cloud fusion and mapping.

    Stages run in their own threads connected by bounded queues. Offline
    mode never drops and its outputs are deterministic; realtime mode paces
    the source by ``realtime_factor`` and drops the oldest queued item when
    a stage falls behind. Outputs are also written to ``out_dir`` if given.
    """
    options = options or PipelineOptions()
    registry = recording.registry
    cfg = cfg or FusionConfig.for_registry(registry)
    cfg.check_registry(registry)
    check_class_count(recording, registry.count)
    calib = recording.calibration
    traj = recording.trajectory
    mask_cams = set(recording.mask_cameras)
    streams = [n for n in recording.stream_names if n != "trajectory"]
    if graph is None:
        graph = PipelineGraph.default([n for n in streams if n != "lidar"], options.queue_capacity, "lidar" in streams)
    graph.validate(streams)
    drop = options.mode == "realtime"
    queues = {name: StageQueue(spec.capacity, drop) for name, spec in graph.stages.items()}
    closed = StageQueue(1, drop)
    closed.close()
    q_image = queues.get("image", closed)
    q_cloud = queues.get("cloud", closed)
    q_map = queues.get("map", closed)
    routes = {n: [queues[c] for c in graph.consumers(n)] for n in streams}
    stats = {name: StageStats() for name in STAGES}
    clouds: list = []
    masks: list = []
    voxel_map = VoxelMap.from_config(cfg, registry.count)
    errors: list = []
    warnings: list = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if options.write_masks:
            (out / "masks").mkdir(exist_ok=True)
    n_source = {"messages": 0}

    def guard(fn):
        def run():
            try:
                fn()
            except BaseException as exc:  # surfaced after join
                errors.append(exc)
                for q in (q_image, q_cloud, q_map):
                    q.close()
        return run

    def source():
        t_wall0 = time.perf_counter()
        t_rec0 = None
        for msg in recording.iter_messages():
            kind = stream_kind(msg.stream, msg.data)
            if kind == "trajectory":
                continue
            if drop:
                t_rec0 = msg.stamp if t_rec0 is None else t_rec0
                wait = t_wall0 + (msg.stamp - t_rec0) / options.realtime_factor - time.perf_counter()
                if wait > 0:
                    time.sleep(wait)
            n_source["messages"] += 1
            tagged = _Tagged(msg, time.perf_counter())
            for q in routes.get(msg.stream, ()):
                q.put(tagged)
        q_image.close()
        q_cloud.close()

    def image_stage():
        streams = {}
        thermal = deque(maxlen=options.camera_buffer)
        index = None
        if out is not None and options.write_masks:
            index = open(out / "masks.ndjson", "w")
        try:
            while (tagged := q_image.get()) is not None:
                frame = tagged.item.data
                if frame.mask is None:
                    if frame.detections:
                        thermal.append(frame)
                    continue
                if frame.camera_id not in mask_cams:
                    continue
                t0 = time.perf_counter()
                stream = streams.setdefault(frame.camera_id, ImageFusionStream(calib, traj, cfg))
                th = _nearest(thermal, frame.stamp, options.assoc_window)
                rgb_dets = [d for d in frame.detections if d.camera_id == frame.camera_id]
                fused = stream.process(frame.mask, frame.depth, rgb_dets, th.detections if th else ())
                masks.append(fused)
                if index is not None:
                    name = f"{frame.camera_id}_{len(masks) - 1:06d}"
                    fused.export(out / "masks" / name)
                    index.write(json.dumps({"stamp": fused.stamp, "camera_id": fused.camera_id,
                                            "labels": f"masks/{name}_labels.png",
                                            "scores": f"masks/{name}_scores.npy"}) + "\n")
                done = time.perf_counter()
                s = stats["image"]
                s.processed += 1
                s.busy += done - t0
                s.latencies.append(done - tagged.released)
        finally:
            if index is not None:
                index.close()

    def cloud_stage():
        buffers: dict = {}
        fh = open(out / "fused_clouds.bin", "wb") if out is not None else None
        if fh is not None:
            fh.write(STREAM_MAGIC + struct.pack("<I", STREAM_VERSION))
        try:
            while (tagged := q_cloud.get()) is not None:
                data = tagged.item.data
                if isinstance(data, CameraFrame):
                    buffers.setdefault(data.camera_id, deque(maxlen=options.camera_buffer)).append(data)
                    continue
                t0 = time.perf_counter()
                scan: LidarScan = data
                mid = scan.stamp + (float(scan.stamp_offsets.max()) / 2 if len(scan) else 0.0)
                frames = {cid: _nearest(buf, mid, options.assoc_window) for cid, buf in sorted(buffers.items())}
                frames = {cid: f for cid, f in frames.items() if f is not None}
                masks_in = {cid: f.mask for cid, f in frames.items() if f.mask is not None and cid in mask_cams}
                depth_in = {cid: f.depth for cid, f in frames.items() if f.depth is not None}
                dets = [d for f in frames.values() for d in f.detections]
                fused = augment_scan(scan, masks_in, dets, depth_in, traj, calib, cfg, sorted(mask_cams))
                world = fused.to_world(traj, calib.extrinsics, cfg.trajectory_slack)
                warnings.extend(f"scan {scan.stamp:.3f}: {w}" for w in fused.warnings)
                clouds.append(world)
                if fh is not None:
                    _save_cloud(fh, world, fused.positions)
                q_map.put(_Tagged((len(clouds) - 1, world), tagged.released))
                done = time.perf_counter()
                s = stats["cloud"]
                s.processed += 1
                s.busy += done - t0
                s.latencies.append(done - tagged.released)
        finally:
            q_map.close()
            if fh is not None:
                fh.close()

    def map_stage():
        while (tagged := q_map.get()) is not None:
            t0 = time.perf_counter()
            scan_id, world = tagged.item
            voxel_map.integrate_cloud(world, scan_id)
            done = time.perf_counter()
            s = stats["map"]
            s.processed += 1
            s.busy += done - t0
            s.latencies.append(done - tagged.released)

    wall0 = time.perf_counter()
    stage_fns = {"image": image_stage, "cloud": cloud_stage, "map": map_stage}
    threads = [threading.Thread(target=guard(source), name="source", daemon=True)]
    threads += [threading.Thread(target=guard(stage_fns[n]), name=n, daemon=True) for n in STAGES if n in graph.stages]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    wall = time.perf_counter() - wall0
    if errors:
        raise errors[0]

    export = voxel_map.export(registry)
    outputs = {}
    if out is not None:
        export.write_ndjson(out / "map.ndjson")
        export.write_binary(out / "map.bin")
        for name in ("fused_clouds.bin", "map.ndjson", "map.bin") + (("masks.ndjson",) if options.write_masks else ()):
            outputs[name] = _file_sha256(out / name)
    report = {
        "recording_digest": recording.digest,
        "mode": options.mode,
        "realtime_factor": options.realtime_factor,
        "queue_capacity_total": graph.total_capacity,
        "peak_queued_total": sum(q.peak for q in queues.values()),
        "messages": n_source["messages"],
        "scans": len(clouds),
        "masks": len(masks),
        "voxels": len(export),
        "wall_time_s": wall,
        "stages": {name: stats[name].summary(queues[name]) for name in STAGES if name in queues},
        "dropped_total": sum(q.dropped for q in queues.values()),
        "warnings": warnings,
        "outputs": outputs,
        "config": cfg.to_dict(),
    }
    if out is not None:
        (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    return PipelineResult(clouds, masks, voxel_map, report)


# --------------------------------------------------------------------------
# evaluation against the recorded ground truth


def lidar_only_clouds(recording: Recording, slack: float = 0.1) -> list[SemanticCloud]:
    traj = recording.trajectory
    extr = recording.calibration.extrinsics
    return [SemanticCloud.from_scan(m.data).to_world(traj, extr, slack) for m in recording.stream_messages("lidar")]


def fov_restrict(clouds: Sequence[SemanticCloud], recording: Recording, camera_id: str, slack: float = 0.1):
    """Keep points of world-frame clouds that fall inside ``camera_id``'s image.

    Points are mapped into the camera with the full per-point chain, taking
    the camera time as the sweep middle.
    """
    calib = recording.calibration
    traj = recording.trajectory
    cam = calib.cameras[camera_id]
    out = []
    for c in clouds:
        if len(c) == 0:
            out.append(c)
            continue
        t_l = c.scan_stamp + c.stamp_offsets
        world_T_base, _ = traj.poses_at(t_l, slack)
        local = (world_T_base @ calib.extrinsics.base_T_lidar).inverse().apply(c.positions)
        mid = c.scan_stamp + float(c.stamp_offsets.max()) / 2
        chain = chain_transform(calib.extrinsics, camera_id, traj, mid, t_l, slack)
        _, _, _, status = cam.project(chain.apply(local))
        out.append(c.subset(np.flatnonzero(status == INSIDE)))
    return out


def evaluate_run(
    recording: Recording,
    fused: Sequence[SemanticCloud],
    fov_camera: str | None = None,
) -> dict[str, tuple[IoUResult, ConfusionCounts]]:
    """IoU of LiDAR-only and fused clouds against the recording's ground-truth map."""
    if recording.gt_map is None:
        raise RecordingError("recording has no ground-truth map")
    registry = recording.registry
    gt = VoxelMap.from_export(recording.gt_map)
    rows = {"lidar": lidar_only_clouds(recording), "fused": list(fused)}
    results = {}
    for name, clouds in rows.items():
        if fov_camera is not None:
            clouds = fov_restrict(clouds, recording, fov_camera)
        counts = evaluate_clouds(clouds, gt, registry.count)
        results[name] = (iou(counts), counts)
    return results
