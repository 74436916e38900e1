"""Command-line entry point: ``semfuse <subcommand> [flags]``.

Errors are reported as a JSON object on stderr with a nonzero exit code.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, RunConfig
from .evaluation import format_table, to_csv
from .geometry import TrajectoryCoverageError
from .io_replay import (
    PipelineGraph,
    Recording,
    RecordingError,
    evaluate_run,
    read_fused_clouds,
    run_pipeline,
)
from .simulator import SceneSpecError, default_rig, generate_flight, generate_scene, trajectory_from_waypoints


class CliError(Exception):
    def __init__(self, message: str, kind: str = "usage", code: int = 2):
        super().__init__(message)
        self.kind = kind
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _need(args, name: str):
    value = getattr(args, name)
    if value is None:
        raise CliError(f"--{name.replace('_', '-')} is required for '{args.command}'")
    return value


def _options(cfg: RunConfig, args):
    opts = cfg.pipeline
    if getattr(args, "realtime_factor", None) is not None:
        opts = replace(opts, mode="realtime", realtime_factor=args.realtime_factor)
    return opts


def _simulate(cfg: RunConfig, seed: int):
    scene = generate_scene(cfg.scene, seed, cfg.registry)
    traj = trajectory_from_waypoints(cfg.flight["waypoints"], cfg.flight.get("rate", 100.0))
    rig = default_rig(**{k: tuple(v) if isinstance(v, list) else v for k, v in cfg.rig.items()})
    return generate_flight(scene, traj, rig, cfg.lidar_model, cfg.rates, cfg.noise, seed,
                           cfg.flight.get("duration"), cfg.fusion.voxel_size)


def cmd_simulate(args, cfg: RunConfig) -> dict:
    out = Path(_need(args, "out"))
    rec = _simulate(cfg, args.seed)
    digest = rec.write(out)
    return {"recording": str(out), "digest": digest,
            "messages": {n: sum(1 for _ in rec.stream_messages(n)) for n in rec.stream_names},
            "gt_voxels": len(rec.gt_map)}


def cmd_fuse(args, cfg: RunConfig) -> dict:
    rec = Recording.read(_need(args, "recording"))
    out = Path(_need(args, "out"))
    res = run_pipeline(rec, cfg.fusion, out, _options(cfg, args))
    keys = ("scans", "masks", "voxels", "dropped_total", "wall_time_s", "outputs")
    return {k: res.report[k] for k in keys}


def cmd_eval(args, cfg: RunConfig) -> dict:
    rec = Recording.read(_need(args, "recording"))
    out = Path(_need(args, "out"))
    clouds_path = out / "fused_clouds.bin"
    if not clouds_path.is_file():
        raise CliError(f"{clouds_path} not found; run 'semfuse fuse' with the same --out first", "missing_input", 1)
    fov = args.fov_restrict
    if fov is not None and fov not in rec.calibration.cameras:
        raise CliError(f"--fov-restrict: unknown camera {fov!r}")
    results = evaluate_run(rec, read_fused_clouds(clouds_path), fov)
    table = {name: r for name, (r, _) in results.items()}
    suffix = f"_fov_{fov}" if fov else ""
    to_csv(table, rec.registry, path=out / f"iou{suffix}.csv")
    text = format_table(table, rec.registry)
    (out / f"iou{suffix}.txt").write_text(text + "\n")
    print(text, file=sys.stderr)
    return {name: {"mean_iou": r.mean, "unmatched": c.unmatched,
                   "per_class": {rec.registry.names[i]: float(v) for i, v in enumerate(r.per_class) if v == v}}
            for name, (r, c) in results.items()}


def cmd_export_map(args, cfg: RunConfig) -> dict:
    rec = Recording.read(_need(args, "recording"))
    out = Path(_need(args, "out"))
    out.mkdir(parents=True, exist_ok=True)
    if args.ground_truth:
        if rec.gt_map is None:
            raise CliError("recording has no ground-truth map", "missing_input", 1)
        export = rec.gt_map
    else:
        streams = [n for n in rec.stream_names if n not in ("trajectory", "lidar")]
        base = PipelineGraph.default(streams, cfg.pipeline.queue_capacity, "lidar" in rec.stream_names)
        graph = PipelineGraph({k: v for k, v in base.stages.items() if k != "image"})
        res = run_pipeline(rec, cfg.fusion, None, _options(cfg, args), graph)
        export = res.voxel_map.export(rec.registry)
    export.write_ndjson(out / "map.ndjson")
    export.write_binary(out / "map.bin")
    return {"voxels": len(export), "files": [str(out / "map.ndjson"), str(out / "map.bin")]}


def cmd_bench(args, cfg: RunConfig) -> dict:
    if args.recording:
        rec = Recording.read(args.recording)
        sim_s = None
    else:
        t0 = time.perf_counter()
        rec = _simulate(cfg, args.seed)
        sim_s = time.perf_counter() - t0
    res = run_pipeline(rec, cfg.fusion, args.out, _options(cfg, args))
    rep = res.report
    return {
        "note": "local machine figures; not comparable across hardware",
        "simulation_s": sim_s,
        "wall_time_s": rep["wall_time_s"],
        "scans_per_s": rep["scans"] / rep["wall_time_s"] if rep["wall_time_s"] > 0 else None,
        "stages": {k: {"throughput_hz": v["throughput_hz"], "latency_ms": v["latency_ms"], "dropped": v["dropped"]}
                   for k, v in rep["stages"].items()},
        "dropped_total": rep["dropped_total"],
    }


COMMANDS = {
    "simulate": (cmd_simulate, "render a synthetic multi-sensor recording"),
    "fuse": (cmd_fuse, "run image fusion, cloud fusion and mapping over a recording"),
    "eval": (cmd_eval, "IoU of LiDAR-only and fused clouds against the ground-truth map"),
    "export-map": (cmd_export_map, "write the voxel map as NDJSON and binary"),
    "bench": (cmd_bench, "report local throughput and latency"),
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="semfuse", description="LiDAR and camera semantic fusion into a voxel map")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        s = sub.add_parser(name, help=help_text)
        s.add_argument("--config", help="JSON run configuration")
        s.add_argument("--recording", help="recording directory")
        s.add_argument("--out", help="output directory")
        s.add_argument("--realtime-factor", type=float, help="replay speed; enables drop-oldest realtime mode")
        s.add_argument("--seed", type=int, default=0, help="simulation seed (u64)")
        s.add_argument("--fov-restrict", help="evaluate only points inside this camera's image")
        if name == "export-map":
            s.add_argument("--ground-truth", action="store_true", help="export the recording's ground-truth map")
    return p


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise CliError("a subcommand is required: " + ", ".join(COMMANDS))
        if args.seed < 0 or args.seed >= 2**64:
            raise CliError("--seed must be an unsigned 64-bit integer")
        if args.realtime_factor is not None and not args.realtime_factor > 0:
            raise CliError("--realtime-factor must be positive")
        cfg = RunConfig.load(args.config)
        result = COMMANDS[args.command][0](args, cfg)
    except CliError as exc:
        return _fail(exc.kind, str(exc), exc.code)
    except ConfigError as exc:
        return _fail("config", str(exc), 2)
    except SceneSpecError as exc:
        return _fail("scene_spec", str(exc), 2)
    except RecordingError as exc:
        return _fail("recording", str(exc), 1)
    except TrajectoryCoverageError as exc:
        return _fail("trajectory", str(exc), 1)
    except (ValueError, OSError) as exc:
        return _fail(type(exc).__name__, str(exc), 1)
    print(json.dumps(result, indent=1, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
