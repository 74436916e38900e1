import json
import threading

import numpy as np
import pytest

from semfuse.core import DEFAULT_REGISTRY, FusionConfig
from semfuse.geometry import Calibration, RigExtrinsics
from semfuse.io_replay import (
    PipelineOptions,
    Recording,
    RecordingError,
    StageQueue,
    decode_message,
    encode_message,
    evaluate_run,
    read_fused_clouds,
    run_pipeline,
)

from flights import tiny_flight


@pytest.fixture(scope="module")
def flight():
    return tiny_flight(seed=11)


@pytest.fixture(scope="module")
def on_disk(flight, tmp_path_factory):
    path = tmp_path_factory.mktemp("rec")
    flight.write(path)
    return path


def _same_data(a, b):
    for name in ("positions", "scores", "intensity", "stamp_offsets", "gt_labels"):
        if hasattr(a, name):
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


def test_payload_round_trip(flight):
    for stream in ("trajectory", "lidar", "rgb", "thermal"):
        msg = next(flight.stream_messages(stream))
        back = decode_message(stream, msg.stamp, encode_message(msg))
        assert back.stamp == msg.stamp
        if stream == "trajectory":
            np.testing.assert_array_equal(back.data.pose.rotation, msg.data.pose.rotation)
        elif stream == "lidar":
            assert back.data.stamp == msg.data.stamp
            _same_data(back.data, msg.data)
        else:
            assert back.data.detections == msg.data.detections
            if msg.data.mask is not None:
                np.testing.assert_array_equal(back.data.mask.scores, msg.data.mask.scores)
                np.testing.assert_array_equal(back.data.depth.depth, msg.data.depth.depth)


def test_write_read_round_trip_digest(flight, on_disk, tmp_path):
    rec = Recording.read(on_disk)
    again = rec.write(tmp_path / "copy")
    assert again == rec.digest == flight.write(tmp_path / "fresh")
    for f in on_disk.iterdir():
        assert (tmp_path / "copy" / f.name).read_bytes() == f.read_bytes()
    assert len(rec.gt_map) == len(flight.gt_map)


def test_global_order_matches_sort_oracle(on_disk):
    rec = Recording.read(on_disk)
    got = [(m.stream, m.stamp) for m in rec.iter_messages()]
    prio = {n: i for i, n in enumerate(rec.stream_names)}
    everything = []
    for name in rec.stream_names:
        everything += [(m.stamp, prio[name], k, name) for k, m in enumerate(rec.stream_messages(name))]
    oracle = [(name, stamp) for stamp, _, _, name in sorted(everything)]
    assert got == oracle
    stamps = [s for _, s in got]
    assert stamps == sorted(stamps)


def test_lidar_published_at_sweep_end(flight):
    for m in flight.stream_messages("lidar"):
        assert m.stamp == pytest.approx(m.data.stamp + 0.1)


def test_missing_stream_file(on_disk, tmp_path):
    Recording.read(on_disk).write(tmp_path / "r")
    (tmp_path / "r" / "rgb.bin").unlink()
    with pytest.raises(RecordingError, match="rgb"):
        Recording.read(tmp_path / "r")


def test_corrupt_stream_file(on_disk, tmp_path):
    Recording.read(on_disk).write(tmp_path / "r")
    f = tmp_path / "r" / "lidar.bin"
    data = bytearray(f.read_bytes())
    data[100] ^= 0xFF
    f.write_bytes(bytes(data))
    with pytest.raises(RecordingError, match="lidar"):
        Recording.read(tmp_path / "r")


def test_truncated_stream_detected_without_checksum(on_disk, tmp_path):
    Recording.read(on_disk).write(tmp_path / "r")
    f = tmp_path / "r" / "thermal.bin"
    f.write_bytes(f.read_bytes()[:-7])
    rec = Recording.read(tmp_path / "r", verify=False)
    with pytest.raises(RecordingError, match="truncated"):
        list(rec.stream_messages("thermal"))


def test_missing_manifest(tmp_path):
    with pytest.raises(RecordingError, match="manifest"):
        Recording.read(tmp_path)


def _empty_recording():
    calib = Calibration(RigExtrinsics(), {})
    return Recording({"classes": DEFAULT_REGISTRY.to_dict(), "calibration": calib.to_dict()}, [])


def test_empty_recording_runs(tmp_path):
    rec = _empty_recording()
    rec.write(tmp_path / "rec")
    back = Recording.read(tmp_path / "rec")
    res = run_pipeline(back, out_dir=tmp_path / "out")
    assert res.report["scans"] == 0 and res.report["masks"] == 0 and res.report["voxels"] == 0
    assert json.loads((tmp_path / "out" / "report.json").read_text())["messages"] == 0


def test_in_memory_and_on_disk_replays_agree(flight, on_disk):
    a = run_pipeline(flight, options=PipelineOptions(write_masks=False))
    b = run_pipeline(Recording.read(on_disk), options=PipelineOptions(write_masks=False))
    assert len(a.clouds) == len(b.clouds) == 10
    for ca, cb in zip(a.clouds, b.clouds):
        np.testing.assert_array_equal(ca.scores, cb.scores)
        np.testing.assert_array_equal(ca.positions, cb.positions)


def test_offline_reruns_byte_identical(on_disk, tmp_path):
    rec = Recording.read(on_disk)
    r1 = run_pipeline(rec, out_dir=tmp_path / "a").report
    r2 = run_pipeline(rec, out_dir=tmp_path / "b").report
    assert r1["outputs"] == r2["outputs"] and r1["outputs"]
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) > 5
    for f in files:
        if f.name != "report.json":
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_fused_cloud_output_round_trip(on_disk, tmp_path):
    res = run_pipeline(Recording.read(on_disk), out_dir=tmp_path)
    back = read_fused_clouds(tmp_path / "fused_clouds.bin")
    assert len(back) == len(res.clouds)
    for a, b in zip(back, res.clouds):
        np.testing.assert_array_equal(a.scores, b.scores)
        np.testing.assert_array_equal(a.positions, b.positions)


def test_fast_replay_with_tiny_queues_drops_and_stays_monotone(on_disk):
    rec = Recording.read(on_disk)
    opts = PipelineOptions(mode="realtime", realtime_factor=1000.0, queue_capacity=1, write_masks=False)
    box = {}
    t = threading.Thread(target=lambda: box.setdefault("res", run_pipeline(rec, options=opts)))
    t.start()
    t.join(timeout=120)
    assert not t.is_alive(), "pipeline did not terminate"
    res = box["res"]
    assert res.report["dropped_total"] > 0
    for seq in ([c.scan_stamp for c in res.clouds], [m.stamp for m in res.masks]):
        assert all(b > a for a, b in zip(seq, seq[1:]))
    assert res.report["stages"]["cloud"]["queue_peak"] <= 1


def test_pipeline_reports_missing_camera_masks(flight):
    rec = Recording(flight.manifest, [m for n in ("trajectory", "lidar", "thermal") for m in flight.stream_messages(n)],
                    flight.gt_map)
    res = run_pipeline(rec, options=PipelineOptions(write_masks=False))
    assert any("no segmentation mask" in w for w in res.report["warnings"])
    assert len(res.clouds) == 10


def test_stage_queue_drop_oldest():
    q = StageQueue(2, drop_oldest=True)
    for i in range(5):
        q.put(i)
    q.close()
    assert [q.get(), q.get(), q.get()] == [3, 4, None]
    assert q.dropped == 3 and q.peak == 2


def test_stage_queue_blocks_when_not_dropping():
    q = StageQueue(1, drop_oldest=False)
    q.put("a")
    done = threading.Event()

    def producer():
        q.put("b")
        done.set()

    threading.Thread(target=producer, daemon=True).start()
    assert not done.wait(0.05)
    assert q.get() == "a"
    assert done.wait(1.0)
    assert q.get() == "b" and q.dropped == 0


def test_evaluate_run_rows(flight):
    res = run_pipeline(flight, options=PipelineOptions(write_masks=False))
    out = evaluate_run(flight, res.clouds)
    assert set(out) == {"lidar", "fused"}
    for result, counts in out.values():
        assert counts.unmatched == 0
        assert 0.0 <= result.mean <= 1.0


def test_pipeline_rejects_mismatched_config(flight):
    with pytest.raises(ValueError, match="alpha"):
        run_pipeline(flight, FusionConfig(alpha=(0.5,) * 3))


def test_graph_rejects_cycles_and_unknown_streams():
    from semfuse.io_replay import PipelineGraph, StageSpec

    PipelineGraph.default().validate(["lidar", "rgb", "thermal"])
    with pytest.raises(ValueError, match="unknown stream"):
        PipelineGraph.default().validate(["lidar", "rgb"])
    cyclic = PipelineGraph({"cloud": StageSpec(("lidar", "map")), "map": StageSpec(("fused_cloud",))})
    with pytest.raises(ValueError, match="cycle"):
        cyclic.validate(["lidar"])


def test_offline_result_independent_of_queue_capacity(flight):
    a = run_pipeline(flight, options=PipelineOptions(queue_capacity=1, write_masks=False))
    b = run_pipeline(flight, options=PipelineOptions(queue_capacity=64, write_masks=False))
    assert a.report["dropped_total"] == b.report["dropped_total"] == 0
    for ca, cb in zip(a.clouds, b.clouds, strict=True):
        np.testing.assert_array_equal(ca.scores, cb.scores)
    np.testing.assert_array_equal(a.voxel_map.export().posteriors, b.voxel_map.export().posteriors)
    assert a.report["peak_queued_total"] <= 3


def test_class_count_mismatch_fails_before_processing(flight):
    from semfuse.core import ClassRegistry

    manifest = dict(flight.manifest, classes=ClassRegistry(("a", "b", "c")).to_dict())
    rec = Recording(manifest, list(flight.iter_messages()), None)
    with pytest.raises(RecordingError, match="classes"):
        run_pipeline(rec, FusionConfig(alpha=(0.5,) * 3))
