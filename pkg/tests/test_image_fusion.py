import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semfuse.cloud_fusion import DetectionBox, detection_vector, detection_weight
from semfuse.core import DEFAULT_REGISTRY, FusionConfig, one_hot, renormalize
from semfuse.geometry import Calibration, CameraModel, RigExtrinsics, RigidTransform, Trajectory
from semfuse.image_fusion import (
    DepthImage,
    FusedMask,
    ImageFusionStream,
    ScoreMask,
    fuse_image_frame,
    overlay_detections,
    temporal_smooth,
    warp_previous,
)

from conftest import random_probs

REG = DEFAULT_REGISTRY
C = REG.count
PERSON, BUILDING = REG.index("person"), REG.index("building")
H, W = 24, 32
CAM = CameraModel(20.0, 20.0, 15.5, 11.5, W, H)


def fused(rng, stamp=0.0):
    return FusedMask(stamp, random_probs(rng, (H, W, C)), np.ones((H, W), bool))


def test_warp_zero_motion_is_identity(rng):
    prev = fused(rng)
    depth = DepthImage(0.0, rng.uniform(1, 20, (H, W)))
    pose = RigidTransform.from_euler(0.1, 0.2, 0.3, [1, 2, 3])
    out = warp_previous(prev, depth, pose, pose, CAM)
    assert out.valid.all()
    np.testing.assert_allclose(out.scores, prev.scores, atol=1e-9)


def test_warp_without_depth_is_invalid(rng):
    out = warp_previous(fused(rng), DepthImage(0.0, np.zeros((H, W))), RigidTransform(), RigidTransform(), CAM)
    assert not out.valid.any()


def test_warp_planar_translation_shift(rng):
    z, dx = 10.0, 1.0  # shift = fx * dx / z = 2 px
    prev = fused(rng)
    out = warp_previous(prev, DepthImage(0.0, np.full((H, W), z)), RigidTransform(),
                        RigidTransform(translation=[dx, 0, 0]), CAM)
    shift = int(CAM.fx * dx / z)
    np.testing.assert_array_equal(out.scores[:, : W - shift], prev.scores[:, shift:])
    assert out.valid[:, : W - shift].all() and not out.valid[:, W - shift :].any()


def test_warp_depth_test_keeps_nearest(rng):
    prev = fused(rng)
    depth = np.full((H, W), 10.0)
    depth[:, 16] = 5.0  # column 16 moves by 4 px, lands on column 12 together with column 14
    out = warp_previous(prev, DepthImage(0.0, depth), RigidTransform(), RigidTransform(translation=[1.0, 0, 0]), CAM)
    np.testing.assert_array_equal(out.scores[:, 12], prev.scores[:, 16])


def test_smooth_boundaries_bitwise(rng):
    cur = ScoreMask(1.0, random_probs(rng, (H, W, C)))
    prev = fused(rng)
    assert np.array_equal(temporal_smooth(cur, prev, np.ones(C)).scores, cur.scores)
    assert np.array_equal(temporal_smooth(cur, prev, np.zeros(C)).scores, prev.scores)


def test_smooth_hand_example():
    cur = np.full(C, 0.02)
    cur[PERSON], cur[BUILDING] = 0.5, 0.26
    prev = np.full(C, 0.01)
    prev[PERSON], prev[BUILDING] = 0.1, 0.77
    alpha = np.full(C, 0.5)
    alpha[PERSON], alpha[BUILDING] = 0.9, 0.2
    raw = alpha * cur + (1 - alpha) * prev
    expected = raw / raw.sum()
    # person: 0.9*0.5 + 0.1*0.1 = 0.46, building: 0.2*0.26 + 0.8*0.77 = 0.668
    assert raw[PERSON] == pytest.approx(0.46) and raw[BUILDING] == pytest.approx(0.668)
    out = temporal_smooth(ScoreMask(0, cur.reshape(1, 1, C)), FusedMask(0, prev.reshape(1, 1, C), np.ones((1, 1), bool)), alpha)
    np.testing.assert_allclose(out.scores[0, 0], expected, atol=1e-15)


def test_smooth_passes_through_invalid_history(rng):
    cur = ScoreMask(1.0, random_probs(rng, (H, W, C)))
    prev = fused(rng)
    prev = FusedMask(0.0, prev.scores, np.zeros((H, W), bool))
    assert np.array_equal(temporal_smooth(cur, prev, np.full(C, 0.3)).scores, cur.scores)


def test_smooth_alpha_length_checked(rng):
    with pytest.raises(ValueError):
        temporal_smooth(ScoreMask(0, random_probs(rng, (2, 2, C))), None, np.ones(3))


@settings(max_examples=60)
@given(st.integers(0, 2**31))
def test_smoothing_contraction(seed):
    r = np.random.default_rng(seed)
    cur = r.dirichlet(np.ones(C), size=(4, 4))
    prev = r.dirichlet(np.ones(C), size=(4, 4))
    alpha = r.uniform(0, 1, C)
    raw = alpha * cur + (1 - alpha) * prev
    out = temporal_smooth(ScoreMask(0, cur), FusedMask(0, prev, np.ones((4, 4), bool)), alpha).scores
    # before renormalization, per class and pixel
    assert np.all(np.abs(raw - cur) <= (1 - alpha.min()) * np.abs(prev - cur) + 1e-15)
    assert np.allclose(out.sum(-1), 1, atol=1e-12) and np.all(out >= 0)


def static_calib():
    cam_T_base = RigidTransform.from_matrix(np.array([[0, -1, 0, 0], [0, 0, -1, 0], [1, 0, 0, 0], [0, 0, 0, 1]], float))
    thermal_T_base = RigidTransform(translation=[0.2, 0.0, 0.0]) @ cam_T_base
    thermal = CameraModel(15.0, 15.0, 11.5, 8.5, 24, 18)
    calib = Calibration(RigExtrinsics(RigidTransform(), {"rgb": cam_T_base, "thermal": thermal_T_base}),
                        {"rgb": CAM, "thermal": thermal})
    traj = Trajectory([0.0, 10.0], np.tile([1.0, 0, 0, 0], (2, 1)), np.zeros((2, 3)))
    return calib, traj


def test_overlay_no_detections(rng):
    calib, _ = static_calib()
    m = fused(rng)
    assert np.array_equal(overlay_detections(m, [], [], None, calib).scores, m.scores)


def test_overlay_rgb_box_peak(rng):
    calib, _ = static_calib()
    m = fused(rng)
    box = DetectionBox(PERSON, 1.0, (8, 4, 12, 10), "rgb")
    out = overlay_detections(m, [box], [], None, calib)
    np.testing.assert_array_equal(out.scores[7, 10], detection_vector(PERSON, C))
    np.testing.assert_array_equal(out.scores[0, 0], m.scores[0, 0])


def test_overlay_thermal_matches_per_pixel_chain(rng):
    calib, _ = static_calib()
    m = fused(rng)
    depth = rng.uniform(4, 12, (H, W))
    depth[:3] = 0.0  # no depth -> no thermal overlay
    box = DetectionBox(PERSON, 0.8, (6, 4, 16, 14), "thermal")
    out = overlay_detections(m, [], [box], DepthImage(0, depth), calib)
    rgb, th = calib.cameras["rgb"], calib.cameras["thermal"]
    T = calib.extrinsics.cam_T_base["thermal"].as_matrix() @ np.linalg.inv(calib.extrinsics.cam_T_base["rgb"].as_matrix())
    det = detection_vector(PERSON, C)
    touched = 0
    for y in range(H):
        for x in range(W):
            ref = m.scores[y, x]
            d = depth[y, x]
            if d > 0:
                p = np.array([(x - rgb.cx) / rgb.fx * d, (y - rgb.cy) / rgb.fy * d, d, 1.0])
                q = T @ p
                u, v = th.fx * q[0] / q[2] + th.cx, th.fy * q[1] / q[2] + th.cy
                if q[2] > 1e-6 and 6 <= u <= 16 and 4 <= v <= 14:
                    w = detection_weight(box, u, v)
                    ref = (1 - w) * ref + w * det
                    touched += 1
            np.testing.assert_allclose(out.scores[y, x], ref, atol=1e-12)
    assert touched > 20
    assert np.all(out.scores[:3] == m.scores[:3])


def test_first_frame_passthrough(rng):
    calib, traj = static_calib()
    cur = ScoreMask(0.1, random_probs(rng, (H, W, C)))
    out, hist = fuse_image_frame(cur, DepthImage(0.1, np.full((H, W), 5.0)), None, [], [], traj, calib, FusionConfig())
    assert np.array_equal(out.scores, cur.scores)
    assert hist is not None and hist.fused is out


def test_constant_input_fixed_point(rng):
    calib, traj = static_calib()
    stream = ImageFusionStream(calib, traj, FusionConfig())
    target = random_probs(rng, (H, W, C))
    start = random_probs(rng, (H, W, C))
    depth = DepthImage(0, np.full((H, W), 6.0))
    stream.process(ScoreMask(0.0, start), depth)
    for k in range(1, 51):
        out = stream.process(ScoreMask(k / 30, target), DepthImage(k / 30, depth.depth))
    assert np.max(np.abs(out.scores - target)) < 1e-6


def test_flicker_recurrence(rng):
    """Per-pixel output follows the scalar recurrence of the smoothing rule."""
    calib, traj = static_calib()
    alpha = np.full(C, 0.15)
    cfg = FusionConfig(alpha=tuple(alpha))
    stream = ImageFusionStream(calib, traj, cfg)
    A, B = REG.index("road"), REG.index("terrain")
    pa = 0.55 * one_hot(A, C) + 0.45 * one_hot(B, C)
    pb = 0.45 * one_hot(A, C) + 0.55 * one_hot(B, C)
    seq = [pa, pb, pa, pa, pb, pa, pb, pa, pa, pb] * 3  # majority A
    ref = None
    depth = np.full((H, W), 6.0)
    for k, p in enumerate(seq):
        out = stream.process(ScoreMask(k / 30, np.broadcast_to(p, (H, W, C)).copy()), DepthImage(k / 30, depth))
        ref = p.copy() if ref is None else renormalize(alpha * p + (1 - alpha) * ref)
        np.testing.assert_allclose(out.scores[5, 5], ref, atol=1e-12)
        if k >= 2:
            assert out.labels[5, 5] == A


def test_dynamic_classes_follow_faster():
    calib, traj = static_calib()
    stream = ImageFusionStream(calib, traj, FusionConfig())
    road, person = REG.index("road"), REG.index("person")
    depth = np.full((H, W), 6.0)
    before = 0.5 * one_hot(road, C) + 0.5 * one_hot(person, C)
    after = 0.2 * one_hot(road, C) + 0.8 * one_hot(person, C)
    stream.process(ScoreMask(0, np.broadcast_to(before, (H, W, C)).copy()), DepthImage(0, depth))
    first = {}
    for k in range(1, 200):
        out = stream.process(ScoreMask(k / 30, np.broadcast_to(after, (H, W, C)).copy()), DepthImage(k / 30, depth))
        err = np.abs(out.scores[3, 3] - after)
        for c in (road, person):
            if c not in first and err[c] < 0.01:
                first[c] = k
    assert first[person] <= first[road]


def test_export_index_map(tmp_path, rng):
    from PIL import Image

    m = fused(rng)
    png, npy = m.export(tmp_path / "frame0")
    assert np.array_equal(np.asarray(Image.open(png)), m.labels.astype(np.uint8))
    assert np.array_equal(np.load(npy), m.scores)
