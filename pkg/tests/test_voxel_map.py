import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semfuse.cloud_fusion import SemanticCloud
from semfuse.core import DEFAULT_REGISTRY, from_log, logsumexp, one_hot, to_log
from semfuse.voxel_map import (
    MapExport,
    NaiveProductFusion,
    VoxelMap,
    export_map,
    log_bayes_update,
    naive_bayes_update,
    voxel_key,
)

from conftest import random_probs

C = 15


def cloud(positions, scores, frame="world"):
    positions = np.asarray(positions, float).reshape(-1, 3)
    n = len(positions)
    return SemanticCloud(0.0, positions, np.asarray(scores, float).reshape(n, -1), np.zeros(n), np.zeros(n), frame)


def mp_bayes(p, q):
    """Product-then-normalize in 50-digit arithmetic."""
    with mp.workdps(50):
        prod = [mp.mpf(a) * mp.mpf(b) for a, b in zip(p, q)]
        s = mp.fsum(prod)
        return np.array([float(x / s) for x in prod])


@pytest.mark.parametrize(
    "pos,key",
    [((0.1, 0.1, 0.1), (0, 0, 0)), ((-0.1, 0, 0), (-1, 0, 0)), ((0.25, 0.4999, 0.5), (1, 1, 2))],
)
def test_voxel_key(pos, key):
    assert tuple(voxel_key(pos, 0.25)) == key


def test_uniform_observation_is_neutral(rng):
    L = to_log(random_probs(rng, (100, C)))
    out = log_bayes_update(L, np.full(C, -np.log(C)))
    np.testing.assert_allclose(out, L, atol=1e-12)


def test_update_commutes(rng):
    A, B = to_log(random_probs(rng, (2, 100, C)))
    np.testing.assert_allclose(log_bayes_update(A, B), log_bayes_update(B, A), atol=1e-12)


def test_update_matches_extended_precision(rng):
    P, Q = random_probs(rng, (2, 300, C))
    got = from_log(log_bayes_update(to_log(P), to_log(Q)))
    ref = np.array([mp_bayes(p, q) for p, q in zip(P, Q)])
    assert np.max(np.abs(got - ref)) <= 1e-9


def test_update_output_normalized_and_finite(rng):
    A, B = to_log(random_probs(rng, (2, 1000, C), concentration=0.05))
    out = log_bayes_update(A, B)
    assert np.all(np.isfinite(out))
    assert np.max(np.abs(logsumexp(out))) <= 1e-12


def test_alternating_near_one_hot_keeps_log_space_finite():
    eps = 1e-9
    p1 = np.array([1 - eps, eps])
    p2 = np.array([eps, 1 - eps])
    L = np.log([0.5, 0.5])
    naive = NaiveProductFusion(2)
    for k in range(10_000):
        p = p1 if k % 2 == 0 else p2
        L = log_bayes_update(L, to_log(p, 1e-12))
        naive.update(p)
    assert np.all(np.isfinite(L)) and abs(logsumexp(L)) < 1e-9
    assert not naive.normalizable and np.all(naive.product == 0)
    with pytest.raises(FloatingPointError):
        naive.posterior()


def test_per_step_naive_loses_information():
    # after a long run of one class the other class underflows to exactly 0
    eps = 1e-9
    p1, p2 = np.array([1 - eps, eps]), np.array([eps, 1 - eps])
    P, L = np.array([0.5, 0.5]), np.log([0.5, 0.5])
    for _ in range(40):
        P, L = naive_bayes_update(P, p1), log_bayes_update(L, np.log(p1))
    assert P[1] == 0.0
    for _ in range(80):
        P, L = naive_bayes_update(P, p2), log_bayes_update(L, np.log(p2))
    assert P[1] == 0.0  # stuck forever
    assert np.argmax(L) == 1  # log space recovers


def test_single_point_voxel():
    m = VoxelMap(0.25, C)
    p = random_probs(np.random.default_rng(0), (C,))
    m.integrate_cloud(cloud([0.1, 0.1, 0.1], p), 0)
    assert len(m) == 1
    res = m.query([0.2, 0.2, 0.2])
    np.testing.assert_allclose(res.posterior, p, atol=1e-9)
    assert res.point_count == 1


def test_two_identical_points_sharpen():
    p = np.array([0.6, 0.3, 0.1])
    m = VoxelMap(0.25, 3)
    m.integrate_cloud(cloud([[0.1, 0.1, 0.1], [0.2, 0.1, 0.0]], [p, p]), 0)
    np.testing.assert_allclose(m.query([0.1, 0.1, 0.1]).posterior, p**2 / np.sum(p**2), atol=1e-12)
    # 0.36/0.46, 0.09/0.46, 0.01/0.46
    np.testing.assert_allclose(m.query([0.1, 0.1, 0.1]).posterior, [0.782608695652174, 0.195652173913043, 0.021739130434783], atol=1e-12)


def test_mean_merge_mode():
    p, q = np.array([0.6, 0.3, 0.1]), np.array([0.2, 0.2, 0.6])
    m = VoxelMap(0.25, 3, scan_merge="mean")
    m.integrate_cloud(cloud([[0.1] * 3, [0.2] * 3], [p, q]), 0)
    np.testing.assert_allclose(m.query([0.1] * 3).posterior, (p + q) / 2, atol=1e-9)


def refuse(observations):
    L = np.full(observations[0].shape, -np.log(observations[0].size))
    for o in observations:
        L = log_bayes_update(L, to_log(o))
    return from_log(L)


@pytest.mark.parametrize("n", [1, 2, 5])
@pytest.mark.parametrize("mode", ["fold", "drop"])
def test_deque_horizon_matches_refusion(rng, n, mode):
    m = VoxelMap(0.25, C, horizon=n, mode=mode)
    obs = random_probs(rng, (8, C))
    for k, o in enumerate(obs):
        m.integrate_cloud(cloud([0.1, 0.1, 0.1], o), k)
        vox = m.voxel((0, 0, 0))
        assert len(vox.scan_deque) <= n
        retained = obs[max(0, k + 1 - n) : k + 1]
        expected = refuse(obs[: k + 1] if mode == "fold" else retained)
        np.testing.assert_allclose(m.query([0.1] * 3).posterior, expected, atol=1e-9)
    assert [o.scan_id for o in m.voxel((0, 0, 0)).scan_deque] == list(range(8 - n, 8))


def test_horizon_two_three_scans():
    m_fold = VoxelMap(0.25, 3, horizon=2, mode="fold")
    m_drop = VoxelMap(0.25, 3, horizon=2, mode="drop")
    obs = [np.array([0.7, 0.2, 0.1]), np.array([0.1, 0.6, 0.3]), np.array([0.3, 0.3, 0.4])]
    for k, o in enumerate(obs):
        s_f = m_fold.integrate_cloud(cloud([0, 0, 0], o), k + 1)
        s_d = m_drop.integrate_cloud(cloud([0, 0, 0], o), k + 1)
    assert (s_f.folded, s_d.dropped) == (1, 1)
    assert [o.scan_id for o in m_fold.voxel((0, 0, 0)).scan_deque] == [2, 3]
    np.testing.assert_allclose(m_drop.query([0, 0, 0]).posterior, refuse(obs[1:]), atol=1e-12)
    np.testing.assert_allclose(m_fold.query([0, 0, 0]).posterior, refuse(obs), atol=1e-12)


def test_query_fold_oracle(rng):
    m = VoxelMap(0.25, C, horizon=100)
    obs = random_probs(rng, (20, C))
    L = np.full(C, -np.log(C))
    for k, o in enumerate(obs):
        m.integrate_cloud(cloud([1.0, -2.0, 0.3], o), k)
        L = log_bayes_update(L, to_log(o))
    np.testing.assert_allclose(m.query([1.0, -2.0, 0.3]).posterior, from_log(L), atol=1e-12)
    assert m.query([50, 50, 50]) is None


def test_uniform_observation_gives_uniform():
    m = VoxelMap(0.25, C)
    m.integrate_cloud(cloud([0, 0, 0], np.full(C, 1 / C)), 0)
    np.testing.assert_allclose(m.query([0, 0, 0]).posterior, 1 / C, atol=1e-12)


def test_same_scan_id_merges(rng):
    m = VoxelMap(0.25, C, horizon=1, mode="drop")
    a, b = random_probs(rng, (2, C))
    m.integrate_cloud(cloud([0, 0, 0], a), 7)
    m.integrate_cloud(cloud([0.1, 0, 0], b), 7)
    assert len(m.voxel((0, 0, 0)).scan_deque) == 1
    np.testing.assert_allclose(m.query([0, 0, 0]).posterior, refuse([a, b]), atol=1e-12)


def test_mean_position_and_invariants(rng):
    m = VoxelMap(0.25, C, horizon=3)
    allpts = []
    for k in range(6):
        pts = rng.uniform(-1, 1, (500, 3))
        allpts.append(pts)
        m.integrate_cloud(cloud(pts, random_probs(rng, (500, C))), k)
    allpts = np.vstack(allpts)
    keys = voxel_key(allpts, 0.25)
    assert len(m) == len({tuple(k) for k in keys.tolist()})
    for key in list(m.keys())[:50]:
        vox = m.voxel(key)
        sel = np.all(keys == key, axis=1)
        np.testing.assert_allclose(vox.mean_position, allpts[sel].mean(axis=0), atol=1e-9)
        lo = np.array(key) * 0.25
        assert np.all(vox.mean_position >= lo - 0.25e-6) and np.all(vox.mean_position <= lo + 0.25 + 0.25e-6)
        assert len(vox.scan_deque) <= 3
        assert np.all(np.isfinite(vox.L)) and abs(logsumexp(vox.L)) < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_point_order_does_not_change_accumulation(seed):
    r = np.random.default_rng(seed)
    pts = r.uniform(0, 0.25, (30, 3))
    sc = r.dirichlet(np.ones(C), 30)
    perm = r.permutation(30)
    a, b = VoxelMap(0.25, C), VoxelMap(0.25, C)
    a.integrate_cloud(cloud(pts, sc), 0)
    b.integrate_cloud(cloud(pts[perm], sc[perm]), 0)
    np.testing.assert_allclose(a.query(pts[0]).posterior, b.query(pts[0]).posterior, atol=1e-9)
    # the unnormalized accumulation is a plain sum of logs
    logs = to_log(sc)
    np.testing.assert_allclose(logs.sum(0), logs[perm].sum(0), atol=1e-12)


def test_rejects_sensor_frame_cloud():
    with pytest.raises(ValueError):
        VoxelMap(0.25, 3).integrate_cloud(cloud([0, 0, 0], [1 / 3] * 3, frame="lidar"), 0)


def test_export_empty_and_single():
    m = VoxelMap(0.25, 3)
    assert len(export_map(m)) == 0
    m.integrate_cloud(cloud([0.3, 0.3, 0.3], [0.5, 0.3, 0.2]), 0)
    exp = export_map(m, ["a", "b", "c"])
    assert len(exp) == 1 and exp.keys.tolist() == [[1, 1, 1]]
    np.testing.assert_allclose(exp.posteriors[0], [0.5, 0.3, 0.2], atol=1e-9)
    rec = next(exp.records())
    assert rec["argmax"] == "a" and rec["count"] == 1


def test_export_round_trips(tmp_path, rng):
    m = VoxelMap(0.25, C)
    m.integrate_cloud(cloud(rng.uniform(-3, 3, (400, 3)), random_probs(rng, (400, C))), 0)
    exp = export_map(m, DEFAULT_REGISTRY)
    back = MapExport.read_binary(exp.write_binary(tmp_path / "map.bin"))
    assert back.class_names == DEFAULT_REGISTRY.names and back.voxel_size == 0.25
    for f in ("keys", "means", "counts", "posteriors"):
        assert np.array_equal(getattr(back, f), getattr(exp, f))
    lines = exp.write_ndjson(tmp_path / "map.ndjson").read_text().splitlines()
    assert len(lines) == len(exp)
    rebuilt = VoxelMap.from_export(back)
    assert rebuilt.label_lookup() == m.label_lookup()
    with pytest.raises(ValueError):
        MapExport.from_bytes(exp.to_bytes()[:-3])
    with pytest.raises(ValueError):
        MapExport.from_bytes(b"XXXX" + exp.to_bytes()[4:])
