import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from semfuse.core import (
    DEFAULT_CLASSES,
    ClassRegistry,
    FusionConfig,
    InvalidScoresError,
    from_log,
    logsumexp,
    one_hot,
    soft_max,
    to_log,
)

from conftest import random_probs

finite = st.floats(-50, 50, allow_nan=False)


def test_soft_max_uniform():
    np.testing.assert_array_equal(soft_max(np.zeros(15)), np.full(15, 1 / 15))


def test_soft_max_no_overflow():
    p = soft_max([1000.0, 0.0, 0.0])
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p, [1.0, 0.0, 0.0], atol=1e-300)


def test_soft_max_matches_extended_precision():
    # 40-digit mpmath evaluation of exp(x_i) / sum exp(x_j)
    expected = [0.090030573170380457998, 0.24472847105479765247, 0.66524095577482188953]
    np.testing.assert_allclose(soft_max([1.0, 2.0, 3.0]), expected, rtol=0, atol=1e-15)


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_soft_max_rejects_non_finite(bad):
    with pytest.raises(InvalidScoresError):
        soft_max([0.0, bad, 1.0])


@given(arrays(np.float64, 15, elements=finite), st.floats(-1e3, 1e3))
def test_soft_max_shift_invariant(x, c):
    np.testing.assert_allclose(soft_max(x), soft_max(x + c), atol=1e-12, rtol=0)


@given(arrays(np.float64, st.integers(1, 20), elements=finite))
def test_soft_max_sums_to_one_and_keeps_order(x):
    p = soft_max(x)
    assert abs(p.sum() - 1) <= 1e-9
    order = np.argsort(x, kind="stable")
    assert np.all(np.diff(p[order]) >= 0)


def test_to_log_uniform():
    np.testing.assert_allclose(to_log(np.full(15, 1 / 15)), np.log(1 / 15), atol=1e-15)


def test_to_log_one_hot_clamps():
    eps = 1e-9
    L = to_log(one_hot(0, 15), eps)
    assert np.all(np.isfinite(L))
    # before renormalization: [0, log eps, ...]; the shift is log(1 + 14 eps)
    shift = np.log1p(14 * eps)
    np.testing.assert_allclose(L[0], -shift, atol=1e-15)
    np.testing.assert_allclose(L[1:], np.log(eps) - shift, atol=1e-12)


def test_to_log_direct_logarithm():
    np.testing.assert_allclose(to_log([0.5, 0.3, 0.2]), np.log([0.5, 0.3, 0.2]), atol=1e-15)


def test_from_log_uniform():
    np.testing.assert_allclose(from_log(np.full(15, np.log(1 / 15))), 1 / 15, atol=1e-15)


def test_round_trip_random(rng):
    p = random_probs(rng, (1000, 15))
    p = np.maximum(p, 1e-6)
    p /= p.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(from_log(to_log(p)), p, atol=1e-9, rtol=0)


def test_argmax_preserved(rng):
    p = random_probs(rng, (10_000, 15))
    a = np.argmax(p, axis=1)
    L = to_log(p)
    assert np.array_equal(np.argmax(L, axis=1), a)
    assert np.array_equal(np.argmax(from_log(L), axis=1), a)


def test_logsumexp_matches_naive_in_safe_range(rng):
    x = rng.normal(size=(100, 15))
    np.testing.assert_allclose(logsumexp(x), np.log(np.exp(x).sum(axis=1)), atol=1e-12)


def test_logsumexp_extreme_values():
    assert logsumexp(np.array([-1e5, -1e5])) == pytest.approx(-1e5 + np.log(2))
    assert logsumexp(np.array([800.0, 0.0])) == pytest.approx(800.0)


def test_logsumexp_tied_maximum():
    assert logsumexp(np.array([0.0, 0.0, -np.inf])) == pytest.approx(np.log(2))


def test_default_registry():
    reg = ClassRegistry()
    assert reg.count == 15 == len(DEFAULT_CLASSES)
    assert reg.dynamic[reg.index("person")]
    assert not reg.dynamic[reg.index("building")]
    assert reg.detection_class("vehicle") == reg.index("vehicle")


def test_registry_alias_to_car():
    reg = ClassRegistry(("road", "car", "person", "bike"))
    assert reg.detection_class("vehicle") == 1
    assert reg.detection_class("bicycle") == 3
    with pytest.raises(KeyError):
        ClassRegistry(("road",)).detection_class("person")


@pytest.mark.parametrize("names", [(), ("a", "a"), ("a", "")])
def test_registry_rejects_bad_names(names):
    with pytest.raises(ValueError):
        ClassRegistry(names)


def test_registry_json_round_trip(tmp_path):
    reg = ClassRegistry(("road", "person"), (False, True))
    path = tmp_path / "classes.json"
    reg.save(path)
    assert json.loads(path.read_text()) == {"classes": [{"name": "road", "dynamic": False}, {"name": "person", "dynamic": True}]}
    assert ClassRegistry.load(path) == reg


def test_fusion_config_defaults():
    cfg = FusionConfig()
    assert cfg.quantile_q == 0.25 and cfg.voxel_size == 0.25 and cfg.epsilon_prob == 1e-9
    assert len(cfg.alpha) == 15
    reg = ClassRegistry()
    assert cfg.alpha[reg.index("person")] == 0.8 and cfg.alpha[reg.index("road")] == 0.3


@pytest.mark.parametrize(
    "kw",
    [dict(w_img=1.5), dict(alpha=(2.0,) * 15), dict(quantile_q=0.0), dict(epsilon_prob=0.0),
     dict(voxel_size=-1), dict(deque_len=-1), dict(map_mode="keep")],
)
def test_fusion_config_validation(kw):
    with pytest.raises(ValueError):
        FusionConfig(**kw)


def test_fusion_config_round_trip():
    cfg = FusionConfig(w_img=0.3, deque_len=3)
    assert FusionConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        FusionConfig.from_dict({"bogus": 1})
