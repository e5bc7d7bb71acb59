import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from jointtag.numerics import (
    ArchiveError,
    NonDeterministicLoss,
    ParameterStore,
    check_gradients,
    glorot_uniform,
    load_archive,
    log_sum_exp,
    relative_error,
    save_archive,
    sigmoid,
    softmax,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def test_log_sum_exp_examples():
    assert log_sum_exp(np.array([0.0, 0.0])) == pytest.approx(math.log(2), abs=1e-15)
    big = log_sum_exp(np.array([1000.0, 1000.1]))
    assert np.isfinite(big)
    assert big == pytest.approx(1000.1 + math.log1p(math.exp(-0.1)), rel=1e-15)
    assert log_sum_exp(np.array([3.25])) == 3.25


def test_log_sum_exp_empty_axis_raises():
    with pytest.raises(ValueError):
        log_sum_exp(np.zeros((2, 0)), axis=1)


def test_log_sum_exp_all_minus_inf():
    assert log_sum_exp(np.array([-np.inf, -np.inf])) == -np.inf


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=finite))
def test_log_sum_exp_bounds(v):
    out = log_sum_exp(v)
    assert v.max() <= out + 1e-12
    assert out <= v.max() + math.log(len(v)) + 1e-12


def test_log_sum_exp_axis():
    m = np.arange(6.0).reshape(2, 3)
    np.testing.assert_allclose(log_sum_exp(m, axis=0), np.log(np.exp(m).sum(axis=0)), rtol=1e-14)
    np.testing.assert_allclose(log_sum_exp(m, axis=1), np.log(np.exp(m).sum(axis=1)), rtol=1e-14)


def test_softmax_examples():
    np.testing.assert_allclose(softmax(np.zeros(4)), np.full(4, 0.25), atol=1e-15)
    x, c = 0.3, 1.7
    assert softmax(np.array([x, x + c]))[1] == pytest.approx(1 / (1 + math.exp(-c)), abs=1e-15)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=finite), st.floats(-100, 100))
def test_softmax_properties(v, c):
    p = softmax(v)
    assert abs(p.sum() - 1.0) < 1e-12
    assert np.all(p > 0)
    assert p[np.argmax(v)] == p.max()
    np.testing.assert_allclose(softmax(v + c), p, atol=1e-12)


def test_sigmoid_stable_at_extremes():
    out = sigmoid(np.array([-800.0, 0.0, 800.0]))
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [0.0, 0.5, 1.0])


def test_glorot_reproducible_and_bounded():
    a = glorot_uniform((7, 5), 3, "layer.W")
    np.testing.assert_array_equal(a, glorot_uniform((7, 5), 3, "layer.W"))
    assert not np.array_equal(a, glorot_uniform((7, 5), 3, "other.W"))
    assert not np.array_equal(a, glorot_uniform((7, 5), 4, "layer.W"))
    assert np.abs(a).max() <= math.sqrt(6 / 12)


def test_store_basics():
    store = ParameterStore(seed=1)
    store.glorot("w", (3, 2))
    store.zeros("b", (2,))
    assert set(store) == {"w", "b"} and len(store) == 2
    assert store.num_values() == 8
    with pytest.raises(KeyError):
        store.zeros("w", (1,))
    snap = store.snapshot()
    store["w"].value += 1.0
    store.restore(snap)
    np.testing.assert_array_equal(store["w"].value, snap["w"])
    store["b"].grad[:] = [3.0, 4.0]
    assert store.grad_norm() == 5.0
    store.zero_grad()
    assert store.grad_norm() == 0.0
    with pytest.raises(ValueError):
        store.restore({"w": np.zeros(3)})


def quadratic(store):
    p = store["theta"]
    p.grad += p.value
    return 0.5 * float(np.sum(p.value**2))


def test_gradcheck_quadratic():
    store = ParameterStore()
    store.add("theta", np.random.default_rng(0).normal(size=(3, 4)))
    report = check_gradients(quadratic, store, step=1e-5, tolerance=1e-8)
    assert report.passed, report.summary()
    np.testing.assert_array_equal(store["theta"].grad, store["theta"].value)


def test_gradcheck_constant():
    store = ParameterStore()
    store.add("theta", np.ones(3))
    report = check_gradients(lambda s: 4.0, store)
    assert report.passed and report.max_rel_error["theta"] == 0.0


def test_gradcheck_detects_wrong_gradient():
    store = ParameterStore()
    store.add("theta", np.array([1.0, 2.0]))

    def wrong(s):
        s["theta"].grad += 2.0 * s["theta"].value
        return 0.5 * float(np.sum(s["theta"].value ** 2))

    report = check_gradients(wrong, store)
    assert not report.passed
    assert report.worst[0] == "theta"


def test_gradcheck_detects_nondeterminism():
    store = ParameterStore()
    store.add("theta", np.ones(2))
    calls = iter(range(100))
    with pytest.raises(NonDeterministicLoss):
        check_gradients(lambda s: float(next(calls)), store)


def test_gradcheck_skips_frozen_and_validates_step():
    store = ParameterStore()
    store.add("theta", np.ones(2))
    store.add("frozen", np.ones(2), trainable=False)
    report = check_gradients(quadratic, store)
    assert set(report.max_rel_error) == {"theta"}
    with pytest.raises(ValueError):
        check_gradients(quadratic, store, step=0.0)


def test_relative_error_definition():
    assert relative_error(0.5, 0.25) == 0.25  # floor of 1 in the denominator
    assert relative_error(10.0, 8.0) == pytest.approx(0.2)


def test_archive_round_trip(tmp_path):
    tensors = {"a": np.arange(6.0).reshape(2, 3), "s": np.array(2.5), "e": np.zeros((0, 4))}
    path = tmp_path / "x.jtar"
    save_archive(path, tensors, {"k": [1, 2]})
    back, meta = load_archive(path)
    assert meta == {"k": [1, 2]}
    for name, value in tensors.items():
        assert back[name].shape == value.shape
        np.testing.assert_array_equal(back[name], value)


def test_archive_rejects_garbage(tmp_path):
    bad = tmp_path / "bad"
    bad.write_bytes(b"nope")
    with pytest.raises(ArchiveError):
        load_archive(bad)
    good = tmp_path / "good"
    save_archive(good, {"a": np.ones(10)}, {})
    good.write_bytes(good.read_bytes()[:-8])
    with pytest.raises(ArchiveError):
        load_archive(good)
