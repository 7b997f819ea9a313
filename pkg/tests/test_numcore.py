import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from routerlab import numcore
from routerlab.errors import ParameterError, ShapeError

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
vectors = arrays(np.float64, st.integers(1, 16), elements=finite)


def test_softmax_uniform():
    np.testing.assert_allclose(numcore.softmax([0, 0, 0, 0]), [0.25] * 4)


@pytest.mark.parametrize("c,t", [(3.0, 1.0), (-7.5, 0.3), (100.0, 5.0)])
def test_softmax_equal_pair(c, t):
    np.testing.assert_allclose(numcore.softmax([c, c], t), [0.5, 0.5])


def test_softmax_reference_values():
    # 40-digit mpmath evaluation of e^x / sum(e^x)
    expected = [0.090030573170380458, 0.24472847105479765, 0.66524095577482189]
    np.testing.assert_allclose(numcore.softmax([1, 2, 3]), expected, rtol=1e-14)


def test_softmax_errors():
    with pytest.raises(ParameterError):
        numcore.softmax([1.0, 2.0], temperature=0)
    with pytest.raises(ParameterError):
        numcore.softmax([1.0], temperature=-1)
    with pytest.raises(ShapeError):
        numcore.softmax([])


def test_softmax_no_overflow():
    p = numcore.softmax([1000.0, 0.0])
    assert np.all(np.isfinite(p))
    assert p[0] == pytest.approx(1.0)


@given(vectors, finite)
def test_softmax_sums_to_one_and_shift_invariant(v, shift):
    p = numcore.softmax(v)
    assert abs(p.sum() - 1.0) < 1e-9
    assert np.all(p > 0) or v.max() - v.min() > 700
    np.testing.assert_allclose(numcore.softmax(v + shift), p, atol=1e-9)


@given(arrays(np.float64, st.integers(2, 10), elements=st.floats(-10, 10), unique=True))
def test_softmax_low_temperature_is_one_hot(v):
    v = np.sort(v)
    v = v + np.arange(v.size) * 1.0  # gap >= 1 between consecutive logits
    assert numcore.softmax(v, temperature=1e-3).max() > 0.999


def test_topk_examples():
    assert numcore.topk([0.1, 0.4, 0.3, 0.2], 2) == ([1, 2], [0.4, 0.3])
    assert numcore.topk([0.5, 0.5], 1)[0] == [0]
    assert numcore.topk([7], 1) == ([0], [7.0])


def test_topk_ties_lowest_index_first():
    assert numcore.topk([1, 3, 3, 1, 3], 3)[0] == [1, 2, 4]


@pytest.mark.parametrize("k", [0, 3])
def test_topk_k_out_of_range(k):
    with pytest.raises(ParameterError):
        numcore.topk([1.0, 2.0], k)


@settings(max_examples=60)
@given(vectors, st.data())
def test_topk_stable_under_masking_the_rest(v, data):
    k = data.draw(st.integers(1, v.size))
    idx, _ = numcore.topk(v, k)
    masked = np.full_like(v, -np.inf)
    masked[idx] = v[idx]
    assert numcore.topk(masked, k)[0] == idx


def test_l2_normalize_examples():
    np.testing.assert_allclose(numcore.l2_normalize([3, 4]), [0.6, 0.8])
    np.testing.assert_array_equal(numcore.l2_normalize([0, 0], 1e-12), [0, 0])
    np.testing.assert_allclose(numcore.l2_normalize([1, 1, 1, 1]), [0.5] * 4, rtol=1e-15)


@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-1e3, 1e3)))
def test_l2_normalize_idempotent(v):
    if np.linalg.norm(v) < 1e-6:
        return
    once = numcore.l2_normalize(v)
    assert abs(np.linalg.norm(once) - 1) < 1e-9
    np.testing.assert_allclose(numcore.l2_normalize(once), once, atol=1e-9)


def test_activations():
    np.testing.assert_array_equal(numcore.activation([-1, 0, 2], "relu"), [0, 0, 2])
    assert numcore.activation([0.0], "silu")[0] == 0.0
    assert numcore.activation([1.0], "silu")[0] == pytest.approx(0.73105857863000488, rel=1e-14)
    x = np.linspace(-4, 4, 17)
    ref = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))
    np.testing.assert_allclose(numcore.activation(x, "gelu"), ref, rtol=1e-14, atol=1e-16)
    with pytest.raises(ParameterError):
        numcore.activation([1.0], "tanh")


@pytest.mark.parametrize("kind", numcore.ACTIVATIONS)
def test_activation_grad_matches_central_difference(kind):
    x = np.array([-2.3, -0.7, 0.4, 1.9])
    h = 1e-6
    numeric = (numcore.activation(x + h, kind) - numcore.activation(x - h, kind)) / (2 * h)
    np.testing.assert_allclose(numcore.activation_grad(x, kind), numeric, rtol=1e-7)


def test_silu_extreme_inputs_finite():
    out = numcore.activation([-1000.0, 1000.0], "silu")
    assert np.all(np.isfinite(out))


def test_rng_determinism():
    a = numcore.Rng(42).normal([4])
    b = numcore.Rng(42).normal([4])
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, numcore.Rng(43).normal([4]))


def test_rng_zero_std_and_errors():
    np.testing.assert_array_equal(numcore.rng_normal(numcore.Rng(1), [3], 1.5, 0.0), [1.5] * 3)
    with pytest.raises(ParameterError):
        numcore.rng_normal(numcore.Rng(1), [3], 0.0, -1.0)


def test_rng_sample_mean_bound():
    x = numcore.Rng(42).normal([10000], 0.0, 0.02)
    assert abs(x.mean()) < 0.001


def test_rng_spawn_is_reproducible():
    np.testing.assert_array_equal(numcore.Rng(5).spawn(3).normal([3]), numcore.Rng(5).spawn(3).normal([3]))
