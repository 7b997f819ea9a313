import numpy as np
import pytest

from routerlab import numcore
from routerlab.errors import ParameterError, ShapeError
from routerlab.grad import Tape, backward, finite_diff_check, straight_through_topk


def test_linear_sum_gradient():
    tape = Tape()
    w = tape.param(np.array([1.0, 2.0]))
    x = tape.const([3.0, 4.0])
    loss = tape.sum(w * x)
    grads = backward(tape, loss)
    np.testing.assert_array_equal(grads[w.id], [3.0, 4.0])


def test_cross_entropy_at_confident_optimum_has_zero_gradient():
    tape = Tape()
    z = tape.param(np.array([[60.0, 0.0, 0.0]]))
    loss = tape.cross_entropy(z, np.array([0]))
    g = backward(tape, loss)[z.id]
    assert np.abs(g).max() < 1e-20


def test_non_scalar_loss_rejected():
    tape = Tape()
    w = tape.param(np.ones(3))
    with pytest.raises(ShapeError):
        backward(tape, w * 2.0)


def test_backward_accumulates_reused_nodes():
    tape = Tape()
    w = tape.param(np.array([2.0, -1.0]))
    y = w * w  # w used twice by one op
    loss = tape.sum(y + w)  # and again downstream
    np.testing.assert_array_equal(backward(tape, loss)[w.id], [5.0, -1.0])


def test_backward_order_is_reverse_topological():
    tape = Tape()
    a = tape.param(np.array([1.0]))
    b = a * 2.0
    c = b + a
    loss = tape.sum(c)
    ids = [n.id for n in tape.nodes]
    assert ids == sorted(ids)
    for n in tape.nodes:
        assert all(i < n.id for i in n.inputs)
    backward(tape, loss)
    assert a.grad.shape == a.value.shape


def _two_layer_mlp(seed):
    rng = numcore.Rng(seed)
    tape = Tape()
    W1 = tape.param(rng.normal((6, 5)))
    b1 = tape.param(rng.normal((6,)))
    W2 = tape.param(rng.normal((3, 6)))
    x = tape.const(rng.normal((4, 5)))
    h = tape.activation(x @ W1.T + b1, "gelu")
    out = h @ W2.T
    loss = tape.cross_entropy(out, np.array([0, 1, 2, 1]))
    return tape, loss


@pytest.mark.parametrize("seed", range(3))
def test_mlp_matches_finite_differences(seed):
    tape, loss = _two_layer_mlp(seed)
    assert finite_diff_check(tape, loss, h=1e-5) < 1e-4


def test_linear_loss_finite_difference_is_exact():
    rng = numcore.Rng(2)
    tape = Tape()
    W = tape.param(rng.normal((3, 4)))
    x = tape.const(rng.normal((5, 4)))
    loss = tape.sum((x @ W.T) * rng.normal((5, 3)))
    assert finite_diff_check(tape, loss, h=1e-5) < 1e-6


def test_large_step_degrades_accuracy():
    errs = []
    for h in (1e-5, 1e-3, 1e-1):
        tape, loss = _two_layer_mlp(0)
        errs.append(finite_diff_check(tape, loss, h=h))
    assert errs[0] < errs[1] < errs[2]


def test_finite_diff_rejects_bad_step():
    tape, loss = _two_layer_mlp(0)
    with pytest.raises(ParameterError):
        finite_diff_check(tape, loss, h=0)


@pytest.mark.parametrize("op", ["softmax", "l2_normalize", "renormalize", "square", "log"])
def test_rowwise_ops_match_finite_differences(op):
    rng = numcore.Rng(9)
    tape = Tape()
    a = tape.param(rng.uniform((3, 5), 0.2, 2.0))
    out = getattr(tape, op)(a)
    loss = tape.sum(out * rng.normal((3, 5)))
    assert finite_diff_check(tape, loss) < 1e-6


def test_indexing_ops_match_finite_differences():
    rng = numcore.Rng(4)
    tape = Tape()
    a = tape.param(rng.normal((5, 3)))
    rows = np.array([0, 2, 2, 4])
    picked = a[rows]
    spread = tape.scatter_rows(picked * 2.0, np.array([1, 1, 0, 3]), 4)
    cat = tape.concat([spread, tape.reshape(a[rows, np.array([0, 1, 2, 0])], (4, 1))], axis=1)
    loss = tape.sum(cat * rng.normal((4, 4)))
    assert finite_diff_check(tape, loss) < 1e-6


def test_straight_through_forward():
    tape = Tape()
    p = tape.param(np.array([0.5, 0.3, 0.1, 0.1]))
    out = straight_through_topk(tape, p, 2)
    np.testing.assert_allclose(out.value, [0.625, 0.375, 0.0, 0.0], rtol=1e-15)
    assert abs(out.value.sum() - 1.0) < 1e-9


def test_straight_through_full_width_is_identity():
    tape = Tape()
    p = tape.param(np.full(4, 0.25))
    np.testing.assert_array_equal(straight_through_topk(tape, p, 4).value, [0.25] * 4)


def test_straight_through_mask_passes_selected_gradient():
    tape = Tape()
    p = tape.param(np.array([0.5, 0.3, 0.1, 0.1]))
    masked = tape.topk_mask(p, 2)
    g = np.array([1.5, -2.0, 3.0, 4.0])
    loss = tape.sum(masked * g)
    np.testing.assert_array_equal(backward(tape, loss)[p.id], [1.5, -2.0, 0.0, 0.0])


def test_straight_through_k_out_of_range():
    tape = Tape()
    p = tape.param(np.full(3, 1 / 3))
    with pytest.raises(ParameterError):
        straight_through_topk(tape, p, 4)


def test_straight_through_matches_finite_differences_away_from_ties():
    rng = numcore.Rng(1)
    tape = Tape()
    z = tape.param(rng.normal((4, 6)))
    probs = tape.softmax(z)
    out = straight_through_topk(tape, probs, 2)
    # the dense term keeps every logit's true gradient away from zero
    loss = tape.sum(out * rng.normal((4, 6))) + tape.sum(probs * rng.normal((4, 6)))
    assert finite_diff_check(tape, loss) < 1e-6
