import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from routerlab import numcore
from routerlab.errors import ParameterError, ShapeError
from routerlab.formats import load_tensors, save_tensors
from routerlab.moe import (
    ExpertFfn,
    MoeLayer,
    aux_loss,
    dense_reference,
    dispatch_fractions,
    expert_forward,
    importance,
    load_bert_style_experts,
    moe_forward,
    select_topk,
)
from routerlab.routers import HashRouter, RouterConfig, build_router

ALPHA = 0.005


def test_select_topk_examples():
    d = select_topk([[0.5, 0.3, 0.1, 0.1]], 2)
    np.testing.assert_array_equal(d.indices, [[0, 1]])
    np.testing.assert_allclose(d.weights, [[0.625, 0.375]], rtol=1e-15)
    d = select_topk(np.full((1, 4), 0.25), 2)
    np.testing.assert_array_equal(d.indices, [[0, 1]])
    np.testing.assert_array_equal(d.weights, [[0.5, 0.5]])
    d = select_topk([[1.0, 0.0, 0.0, 0.0]], 2)
    np.testing.assert_array_equal(d.weights, [[1.0, 0.0]])
    assert d.weights.mean() == 0.5


def test_select_topk_k_too_large():
    with pytest.raises(ParameterError):
        select_topk([[0.5, 0.5]], 3)


@settings(max_examples=50)
@given(st.integers(0, 10_000), st.integers(1, 8), st.data())
def test_decision_invariants(seed, E, data):
    k = data.draw(st.integers(1, E))
    P = numcore.softmax(numcore.Rng(seed).normal((3, 5, E)))
    d = select_topk(P, k)
    assert d.indices.shape == (3, 5, k)
    np.testing.assert_allclose(d.weights.sum(-1), 1.0, atol=1e-9)
    assert np.all(d.weights >= 0)
    assert np.all(d.indices < E)
    srt = np.sort(d.indices, axis=-1)
    assert np.all(np.diff(srt, axis=-1) > 0)


def _identity_expert(H):
    eye = np.eye(H)
    return ExpertFfn("standard", {"W_in": eye.copy(), "b_in": np.zeros(H), "W_out": eye.copy(),
                                  "b_out": np.zeros(H)}, activation="relu")


@pytest.mark.parametrize("name", ["linear", "attention", "mlp", "hash"])
def test_identity_experts_pass_tokens_through(name):
    cfg = RouterConfig(hidden_size=6, num_experts=4, qk_dim=3, mlp_hidden=5, seed=2)
    layer = MoeLayer(build_router(name, cfg), [_identity_expert(6) for _ in range(4)], k=2)
    X = np.abs(numcore.Rng(1).normal((2, 3, 6)))
    Y, _, _ = moe_forward(layer, X)
    np.testing.assert_allclose(Y, X, atol=1e-15)


def test_hash_k1_uses_exactly_one_expert():
    cfg = RouterConfig(hidden_size=8, num_experts=4, top_k=1)
    layer = MoeLayer.build(HashRouter(cfg), k=1, d_ff=16, rng=numcore.Rng(3))
    X = numcore.Rng(4).normal((10, 8))
    out = layer(X)
    idx = layer.router.expert_index(X)
    for i in range(10):
        # batched and single-row BLAS calls may round differently
        np.testing.assert_allclose(out.y[i], layer.experts[idx[i]](X[i]), rtol=1e-13, atol=1e-18)
    np.testing.assert_array_equal(out.decision.weights, 1.0)


@pytest.mark.parametrize("kind", ["standard", "swiglu"])
def test_sparse_matches_dense_oracle(kind):
    cfg = RouterConfig(hidden_size=10, num_experts=4, mlp_hidden=6, seed=11)
    layer = MoeLayer.build(build_router("mlp", cfg), k=2, d_ff=12, kind=kind, rng=numcore.Rng(11), std=0.3)
    X = numcore.Rng(12).normal((3, 7, 10))
    out = layer(X)
    assert np.abs(out.y - dense_reference(layer, X, out.decision)).max() < 1e-12


def test_forward_shape_error():
    layer = MoeLayer.build(build_router("linear", RouterConfig(hidden_size=4, num_experts=2, top_k=1)), k=1)
    with pytest.raises(ShapeError):
        layer(np.zeros((2, 5)))


def test_layer_validation():
    r = build_router("linear", RouterConfig(hidden_size=4, num_experts=2, top_k=1))
    experts = [_identity_expert(4)] * 2
    with pytest.raises(ParameterError):
        MoeLayer(r, experts[:1])
    with pytest.raises(ParameterError):
        MoeLayer(r, experts, k=3)
    with pytest.raises(ParameterError):
        MoeLayer(r, experts, k=1, aux_form="cubic")
    with pytest.raises(ShapeError):
        MoeLayer(r, [_identity_expert(3)] * 2, k=1)


# -- aux loss -------------------------------------------------------------

def test_aux_loss_balanced_case():
    P = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]])
    d = select_topk(P, 1)
    np.testing.assert_array_equal(dispatch_fractions(d), [0.5, 0.5])
    np.testing.assert_array_equal(importance(P), [0.5, 0.5])
    assert aux_loss(P, d, ALPHA, "product") == ALPHA
    assert aux_loss(P, d, ALPHA, "squared") == 0.5 * ALPHA


def test_aux_loss_concentrated_case():
    P = np.array([[0.8, 0.2], [0.7, 0.3], [0.6, 0.4], [0.9, 0.1]])
    d = select_topk(P, 1)
    np.testing.assert_array_equal(dispatch_fractions(d), [1.0, 0.0])
    assert aux_loss(P, d, ALPHA, "squared") == pytest.approx(1.125 * ALPHA, rel=1e-14)


@pytest.mark.parametrize("E,k", [(8, 2), (4, 1), (16, 4), (60, 4)])
def test_aux_loss_uniform_closed_form(E, k):
    P = np.full((5, 9, E), 1.0 / E)
    d = select_topk(P, k)
    assert aux_loss(P, d, ALPHA) == pytest.approx(ALPHA * k / E, rel=1e-12)


def test_aux_loss_reference_magnitude():
    P = np.full((16, 128, 8), 0.125)
    assert aux_loss(P, select_topk(P, 2)) == pytest.approx(0.00125, rel=1e-12)


def _one_hot_batch(counts):
    # k=1 one-hot rows: dispatch fraction and importance both equal counts / N
    E = len(counts)
    return np.repeat(np.eye(E), counts, axis=0)


def test_uniform_routing_minimizes_squared_aux():
    E, N = 8, 1000
    P = _one_hot_batch([N // E] * E)
    uniform = aux_loss(P, select_topk(P, 1))
    rng = numcore.Rng(5)
    for _ in range(100):
        counts = rng.generator.multinomial(N, numcore.softmax(0.5 * rng.normal((E,))))
        Q = _one_hot_batch(counts)
        assert aux_loss(Q, select_topk(Q, 1)) >= uniform


@pytest.mark.parametrize("form", ["product", "squared"])
def test_aux_loss_permutation_invariant(form):
    P = numcore.softmax(numcore.Rng(6).normal((40, 6)))
    perm = np.array([3, 0, 5, 1, 4, 2])
    a = aux_loss(P, select_topk(P, 2), form=form)
    b = aux_loss(P[:, perm], select_topk(P[:, perm], 2), form=form)
    assert a == pytest.approx(b, rel=1e-12)


def test_aux_loss_unknown_form():
    P = np.full((2, 2), 0.5)
    with pytest.raises(ParameterError):
        aux_loss(P, select_topk(P, 1), form="cubic")


# -- experts --------------------------------------------------------------

def test_swiglu_zero_input():
    e = ExpertFfn.random("swiglu", 5, 7, numcore.Rng(0), std=1.0)
    np.testing.assert_array_equal(expert_forward(e, np.zeros(5)), np.zeros(5))


def test_standard_zero_weights_return_output_bias():
    e = ExpertFfn("standard", {"W_in": np.zeros((6, 3)), "b_in": np.zeros(6), "W_out": np.zeros((3, 6)),
                               "b_out": np.array([0.1, -0.2, 0.3])})
    np.testing.assert_array_equal(expert_forward(e, [4.0, 5.0, 6.0]), [0.1, -0.2, 0.3])


def test_swiglu_hand_case():
    eye = np.eye(2)
    e = ExpertFfn("swiglu", {"W": eye, "V": eye.copy(), "W2": eye.copy()})
    np.testing.assert_allclose(expert_forward(e, [1.0, 0.0]), [1 / (1 + math.exp(-1)), 0.0], rtol=1e-15)


def test_expert_shape_errors():
    e = ExpertFfn.random("standard", 4, 8, numcore.Rng(0))
    with pytest.raises(ShapeError):
        e(np.zeros(5))
    with pytest.raises(ShapeError):
        ExpertFfn("standard", {"W_in": np.zeros((8, 4)), "b_in": np.zeros(8), "W_out": np.zeros((4, 7)),
                               "b_out": np.zeros(4)})
    with pytest.raises(ParameterError):
        ExpertFfn.random("moe", 4, 8, numcore.Rng(0))


def _bert_ffn(H, d_ff, seed):
    rng = numcore.Rng(seed)
    return rng.normal((d_ff, H)), rng.normal((d_ff,)), rng.normal((H, d_ff)), rng.normal((H,))


@pytest.mark.parametrize("name", ["linear", "attention", "hash"])
def test_cloned_experts_equal_plain_ffn(name, tmp_path):
    H, d_ff = 6, 12
    W_int, b_int, W_out, b_out = _bert_ffn(H, d_ff, 9)
    path = tmp_path / "ffn.npz"
    save_tensors(path, {"intermediate.dense.weight": W_int, "intermediate.dense.bias": b_int,
                        "output.dense.weight": W_out, "output.dense.bias": b_out})
    t = load_tensors(path)
    layer = MoeLayer.build(build_router(name, RouterConfig(hidden_size=H, num_experts=4, qk_dim=3)), k=2, d_ff=d_ff)
    load_bert_style_experts(layer, t["intermediate.dense.weight"], t["intermediate.dense.bias"],
                            t["output.dense.weight"], t["output.dense.bias"])
    for e in layer.experts:
        np.testing.assert_array_equal(e.params["W_in"], W_int)
        np.testing.assert_array_equal(e.params["b_out"], b_out)
    X = numcore.Rng(1).normal((5, H))
    plain = ExpertFfn("standard", {"W_in": W_int, "b_in": b_int, "W_out": W_out, "b_out": b_out})(X)
    np.testing.assert_allclose(layer(X).y, plain, rtol=1e-12, atol=1e-12)


def test_clone_shape_mismatch():
    layer = MoeLayer.build(build_router("linear", RouterConfig(hidden_size=6, num_experts=2, top_k=1)), k=1, d_ff=12)
    W_int, b_int, W_out, b_out = _bert_ffn(6, 10, 0)
    with pytest.raises(ShapeError):
        load_bert_style_experts(layer, W_int, b_int, W_out, b_out)


def test_named_params_share_storage():
    layer = MoeLayer.build(build_router("mlp", RouterConfig(hidden_size=4, num_experts=2, top_k=1)), k=1, d_ff=8)
    params = layer.named_params()
    assert params["router.W1"] is layer.router.params["W1"]
    assert params["expert1.W_out"] is layer.experts[1].params["W_out"]
    assert len(params) == 4 + 2 * 4


@pytest.mark.parametrize("name", ["linear", "attention", "mlp", "hybrid", "mlp-hadamard", "self-supervised"])
def test_output_mean_within_three_standard_errors(name):
    cfg = RouterConfig(hidden_size=32, num_experts=8, qk_dim=16, mlp_hidden=None, seed=4)
    layer = MoeLayer.build(build_router(name, cfg), k=2, d_ff=64, rng=numcore.Rng(5))
    Y = layer(numcore.Rng(6).normal((16, 32, 32))).y
    # tokens are independent; feature channels within a token are not
    token_means = Y.reshape(-1, 32).mean(axis=1)
    se = token_means.std(ddof=1) / math.sqrt(token_means.size)
    assert abs(token_means.mean()) < 3 * se
