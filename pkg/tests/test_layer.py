import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from samroute.layer import (
    ExpertParams,
    SamLayer,
    backward_batch,
    expert_forward,
    forward_batch,
    init_layer,
    layer_backward,
    layer_forward,
    masked_dense_forward,
    segment_sum,
)
from samroute.routers import KINDS, RouterParams, Topology
from samroute.tensor import Rng, gaussian, softmax


def test_expert_forward_examples():
    z = ExpertParams(np.zeros((3, 2)), np.zeros((2, 3)))
    np.testing.assert_array_equal(expert_forward(z, [1.0, -1.0]), [0, 0])
    one = ExpertParams(np.array([[1.0]]), np.array([[1.0]]))
    np.testing.assert_array_equal(expert_forward(one, [2.0]), [2.0])
    np.testing.assert_array_equal(expert_forward(one, [-2.0]), [0.0])
    with pytest.raises(ValueError):
        expert_forward(one, [1.0, 2.0])


def test_switch_layer_is_single_weighted_term():
    layer = init_layer("switch", Topology(2, 2), 3, 5, 1, Rng(3), router_std=1.0)
    h = np.array([0.5, -1.0, 2.0])
    y, d, _ = layer_forward(layer, h)
    e = d.selected_experts[0]
    p = softmax(layer.router.w_global @ h)
    assert e == int(np.argmax(p))
    np.testing.assert_allclose(y, p[e] * expert_forward(layer.experts[e], h), rtol=1e-14)


def test_nonshared_layer_arithmetic():
    # one group chosen with g = 0.5, mixture [0.6, 0.4], experts output [2, 0] and [0, 2]
    topo = Topology(2, 2)
    router = RouterParams("sam_nonshared", w_group=np.zeros((2, 2)),
                          w_mixture=np.array([[[np.log(0.6), 0.0], [np.log(0.4), 0.0]],
                                              [[0.0, 0.0], [0.0, 0.0]]]))
    w_in = np.zeros((4, 2, 2))
    w_out = np.zeros((4, 2, 2))
    w_in[0] = w_in[1] = np.eye(2)
    w_out[0] = [[2.0, 0.0], [0.0, 0.0]]
    w_out[1] = [[0.0, 0.0], [2.0, 0.0]]
    layer = SamLayer(topo, router, w_in, w_out, k=2)
    y, d, _ = layer_forward(layer, [1.0, 0.0])
    assert d.selected_group == 0 and d.selected_experts == [0, 1]
    np.testing.assert_allclose(d.combine_weights, [0.3, 0.2], rtol=1e-14)
    np.testing.assert_allclose(y, [0.6, 0.4], rtol=1e-14)


def _random_layer(kind, G, epg, d_model, d_ffn, k, seed):
    return init_layer(kind, Topology(G, epg), d_model, d_ffn, k, Rng(seed), router_std=1.0)


layer_cases = st.sampled_from(KINDS).flatmap(
    lambda kind: st.tuples(
        st.just(kind), st.integers(1, 4), st.integers(1, 4), st.integers(1, 5), st.integers(1, 6),
        st.integers(0, 2**32)))


@settings(max_examples=60, deadline=None)
@given(layer_cases)
def test_matches_masked_dense_oracle(case):
    kind, G, epg, d_model, d_ffn, seed = case
    if G * epg > 8:
        epg = max(1, 8 // G)
    k = 1 if kind == "switch" else min(2, epg)
    layer = _random_layer(kind, G, epg, d_model, d_ffn, k, seed)
    H = gaussian(Rng(seed).child(5), 6 * d_model).reshape(6, d_model)
    Y, cache = forward_batch(layer, H)
    for b, d in enumerate(cache.routing.decisions(layer.topo)):
        np.testing.assert_allclose(Y[b], masked_dense_forward(layer, H[b], d), rtol=1e-12, atol=1e-13)


def test_capacity_drops_match_masked_oracle():
    layer = _random_layer("moe_topk", 2, 2, 3, 4, 2, 11)
    H = gaussian(Rng(1), 10 * 3).reshape(10, 3)
    Y, cache = forward_batch(layer, H, capacity_factor=0.5)
    assert not cache.survived.all()
    for b, d in enumerate(cache.routing.decisions(layer.topo)):
        want = masked_dense_forward(layer, H[b], d, list(cache.survived[b]))
        np.testing.assert_allclose(Y[b], want, rtol=1e-12, atol=1e-13)


@pytest.mark.parametrize("kind", KINDS)
def test_zero_upstream_gradient(kind):
    k = 1 if kind == "switch" else 2
    layer = _random_layer(kind, 2, 2, 4, 3, k, 0)
    _, _, cache = layer_forward(layer, [0.3, -0.2, 1.0, 0.5])
    grads, dh = layer_backward(layer, cache, np.zeros(4))
    assert all(not g.any() for g in grads.values())
    assert not dh.any()


def _fd_grads(layer, H, c, cache, eps=1e-5):
    frozen, survived = cache.routing.selection(), cache.survived

    def loss():
        Y, _ = forward_batch(layer, H, fixed=frozen, fixed_survived=survived)
        return float(np.sum(c * Y))

    out = {}
    for name, arr in layer.params().items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            lp = loss()
            flat[i] = old - eps
            lm = loss()
            flat[i] = old
            gflat[i] = (lp - lm) / (2 * eps)
        out[name] = g
    dH = np.zeros_like(H)
    for idx in np.ndindex(H.shape):
        old = H[idx]
        H[idx] = old + eps
        lp = loss()
        H[idx] = old - eps
        lm = loss()
        H[idx] = old
        dH[idx] = (lp - lm) / (2 * eps)
    return out, dH


@pytest.mark.parametrize("kind", KINDS)
def test_backward_matches_central_differences(kind):
    k = 1 if kind == "switch" else 2
    layer = _random_layer(kind, 2, 2, 4, 3, k, 21)
    H = gaussian(Rng(22), 5 * 4).reshape(5, 4)
    c = gaussian(Rng(23), 5 * 4).reshape(5, 4)
    _, cache = forward_batch(layer, H)
    grads, dH = backward_batch(layer, cache, c)
    num, num_dH = _fd_grads(layer, H, c, cache)
    for name, g in grads.items():
        scale = max(np.abs(g).max(), np.abs(num[name]).max())
        assert np.abs(g - num[name]).max() / scale < 1e-6, name
    assert np.abs(dH - num_dH).max() / np.abs(dH).max() < 1e-6


def test_unselected_experts_get_exact_zero_gradient():
    layer = _random_layer("sam_shared", 4, 2, 3, 4, 1, 5)
    H = gaussian(Rng(6), 3).reshape(1, 3)
    _, cache = forward_batch(layer, H)
    grads, _ = backward_batch(layer, cache, np.ones((1, 3)))
    chosen = set(cache.routing.experts.ravel())
    for e in range(layer.topo.n_expert):
        if e not in chosen:
            assert not grads["w_in"][e].any() and not grads["w_out"][e].any()


def test_cache_mismatch_is_rejected():
    a = _random_layer("moe_topk", 2, 2, 3, 4, 2, 0)
    b = _random_layer("moe_topk", 2, 3, 3, 4, 2, 0)
    _, cache = forward_batch(a, np.ones((2, 3)))
    with pytest.raises(ValueError):
        backward_batch(b, cache, np.ones((2, 3)))
    with pytest.raises(ValueError):
        backward_batch(a, cache, np.ones((3, 3)))


def test_layer_validation():
    topo = Topology(2, 2)
    with pytest.raises(ValueError):
        init_layer("switch", topo, 3, 4, 2, Rng(0))
    with pytest.raises(ValueError):
        init_layer("sam_shared", topo, 3, 4, 3, Rng(0))
    layer = init_layer("moe_topk", topo, 3, 4, 2, Rng(0))
    with pytest.raises(ValueError):
        forward_batch(layer, np.ones((2, 4)))


@given(st.lists(st.integers(0, 5), min_size=1, max_size=30), st.integers(0, 2**32))
def test_segment_sum_matches_loop(index, seed):
    index = np.array(index, dtype=np.int64)
    values = gaussian(Rng(seed), index.size * 2).reshape(index.size, 2)
    want = np.zeros((6, 2))
    for i, v in zip(index, values):
        want[i] += v
    np.testing.assert_allclose(segment_sum(index, values, 6), want, rtol=1e-12, atol=1e-12)
