import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from samroute.routers import (
    RouterParams,
    Topology,
    init_router,
    route,
    route_batch,
    route_moe_topk,
    route_sam_nonshared,
    route_sam_shared,
    route_switch,
    sam_shared_from_scores,
    scaled,
)
from samroute.tensor import Rng, softmax

P6 = [0.3, 0.1, 0.05, 0.28, 0.22, 0.05]


def shared_from_probs(p):
    # one-dimensional hidden state h = [1] with logits log(p) reproduces p under softmax
    return RouterParams("sam_shared", w_global=np.log(np.asarray(p))[:, None]), np.array([1.0])


def exhaustive_shared(p, topo, k):
    best, best_key = None, None
    for w in range(topo.n_groups):
        members = range(w * topo.experts_per_group, (w + 1) * topo.experts_per_group)
        for subset in itertools.combinations(members, k):
            score = math.fsum(p[i] for i in subset)
            if best is None or score > best:
                best, best_key = score, (w, frozenset(subset))
    return best_key


def test_switch_dominant_logit():
    params = RouterParams("switch", w_global=np.array([[2.0], [0.0], [0.0]]))
    d = route_switch(params, [1.0])
    assert d.selected_experts == [0]
    assert d.combine_weights[0] == pytest.approx(softmax([2, 0, 0])[0], abs=1e-15)
    assert d.selected_group is None


def test_switch_zero_router_ties_to_expert_zero():
    params = RouterParams("switch", w_global=np.zeros((5, 3)))
    d = route_switch(params, [1.0, -2.0, 3.0])
    assert d.selected_experts == [0]
    assert d.combine_weights[0] == pytest.approx(1 / 5, abs=1e-15)


def test_switch_dim_mismatch():
    with pytest.raises(ValueError):
        route_switch(RouterParams("switch", w_global=np.zeros((2, 3))), [1.0, 2.0])


def test_moe_topk_two_of_three():
    params = RouterParams("moe_topk", w_global=np.array([[1.0], [2.0], [3.0]]))
    d = route_moe_topk(params, [1.0], 2)
    assert d.selected_experts == [2, 1]
    e = math.exp(1.0)
    np.testing.assert_allclose(d.combine_weights, [e / (e + 1), 1 / (e + 1)], rtol=0, atol=1e-15)
    assert d.combine_weights[0] == pytest.approx(0.731, abs=5e-4)


def test_moe_topk_all_experts_is_full_softmax():
    params = RouterParams("moe_topk", w_global=np.array([[0.3], [-1.0], [2.0], [0.0]]))
    d = route_moe_topk(params, [1.5], 4)
    logits = params.w_global[:, 0] * 1.5
    full = softmax(logits)
    np.testing.assert_allclose(d.combine_weights, full[d.selected_experts], rtol=0, atol=1e-15)


def test_moe_topk_inference_ignores_seed():
    rng = Rng(0)
    params = RouterParams("moe_topk", w_global=rng.normal(24).reshape(8, 3), noise_scale=1.0)
    h = [0.1, -0.4, 0.9]
    a = route_moe_topk(params, h, 3, Rng(1), train_mode=False)
    b = route_moe_topk(params, h, 3, Rng(2), train_mode=False)
    assert a.selected_experts == b.selected_experts
    assert a.combine_weights == b.combine_weights


def test_moe_topk_noise_only_in_train_mode():
    params = RouterParams("moe_topk", w_global=np.zeros((16, 2)), noise_scale=1.0)
    picks = {tuple(route_moe_topk(params, [1.0, 1.0], 2, Rng(s), train_mode=True).selected_experts)
             for s in range(20)}
    assert len(picks) > 1


def test_moe_topk_k_out_of_range():
    with pytest.raises(ValueError):
        route_moe_topk(RouterParams("moe_topk", w_global=np.zeros((3, 1))), [1.0], 4)


def test_sam_shared_hand_example():
    topo = Topology(2, 3)
    d = sam_shared_from_scores(P6, topo, 2)
    np.testing.assert_allclose(d.group_scores, [0.40, 0.50], rtol=0, atol=1e-15)
    assert d.selected_group == 1
    assert d.selected_experts == [3, 4]
    assert d.combine_weights == [0.28, 0.22]
    # the same through the full router path
    params, h = shared_from_probs(P6)
    d = route_sam_shared(params, topo, h, 2)
    assert (d.selected_group, d.selected_experts) == (1, [3, 4])
    np.testing.assert_allclose(d.combine_weights, [0.28, 0.22], rtol=1e-12)


def test_sam_shared_uniform_picks_group_zero():
    topo = Topology(3, 4)
    params = RouterParams("sam_shared", w_global=np.zeros((12, 2)))
    d = route_sam_shared(params, topo, [0.5, 0.5], 3)
    assert d.selected_group == 0
    assert d.selected_experts == [0, 1, 2]


def test_sam_shared_rejects_k_above_group_size():
    with pytest.raises(ValueError):
        route_sam_shared(RouterParams("sam_shared", w_global=np.zeros((4, 1))), Topology(2, 2), [1.0], 3)


@pytest.mark.parametrize("seed", range(20))
def test_sam_shared_single_group_matches_moe_selection(seed):
    rng = Rng(seed)
    w = rng.normal(8 * 4).reshape(8, 4)
    h = rng.normal(4)
    shared = route_sam_shared(RouterParams("sam_shared", w_global=w), Topology(1, 8), h, 3)
    moe = route_moe_topk(RouterParams("moe_topk", w_global=w), h, 3)
    assert set(shared.selected_experts) == set(moe.selected_experts)
    assert sum(shared.combine_weights) < 1.0  # raw global scores, not renormalised
    assert sum(moe.combine_weights) == pytest.approx(1.0, abs=1e-12)


def test_sam_nonshared_group_softmax():
    topo = Topology(2, 2)
    params = RouterParams("sam_nonshared", w_group=np.array([[math.log(2)], [0.0]]),
                          w_mixture=np.zeros((2, 2, 1)))
    d = route_sam_nonshared(params, topo, [1.0], 1)
    np.testing.assert_allclose(d.group_scores, [2 / 3, 1 / 3], rtol=0, atol=1e-15)
    assert d.selected_group == 0


def test_sam_nonshared_all_zero():
    topo = Topology(4, 3)
    params = init_router("sam_nonshared", topo, 5)
    d = route_sam_nonshared(params, topo, np.ones(5), 2)
    assert d.selected_group == 0
    assert d.selected_experts == [0, 1]
    np.testing.assert_allclose(d.combine_weights, [1 / 12, 1 / 12], rtol=0, atol=1e-16)


@pytest.mark.parametrize("seed", range(25))
def test_sam_nonshared_weights_recompute(seed):
    rng = Rng(seed)
    topo = Topology(3, 4)
    params = init_router("sam_nonshared", topo, 6, rng, std=1.0)
    h = rng.normal(6)
    d = route_sam_nonshared(params, topo, h, 2)
    g = np.exp(params.w_group @ h)
    g /= g.sum()
    w = int(np.argmax(g))
    q = np.exp(params.w_mixture[w] @ h)
    q /= q.sum()
    local = sorted(range(4), key=lambda i: (-q[i], i))[:2]
    assert d.selected_group == w
    assert d.selected_experts == [w * 4 + i for i in local]
    np.testing.assert_allclose(d.combine_weights, [g[w] * q[i] for i in local], rtol=1e-12)


random_case = st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**32 - 1)).filter(
    lambda t: t[0] * t[1] <= 16)


@settings(max_examples=200)
@given(random_case, st.data())
def test_sam_shared_equals_exhaustive_search(case, data):
    G, epg, seed = case
    k = data.draw(st.integers(1, epg))
    rng = Rng(seed)
    topo = Topology(G, epg)
    params = init_router("sam_shared", topo, 5, rng, std=2.0)
    d = route_sam_shared(params, topo, rng.normal(5), k)
    assert (d.selected_group, frozenset(d.selected_experts)) == exhaustive_shared(d.expert_scores, topo, k)


@settings(max_examples=200)
@given(random_case, st.sampled_from(["sam_shared", "sam_nonshared"]), st.data())
def test_sam_containment_and_normalisation(case, kind, data):
    G, epg, seed = case
    k = data.draw(st.integers(1, epg))
    rng = Rng(seed)
    topo = Topology(G, epg)
    params = init_router(kind, topo, 4, rng, std=3.0)
    d = route(params, topo, rng.normal(4), k)
    lo = d.selected_group * epg
    assert all(lo <= e < lo + epg for e in d.selected_experts)
    assert abs(d.expert_scores.sum() - 1) <= 1e-12
    if kind == "sam_nonshared":
        assert abs(d.group_scores.sum() - 1) <= 1e-12
    else:
        assert d.group_scores.sum() <= 1 + 1e-12
    assert all(0 < w < 1 or (G == 1 and epg == 1) for w in d.combine_weights)


@settings(max_examples=100)
@given(random_case, st.sampled_from(["switch", "moe_topk", "sam_nonshared"]),
       st.floats(0.05, 20), st.data())
def test_selection_invariant_to_router_scaling(case, kind, c, data):
    G, epg, seed = case
    k = 1 if kind == "switch" else data.draw(st.integers(1, epg))
    rng = Rng(seed)
    topo = Topology(G, epg)
    params = init_router(kind, topo, 4, rng, std=1.0)
    h = rng.normal(4)
    a = route(params, topo, h, k)
    b = route(scaled(params, c), topo, h, k)
    assert (a.selected_group, a.selected_experts) == (b.selected_group, b.selected_experts)


def test_shared_selection_can_change_under_scaling():
    # group sums of softmax scores are not scale-invariant, unlike logit argmaxes
    topo = Topology(2, 2)
    params = RouterParams("sam_shared", w_global=np.array([[3.0], [-5.0], [2.0], [2.0]]))
    assert route_sam_shared(params, topo, [1.0], 2).selected_group == 0
    assert route_sam_shared(scaled(params, 0.1), topo, [1.0], 2).selected_group == 1


@pytest.mark.parametrize("kind", ["switch", "moe_topk", "sam_shared", "sam_nonshared"])
def test_batch_path_matches_per_token(kind):
    rng = Rng(11)
    topo = Topology(3, 4)
    k = 1 if kind == "switch" else 3
    params = init_router(kind, topo, 6, rng, std=1.5)
    H = rng.normal(40 * 6).reshape(40, 6)
    batch = route_batch(params, topo, H, k).decisions(topo)
    for h, b in zip(H, batch):
        d = route(params, topo, h, k)
        assert d.selected_experts == b.selected_experts
        assert d.selected_group == b.selected_group
        np.testing.assert_allclose(d.combine_weights, b.combine_weights, rtol=1e-13)
        np.testing.assert_allclose(d.expert_scores, b.expert_scores, rtol=1e-13)


def test_batch_noisy_moe_matches_per_token_with_same_noise():
    topo = Topology(2, 4)
    params = init_router("moe_topk", topo, 3, Rng(0), std=1.0, noise_scale=0.7)
    H = Rng(1).normal(5 * 3).reshape(5, 3)
    r = route_batch(params, topo, H, 2, Rng(2), train_mode=True)
    for b in range(5):
        logits = params.w_global @ H[b] + r.noise[b]
        want = sorted(range(8), key=lambda i: (-logits[i], i))[:2]
        assert list(r.experts[b]) == want


@pytest.mark.parametrize("kind", ["switch", "moe_topk", "sam_shared", "sam_nonshared"])
def test_routing_is_deterministic(kind):
    topo = Topology(2, 3)
    k = 1 if kind == "switch" else 2
    params = init_router(kind, topo, 4, Rng(3), std=1.0)
    h = Rng(4).normal(4)
    a, b = route(params, topo, h, k), route(params, topo, h, k)
    assert a.selected_experts == b.selected_experts
    assert a.combine_weights == b.combine_weights
    np.testing.assert_array_equal(a.expert_scores, b.expert_scores)


def test_params_validation():
    with pytest.raises(ValueError):
        RouterParams("bogus", w_global=np.zeros((2, 2)))
    with pytest.raises(ValueError):
        RouterParams("sam_nonshared", w_global=np.zeros((2, 2)))
    with pytest.raises(ValueError):
        RouterParams("switch", w_global=np.zeros((2, 2)), noise_scale=-1.0)
    with pytest.raises(ValueError):
        RouterParams("switch", w_global=np.zeros((3, 2))).check(Topology(2, 2))
