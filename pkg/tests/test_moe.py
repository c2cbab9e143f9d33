"""Router, capacity, expert mixture, and load-balance loss contracts,
checked against exhaustive / hand-counted oracles."""

import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from moebridge import autograd as ag
from moebridge.autograd import Tensor, backward
from moebridge.moe import (ConfigError, ExpertFFN, MoELayerConfig, Router,
                           RoutingDecision, apply_capacity, aux_loss, capacity_rate,
                           expert_capacity, moe_forward, route, routed_forward)
from moebridge.rng import Rng, mix_key


def make_router(w) -> Router:
    return Router(ag.param(np.asarray(w, dtype=np.float64)))


def rng_for(tag: str, *extra) -> Rng:
    return Rng(mix_key(2024, tag, *extra))


# ---------------------------------------------------------------------------
# route

def test_route_k1_aligned_token_gets_unit_gate():
    router = make_router([[1.0, 0.0], [0.0, 1.0]])
    tokens = Tensor([[5.0, 0.0]])  # aligned with expert 0's column
    decision = route(router, tokens, 1)
    assert decision.expert_ids.tolist() == [[0]]
    assert decision.gates.data.tolist() == [[1.0]]


def test_route_equal_logits_tie_breaks_to_lower_indices():
    router = make_router(np.zeros((3, 4)))
    decision = route(router, Tensor([[1.0, 2.0, 3.0]]), 2)
    assert decision.expert_ids.tolist() == [[0, 1]]
    assert np.abs(decision.gates.data - 0.5).max() < 1e-15


def test_route_matches_exhaustive_sort_oracle():
    rng = rng_for("route-oracle")
    router = make_router(rng.normals((5, 6)))
    tokens = Tensor(rng.normals((8, 5)))
    decision = route(router, tokens, 3)
    logits = tokens.data @ router.w.data
    for t in range(8):
        # brute force: order all experts by (-logit, index)
        order = sorted(range(6), key=lambda e: (-logits[t, e], e))
        assert decision.expert_ids[t].tolist() == order[:3]
        selected = np.array([logits[t, e] for e in order[:3]])
        expect = np.exp(selected - selected.max())
        expect /= expect.sum()
        assert np.abs(decision.gates.data[t] - expect).max() < 1e-12


def test_route_rejects_bad_k():
    router = make_router(np.zeros((3, 4)))
    with pytest.raises(ConfigError):
        route(router, Tensor(np.zeros((2, 3))), 5)


def test_route_raw_probs_full_softmax():
    rng = rng_for("route-raw")
    router = make_router(rng.normals((4, 5)))
    tokens = Tensor(rng.normals((6, 4)))
    decision = route(router, tokens, 2)
    logits = tokens.data @ router.w.data
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    assert np.abs(decision.raw_probs.data - e / e.sum(axis=1, keepdims=True)).max() < 1e-12


# ---------------------------------------------------------------------------
# apply_capacity

def _decision_for_ids(ids: np.ndarray, n_experts: int) -> RoutingDecision:
    t, k = ids.shape
    gates = Tensor(np.full((t, k), 1.0 / k))
    raw = Tensor(np.full((t, n_experts), 1.0 / n_experts))
    return RoutingDecision(ids.astype(np.int64), gates,
                           np.zeros((t, k), dtype=bool), raw)


def test_capacity_unconstrained_when_capacity_exceeds_tokens():
    rng = rng_for("cap-a")
    router = make_router(rng.normals((4, 3)))
    decision = route(router, Tensor(rng.normals((5, 4))), 2)
    out = apply_capacity(decision, 3, 100.0)
    assert not out.dropped.any()


def test_capacity_collapse_drops_later_tokens():
    # T=4, k=1, N=2, everything routed to expert 0, factor 1.0 -> C = 2
    ids = np.zeros((4, 1), dtype=np.int64)
    decision = _decision_for_ids(ids, 2)
    assert expert_capacity(4, 1, 2, 1.0) == 2
    out = apply_capacity(decision, 2, 1.0)
    assert out.dropped.reshape(-1).tolist() == [False, False, True, True]
    assert capacity_rate(out) == 0.5


def test_capacity_uniform_routing_has_zero_drops():
    ids = np.array([[0], [1], [2], [3], [0], [1], [2], [3]])
    out = apply_capacity(_decision_for_ids(ids, 4), 4, 1.0)
    assert not out.dropped.any()
    assert capacity_rate(out) == 1.0


def test_capacity_counts_match_hand_enumeration():
    # token-major service order: per expert, first C assignments survive
    ids = np.array([[0, 1], [0, 1], [0, 2], [0, 2]])
    out = apply_capacity(_decision_for_ids(ids, 3), 3, 1.0)
    cap = expert_capacity(4, 2, 3, 1.0)  # ceil(8/3) = 3
    assert cap == 3
    assert out.dropped.tolist() == [[False, False], [False, False],
                                    [False, False], [True, False]]


def test_capacity_rate_ratio_definition():
    ids = np.array([[0, 1]] * 4)
    decision = _decision_for_ids(ids, 4)
    dropped = decision.dropped.copy()
    dropped[0, 0] = True
    dropped[2, 1] = True
    assert capacity_rate(replace(decision, dropped=dropped)) == 0.75


# ---------------------------------------------------------------------------
# moe_forward

def _zero_expert(d_model: int, d_ff: int) -> ExpertFFN:
    return ExpertFFN(ag.param(np.zeros((d_model, d_ff))),
                     ag.param(np.zeros((d_ff, d_model))))


def test_forward_zero_expert_leaves_only_shared():
    rng = rng_for("fwd-zero")
    shared = ExpertFFN.init(rng, 4, 6)
    router = make_router(rng.normals((4, 1)))
    tokens = Tensor(rng.normals((3, 4)))
    decision = route(router, tokens, 1)
    out = moe_forward([_zero_expert(4, 6)], [shared], decision, tokens)
    assert np.abs(out.data - shared(tokens).data).max() < 1e-15


def test_forward_hand_evaluated_two_expert_mix():
    d = 3
    tokens = Tensor(np.array([[1.0, 2.0, -1.0]]))
    # expert 0 scales by 2 via silu-saturating construction is awkward;
    # instead evaluate both experts directly and combine with the gates
    rng = rng_for("fwd-hand")
    e0 = ExpertFFN.init(rng, d, 5)
    e1 = _zero_expert(d, 5)
    gates = Tensor(np.array([[0.7, 0.3]]))
    decision = RoutingDecision(np.array([[0, 1]]), gates,
                               np.zeros((1, 2), dtype=bool),
                               Tensor(np.full((1, 2), 0.5)))
    shared = ExpertFFN.init(rng, d, 5)
    out = moe_forward([e0, e1], [shared], decision, tokens)
    expect = 0.7 * e0(tokens).data + shared(tokens).data
    assert np.abs(out.data - expect).max() < 1e-12


def test_forward_all_dropped_gives_shared_only():
    rng = rng_for("fwd-drop")
    experts = [ExpertFFN.init(rng, 4, 6) for _ in range(2)]
    shared = ExpertFFN.init(rng, 4, 6)
    tokens = Tensor(rng.normals((5, 4)))
    decision = route(make_router(rng.normals((4, 2))), tokens, 1)
    decision = replace(decision, dropped=np.ones_like(decision.dropped))
    out = moe_forward(experts, [shared], decision, tokens)
    assert np.array_equal(out.data, shared(tokens).data)


def test_forward_linear_in_gates():
    rng = rng_for("fwd-linear")
    experts = [ExpertFFN.init(rng, 4, 6) for _ in range(3)]
    tokens = Tensor(rng.normals((6, 4)))
    decision = route(make_router(rng.normals((4, 3))), tokens, 2)
    base = routed_forward(experts, decision, tokens).data
    doubled = replace(decision, gates=ag.mul(decision.gates, 2.0))
    assert np.abs(routed_forward(experts, doubled, tokens).data - 2 * base).max() < 1e-12


# ---------------------------------------------------------------------------
# aux loss

def test_aux_loss_uniform_is_exactly_one():
    decision = route(make_router(np.zeros((4, 4))), Tensor(np.zeros((8, 4))), 4)
    assert aux_loss(decision, 4, 4).item() == 1.0


def test_aux_loss_collapse_is_n():
    n = 5
    ids = np.zeros((6, 1), dtype=np.int64)
    raw = np.zeros((6, n))
    raw[:, 0] = 1.0
    decision = RoutingDecision(ids, Tensor(np.ones((6, 1))),
                               np.zeros((6, 1), dtype=bool), Tensor(raw))
    assert aux_loss(decision, n, 1).item() == float(n)


@pytest.mark.parametrize("seed", range(4))
def test_aux_loss_matches_direct_summation(seed):
    rng = rng_for("aux-direct", seed)
    n, t, k = 4, 6, 2
    router = make_router(rng.normals((5, n)))
    decision = route(router, Tensor(rng.normals((t, 5))), k)
    # independent direct summation of N * sum_i f_i * P_i
    counts = np.zeros(n)
    for row in decision.expert_ids:
        for e in row:
            counts[e] += 1
    direct = 0.0
    for i in range(n):
        f_i = counts[i] / (t * k)
        p_i = float(decision.raw_probs.data[:, i].mean())
        direct += f_i * p_i
    direct *= n
    assert abs(aux_loss(decision, n, k).item() - direct) < 1e-12


def test_aux_loss_differentiable_through_probs_only():
    rng = rng_for("aux-grad")
    router = make_router(rng.normals((4, 3)))
    tokens = Tensor(rng.normals((5, 4)))
    decision = route(router, tokens, 2)
    backward(aux_loss(decision, 3, 2))
    assert router.w.grad is not None
    assert np.abs(router.w.grad).max() > 0.0


# ---------------------------------------------------------------------------
# properties

@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=0, max_value=10_000), st.integers(min_value=1, max_value=5),
       st.integers(min_value=2, max_value=8))
def test_gate_normalization_property(seed, k, n):
    k = min(k, n)
    rng = Rng(mix_key(seed, "gate-prop"))
    router = Router(ag.param(rng.normals((4, n))))
    decision = route(router, Tensor(rng.normals((7, 4)) * 3), k)
    assert np.abs(decision.gates.data.sum(axis=1) - 1.0).max() < 1e-12
    for row in decision.expert_ids:
        assert len(set(row.tolist())) == k


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_gates_descend_with_selected_logits(seed):
    rng = Rng(mix_key(seed, "rank-prop"))
    router = Router(ag.param(rng.normals((4, 6))))
    tokens = Tensor(rng.normals((5, 4)))
    decision = route(router, tokens, 3)
    logits = np.take_along_axis(tokens.data @ router.w.data, decision.expert_ids, axis=1)
    assert (np.diff(logits, axis=1) <= 1e-15).all()
    assert (np.diff(decision.gates.data, axis=1) <= 1e-15).all()


def test_layer_config_validation():
    with pytest.raises(ConfigError):
        MoELayerConfig(n_experts=4, top_k=5, d_model=8, d_ff=8)
    with pytest.raises(ConfigError):
        MoELayerConfig(n_experts=4, top_k=2, d_model=8, d_ff=8, capacity_factor=0.0)
    cfg = MoELayerConfig(n_experts=4, top_k=2, d_model=8, d_ff=8)
    assert cfg.n_shared == 1
