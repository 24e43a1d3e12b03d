import itertools

import numpy as np
import pytest
from scipy.special import expit

from goce import numerics as nx
from goce.moe import (
    ExpertParams,
    RouterParams,
    causal_neighborhood,
    eligible_experts,
    expert_forward,
    masked_topk_route,
    moe_layer,
    route_sequence,
    select_topk,
)
from goce.numerics import Tensor


def make_experts(rng, d, n, d_ff=4, scale=0.8):
    return ExpertParams(
        [Tensor(rng.normal(0, scale, (d, d_ff))) for _ in range(n)],
        [Tensor(rng.normal(0, scale, d_ff)) for _ in range(n)],
        [Tensor(rng.normal(0, scale, (d_ff, d))) for _ in range(n)],
        [Tensor(rng.normal(0, scale, d)) for _ in range(n)],
    )


def make_router(rng, d, n):
    return RouterParams(Tensor(rng.normal(size=(d, n))), Tensor(rng.normal(size=n)))


def chain(T):
    return np.eye(T, k=-1, dtype=int)


def random_dag(rng, T, p=0.4):
    return np.tril((rng.random((T, T)) < p).astype(int), -1)


def test_neighborhood_examples():
    assert causal_neighborhood(chain(4), 0) == [0, 1]
    assert causal_neighborhood(chain(4), 2) == [1, 2, 3]
    assert causal_neighborhood(np.zeros((3, 3)), 1) == [1]
    adj = np.zeros((4, 4), dtype=int)
    adj[3, 0] = adj[2, 0] = 1
    assert causal_neighborhood(adj, 0) == [0, 2, 3]


def test_eligibility_examples():
    assert eligible_experts({}, [0, 1], 4) == [0, 1, 2, 3]
    assert eligible_experts({0: [2]}, [0, 1], 4) == [2]
    assert eligible_experts({0: [2], 5: [1]}, [0, 1], 4) == [2]
    assert eligible_experts({0: [2], 1: [0, 3]}, [0, 1, 2], 4) == [0, 2, 3]


def test_chain_hand_simulation():
    # token 0 sees every expert; each later token inherits from its parent
    logits = np.array([[0.1, 0.9, 0.3], [2.0, 0.0, 0.5], [0.0, -1.0, 3.0], [1.0, 1.0, 1.0]])
    d = route_sequence(logits, chain(4), [0, 1, 2, 3], 1)
    assert [r.eligible for r in d.routes] == [[0, 1, 2], [1], [1], [1]]
    assert [r.selected for r in d.routes] == [[1], [1], [1], [1]]
    assert d.histogram(3) == [0, 4, 0]


def test_unconnected_tokens_route_freely():
    logits = np.array([[0.1, 0.9, 0.3], [2.0, 0.0, 0.5], [0.0, -1.0, 3.0]])
    d = route_sequence(logits, np.zeros((3, 3)), [0, 1, 2], 1)
    assert [r.selected for r in d.routes] == [[1], [0], [2]]


def test_select_topk_examples():
    assert select_topk(np.array([1.0, 3.0, 2.0]), [0, 1, 2], 2) == [1, 2]
    assert select_topk(np.array([1.0, 3.0, 2.0]), [0, 2], 1) == [2]
    assert select_topk(np.array([5.0, 5.0, 5.0]), [0, 1, 2], 2) == [0, 1]
    assert select_topk(np.array([1.0, 2.0]), [1], 2) == [1]
    with pytest.raises(ValueError):
        select_topk(np.array([1.0]), [0], 0)


def test_select_topk_matches_brute_force(rng):
    for _ in range(200):
        n = int(rng.integers(1, 7))
        logits = rng.normal(size=n)
        eligible = sorted(rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False).tolist())
        k = int(rng.integers(1, n + 1))
        size = min(k, len(eligible))
        best = max(itertools.combinations(eligible, size), key=lambda c: sum(logits[list(c)]))
        assert sorted(select_topk(logits, eligible, k)) == sorted(best)


def test_masked_route_gates(rng):
    router = make_router(rng, 3, 4)
    h = rng.normal(size=3)
    chosen, gates = masked_topk_route(h, router, [1, 3], 2)
    logits = h @ router.w.data + router.b.data
    assert sorted(chosen) == [1, 3]
    assert gates == pytest.approx([expit(logits[e]) for e in chosen], abs=1e-15)


def test_expert_forward_examples(rng):
    d = 3
    experts = make_experts(rng, d, 2)
    h = Tensor(rng.normal(size=(1, d)))
    zero_gate = expert_forward(h, [0], [Tensor(0.0)], experts)
    assert np.array_equal(zero_gate.data, h.data)
    out = expert_forward(h, [0, 1], [Tensor(0.25), Tensor(0.5)], experts).data
    f = lambda e: np.tanh(h.data @ experts.w1[e].data + experts.b1[e].data) @ experts.w2[e].data + experts.b2[e].data
    np.testing.assert_allclose(out, h.data + 0.25 * f(0) + 0.5 * f(1), atol=1e-14)
    with pytest.raises(ValueError):
        expert_forward(h, [], [], experts)


def test_moe_layer_matches_per_token_forward(rng):
    for _ in range(20):
        T, d, n = int(rng.integers(1, 7)), 4, 3
        k = int(rng.integers(1, 3))
        H = Tensor(rng.normal(size=(T, d)))
        router, experts = make_router(rng, d, n), make_experts(rng, d, n)
        adj = random_dag(rng, T)
        out, decision = moe_layer(H, adj, list(range(T)), router, experts, k)
        logits = H.data @ router.w.data + router.b.data
        for r in decision.routes:
            gates = [Tensor(expit(logits[r.token, e])) for e in r.selected]
            ref = expert_forward(Tensor(H.data[r.token : r.token + 1]), r.selected, gates, experts)
            np.testing.assert_allclose(out.data[r.token], ref.data[0], atol=1e-12)


def test_each_expert_evaluated_once_per_layer(rng):
    T, d, n, k = 6, 4, 4, 2
    calls = []
    H = Tensor(rng.normal(size=(T, d)))
    out, decision = moe_layer(H, random_dag(rng, T), list(range(T)), make_router(rng, d, n), make_experts(rng, d, n), k, lambda e, rows: calls.append((e, rows)))
    experts_called = [e for e, _ in calls]
    assert len(experts_called) == len(set(experts_called))
    assert sum(len(rows) for _, rows in calls) == sum(len(r.selected) for r in decision.routes)
    for r in decision.routes:
        assert 1 <= len(r.selected) <= k
        assert set(r.selected) <= set(r.eligible)
        assert all(0 < g < 1 for g in r.gates)


def test_routing_is_deterministic(rng):
    T, d, n = 5, 4, 3
    H = Tensor(rng.normal(size=(T, d)))
    router, experts = make_router(rng, d, n), make_experts(rng, d, n)
    adj = random_dag(rng, T)
    a, da = moe_layer(H, adj, list(range(T)), router, experts, 1)
    b, db = moe_layer(H, adj, list(range(T)), router, experts, 1)
    assert a.data.tobytes() == b.data.tobytes()
    assert da.to_json() == db.to_json()


def test_moe_gradients(rng):
    T, d, n = 4, 3, 3
    adj = random_dag(rng, T, 0.5)
    for _ in range(5):
        H0 = rng.normal(size=(T, d))

        def f(H, w, b, w1, w2):
            ex = ExpertParams([w1] * n, [Tensor(np.zeros(4))] * n, [w2] * n, [Tensor(np.zeros(d))] * n)
            out, _ = moe_layer(H, adj, list(range(T)), RouterParams(w, b), ex, 2)
            return nx.total(nx.tanh(out))

        inputs = [H0, rng.normal(size=(d, n)), rng.normal(size=n), rng.normal(size=(d, 4)), rng.normal(size=(4, d))]
        assert nx.gradcheck(f, inputs) <= 1e-4
