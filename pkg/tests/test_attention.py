import math

import numpy as np
import pytest

from goce import numerics as nx
from goce.attention import (
    AttentionParams,
    attention_scores,
    build_head_mask,
    csail_attention,
    kl_consistency_loss,
    kl_from_scores,
    l0_penalty,
)
from goce.graph_builder import HardConcreteConfig
from goce.numerics import Tensor

HC = HardConcreteConfig(mode="deterministic")


def make_params(rng, d=5, n_heads=2, d_k=3, gate=3.0):
    return AttentionParams(
        Tensor(rng.normal(size=(d, n_heads * d_k))),
        Tensor(rng.normal(size=(d, d_k))),
        Tensor(rng.normal(size=(d, d_k))),
        Tensor(rng.normal(size=(n_heads * d_k, d))),
        Tensor(np.full(d, gate)),
        Tensor(np.full(d, gate)),
        n_heads,
    )


def random_adjacency(rng, T, p=0.4):
    return np.tril((rng.random((T, T)) < p).astype(int), -1)


def test_head_mask_examples(rng):
    m = build_head_mask(np.zeros((3, 3)), 2)
    assert m.shape == (2, 3, 3)
    assert np.array_equal(np.isfinite(m[0]), np.eye(3, dtype=bool))
    full = build_head_mask(np.tril(np.ones((4, 4)), -1), 1)[0]
    assert np.array_equal(np.isfinite(full), np.tril(np.ones((4, 4), dtype=bool)))
    assert np.all(full[np.isfinite(full)] == 0.0)


def test_masked_softmax_support_matches_oracle(rng):
    for _ in range(20):
        T = int(rng.integers(1, 8))
        adj = random_adjacency(rng, T)
        p = make_params(rng)
        _, probs = csail_attention(Tensor(rng.normal(size=(T, 5))), p, build_head_mask(adj, p.n_heads))
        for a in probs:
            for i in range(T):
                support = set(np.flatnonzero(a.data[i] > 0)) | set()
                assert support <= set(np.flatnonzero(adj[i])) | {i}
                assert np.all(a.data[i][(adj[i] == 0) & (np.arange(T) != i)] == 0.0)


def test_single_token_attention(rng):
    p = make_params(rng)
    H = rng.normal(size=(1, 5))
    Z, probs = csail_attention(Tensor(H), p, build_head_mask(np.zeros((1, 1)), p.n_heads))
    assert all(a.data.tolist() == [[1.0]] for a in probs)
    v = H @ p.wv.data
    expect = np.concatenate([v] * p.n_heads, axis=1) @ p.wo.data
    np.testing.assert_allclose(Z.data, expect, atol=1e-13)


def test_diagonal_mask_isolates_positions(rng):
    p = make_params(rng)
    H = rng.normal(size=(4, 5))
    mask = build_head_mask(np.zeros((4, 4)), p.n_heads)
    base, _ = csail_attention(Tensor(H), p, mask)
    for j in range(4):
        Hp = H.copy()
        Hp[j] += 1.0
        out, _ = csail_attention(Tensor(Hp), p, mask)
        for i in range(4):
            if i != j:
                assert np.array_equal(out.data[i], base.data[i])


def _brute_attention(H, p, allowed):
    d_k = p.d_k
    Q = H @ p.wq.data
    K = H @ p.wk.data
    V = H @ p.wv.data
    T = H.shape[0]
    heads = []
    for h in range(p.n_heads):
        out = np.zeros((T, d_k))
        for i in range(T):
            keys = [j for j in range(T) if allowed[i][j]]
            s = [float(Q[i, h * d_k : (h + 1) * d_k] @ K[j]) / math.sqrt(d_k) for j in keys]
            w = [math.exp(x - max(s)) for x in s]
            tot = sum(w)
            for wj, j in zip(w, keys):
                out[i] += wj / tot * V[j]
        heads.append(out)
    return np.concatenate(heads, axis=1) @ p.wo.data


def test_full_mask_matches_brute_force(rng):
    p = make_params(rng)
    H = rng.normal(size=(3, 5))
    adj = np.tril(np.ones((3, 3)), -1)
    Z, _ = csail_attention(Tensor(H), p, build_head_mask(adj, p.n_heads))
    np.testing.assert_allclose(Z.data, _brute_attention(H, p, adj + np.eye(3)), atol=1e-12)


def test_kv_sharing_matches_redundant_reference(rng):
    p = make_params(rng)
    T = 5
    H = Tensor(rng.normal(size=(T, 5)))
    mask = build_head_mask(random_adjacency(rng, T), p.n_heads)
    Z, _ = csail_attention(H, p, mask)
    q = nx.matmul(H, p.wq)
    heads = []
    for h in range(p.n_heads):
        k_h = nx.matmul(H, p.wk)  # recomputed for every head
        v_h = nx.matmul(H, p.wv)
        qh = nx.getitem(q, (slice(None), slice(h * p.d_k, (h + 1) * p.d_k)))
        s = nx.scale(nx.add_const(nx.matmul(qh, nx.transpose(k_h)), mask[h]), 1.0 / np.sqrt(p.d_k))
        heads.append(nx.matmul(nx.softmax_rows(s), v_h))
    ref = nx.matmul(nx.concat(heads, axis=1), p.wo)
    assert Z.data.tobytes() == ref.data.tobytes()


def test_kl_consistency_examples(rng):
    p = make_params(rng)
    H = Tensor(rng.normal(size=(4, 5)))
    mask = build_head_mask(random_adjacency(rng, 4, 0.7), p.n_heads)
    assert kl_consistency_loss(H, p, mask, 1.0).item() == 0.0
    uniform = [Tensor(np.array([[1.3, 1.3, 1.3], [0.2, 0.2, -np.inf]]))]
    for tau in (0.1, 0.5, 0.9):
        assert kl_from_scores(uniform, tau).item() == 0.0
    value = kl_from_scores([Tensor(np.array([[2.0, 3.0]]))], 0.5).item()
    assert value == pytest.approx(0.08260774489474473, abs=1e-12)


def test_kl_consistency_monotone_in_tau(rng):
    scores = [Tensor(np.array([[0.3, -1.2, 2.0, 0.7]]))]
    values = [kl_from_scores(scores, t).item() for t in np.linspace(0.1, 1.0, 19)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    assert values[-1] == 0.0


def test_kl_consistency_rejects_bad_tau():
    with pytest.raises(ValueError):
        kl_from_scores([Tensor([[0.0, 1.0]])], 0.0)


def test_softmax_scale_invariance(rng):
    p = make_params(rng)
    T = 4
    H = Tensor(rng.normal(size=(T, 5)))
    mask = build_head_mask(random_adjacency(rng, T), p.n_heads)
    scores, _ = attention_scores(H, p, mask)
    for s in scores:
        shifted = nx.add_const(s, np.full(s.shape, 4.25))
        np.testing.assert_allclose(nx.softmax_rows(shifted).data, nx.softmax_rows(s).data, atol=1e-15)


def test_l0_penalty_examples(rng):
    p = make_params(rng, d=4)
    assert l0_penalty(p, 0.0, HC).item() == 0.0
    closed = make_params(rng, d=4, gate=-1e6)
    assert l0_penalty(closed, 1.0, HC).item() == pytest.approx(0.0, abs=1e-300)
    from goce.attention import gate_values

    gq, gk = gate_values(closed, HC)
    H = Tensor(rng.normal(size=(3, 4)))
    scores, _ = attention_scores(H, closed, build_head_mask(np.zeros((3, 3)), closed.n_heads), (gq, gk))
    assert np.all(gq.data == 0.0)
    assert all(np.all(s.data[np.isfinite(s.data)] == 0.0) for s in scores)
    zero = make_params(rng, d=1, gate=0.0)
    assert l0_penalty(zero, 1.0, HC).item() == pytest.approx(2 * 0.8318221839916905, abs=1e-12)


def test_mask_soundness_finite_differences(rng):
    h = 1e-5
    for _ in range(10):
        T = int(rng.integers(2, 7))
        p = make_params(rng)
        adj = random_adjacency(rng, T)
        mask = build_head_mask(adj, p.n_heads)
        H = rng.normal(size=(T, 5))
        for j in range(T):
            for c in range(5):
                Hp, Hm = H.copy(), H.copy()
                Hp[j, c] += h
                Hm[j, c] -= h
                diff = (csail_attention(Tensor(Hp), p, mask)[0].data - csail_attention(Tensor(Hm), p, mask)[0].data) / (2 * h)
                for i in range(T):
                    if not np.isfinite(mask[0, i, j]):
                        assert np.all(diff[i] == 0.0)


def test_attention_gradients(rng):
    for _ in range(5):
        T = int(rng.integers(2, 6))
        adj = random_adjacency(rng, T, 0.6)
        mask = build_head_mask(adj, 2)

        def f(H, wq, wk, wv, wo, gq):
            p = AttentionParams(wq, wk, wv, wo, gq, gq, 2)
            gates = (nx.sigmoid(gq), nx.sigmoid(gq))
            Z, _ = csail_attention(H, p, mask, gates, temperature=0.7)
            return nx.total(nx.tanh(Z))

        shapes = [(T, 4), (4, 6), (4, 3), (4, 3), (6, 4), (4,)]
        assert nx.gradcheck(f, [rng.uniform(-1.5, 1.5, size=s) for s in shapes]) <= 1e-4


def test_kl_consistency_gradients(rng):
    for _ in range(5):
        T = int(rng.integers(2, 6))
        mask = build_head_mask(random_adjacency(rng, T, 0.6), 2)

        def f(H, wq, wk):
            p = AttentionParams(wq, wk, wk, Tensor(np.zeros((6, 4))), Tensor(np.zeros(4)), Tensor(np.zeros(4)), 2)
            return kl_consistency_loss(H, p, mask, 0.6)

        shapes = [(T, 4), (4, 6), (4, 3)]
        assert nx.gradcheck(f, [rng.uniform(-1.5, 1.5, size=s) for s in shapes]) <= 1e-4
