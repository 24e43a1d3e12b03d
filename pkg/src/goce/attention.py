"""Graph-masked multi-head attention with one shared K/V head.

Queries get ``n_heads`` projections, keys and values a single projection that
every head reuses. Rows of W_Q and W_K are scaled by hard-concrete gates whose
expected-open probability is the differentiable L0 penalty.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .graph_builder import HardConcreteConfig, expected_open, hard_concrete
from .numerics import Tensor


@dataclass
class AttentionParams:
    wq: Tensor  # [d, n_heads * d_k]
    wk: Tensor  # [d, d_k]
    wv: Tensor  # [d, d_k]
    wo: Tensor  # [n_heads * d_k, d]
    gate_q: Tensor  # [d] one gate logit per row of wq
    gate_k: Tensor  # [d]
    n_heads: int

    @property
    def d_k(self) -> int:
        return self.wk.shape[1]

    def check(self) -> None:
        if self.wq.shape[1] != self.n_heads * self.d_k:
            raise nx.ShapeError(f"W_Q width {self.wq.shape[1]} != n_heads*d_k = {self.n_heads}*{self.d_k}")
        if self.wv.shape[1] != self.d_k or self.wo.shape[0] != self.n_heads * self.d_k:
            raise nx.ShapeError("W_V / W_O widths do not match the shared head width")


@dataclass(frozen=True)
class CsailLossConfig:
    lambda_l0: float = 1e-3
    tau_cf: float = 0.5
    lambda_kl: float = 0.1

    def validate(self) -> None:
        if not 0 < self.tau_cf <= 1:
            raise ValueError(f"tau_cf must be in (0, 1], got {self.tau_cf}")
        if self.lambda_l0 < 0 or self.lambda_kl < 0:
            raise ValueError("loss weights must be non-negative")


def build_head_mask(adjacency: np.ndarray, n_heads: int) -> np.ndarray:
    """{0, -inf} mask per head; a query always sees itself."""
    adj = np.asarray(adjacency) != 0
    allowed = adj | np.eye(adj.shape[0], dtype=bool)
    mask = np.where(allowed, 0.0, -np.inf)
    return np.broadcast_to(mask, (n_heads,) + mask.shape).copy()


def gate_values(p: AttentionParams, hc: HardConcreteConfig, rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
    return hard_concrete(p.gate_q, hc, rng), hard_concrete(p.gate_k, hc, rng)


def attention_scores(
    H: Tensor,
    p: AttentionParams,
    mask: np.ndarray,
    gates: tuple[Tensor, Tensor] | None = None,
) -> tuple[list[Tensor], Tensor]:
    """Masked, 1/sqrt(d_k)-scaled scores per head, plus the shared V."""
    p.check()
    wq, wk = p.wq, p.wk
    if gates is not None:
        wq = nx.scale_rows(wq, gates[0])
        wk = nx.scale_rows(wk, gates[1])
    q = nx.matmul(H, wq)
    k = nx.matmul(H, wk)
    v = nx.matmul(H, p.wv)
    kt = nx.transpose(k)
    dk = p.d_k
    scores = []
    for h in range(p.n_heads):
        qh = nx.getitem(q, (slice(None), slice(h * dk, (h + 1) * dk)))
        s = nx.add_const(nx.matmul(qh, kt), mask[h])
        scores.append(nx.scale(s, 1.0 / np.sqrt(dk)))
    return scores, v


def attend(scores: list[Tensor], v: Tensor, wo: Tensor, temperature: float = 1.0) -> tuple[Tensor, list[Tensor]]:
    probs = []
    heads = []
    for s in scores:
        a = nx.softmax_rows(s if temperature == 1.0 else nx.scale(s, 1.0 / temperature))
        probs.append(a)
        heads.append(nx.matmul(a, v))
    return nx.matmul(nx.concat(heads, axis=1), wo), probs


def csail_attention(
    H: Tensor,
    p: AttentionParams,
    mask: np.ndarray,
    gates: tuple[Tensor, Tensor] | None = None,
    temperature: float = 1.0,
) -> tuple[Tensor, list[Tensor]]:
    """Return Z [T, d] and the per-head attention matrices.

    ``temperature`` < 1 sharpens every head (interventional pass).
    """
    scores, v = attention_scores(H, p, mask, gates)
    return attend(scores, v, p.wo, temperature)


def kl_from_scores(scores: list[Tensor], tau_cf: float) -> Tensor:
    if not 0 < tau_cf <= 1:
        raise ValueError(f"tau_cf must be in (0, 1], got {tau_cf}")
    terms = []
    for s in scores:
        terms.append(nx.kl_logits_rows(s, nx.scale(s, 1.0 / tau_cf)))
    acc = terms[0]
    for t in terms[1:]:
        acc = nx.add(acc, t)
    return nx.scale(acc, 1.0 / len(terms))


def kl_consistency_loss(
    H: Tensor,
    p: AttentionParams,
    mask: np.ndarray,
    tau_cf: float,
    gates: tuple[Tensor, Tensor] | None = None,
) -> Tensor:
    """KL(plain attention || attention sharpened by 1/tau_cf), averaged over heads and rows."""
    scores, _ = attention_scores(H, p, mask, gates)
    return kl_from_scores(scores, tau_cf)


def l0_penalty(p: AttentionParams, lambda_l0: float, hc: HardConcreteConfig) -> Tensor:
    """lambda * expected number of open W_Q and W_K rows."""
    open_q = nx.total(expected_open(p.gate_q, hc))
    open_k = nx.total(expected_open(p.gate_k, hc))
    return nx.scale(nx.add(open_q, open_k), lambda_l0)


def mean_open_probability(params: list[AttentionParams], hc: HardConcreteConfig) -> float:
    probs = []
    with nx.no_grad():
        for p in params:
            probs.append(expected_open(p.gate_q, hc).data)
            probs.append(expected_open(p.gate_k, hc).data)
    return float(np.concatenate(probs).mean())
