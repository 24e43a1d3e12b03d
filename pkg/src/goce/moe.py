"""Causally conditioned sparse experts.

Tokens are routed one at a time in topological order. A token may only pick
experts that were already selected somewhere in its causal neighbourhood
(itself plus direct in/out neighbours); the first token of a component sees
every expert.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit

from . import numerics as nx
from .numerics import Tensor


@dataclass
class RouterParams:
    w: Tensor  # [d, n_experts]
    b: Tensor  # [n_experts]

    @property
    def n_experts(self) -> int:
        return self.w.shape[1]


@dataclass
class ExpertParams:
    w1: list[Tensor]  # each [d, d_ff]
    b1: list[Tensor]
    w2: list[Tensor]  # each [d_ff, d]
    b2: list[Tensor]

    @property
    def n_experts(self) -> int:
        return len(self.w1)


@dataclass
class TokenRoute:
    token: int
    neighborhood: list[int]
    eligible: list[int]
    selected: list[int]
    gates: list[float]

    def to_json(self) -> dict:
        return {
            "token": self.token,
            "neighborhood": self.neighborhood,
            "eligible": self.eligible,
            "selected": self.selected,
            "gates": self.gates,
        }


@dataclass
class RoutingDecision:
    routes: list[TokenRoute] = field(default_factory=list)

    def by_token(self) -> dict[int, TokenRoute]:
        return {r.token: r for r in self.routes}

    def histogram(self, n_experts: int) -> list[int]:
        counts = Counter(e for r in self.routes for e in r.selected)
        return [counts.get(e, 0) for e in range(n_experts)]

    def to_json(self) -> list[dict]:
        return [r.to_json() for r in self.routes]


ExpertHook = Callable[[int, list[int]], None]


def causal_neighborhood(adjacency: np.ndarray, t: int) -> list[int]:
    adj = np.asarray(adjacency) != 0
    members = set(np.flatnonzero(adj[t]).tolist()) | set(np.flatnonzero(adj[:, t]).tolist())
    members.add(t)
    return sorted(members)


def eligible_experts(route_history: dict[int, list[int]], neighborhood: list[int], n_experts: int) -> list[int]:
    """Experts already used inside the neighbourhood, or all of them if none."""
    used: set[int] = set()
    for j in neighborhood:
        used.update(route_history.get(j, ()))
    return sorted(used) if used else list(range(n_experts))


def select_topk(logits: np.ndarray, eligible: list[int], k: int) -> list[int]:
    """k largest logits among eligible experts; ties to the lower index."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not eligible:
        raise ValueError("empty eligible set")
    masked = np.full(len(logits), -np.inf)
    masked[eligible] = np.asarray(logits)[eligible]
    ranked = sorted(eligible, key=lambda e: (-masked[e], e))
    return ranked[: min(k, len(eligible))]


def masked_topk_route(h_t: np.ndarray, router: RouterParams, eligible: list[int], k: int) -> tuple[list[int], list[float]]:
    logits = np.asarray(h_t, dtype=np.float64).reshape(-1) @ router.w.data + router.b.data
    chosen = select_topk(logits, eligible, k)
    gates = [float(expit(logits[e])) for e in chosen]
    return chosen, gates


def ffn(x: Tensor, experts: ExpertParams, e: int) -> Tensor:
    hidden = nx.tanh(nx.add_bias(nx.matmul(x, experts.w1[e]), experts.b1[e]))
    return nx.add_bias(nx.matmul(hidden, experts.w2[e]), experts.b2[e])


def expert_forward(h_t: Tensor, selected: list[int], gates: list[Tensor], experts: ExpertParams) -> Tensor:
    """h_t + sum_e gate_e * FFN_e(h_t) for one token row [1, d]."""
    if not selected:
        raise ValueError("no expert selected")
    out = h_t
    for e, g in zip(selected, gates):
        y = ffn(h_t, experts, e)
        out = nx.add(out, nx.scale_rows(y, nx.reshape(g, (1,))))
    return out


def route_sequence(
    logits: np.ndarray,
    adjacency: np.ndarray,
    order: list[int],
    k: int,
) -> RoutingDecision:
    """Sequential eligibility-masked top-k over a whole sequence."""
    n_experts = logits.shape[1]
    history: dict[int, list[int]] = {}
    decision = RoutingDecision()
    for t in order:
        hood = causal_neighborhood(adjacency, t)
        eligible = eligible_experts(history, hood, n_experts)
        chosen = select_topk(logits[t], eligible, k)
        history[t] = chosen
        gates = [float(expit(logits[t, e])) for e in chosen]
        decision.routes.append(TokenRoute(t, hood, eligible, chosen, gates))
    return decision


def moe_layer(
    H: Tensor,
    adjacency: np.ndarray,
    order: list[int],
    router: RouterParams,
    experts: ExpertParams,
    k: int,
    hook: ExpertHook | None = None,
) -> tuple[Tensor, RoutingDecision]:
    """Route every token, then evaluate each expert once on the rows that chose it."""
    T, d = H.shape
    logit_t = nx.add_bias(nx.matmul(H, router.w), router.b)
    gate_t = nx.sigmoid(logit_t)
    decision = route_sequence(logit_t.data, adjacency, order, k)
    out = H
    for e in range(experts.n_experts):
        rows = sorted(r.token for r in decision.routes if e in r.selected)
        if not rows:
            continue
        if hook is not None:
            hook(e, rows)
        y = ffn(nx.getitem(H, rows), experts, e)
        g = nx.getitem(gate_t, (rows, [e] * len(rows)))
        out = nx.add(out, nx.scatter(nx.scale_rows(y, g), rows, (T, d)))
    return out, decision
