"""Differentiable sparse causal DAG over token latents.

Edges only run from earlier to later positions (parent j < child i), so every
graph the builder emits is acyclic by construction. ``topological_sort`` is an
independent verifier that also accepts arbitrary square matrices.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor


class CycleError(ValueError):
    def __init__(self, nodes: list[int]):
        super().__init__(f"cycle through nodes {nodes}")
        self.nodes = nodes


class OrderError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class EdgeScorerParams:
    """Two-layer MLP: concat(h_i, h_j) -> hidden -> scalar edge logit."""

    w1: Tensor  # [2d, d_e]
    b1: Tensor  # [d_e]
    w2: Tensor  # [d_e, 1]
    b2: Tensor  # [1]


@dataclass
class ReadoutParams:
    """Residual fusion MLP: concat(h_i, parent aggregate) -> d."""

    w1: Tensor  # [2d, d_r]
    b1: Tensor  # [d_r]
    w2: Tensor  # [d_r, d]
    b2: Tensor  # [d]


@dataclass(frozen=True)
class HardConcreteConfig:
    tau: float = 2.0 / 3.0
    gamma: float = -0.1
    zeta: float = 1.1
    mode: str = "sample"

    def validate(self) -> None:
        if not self.tau > 0:
            raise ConfigError(f"hard-concrete temperature must be > 0, got {self.tau}")
        if not (self.gamma < 0 < 1 < self.zeta):
            raise ConfigError(f"need gamma < 0 < 1 < zeta, got gamma={self.gamma}, zeta={self.zeta}")
        if self.mode not in ("sample", "deterministic"):
            raise ConfigError(f"unknown hard-concrete mode {self.mode!r}")

    def with_mode(self, mode: str) -> "HardConcreteConfig":
        return HardConcreteConfig(self.tau, self.gamma, self.zeta, mode)


@dataclass
class CausalGraph:
    logits: np.ndarray
    gates: np.ndarray
    adjacency: np.ndarray
    topo_order: list[int]
    gate_tensor: Tensor | None = None

    @property
    def size(self) -> int:
        return self.adjacency.shape[0]

    def edges(self) -> list[tuple[int, int]]:
        """(parent, child) pairs."""
        child, parent = np.nonzero(self.adjacency)
        return sorted(zip(parent.tolist(), child.tolist()))

    def to_json(self) -> dict:
        return {
            "T": self.size,
            "adjacency": self.adjacency.astype(int).tolist(),
            "gates": self.gates.tolist(),
            "topo_order": list(self.topo_order),
            "edges": [list(e) for e in self.edges()],
        }

    def to_dot(self, tokens=None) -> str:
        lines = ["digraph causal {"]
        for i in range(self.size):
            label = f"{i}" if tokens is None else f"{i}:{tokens[i]}"
            lines.append(f'  n{i} [label="{label}"];')
        for parent, child in self.edges():
            lines.append(f'  n{parent} -> n{child} [label="{self.gates[child, parent]:.4f}"];')
        lines.append("}")
        return "\n".join(lines) + "\n"


def lower_pairs(T: int) -> tuple[np.ndarray, np.ndarray]:
    """Row (child) and column (parent) indices of all pairs with j < i."""
    return np.tril_indices(T, k=-1)


def score_edges(H: Tensor, scorer: EdgeScorerParams) -> Tensor:
    """Edge logits[i, j] = f(h_i, h_j) for j < i; -inf elsewhere."""
    T, d = H.shape
    if scorer.w1.shape[0] != 2 * d:
        raise nx.ShapeError(f"edge scorer expects input width {scorer.w1.shape[0]}, latents have 2*{d}")
    rows, cols = lower_pairs(T)
    if len(rows) == 0:
        return Tensor(np.full((T, T), -np.inf))
    pairs = nx.concat([nx.getitem(H, rows), nx.getitem(H, cols)], axis=1)
    hidden = nx.tanh(nx.add_bias(nx.matmul(pairs, scorer.w1), scorer.b1))
    logit = nx.add_bias(nx.matmul(hidden, scorer.w2), scorer.b2)
    return nx.scatter(nx.reshape(logit, (len(rows),)), (rows, cols), (T, T), fill=-np.inf)


def hard_concrete(logits: Tensor, cfg: HardConcreteConfig, rng: np.random.Generator | None = None) -> Tensor:
    """Stretched, clamped sigmoid gate; elementwise over any shape."""
    cfg.validate()
    x = logits
    if cfg.mode == "sample":
        if rng is None:
            raise ConfigError("sample mode needs an rng")
        u = rng.uniform(1e-12, 1.0 - 1e-12, size=logits.shape)
        x = nx.add_const(logits, np.log(u) - np.log1p(-u))
    s = nx.sigmoid(nx.scale(x, 1.0 / cfg.tau))
    stretched = nx.add_scalar(nx.scale(s, cfg.zeta - cfg.gamma), cfg.gamma)
    return nx.clamp(stretched, 0.0, 1.0, straight_through=True)


def expected_open(logits: Tensor, cfg: HardConcreteConfig) -> Tensor:
    """P(gate > 0) under the hard-concrete relaxation."""
    shift = cfg.tau * np.log(-cfg.gamma / cfg.zeta)
    return nx.sigmoid(nx.add_scalar(logits, -shift))


def binarize(gates: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    gates = np.asarray(gates)
    adj = (gates >= threshold).astype(np.int8)
    return np.tril(adj, k=-1)


def topological_sort(adjacency: np.ndarray) -> list[int]:
    """Kahn's algorithm; adjacency[i, j] == 1 is an edge j -> i.

    Ties go to the smallest node index. Raises :class:`CycleError` with the
    nodes of one cycle when no order exists.
    """
    adj = np.asarray(adjacency) != 0
    T = adj.shape[0]
    if adj.shape != (T, T):
        raise nx.ShapeError(f"adjacency must be square, got {adj.shape}")
    indeg = adj.sum(axis=1).astype(int)
    ready = [i for i in range(T) if indeg[i] == 0]
    heapq.heapify(ready)
    order: list[int] = []
    while ready:
        u = heapq.heappop(ready)
        order.append(u)
        for v in np.flatnonzero(adj[:, u]):
            indeg[v] -= 1
            if indeg[v] == 0:
                heapq.heappush(ready, int(v))
    if len(order) < T:
        raise CycleError(_find_cycle(adj, set(range(T)) - set(order)))
    return order


def _find_cycle(adj: np.ndarray, remaining: set[int]) -> list[int]:
    # every remaining node keeps a parent inside the remaining set
    node = min(remaining)
    seen: dict[int, int] = {}
    path: list[int] = []
    while node not in seen:
        seen[node] = len(path)
        path.append(node)
        parents = [int(j) for j in np.flatnonzero(adj[node]) if int(j) in remaining]
        node = parents[0]
    return sorted(path[seen[node]:])


def causal_readout(H: Tensor, gates: Tensor, order: list[int], ro: ReadoutParams) -> Tensor:
    """Refine latents in topological order from already-refined parents.

    ``gates`` holds the effective parent weights (zero where no edge exists).
    """
    T, d = H.shape
    if sorted(order) != list(range(T)):
        raise OrderError(f"order {order} is not a permutation of 0..{T - 1}")
    pos = {node: k for k, node in enumerate(order)}
    support = gates.data != 0
    refined: dict[int, Tensor] = {}
    zero = Tensor(np.zeros((1, d)))
    for i in order:
        parents = [int(j) for j in np.flatnonzero(support[i])]
        late = [j for j in parents if pos[j] > pos[i]]
        if late:
            raise OrderError(f"node {i} has parents {late} placed after it in the order")
        h_i = nx.getitem(H, slice(i, i + 1))
        if parents:
            weights = nx.getitem(gates, (slice(i, i + 1), parents))
            c_i = nx.matmul(weights, nx.concat([refined[j] for j in parents], axis=0))
        else:
            c_i = zero
        hidden = nx.tanh(nx.add_bias(nx.matmul(nx.concat([h_i, c_i], axis=1), ro.w1), ro.b1))
        refined[i] = nx.add(h_i, nx.add_bias(nx.matmul(hidden, ro.w2), ro.b2))
    return nx.concat([refined[i] for i in range(T)], axis=0)


def build_graph(
    H: Tensor,
    scorer: EdgeScorerParams,
    cfg: HardConcreteConfig,
    rng: np.random.Generator | None = None,
    threshold: float = 0.5,
) -> CausalGraph:
    """Score, gate, binarize and order; the returned gate tensor is masked by the adjacency."""
    logits = score_edges(H, scorer)
    gates = hard_concrete(logits, cfg, rng)
    adjacency = binarize(gates.data, threshold)
    order = topological_sort(adjacency)
    effective = nx.mul(gates, Tensor(adjacency.astype(np.float64)))
    return CausalGraph(
        logits=logits.data.copy(),
        gates=gates.data.copy(),
        adjacency=adjacency,
        topo_order=order,
        gate_tensor=effective,
    )

