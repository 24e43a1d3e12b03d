"""Embeddings, causal graph, stacked attention + expert blocks, classifier head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import numerics as nx
from .attention import AttentionParams, attend, attention_scores, build_head_mask, gate_values, kl_from_scores
from .graph_builder import (
    CausalGraph,
    EdgeScorerParams,
    HardConcreteConfig,
    ReadoutParams,
    build_graph,
    causal_readout,
    topological_sort,
)
from .moe import ExpertHook, ExpertParams, RouterParams, RoutingDecision, moe_layer
from .numerics import Tensor

MASK_MODES = ("goce-graph", "chain-predecessor", "causal-full")

STREAMS = {"data": 0, "init": 1, "hard_concrete": 2, "intervention": 3, "evolution": 4, "shuffle": 5}


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one subsystem derived from the root seed."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(STREAMS[name],)))


class InputError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int = 64
    n_classes: int = 4
    d: int = 32
    n_layers: int = 2
    n_heads: int = 4
    d_k: int = 8
    n_experts: int = 4
    k: int = 1
    d_ff: int = 64
    d_edge: int = 32
    d_readout: int = 32
    max_T: int = 32
    mask_mode: str = "goce-graph"
    hc_tau: float = 2.0 / 3.0
    hc_gamma: float = -0.1
    hc_zeta: float = 1.1
    edge_threshold: float = 0.5
    edge_bias_init: float = 1.0
    gate_logit_init: float = 3.0
    lambda_l0: float = 1e-3
    lambda_kl: float = 0.1
    lambda_int: float = 0.1
    tau_cf: float = 0.5
    lambda_delta: float = 0.1
    clamp_rho: float = 0.125
    clamp_sigma: float = 1.0
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    seed: int = 0

    def validate(self) -> None:
        for name in ("vocab_size", "n_classes", "d", "n_layers", "n_heads", "d_k", "n_experts", "k", "d_ff", "d_edge", "d_readout", "max_T", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.k > self.n_experts:
            raise ValueError(f"k={self.k} exceeds n_experts={self.n_experts}")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"mask_mode must be one of {MASK_MODES}, got {self.mask_mode!r}")
        if not 0 < self.tau_cf <= 1:
            raise ValueError("tau_cf must be in (0, 1]")
        for name in ("lambda_l0", "lambda_kl", "lambda_int", "lambda_delta", "lr"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        self.hard_concrete().validate()

    def hard_concrete(self, mode: str = "sample") -> HardConcreteConfig:
        return HardConcreteConfig(self.hc_tau, self.hc_gamma, self.hc_zeta, mode)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise KeyError(f"unknown model config keys: {unknown}")
        return cls(**obj)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.d
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (cfg.vocab_size, d),
        "pos_emb": (cfg.max_T, d),
        "scorer.w1": (2 * d, cfg.d_edge),
        "scorer.b1": (cfg.d_edge,),
        "scorer.w2": (cfg.d_edge, 1),
        "scorer.b2": (1,),
        "readout.w1": (2 * d, cfg.d_readout),
        "readout.b1": (cfg.d_readout,),
        "readout.w2": (cfg.d_readout, d),
        "readout.b2": (d,),
    }
    width = cfg.n_heads * cfg.d_k
    for l in range(cfg.n_layers):
        p = f"layers.{l}"
        shapes[f"{p}.attn.wq"] = (d, width)
        shapes[f"{p}.attn.wk"] = (d, cfg.d_k)
        shapes[f"{p}.attn.wv"] = (d, cfg.d_k)
        shapes[f"{p}.attn.wo"] = (width, d)
        shapes[f"{p}.attn.gate_q"] = (d,)
        shapes[f"{p}.attn.gate_k"] = (d,)
        shapes[f"{p}.router.w"] = (d, cfg.n_experts)
        shapes[f"{p}.router.b"] = (cfg.n_experts,)
        for e in range(cfg.n_experts):
            shapes[f"{p}.experts.{e}.w1"] = (d, cfg.d_ff)
            shapes[f"{p}.experts.{e}.b1"] = (cfg.d_ff,)
            shapes[f"{p}.experts.{e}.w2"] = (cfg.d_ff, d)
            shapes[f"{p}.experts.{e}.b2"] = (d,)
    shapes["head.w"] = (d, cfg.n_classes)
    shapes["head.b"] = (cfg.n_classes,)
    return shapes


@dataclass
class GoceParams:
    """Named parameter arrays with a fixed order for flattening."""

    arrays: dict[str, np.ndarray]

    def names(self) -> list[str]:
        return list(self.arrays)

    def copy(self) -> "GoceParams":
        return GoceParams({k: v.copy() for k, v in self.arrays.items()})

    def size(self) -> int:
        return sum(v.size for v in self.arrays.values())

    def flatten(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.arrays.values()])

    def unflatten(self, flat: np.ndarray) -> "GoceParams":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.size():
            raise ValueError(f"flat vector has {flat.size} entries, expected {self.size()}")
        out, pos = {}, 0
        for name, arr in self.arrays.items():
            out[name] = flat[pos : pos + arr.size].reshape(arr.shape).copy()
            pos += arr.size
        return GoceParams(out)

    def tensors(self, requires_grad: bool = False) -> "ParamTensors":
        return ParamTensors({k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in self.arrays.items()})


def init_params(cfg: ModelConfig, rng: np.random.Generator | None = None) -> GoceParams:
    rng = rng if rng is not None else stream(cfg.seed, "init")
    arrays = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name in ("tok_emb", "pos_emb"):
            arr = rng.normal(0.0, 1.0, size=shape)
        elif leaf in ("gate_q", "gate_k"):
            arr = np.full(shape, cfg.gate_logit_init)
        elif name == "scorer.b2":
            arr = np.full(shape, cfg.edge_bias_init)
        elif len(shape) == 1:
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
        arrays[name] = arr
    return GoceParams(arrays)


@dataclass
class ParamTensors:
    t: dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.t[name]

    def scorer(self) -> EdgeScorerParams:
        t = self.t
        return EdgeScorerParams(t["scorer.w1"], t["scorer.b1"], t["scorer.w2"], t["scorer.b2"])

    def readout(self) -> ReadoutParams:
        t = self.t
        return ReadoutParams(t["readout.w1"], t["readout.b1"], t["readout.w2"], t["readout.b2"])

    def attention(self, layer: int, n_heads: int) -> AttentionParams:
        p = f"layers.{layer}.attn"
        t = self.t
        return AttentionParams(t[f"{p}.wq"], t[f"{p}.wk"], t[f"{p}.wv"], t[f"{p}.wo"], t[f"{p}.gate_q"], t[f"{p}.gate_k"], n_heads)

    def router(self, layer: int) -> RouterParams:
        return RouterParams(self.t[f"layers.{layer}.router.w"], self.t[f"layers.{layer}.router.b"])

    def experts(self, layer: int, n_experts: int) -> ExpertParams:
        p = f"layers.{layer}.experts"
        t = self.t
        return ExpertParams(
            [t[f"{p}.{e}.w1"] for e in range(n_experts)],
            [t[f"{p}.{e}.b1"] for e in range(n_experts)],
            [t[f"{p}.{e}.w2"] for e in range(n_experts)],
            [t[f"{p}.{e}.b2"] for e in range(n_experts)],
        )


def build_baseline_mask(mode: str, T: int) -> np.ndarray:
    """Adjacency for the fixed baselines; adjacency[i, j] == 1 means j -> i."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if mode == "chain-predecessor":
        return np.eye(T, k=-1, dtype=np.int8)
    if mode == "causal-full":
        return np.tril(np.ones((T, T), dtype=np.int8), k=-1)
    raise ValueError(f"unknown baseline mask mode {mode!r}")


@dataclass
class Encoded:
    """Latents entering layer 1 plus everything shared by paired forward passes."""

    latents: Tensor
    graph: CausalGraph
    attn_gates: list[tuple[Tensor, Tensor]]


@dataclass
class Diagnostics:
    graph: CausalGraph
    routes: list[RoutingDecision] = field(default_factory=list)
    attention: list[list[np.ndarray]] = field(default_factory=list)
    kl_terms: list[Tensor] = field(default_factory=list)

    def edge_count(self) -> int:
        return int(self.graph.adjacency.sum())


@dataclass
class ForwardResult:
    logits: Tensor  # [1, n_classes]
    probs: Tensor  # [1, n_classes]
    diagnostics: Diagnostics
    hidden: Tensor | None = None  # [T, d] token states before pooling


def check_tokens(tokens, cfg: ModelConfig) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if ids.size == 0:
        raise InputError("empty token sequence")
    if ids.size > cfg.max_T:
        raise InputError(f"sequence length {ids.size} exceeds max_T={cfg.max_T}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise InputError(f"token id out of range [0, {cfg.vocab_size})")
    return ids


def encode(
    tokens,
    tp: ParamTensors,
    cfg: ModelConfig,
    rng: np.random.Generator | None = None,
    hc_mode: str = "deterministic",
    mask_mode: str | None = None,
) -> Encoded:
    ids = check_tokens(tokens, cfg)
    T = ids.size
    mode = mask_mode or cfg.mask_mode
    H = nx.add(nx.getitem(tp["tok_emb"], ids), nx.getitem(tp["pos_emb"], np.arange(T)))
    hc = cfg.hard_concrete(hc_mode)
    if mode == "goce-graph":
        graph = build_graph(H, tp.scorer(), hc, rng, cfg.edge_threshold)
        latents = causal_readout(H, graph.gate_tensor, graph.topo_order, tp.readout())
    else:
        adj = build_baseline_mask(mode, T)
        graph = CausalGraph(
            logits=np.full((T, T), np.nan),
            gates=adj.astype(np.float64),
            adjacency=adj,
            topo_order=topological_sort(adj),
        )
        latents = H
    attn_gates = [gate_values(tp.attention(l, cfg.n_heads), hc, rng) for l in range(cfg.n_layers)]
    return Encoded(latents, graph, attn_gates)


def backbone(
    enc: Encoded,
    tp: ParamTensors,
    cfg: ModelConfig,
    temperature: float = 1.0,
    latents: Tensor | None = None,
    with_kl: bool = False,
    hook: ExpertHook | None = None,
) -> ForwardResult:
    """Attention + expert layers, mean-pool, head. ``latents`` overrides the encoded ones."""
    H = enc.latents if latents is None else latents
    graph = enc.graph
    mask = build_head_mask(graph.adjacency, cfg.n_heads)
    diag = Diagnostics(graph=graph)
    for l in range(cfg.n_layers):
        ap = tp.attention(l, cfg.n_heads)
        scores, v = attention_scores(H, ap, mask, enc.attn_gates[l])
        Z, probs = attend(scores, v, ap.wo, temperature)
        if with_kl:
            diag.kl_terms.append(kl_from_scores(scores, cfg.tau_cf))
        diag.attention.append([a.data for a in probs])
        H = nx.add(H, Z)
        H, routes = moe_layer(H, graph.adjacency, graph.topo_order, tp.router(l), tp.experts(l, cfg.n_experts), cfg.k, hook)
        diag.routes.append(routes)
    pooled = nx.reshape(nx.mean(H, axis=0), (1, cfg.d))
    logits = nx.add_bias(nx.matmul(pooled, tp["head.w"]), tp["head.b"])
    return ForwardResult(logits, nx.softmax_rows(logits), diag, H)


def forward(
    tokens,
    params: GoceParams | ParamTensors,
    cfg: ModelConfig,
    rng: np.random.Generator | None = None,
    hc_mode: str = "deterministic",
    mask_mode: str | None = None,
    with_kl: bool = False,
    hook: ExpertHook | None = None,
) -> ForwardResult:
    tp = params.tensors() if isinstance(params, GoceParams) else params
    enc = encode(tokens, tp, cfg, rng, hc_mode, mask_mode)
    return backbone(enc, tp, cfg, with_kl=with_kl, hook=hook)


def predict_proba(examples, params: GoceParams, cfg: ModelConfig, mask_mode: str | None = None) -> np.ndarray:
    """Deterministic-gate class probabilities, one row per example."""
    tp = params.tensors()
    rows = []
    with nx.no_grad():
        for ex in examples:
            tokens = ex.tokens if hasattr(ex, "tokens") else ex
            rows.append(forward(tokens, tp, cfg, mask_mode=mask_mode).probs.data[0])
    return np.asarray(rows).reshape(len(rows), cfg.n_classes)
