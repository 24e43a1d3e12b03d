"""Composite objective and the seeded Adam training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .attention import l0_penalty
from .intervention import intervention_loss, run_intervention, select_clamp
from .model import STREAMS, GoceParams, ModelConfig, ParamTensors, backbone, encode, init_params
from .numerics import Tensor
from .tasks import SyntheticExample

log = logging.getLogger(__name__)

TERMS = ("ce", "l0", "kl", "intervention")


class NumericAbort(RuntimeError):
    def __init__(self, step: int, params: GoceParams, opt_state: "AdamState"):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.params = params
        self.opt_state = opt_state


def step_rng(seed: int, name: str, step: int) -> np.random.Generator:
    """Generator for one subsystem at one optimizer step; resuming needs only (seed, step)."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(STREAMS[name], step)))


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    logp = nx.log_softmax_rows(logits)
    picked = nx.getitem(logp, (np.arange(len(labels)), labels))
    return nx.scale(nx.mean(picked), -1.0)


@dataclass
class LossBreakdown:
    total: Tensor
    terms: dict[str, float]
    weights: dict[str, float]
    edge_count: float
    expert_hist: list[int]

    def weighted_sum(self) -> float:
        return sum(self.weights[k] * self.terms[k] for k in TERMS)


def composite_loss(
    batch: Sequence[SyntheticExample],
    tp: ParamTensors,
    cfg: ModelConfig,
    hc_rng: np.random.Generator | None = None,
    int_rng: np.random.Generator | None = None,
    hc_mode: str = "sample",
    all_terms: bool = False,
) -> LossBreakdown:
    """CE + lambda_L0 * L0 + lambda_KL * KL consistency + lambda_int * intervention loss.

    Terms whose weight is zero are skipped (reported as 0) unless ``all_terms``.
    """
    if not batch:
        raise ValueError("empty batch")
    want_kl = all_terms or cfg.lambda_kl > 0
    want_int = all_terms or cfg.lambda_int > 0
    if want_int and int_rng is None:
        raise ValueError("intervention term needs an rng")
    logits, kls, obs, dos = [], [], [], []
    edges = 0
    hist = np.zeros(cfg.n_experts, dtype=int)
    for ex in batch:
        enc = encode(ex.tokens, tp, cfg, hc_rng, hc_mode)
        res = backbone(enc, tp, cfg, with_kl=want_kl)
        logits.append(res.logits)
        kls.extend(res.diagnostics.kl_terms)
        edges += res.diagnostics.edge_count()
        for routes in res.diagnostics.routes:
            hist += routes.histogram(cfg.n_experts)
        if want_int:
            T = enc.latents.shape[0]
            spec = select_clamp(T, cfg.d, int_rng, cfg.clamp_rho, cfg.clamp_sigma, cfg.tau_cf, cfg.lambda_delta)
            obs.append(res.probs)
            dos.append(run_intervention(enc, tp, cfg, spec).probs)

    terms: dict[str, Tensor | None] = dict.fromkeys(TERMS)
    terms["ce"] = cross_entropy(nx.concat(logits, axis=0), [ex.label for ex in batch])
    hc = cfg.hard_concrete()
    l0 = l0_penalty(tp.attention(0, cfg.n_heads), 1.0, hc)
    for l in range(1, cfg.n_layers):
        l0 = nx.add(l0, l0_penalty(tp.attention(l, cfg.n_heads), 1.0, hc))
    terms["l0"] = l0
    if kls:
        acc = kls[0]
        for t in kls[1:]:
            acc = nx.add(acc, t)
        terms["kl"] = nx.scale(acc, 1.0 / len(kls))
    if obs:
        terms["intervention"] = intervention_loss(nx.concat(obs, axis=0), nx.concat(dos, axis=0), cfg.lambda_delta)

    weights = {"ce": 1.0, "l0": cfg.lambda_l0, "kl": cfg.lambda_kl, "intervention": cfg.lambda_int}
    total = terms["ce"]
    for name in TERMS[1:]:
        if terms[name] is not None and weights[name] != 0:
            total = nx.add(total, nx.scale(terms[name], weights[name]))
    values = {k: (0.0 if v is None else v.item()) for k, v in terms.items()}
    return LossBreakdown(total, values, weights, edges / len(batch), hist.tolist())


@dataclass
class AdamState:
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "AdamState":
        return AdamState(self.t, {k: a.copy() for k, a in self.m.items()}, {k: a.copy() for k, a in self.v.items()})


def adam_update(params: GoceParams, grads: dict[str, np.ndarray], state: AdamState, cfg: ModelConfig) -> None:
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, arr in params.arrays.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(arr)
            state.v[name] = np.zeros_like(arr)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        arr -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


@dataclass
class TrainResult:
    params: GoceParams
    opt_state: AdamState
    log: list[dict]


def train(
    dataset: Sequence[SyntheticExample],
    cfg: ModelConfig,
    steps: int,
    params: GoceParams | None = None,
    opt_state: AdamState | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Run ``steps`` Adam steps on the composite loss, continuing from ``opt_state.t``."""
    if not dataset:
        raise ValueError("dataset is empty")
    cfg.validate()
    params = params.copy() if params is not None else init_params(cfg)
    state = opt_state.copy() if opt_state is not None else AdamState()
    records = []
    n = len(dataset)
    for _ in range(steps):
        step = state.t
        pick = step_rng(cfg.seed, "shuffle", step).choice(n, size=min(cfg.batch_size, n), replace=False)
        batch = [dataset[i] for i in pick]
        last_good = (params.copy(), state.copy())
        tp = params.tensors(requires_grad=True)
        out = composite_loss(batch, tp, cfg, step_rng(cfg.seed, "hard_concrete", step), step_rng(cfg.seed, "intervention", step))
        if not np.isfinite(out.total.item()):
            raise NumericAbort(step, *last_good)
        grads = nx.backward(out.total, tp.t)
        adam_update(params, grads, state, cfg)
        rec = {
            "step": step + 1,
            "loss": out.total.item(),
            **out.terms,
            "edge_count": out.edge_count,
            "expert_hist": out.expert_hist,
        }
        records.append(rec)
        log.debug("step %d loss %.5f ce %.5f", rec["step"], rec["loss"], rec["ce"])
        if on_step is not None:
            on_step(rec)
    return TrainResult(params, state, records)
