"""do()-style clamps on backbone latents and the paired-forward intervention loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .model import Encoded, ForwardResult, GoceParams, ModelConfig, ParamTensors, backbone, encode
from .numerics import Tensor

POLICIES = ("random-uniform", "targeted")


@dataclass
class InterventionSpec:
    indices: tuple[int, ...]
    values: np.ndarray  # [len(indices), d]
    tau_cf: float = 1.0
    lambda_delta: float = 0.0
    policy: str = "targeted"

    def validate(self, T: int) -> None:
        if self.policy not in POLICIES:
            raise ValueError(f"unknown selection policy {self.policy!r}")
        if not 0 < self.tau_cf <= 1:
            raise ValueError(f"tau_cf must be in (0, 1], got {self.tau_cf}")
        if self.lambda_delta < 0:
            raise ValueError("lambda_delta must be >= 0")
        bad = [i for i in self.indices if not 0 <= i < T]
        if bad:
            raise IndexError(f"clamp indices {bad} outside 0..{T - 1}")
        if len(set(self.indices)) != len(self.indices):
            raise ValueError("duplicate clamp indices")
        if self.values.shape[0] != len(self.indices):
            raise ValueError(f"{self.values.shape[0]} clamp vectors for {len(self.indices)} indices")

    @classmethod
    def null(cls, d: int) -> "InterventionSpec":
        return cls((), np.zeros((0, d)), 1.0, 0.0)


def clamp_count(T: int, rho: float) -> int:
    return max(1, int(np.floor(rho * T + 0.5)))


def select_clamp(
    T: int,
    d: int,
    rng: np.random.Generator,
    rho: float = 0.125,
    sigma: float = 1.0,
    tau_cf: float = 0.5,
    lambda_delta: float = 0.1,
) -> InterventionSpec:
    """Uniformly pick max(1, round(rho*T)) positions and Gaussian clamp values."""
    if T < 1:
        raise ValueError("T must be >= 1")
    n = min(T, clamp_count(T, rho))
    idx = np.sort(rng.choice(T, size=n, replace=False))
    values = rng.normal(0.0, sigma, size=(n, d))
    return InterventionSpec(tuple(int(i) for i in idx), values, tau_cf, lambda_delta, "random-uniform")


def targeted(indices, values, T: int, d: int, tau_cf: float = 0.5, lambda_delta: float = 0.1) -> InterventionSpec:
    spec = InterventionSpec(tuple(int(i) for i in indices), np.asarray(values, dtype=np.float64).reshape(-1, d), tau_cf, lambda_delta)
    spec.validate(T)
    return spec


def clamp_latents(H: Tensor, spec: InterventionSpec) -> Tensor:
    if not spec.indices:
        return H
    return nx.overwrite_rows(H, spec.indices, spec.values)


def run_intervention(enc: Encoded, tp: ParamTensors, cfg: ModelConfig, spec: InterventionSpec) -> ForwardResult:
    """Interventional pass sharing the graph and gate samples of ``enc``."""
    spec.validate(enc.latents.shape[0])
    return backbone(enc, tp, cfg, temperature=spec.tau_cf, latents=clamp_latents(enc.latents, spec))


def intervened_forward(
    tokens,
    params: GoceParams | ParamTensors,
    cfg: ModelConfig,
    spec: InterventionSpec,
    rng: np.random.Generator | None = None,
    hc_mode: str = "deterministic",
    mask_mode: str | None = None,
) -> ForwardResult:
    tp = params.tensors() if isinstance(params, GoceParams) else params
    enc = encode(tokens, tp, cfg, rng, hc_mode, mask_mode)
    return run_intervention(enc, tp, cfg, spec)


def expected_label(probs: Tensor) -> Tensor:
    """E[y] = sum_c c * p(c) per row, as a [rows, 1] tensor."""
    classes = Tensor(np.arange(probs.shape[1], dtype=np.float64).reshape(-1, 1))
    return nx.matmul(probs, classes)


def intervention_loss(p_obs: Tensor, p_do: Tensor, lambda_delta: float) -> Tensor:
    """Row-mean of KL(p_obs || p_do) + lambda_delta * |E[y]_obs - E[y]_do|."""
    if p_obs.shape != p_do.shape:
        raise nx.ShapeError(f"label vocabularies differ: {p_obs.shape} vs {p_do.shape}")
    kl = nx.kl_divergence_rows(p_obs, p_do)
    if lambda_delta == 0:
        return kl
    gap = nx.mean(nx.absolute(nx.sub(expected_label(p_obs), expected_label(p_do))))
    return nx.add(kl, nx.scale(gap, lambda_delta))


def estimate_intervention_loss(
    examples,
    params: GoceParams,
    cfg: ModelConfig,
    rng: np.random.Generator,
    n_draws: int = 1,
    mask_mode: str | None = None,
) -> tuple[float, float, np.ndarray]:
    """Monte-Carlo estimate over clamp draws; returns (mean, standard error, per-draw losses)."""
    tp = params.tensors()
    losses = []
    with nx.no_grad():
        for ex in examples:
            tokens = ex.tokens if hasattr(ex, "tokens") else ex
            enc = encode(tokens, tp, cfg, None, "deterministic", mask_mode)
            base = backbone(enc, tp, cfg)
            T = enc.latents.shape[0]
            for _ in range(n_draws):
                spec = select_clamp(T, cfg.d, rng, cfg.clamp_rho, cfg.clamp_sigma, cfg.tau_cf, cfg.lambda_delta)
                do = run_intervention(enc, tp, cfg, spec)
                losses.append(intervention_loss(base.probs, do.probs, cfg.lambda_delta).item())
    arr = np.asarray(losses)
    if arr.size == 0:
        return 0.0, 0.0, arr
    se = float(arr.std(ddof=1) / np.sqrt(arr.size)) if arr.size > 1 else 0.0
    return float(arr.mean()), se, arr
