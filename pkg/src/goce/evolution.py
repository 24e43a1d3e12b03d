"""Derivative-free refinement: Gaussian mutation, Metropolis acceptance, reset-or-cool annealing.

The working point follows the usual simulated-annealing rule (accepted
candidates replace it even when worse). The archive separately tracks the
running-minimum accepted checkpoint so the best parameters seen never degrade.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .attention import mean_open_probability
from .intervention import intervention_loss, run_intervention, select_clamp
from .model import GoceParams, ModelConfig, backbone, encode, stream


@dataclass(frozen=True)
class GateConfig:
    alpha: float = 1.0
    beta: float = 0.1
    T0: float = 1.0
    eps0: float = 0.01
    gamma: float = 0.95
    gamma_eps: float = 0.95
    eval_size: int = 256
    interleave_every: int = 0
    interleave_rounds: int = 0

    def validate(self) -> None:
        if not self.T0 > 0 or not self.eps0 > 0:
            raise ValueError("T0 and eps0 must be > 0")
        if not (0 < self.gamma < 1 and 0 < self.gamma_eps < 1):
            raise ValueError("decay factors must lie in (0, 1)")
        if self.eval_size < 1:
            raise ValueError("eval_size must be >= 1")


@dataclass
class ArchiveEntry:
    round: int
    F: float
    accepted: bool
    T: float
    eps: float
    theta: np.ndarray | None = None
    checkpoint: str | None = None

    def to_json(self) -> dict:
        return {"round": self.round, "F": self.F, "accepted": self.accepted, "T": self.T, "eps": self.eps, "checkpoint": self.checkpoint}


@dataclass
class CheckpointArchive:
    entries: list[ArchiveEntry] = field(default_factory=list)

    def append(self, entry: ArchiveEntry) -> None:
        if self.entries and entry.round <= self.entries[-1].round:
            raise ValueError("archive rounds must increase")
        self.entries.append(entry)

    def __len__(self) -> int:
        return len(self.entries)

    def accepted(self) -> list[ArchiveEntry]:
        return [e for e in self.entries if e.accepted]

    def running_min(self) -> list[float]:
        """Running minimum of F over accepted entries, one value per accepted entry."""
        out, best = [], math.inf
        for e in self.accepted():
            best = min(best, e.F)
            out.append(best)
        return out

    def best(self) -> ArchiveEntry | None:
        acc = self.accepted()
        return min(acc, key=lambda e: e.F) if acc else None

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e.to_json()) + "\n" for e in self.entries)


@dataclass
class EvolutionState:
    theta_best: np.ndarray
    F_best: float
    T: float
    eps: float
    round: int
    rng: np.random.Generator
    min_theta: np.ndarray
    min_F: float


def fitness_value(reward: float, cf_loss: float, sparsity: float, cfg: GateConfig) -> float:
    return -reward + cfg.alpha * cf_loss + cfg.beta * sparsity


def mutate(theta: np.ndarray, eps: float, rng: np.random.Generator) -> np.ndarray:
    if not eps > 0:
        raise ValueError("mutation scale must be > 0")
    return theta + eps * rng.standard_normal(theta.shape)


def accept(delta_f: float, T: float, rng: np.random.Generator) -> bool:
    """Metropolis rule. One uniform is drawn every call so replay stays aligned."""
    u = rng.random()
    if delta_f < 0:
        return True
    return bool(u < math.exp(-delta_f / T))


def anneal_step(
    state: EvolutionState,
    accepted: bool,
    cfg: GateConfig,
    theta_new: np.ndarray,
    F_new: float,
    archive: CheckpointArchive | None = None,
) -> EvolutionState:
    """Move to the candidate and reset (T, eps) on accept; keep the point and cool on reject."""
    rnd = state.round + 1
    if accepted:
        theta, F, T, eps = theta_new, F_new, cfg.T0, cfg.eps0
    else:
        theta, F, T, eps = state.theta_best, state.F_best, cfg.gamma * state.T, cfg.gamma_eps * state.eps
    min_theta, min_F = state.min_theta, state.min_F
    if accepted and F_new < min_F:
        min_theta, min_F = theta_new, F_new
    if archive is not None:
        archive.append(ArchiveEntry(rnd, F_new, accepted, T, eps, theta_new.copy() if accepted else None))
    return EvolutionState(theta, F, T, eps, rnd, state.rng, min_theta, min_F)


def initial_state(theta0: np.ndarray, F0: float, cfg: GateConfig, rng: np.random.Generator) -> EvolutionState:
    theta0 = np.array(theta0, dtype=np.float64)
    return EvolutionState(theta0, F0, cfg.T0, cfg.eps0, 0, rng, theta0, F0)


def evolve(
    theta0: np.ndarray,
    fitness: Callable[[np.ndarray], float],
    cfg: GateConfig,
    rounds: int,
    rng: np.random.Generator,
    on_round: Callable[[EvolutionState, ArchiveEntry], None] | None = None,
) -> tuple[EvolutionState, CheckpointArchive]:
    cfg.validate()
    state = initial_state(theta0, fitness(np.asarray(theta0, dtype=np.float64)), cfg, rng)
    archive = CheckpointArchive()
    for _ in range(rounds):
        cand = mutate(state.theta_best, state.eps, rng)
        F_new = fitness(cand)
        ok = accept(F_new - state.F_best, state.T, rng)
        state = anneal_step(state, ok, cfg, cand, F_new, archive)
        if on_round is not None:
            on_round(state, archive.entries[-1])
    return state, archive


class ModelFitness:
    """F(theta) for a model on a frozen evaluation batch.

    Gates are deterministic and clamps come from a fixed seed, so the value is
    a pure function of theta.
    """

    def __init__(self, template: GoceParams, cfg: ModelConfig, examples: Sequence, gate: GateConfig, seed: int):
        self.template = template
        self.cfg = cfg
        self.examples = list(examples)
        self.gate = gate
        self.seed = seed

    def terms(self, theta: np.ndarray) -> dict[str, float]:
        params = self.template.unflatten(theta)
        tp = params.tensors()
        cfg = self.cfg
        rng = stream(self.seed, "intervention")
        hits, losses = 0, []
        with nx.no_grad():
            for ex in self.examples:
                enc = encode(ex.tokens, tp, cfg, None, "deterministic")
                base = backbone(enc, tp, cfg)
                hits += int(np.argmax(base.probs.data[0]) == ex.label)
                spec = select_clamp(enc.latents.shape[0], cfg.d, rng, cfg.clamp_rho, cfg.clamp_sigma, cfg.tau_cf, cfg.lambda_delta)
                do = run_intervention(enc, tp, cfg, spec)
                losses.append(intervention_loss(base.probs, do.probs, cfg.lambda_delta).item())
            attn = [tp.attention(l, cfg.n_heads) for l in range(cfg.n_layers)]
            sparsity = mean_open_probability(attn, cfg.hard_concrete())
        reward = hits / len(self.examples)
        cf = float(np.mean(losses))
        return {"reward": reward, "cf_loss": cf, "sparsity": sparsity, "F": fitness_value(reward, cf, sparsity, self.gate)}

    def __call__(self, theta: np.ndarray) -> float:
        return self.terms(theta)["F"]
