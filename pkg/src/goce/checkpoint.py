"""JSON checkpoints with exact float round-trip."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import GoceParams, ModelConfig, param_shapes
from .training import AdamState

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: GoceParams
    opt_state: AdamState
    rng: dict


def _pack(arrays: dict[str, np.ndarray]) -> dict:
    return {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in arrays.items()}


def _unpack(obj: dict) -> dict[str, np.ndarray]:
    return {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in obj.items()}


def to_dict(cfg: ModelConfig, params: GoceParams, opt_state: AdamState | None = None, rng: dict | None = None) -> dict:
    opt_state = opt_state or AdamState()
    return {
        "format_version": FORMAT_VERSION,
        "config": cfg.to_dict(),
        "params": _pack(params.arrays),
        "optimizer": {"t": opt_state.t, "m": _pack(opt_state.m), "v": _pack(opt_state.v)},
        "rng": rng if rng is not None else {"seed": cfg.seed, "step": opt_state.t},
    }


def dumps(cfg: ModelConfig, params: GoceParams, opt_state: AdamState | None = None, rng: dict | None = None) -> str:
    return json.dumps(to_dict(cfg, params, opt_state, rng), separators=(",", ":")) + "\n"


def save(path: str | Path, cfg: ModelConfig, params: GoceParams, opt_state: AdamState | None = None, rng: dict | None = None) -> None:
    Path(path).write_text(dumps(cfg, params, opt_state, rng))


def check_shapes(cfg: ModelConfig, params: GoceParams) -> None:
    expected = param_shapes(cfg)
    diffs = []
    for name in sorted(set(expected) | set(params.arrays)):
        want = expected.get(name)
        got = params.arrays[name].shape if name in params.arrays else None
        if want != got:
            diffs.append(f"{name}: config {want} vs checkpoint {got}")
    if diffs:
        raise CheckpointError("checkpoint does not match config:\n  " + "\n  ".join(diffs))


def from_dict(obj: dict) -> Checkpoint:
    if obj.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {obj.get('format_version')!r}")
    try:
        cfg = ModelConfig.from_dict(obj["config"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"bad config block: {exc}") from None
    expected = list(param_shapes(cfg))
    arrays = _unpack(obj["params"])
    params = GoceParams({k: arrays[k] for k in expected if k in arrays} | {k: v for k, v in arrays.items() if k not in expected})
    check_shapes(cfg, params)
    opt = obj.get("optimizer", {"t": 0, "m": {}, "v": {}})
    state = AdamState(int(opt["t"]), _unpack(opt["m"]), _unpack(opt["v"]))
    return Checkpoint(cfg, params, state, obj.get("rng", {}))


def load(path: str | Path) -> Checkpoint:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    return from_dict(obj)
