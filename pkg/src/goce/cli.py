"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric abort.
Set GOCE_LOG to error, info or debug for progress on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import config as config_mod
from . import numerics as nx
from .evolution import ModelFitness, evolve
from .graph_builder import CycleError
from .intervention import intervention_loss, run_intervention, targeted
from .metrics import CountError, metrics
from .model import MASK_MODES, InputError, ModelConfig, backbone, encode, init_params, predict_proba, stream
from .tasks import DataError, SyntheticExample, generate, label_histogram, read_jsonl, write_jsonl
from .training import NumericAbort, train

log = logging.getLogger("goce")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


def _load_data(path: str, cfg: ModelConfig | None = None) -> list[SyntheticExample]:
    try:
        data = read_jsonl(path)
    except FileNotFoundError:
        raise CliError(f"data file {path} not found", EXIT_DATA) from None
    if cfg is not None:
        for n, ex in enumerate(data, start=1):
            if max(ex.tokens) >= cfg.vocab_size or min(ex.tokens) < 0:
                raise CliError(f"{path}: example {n}: token id outside vocab_size={cfg.vocab_size}", EXIT_DATA)
            if not 0 <= ex.label < cfg.n_classes:
                raise CliError(f"{path}: example {n}: label {ex.label} outside n_classes={cfg.n_classes}", EXIT_DATA)
            if len(ex.tokens) > cfg.max_T:
                raise CliError(f"{path}: example {n}: length {len(ex.tokens)} exceeds max_T={cfg.max_T}", EXIT_DATA)
    return data


def _load_ckpt(path: str) -> ckpt.Checkpoint:
    try:
        return ckpt.load(path)
    except FileNotFoundError:
        raise CliError(f"checkpoint {path} not found", EXIT_CONFIG) from None
    except (ckpt.CheckpointError, KeyError) as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None


def _write(path: str | Path, text: str) -> None:
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc.strerror}", EXIT_DATA) from None


# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> None:
    examples = generate(args.count, args.hops, args.group_order, args.seed, args.n_entities)
    try:
        write_jsonl(examples, args.out)
    except OSError as exc:
        raise CliError(f"cannot write {args.out}: {exc.strerror}", EXIT_DATA) from None
    _emit({"count": len(examples), "label_histogram": label_histogram(examples, args.group_order), "out": args.out})


def cmd_train(args) -> None:
    run = config_mod.load(args.config, args.set, args.seed)
    cfg = run.model
    params, state = None, None
    if args.resume:
        resumed = _load_ckpt(args.resume)
        cfg, params, state = resumed.config, resumed.params, resumed.opt_state
    data = _load_data(args.data, cfg)
    if not data:
        raise CliError(f"{args.data}: no examples", EXIT_DATA)
    log_path = args.log_out or f"{args.ckpt_out}.log.jsonl"
    lines: list[str] = []
    if params is None:
        params = init_params(cfg)

    def on_step(rec):
        lines.append(json.dumps(rec, sort_keys=True) + "\n")
        log.info("step %d loss %.5f", rec["step"], rec["loss"])

    gate = run.gate
    remaining = args.steps
    try:
        while True:
            chunk = remaining
            if gate.interleave_every > 0:
                chunk = min(remaining, gate.interleave_every)
            result = train(data, cfg, chunk, params, state, on_step)
            params, state = result.params, result.opt_state
            remaining -= chunk
            if remaining <= 0:
                break
            if gate.interleave_rounds > 0:
                fit = ModelFitness(params, cfg, data[: gate.eval_size], gate, run.seed)
                evo, _ = evolve(params.flatten(), fit, gate, gate.interleave_rounds, stream(run.seed + state.t, "evolution"))
                params = params.unflatten(evo.min_theta)
    except NumericAbort as exc:
        _write(args.ckpt_out, ckpt.dumps(cfg, exc.params, exc.opt_state))
        _write(log_path, "".join(lines))
        raise CliError(f"{exc}; last good checkpoint written to {args.ckpt_out}", EXIT_NUMERIC) from None
    _write(args.ckpt_out, ckpt.dumps(cfg, params, state))
    _write(log_path, "".join(lines))
    summary = {"checkpoint": args.ckpt_out, "log": log_path, "steps": args.steps, "total_steps": state.t if state else 0}
    if lines:
        last = json.loads(lines[-1])
        summary["final_loss"] = last["loss"]
        summary["final_ce"] = last["ce"]
    _emit(summary)


def _report(cfg: ModelConfig, params, data, mask_mode: str) -> dict:
    probs = predict_proba(data, params, cfg, mask_mode=mask_mode)
    return metrics(probs, [ex.label for ex in data]).to_json()


def cmd_eval(args) -> None:
    c = _load_ckpt(args.ckpt)
    data = _load_data(args.data, c.config)
    try:
        if args.mask_mode == "all":
            reports = {mode: _report(c.config, c.params, data, mode) for mode in MASK_MODES}
            ordering = {}
            for key, higher in (("accuracy_at_1", True), ("macro_f1", True), ("brier", False), ("ece", False), ("nll", False)):
                ordering[key] = sorted(MASK_MODES, key=lambda m: (-reports[m][key] if higher else reports[m][key], MASK_MODES.index(m)))
            _emit({"reports": reports, "ordering": ordering})
        else:
            mode = args.mask_mode or c.config.mask_mode
            _emit({"mask_mode": mode, **_report(c.config, c.params, data, mode)})
    except CountError as exc:
        raise CliError(f"{args.data}: {exc}", EXIT_DATA) from None


def cmd_evolve(args) -> None:
    c = _load_ckpt(args.ckpt)
    run = config_mod.load(args.config, args.set, args.seed)
    gate = run.gate
    data = _load_data(args.data, c.config)
    if not data:
        raise CliError(f"{args.data}: no examples", EXIT_DATA)
    fit = ModelFitness(c.params, c.config, data[: gate.eval_size], gate, run.seed)
    archive_path = Path(args.archive_out)
    snap_dir = Path(f"{archive_path}.ckpt")
    lines: list[str] = []

    def on_round(state, entry):
        if entry.accepted:
            snap_dir.mkdir(parents=True, exist_ok=True)
            path = snap_dir / f"round_{entry.round:05d}.json"
            _write(path, ckpt.dumps(c.config, c.params.unflatten(entry.theta)))
            entry.checkpoint = str(path)
        lines.append(json.dumps(entry.to_json(), sort_keys=True) + "\n")
        log.info("round %d F %.5f accepted %s T %.4g eps %.4g", entry.round, entry.F, entry.accepted, entry.T, entry.eps)

    theta0 = c.params.flatten()
    state, archive = evolve(theta0, fit, gate, args.rounds, stream(run.seed, "evolution"), on_round)
    _write(archive_path, "".join(lines))
    best = c.params.unflatten(state.min_theta)
    _write(args.ckpt_out, ckpt.dumps(c.config, best, c.opt_state, c.rng))
    _emit(
        {
            "rounds": args.rounds,
            "accepted": len(archive.accepted()),
            "initial_F": fit(theta0),
            "working_F": state.F_best,
            "best_F": state.min_F,
            "final_T": state.T,
            "final_eps": state.eps,
            "archive": str(archive_path),
            "checkpoint": args.ckpt_out,
        }
    )


def _parse_tokens(text: str) -> list[int]:
    try:
        return [int(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise CliError(f"--input must be integers, got {text!r}", EXIT_DATA) from None


def cmd_dump_graph(args) -> None:
    c = _load_ckpt(args.ckpt)
    cfg = c.config
    tokens = _parse_tokens(args.input)
    tp = c.params.tensors()
    with nx.no_grad():
        enc = encode(tokens, tp, cfg, None, "deterministic", args.mask_mode)
        res = backbone(enc, tp, cfg)
        out = {
            "tokens": tokens,
            "mask_mode": args.mask_mode or cfg.mask_mode,
            "graph": enc.graph.to_json(),
            "dot": enc.graph.to_dot(tokens),
            "probs": res.probs.data[0].tolist(),
            "routing": [r.to_json() for r in res.diagnostics.routes],
        }
        if args.attn:
            out["attention"] = [[head.tolist() for head in layer] for layer in res.diagnostics.attention]
        if args.intervene:
            try:
                idx_text, seed_text = args.intervene.split(":")
                idx, seed = int(idx_text), int(seed_text)
            except ValueError:
                raise CliError(f"--intervene expects idx:seed, got {args.intervene!r}", EXIT_CONFIG) from None
            values = np.random.default_rng(seed).normal(0.0, cfg.clamp_sigma, size=(1, cfg.d))
            try:
                spec = targeted([idx], values, len(tokens), cfg.d, cfg.tau_cf, cfg.lambda_delta)
            except IndexError as exc:
                raise CliError(str(exc), EXIT_DATA) from None
            do = run_intervention(enc, tp, cfg, spec)
            loss_kl = intervention_loss(res.probs, do.probs, 0.0).item()
            out["intervention"] = {
                "indices": list(spec.indices),
                "seed": seed,
                "tau_cf": spec.tau_cf,
                "lambda_delta": spec.lambda_delta,
                "p_obs": res.probs.data[0].tolist(),
                "p_do": do.probs.data[0].tolist(),
                "kl": loss_kl,
                "loss": intervention_loss(res.probs, do.probs, spec.lambda_delta).item(),
            }
    if args.dot:
        _write(args.dot, out["dot"])
    _emit(out)


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="root seed (default: config seed, else 0)")

    parser = argparse.ArgumentParser(prog="goce", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic relation-composition dataset")
    p.add_argument("--hops", type=int, default=2)
    p.add_argument("--count", type=int, default=2000)
    p.add_argument("--group-order", type=int, default=4)
    p.add_argument("--n-entities", type=int, default=16)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train a model with Adam on the composite loss")
    p.add_argument("--config")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--ckpt-out", required=True)
    p.add_argument("--log-out")
    p.add_argument("--resume", help="continue from a checkpoint (its config wins)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="metrics for a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mask-mode", choices=MASK_MODES + ("all",))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("evolve", parents=[common], help="annealing refinement of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--rounds", type=int, default=20)
    p.add_argument("--data", required=True, help="held-out batch; the first gate.eval_size examples are used")
    p.add_argument("--config")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.add_argument("--archive-out", required=True)
    p.add_argument("--ckpt-out", required=True)
    p.set_defaults(func=cmd_evolve)

    p = sub.add_parser("dump-graph", parents=[common], help="causal graph, routing and attention for one input")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True, help="token ids, comma or space separated")
    p.add_argument("--attn", action="store_true", help="include attention maps")
    p.add_argument("--mask-mode", choices=MASK_MODES)
    p.add_argument("--dot", help="also write the graph as DOT to this path")
    p.add_argument("--intervene", metavar="IDX:SEED", help="clamp one position and report both distributions")
    p.set_defaults(func=cmd_dump_graph)
    return parser


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("GOCE_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR), stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.seed is None and args.command == "gen-data":
        args.seed = 0
    try:
        args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except config_mod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, InputError, CycleError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
