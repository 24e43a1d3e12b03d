"""Synthetic multi-hop relation composition over a cyclic group.

A sequence reads ``e0 r1 e1 r2 e2 ... rH eH QUERY``. Relations are elements of
Z_n (token ids 0..n-1), the query marker is id n, entities follow. The label is
the composed relation ``(r1 + ... + rH) mod n``.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np


class DataError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


@dataclass(frozen=True)
class SyntheticExample:
    tokens: tuple[int, ...]
    label: int
    hops: int

    def to_json(self) -> dict:
        return {"tokens": list(self.tokens), "label": self.label, "hops": self.hops}


def query_token(group_order: int) -> int:
    return group_order


def vocab_size(group_order: int, n_entities: int = 16) -> int:
    return group_order + 1 + n_entities


def generate(count: int, hops: int, group_order: int, seed: int, n_entities: int = 16) -> list[SyntheticExample]:
    if group_order < 2:
        raise ValueError("group_order must be >= 2")
    if hops < 1:
        raise ValueError("hops must be >= 1")
    if count < 0:
        raise ValueError("count must be >= 0")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        rels = rng.integers(0, group_order, size=hops)
        ents = rng.integers(0, n_entities, size=hops + 1) + group_order + 1
        tokens = [int(ents[0])]
        for r, e in zip(rels, ents[1:]):
            tokens += [int(r), int(e)]
        tokens.append(query_token(group_order))
        out.append(SyntheticExample(tuple(tokens), int(rels.sum() % group_order), hops))
    return out


def dumps_jsonl(examples: Iterable[SyntheticExample]) -> str:
    return "".join(json.dumps(ex.to_json(), separators=(",", ":")) + "\n" for ex in examples)


def write_jsonl(examples: Iterable[SyntheticExample], path: str | Path) -> None:
    Path(path).write_text(dumps_jsonl(examples))


def read_jsonl(path: str | Path) -> list[SyntheticExample]:
    """Load ``{"tokens": [...], "label": int, "hops": int}`` lines; ``hops`` is optional."""
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"invalid JSON ({exc.msg})", lineno) from None
            if not isinstance(obj, dict) or "tokens" not in obj or "label" not in obj:
                raise DataError("expected an object with 'tokens' and 'label'", lineno)
            tokens = obj["tokens"]
            if not isinstance(tokens, list) or not tokens or not all(isinstance(t, int) for t in tokens):
                raise DataError("'tokens' must be a non-empty list of ints", lineno)
            if not isinstance(obj["label"], int):
                raise DataError("'label' must be an int", lineno)
            hops = obj.get("hops", (len(tokens) - 2) // 2)
            out.append(SyntheticExample(tuple(tokens), obj["label"], int(hops)))
    return out


def label_histogram(examples: Iterable[SyntheticExample], n_classes: int) -> list[int]:
    counts = Counter(ex.label for ex in examples)
    return [counts.get(c, 0) for c in range(n_classes)]
