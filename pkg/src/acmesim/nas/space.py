"""Block-structured header search space."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

OPSET_VERSION = 1
DEFAULT_OPS = ("conv1x1", "conv3x3", "conv5x5", "identity", "downsample", "avgpool3x3",
               "maxpool3x3")
KNOWN_OPS = set(DEFAULT_OPS)


@dataclass(frozen=True)
class OperationSet:
    ops: tuple[str, ...] = DEFAULT_OPS
    version: int = OPSET_VERSION

    def __post_init__(self):
        if not self.ops:
            raise ValueError("operation set is empty")
        unknown = set(self.ops) - KNOWN_OPS
        if unknown:
            raise ValueError(f"unknown operations {sorted(unknown)}")
        if len(set(self.ops)) != len(self.ops):
            raise ValueError("duplicate operations")

    def __len__(self) -> int:
        return len(self.ops)

    def __getitem__(self, i: int) -> str:
        return self.ops[i]

    @classmethod
    def first(cls, n: int) -> "OperationSet":
        return cls(DEFAULT_OPS[:n])


@dataclass(frozen=True)
class BlockSpec:
    """Two (input, op) branches combined by addition.

    Input index 0 is the backbone's penultimate layer, 1 its final output and
    ``2 + j`` the output of block ``j``.
    """
    i1: int
    i2: int
    o1: int
    o2: int

    def validate(self, b: int, n_ops: int) -> None:
        """``b`` is the 0-based block position; it may read ``b + 2`` inputs."""
        for name, v in (("i1", self.i1), ("i2", self.i2)):
            if not 0 <= v < b + 2:
                raise ValueError(f"block {b}: {name}={v} outside [0, {b + 2})")
        for name, v in (("o1", self.o1), ("o2", self.o2)):
            if not 0 <= v < n_ops:
                raise ValueError(f"block {b}: {name}={v} outside [0, {n_ops})")

    def to_dict(self) -> dict:
        return {"i1": self.i1, "i2": self.i2, "o1": self.o1, "o2": self.o2}


@dataclass(frozen=True)
class HeaderDAG:
    blocks: tuple[BlockSpec, ...]
    repeats: int = 1
    opset: OperationSet = field(default_factory=OperationSet)

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if not self.blocks:
            raise ValueError("a header needs at least one block")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        for b, blk in enumerate(self.blocks):
            blk.validate(b, len(self.opset))

    @property
    def B(self) -> int:
        return len(self.blocks)

    def loose_ends(self) -> list[int]:
        """Blocks whose output no later block reads."""
        used = {i - 2 for blk in self.blocks for i in (blk.i1, blk.i2) if i >= 2}
        return [b for b in range(self.B) if b not in used]

    def decisions(self) -> list[int]:
        return [v for blk in self.blocks for v in (blk.i1, blk.i2, blk.o1, blk.o2)]

    @classmethod
    def from_decisions(cls, seq, repeats: int = 1, opset: OperationSet | None = None
                       ) -> "HeaderDAG":
        seq = [int(v) for v in seq]
        if len(seq) % 4:
            raise ValueError("decision sequence length must be a multiple of 4")
        blocks = [BlockSpec(*seq[i:i + 4]) for i in range(0, len(seq), 4)]
        return cls(tuple(blocks), repeats, opset or OperationSet())

    def to_dict(self) -> dict:
        return {"blocks": [b.to_dict() for b in self.blocks], "repeats": self.repeats,
                "opset_version": self.opset.version, "ops": list(self.opset.ops)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "HeaderDAG":
        version = int(d.get("opset_version", OPSET_VERSION))
        if version != OPSET_VERSION:
            raise ValueError(f"unsupported opset_version {version}")
        ops = tuple(d.get("ops", DEFAULT_OPS))
        blocks = tuple(BlockSpec(int(b["i1"]), int(b["i2"]), int(b["o1"]), int(b["o2"]))
                       for b in d["blocks"])
        return cls(blocks, int(d.get("repeats", 1)), OperationSet(ops, version))

    @classmethod
    def from_json(cls, text: str) -> "HeaderDAG":
        return cls.from_dict(json.loads(text))

    def describe(self) -> str:
        parts = [f"[{b.i1}:{self.opset[b.o1]} + {b.i2}:{self.opset[b.o2]}]" for b in self.blocks]
        return " ".join(parts) + f" x{self.repeats}"


def decision_supports(B: int, n_ops: int) -> list[int]:
    """Category count of each of the 4B controller decisions."""
    out = []
    for b in range(B):
        out += [b + 2, b + 2, n_ops, n_ops]
    return out


def search_space_size(B: int, n_ops: int) -> int:
    """Product over blocks b = 1..B of (b + 1)^2 * n_ops^2, as an exact integer."""
    if B < 1:
        raise ValueError("B must be >= 1")
    total = 1
    for b in range(1, B + 1):
        total *= (b + 1) ** 2 * n_ops ** 2
    return total


def enumerate_dags(B: int, n_ops: int) -> Iterator[tuple[BlockSpec, ...]]:
    """Every block tuple of the space, one at a time."""
    per_block = [list(itertools.product(range(b + 2), range(b + 2), range(n_ops), range(n_ops)))
                 for b in range(B)]
    for combo in itertools.product(*per_block):
        yield tuple(BlockSpec(*c) for c in combo)


def random_dag(B: int, rng: np.random.Generator, repeats: int = 1,
               opset: OperationSet | None = None) -> HeaderDAG:
    opset = opset or OperationSet()
    seq = [int(rng.integers(s)) for s in decision_supports(B, len(opset))]
    return HeaderDAG.from_decisions(seq, repeats, opset)
