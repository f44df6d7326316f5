"""Deterministic random streams keyed by what they are used for.

Every stream is derived from a root seed and a tuple of labels (command,
design, replicate index, retry attempt) through a stable hash, so results do
not depend on how work is scheduled across processes.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np


def derive_seed(root: int, *parts) -> int:
    """128-bit integer seed from ``root`` and JSON-serialisable ``parts``."""
    text = json.dumps([int(root), *parts], separators=(",", ":"))
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:16], "little")


def generator(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


@dataclass(frozen=True)
class RngStream:
    """A named family of generators under one root seed."""

    root: int
    label: str = "estimate"

    def seed(self, *parts) -> int:
        return derive_seed(self.root, self.label, *parts)

    def generator(self, *parts) -> np.random.Generator:
        return generator(self.seed(*parts))

    def child(self, *parts) -> "RngStream":
        return RngStream(self.root, "/".join([self.label, *map(str, parts)]))

    def to_dict(self) -> dict:
        return {"root": int(self.root), "label": self.label}
