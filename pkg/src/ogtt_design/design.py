"""Measurement schedules on the 15-minute grid."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import InputError

GRID_MINUTES = 15
MAX_MINUTES = 120


@dataclass(frozen=True, order=True)
class Design:
    """Measurement times, stored in integer minutes.

    Valid designs start at 0 (arrival), are strictly increasing and lie on
    the 15-minute grid within two hours.
    """

    minutes: tuple[int, ...]

    def __post_init__(self):
        m = tuple(int(v) for v in self.minutes)
        if any(int(v) != v for v in self.minutes):
            raise InputError(f"design times must be whole minutes: {self.minutes}")
        object.__setattr__(self, "minutes", m)
        if not m or m[0] != 0:
            raise InputError(f"design must start at 0 minutes: {m}")
        if any(b <= a for a, b in zip(m, m[1:])):
            raise InputError(f"design times must be strictly increasing: {m}")
        if any(v % GRID_MINUTES or v > MAX_MINUTES for v in m):
            raise InputError(f"design times must be 15-minute multiples in [0, 120]: {m}")

    @classmethod
    def from_minutes(cls, minutes: Iterable[int]) -> "Design":
        return cls(tuple(minutes))

    @classmethod
    def parse(cls, text: str) -> "Design":
        """Parse ``"0,45,75"`` (minutes)."""
        try:
            return cls(tuple(int(v) for v in text.replace(" ", "").split(",") if v))
        except ValueError as exc:
            raise InputError(f"cannot parse design {text!r}") from exc

    @property
    def times(self) -> np.ndarray:
        """Times in hours."""
        return np.array(self.minutes, dtype=float) / 60.0

    @property
    def size(self) -> int:
        return len(self.minutes)

    def key(self) -> str:
        return ",".join(str(v) for v in self.minutes)

    def label(self) -> str:
        return " ".join(f"{v // 60}:{v % 60:02d}" for v in self.minutes)

    def __str__(self):
        return f"Design({self.key()})"


CONVENTIONAL = Design((0, 60, 120))
PROPOSED = Design((0, 45, 75, 105, 120))
FULL = Design((0, 15, 30, 45, 60, 75, 90, 105, 120))
EARLY_ONLY = Design((0, 15, 30))
