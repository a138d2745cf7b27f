"""Movements, the eight concurrent phase groups and signal timing constants."""
from __future__ import annotations

import enum
import itertools
import json
from dataclasses import dataclass
from functools import lru_cache


class Approach(enum.Enum):
    NORTH = "N"
    SOUTH = "S"
    EAST = "E"
    WEST = "W"

    @property
    def street(self) -> str:
        return "NS" if self in (Approach.NORTH, Approach.SOUTH) else "EW"


class Kind(enum.Enum):
    THROUGH = "T"  # right turns ride with the through lane
    LEFT = "L"


@dataclass(frozen=True)
class Movement:
    approach: Approach
    kind: Kind

    @property
    def name(self) -> str:
        return self.approach.value + self.kind.value

    @classmethod
    def parse(cls, name: str) -> "Movement":
        try:
            return cls(Approach(name[0]), Kind(name[1]))
        except (IndexError, ValueError):
            raise ValueError(f"unknown movement {name!r}") from None

    def __repr__(self) -> str:
        return self.name

    # catalogue order: N, S, E, W with through before left
    def __lt__(self, other: "Movement") -> bool:
        return MOVEMENTS.index(self) < MOVEMENTS.index(other)


MOVEMENTS: tuple[Movement, ...] = tuple(
    Movement(a, k) for a in Approach for k in (Kind.THROUGH, Kind.LEFT)
)
"""All eight movements; the index doubles as the lane index in the simulator."""


def movements_conflict(a: Movement, b: Movement) -> bool:
    """True if `a` and `b` may not hold right-of-way at the same time.

    Movements on different streets always conflict. On the same street a
    through movement conflicts with the opposing left turn; everything else
    (both throughs, both lefts, left+through from one approach) is compatible.
    """
    if a == b:
        return False
    if a.approach.street != b.approach.street:
        return True
    return a.kind != b.kind and a.approach != b.approach


@dataclass(frozen=True)
class PhaseGroup:
    id: int
    movements: tuple[Movement, Movement]

    @property
    def name(self) -> str:
        return "+".join(m.name for m in self.movements)

    def __contains__(self, movement: Movement) -> bool:
        return movement in self.movements


@lru_cache(maxsize=None)
def _catalogue() -> tuple[PhaseGroup, ...]:
    m = Movement.parse
    pairs = [
        ("NL", "SL"), ("NT", "ST"), ("NL", "NT"), ("SL", "ST"),
        ("EL", "WL"), ("ET", "WT"), ("EL", "ET"), ("WL", "WT"),
    ]
    return tuple(
        PhaseGroup(i, (m(a), m(b))) for i, (a, b) in enumerate(pairs, start=1)
    )


def standard_phase_groups() -> list[PhaseGroup]:
    """The fixed catalogue of 8 compatible movement pairs, ids 1..8."""
    return list(_catalogue())


def compatible_pairs() -> list[tuple[Movement, Movement]]:
    return [
        (a, b) for a, b in itertools.combinations(MOVEMENTS, 2)
        if not movements_conflict(a, b)
    ]


def catalogue_to_json(groups: list[PhaseGroup] | None = None) -> str:
    groups = standard_phase_groups() if groups is None else groups
    return json.dumps(
        [{"id": g.id, "movements": [m.name for m in g.movements]} for g in groups],
        indent=2,
    )


@dataclass(frozen=True)
class SignalTiming:
    yellow_s: float = 3.0
    all_red_s: float = 2.0

    def __post_init__(self):
        if not self.yellow_s > 0:
            raise ValueError("yellow_s must be positive")
        if not self.all_red_s >= 0:
            raise ValueError("all_red_s must be non-negative")

    @property
    def clearance_s(self) -> float:
        return self.yellow_s + self.all_red_s
