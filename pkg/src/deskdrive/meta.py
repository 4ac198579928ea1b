"""Discrete meta-actions: a longitudinal (speed) choice times a lateral (path) choice."""

from __future__ import annotations

import enum
from typing import NamedTuple


class Speed(enum.IntEnum):
    SpeedUp = 0
    SlowDown = 1
    SlowdownRapidly = 2
    MaintainSlowSpeed = 3
    MaintainModerateSpeed = 4
    MaintainFastSpeed = 5
    Stop = 6


class Path(enum.IntEnum):
    TurnLeft = 0
    TurnRight = 1
    ChangeLaneLeft = 2
    ChangeLaneRight = 3
    Straight = 4
    LaneFollow = 5


N_SPEED = len(Speed)
N_PATH = len(Path)
N_JOINT = N_SPEED * N_PATH


class MetaAction(NamedTuple):
    speed: Speed
    path: Path

    @property
    def index(self) -> int:
        """Joint index, speed-major."""
        return int(self.speed) * N_PATH + int(self.path)

    @classmethod
    def from_index(cls, i: int) -> "MetaAction":
        if not 0 <= i < N_JOINT:
            raise ValueError(f"joint action index out of range: {i}")
        return cls(Speed(i // N_PATH), Path(i % N_PATH))

    def __str__(self) -> str:
        return f"{self.speed.name}/{self.path.name}"


ALL_ACTIONS: tuple[MetaAction, ...] = tuple(MetaAction.from_index(i) for i in range(N_JOINT))
