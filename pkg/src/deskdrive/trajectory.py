"""Trajectories: 20 path points 1 m apart and 6 speed waypoints 0.5 s apart, in the ego frame."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

N_PATH_POINTS = 20
N_SPEED_POINTS = 6
PATH_SPACING = 1.0
SPEED_INTERVAL = 0.5


class TrajectoryError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Trajectory:
    """``path_waypoints``: (20, 2) at 1 m spacing; ``speed_waypoints``: (6, 2) at 0.5 s."""

    path_waypoints: np.ndarray
    speed_waypoints: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.path_waypoints, dtype=float)
        s = np.asarray(self.speed_waypoints, dtype=float)
        if p.shape != (N_PATH_POINTS, 2) or s.shape != (N_SPEED_POINTS, 2):
            raise TrajectoryError(f"bad trajectory shapes {p.shape} / {s.shape}")
        object.__setattr__(self, "path_waypoints", p)
        object.__setattr__(self, "speed_waypoints", s)

    def spacing(self) -> np.ndarray:
        return np.hypot(*np.diff(self.path_waypoints, axis=0).T)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.path_waypoints)) and np.all(np.isfinite(self.speed_waypoints)))

    def check(self, spacing_tol: float = 1e-6) -> None:
        """Raise unless counts, finiteness and path spacing hold."""
        if not self.is_finite():
            raise TrajectoryError("non-finite waypoint")
        err = float(np.max(np.abs(self.spacing() - PATH_SPACING)))
        if err > spacing_tol:
            raise TrajectoryError(f"path spacing off by {err:.3g} m")

    def flat(self) -> np.ndarray:
        return np.concatenate([self.path_waypoints.ravel(), self.speed_waypoints.ravel()])

    @classmethod
    def from_flat(cls, v) -> "Trajectory":
        v = np.asarray(v, dtype=float)
        return cls(v[: 2 * N_PATH_POINTS].reshape(N_PATH_POINTS, 2), v[2 * N_PATH_POINTS:].reshape(N_SPEED_POINTS, 2))

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return bool(np.array_equal(self.path_waypoints, other.path_waypoints)
                    and np.array_equal(self.speed_waypoints, other.speed_waypoints))


TRAJ_DIM = 2 * (N_PATH_POINTS + N_SPEED_POINTS)
