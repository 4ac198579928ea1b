"""Fixed-layout, parameter-free featurisation of a world state.

Every feature is expressed in the ego frame or relative to the route, so the
embedding is invariant to translating the whole scene. Layout (index: feature,
scale):

    0      ego speed / 10
    1      route heading minus ego heading / pi
    2      offset from current lane centre / lane width
    3      route heading change over the next 2 m / pi
    4-5    left lane exists, right lane exists
    6-15   5 current-lane centre points 4..20 m ahead, (x, y) / 20
    16-45  6 nearest agents by distance (ties by index), each
           (dx / 50, dy / 50, rel vx / 10, rel vy / 10, present)
    46-52  nearest traffic control ahead: stop-line distance / 50,
           red, green, stop sign, ego inside trigger, stop satisfied, present
    53     remaining route fraction
    54     remaining time fraction
    55-57  lead vehicle gap / 50, closing speed / 10, time-to-collision / 4
    58     predicted crossing-conflict time / 4
    59-60  left lane free, right lane free
    61-62  rear vehicle closing speed / 10, rear gap / 30
    63     route heading change over the next 15 m / pi

Absent quantities (no lead, no conflict, ...) saturate at 1.0 on their
normalised scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .scene import Scene, analyze
from .sim import WorldState

EMBED_DIM = 64
SCHEMA_VERSION = 1
SCHEMA = (
    f"deskdrive-embedding/v{SCHEMA_VERSION};dim={EMBED_DIM};"
    "speed,heading_err,lane_offset,turn_near,left_lane,right_lane,"
    "look[5](x,y),agents[6](dx,dy,dvx,dvy,present),"
    "control(dist,red,green,stop,inside,satisfied,present),"
    "remaining_route,remaining_time,lead(gap,closing,ttc),conflict_t,"
    "left_free,right_free,rear(closing,gap),turn_ahead"
)


@dataclass(frozen=True, eq=False)
class StateEmbedding:
    values: np.ndarray
    frame_t: float


def _sat(x: float, scale: float) -> float:
    return 1.0 if not math.isfinite(x) else min(x / scale, 1.0)


def features(scene: Scene) -> np.ndarray:
    v = np.zeros(EMBED_DIM)
    v[0] = scene.speed / 10.0
    v[1] = scene.heading_error / math.pi
    v[2] = scene.lane_offset / scene.lane_width
    v[3] = scene.turn_near / math.pi
    v[4] = float(scene.left_lane)
    v[5] = float(scene.right_lane)
    v[6:16] = (scene.lookahead / 20.0).ravel()
    a = scene.agents.copy()
    a[:, :2] /= 50.0
    a[:, 2:4] /= 10.0
    v[16:46] = a.ravel()
    if scene.control_present:
        v[46] = max(scene.control_dist, 0.0) / 50.0
        v[47] = float(scene.control_kind == "RedLight")
        v[48] = float(scene.control_kind == "GreenLight")
        v[49] = float(scene.control_kind == "StopSign")
        v[50] = float(scene.control_inside)
        v[51] = float(scene.control_satisfied)
        v[52] = 1.0
    else:
        v[46] = 1.2
    v[53] = scene.remaining_route
    v[54] = scene.remaining_time
    v[55] = _sat(scene.lead_gap, 50.0)
    v[56] = scene.lead_closing / 10.0
    v[57] = _sat(scene.lead_ttc, 4.0)
    v[58] = _sat(scene.conflict_time, 4.0)
    v[59] = float(scene.left_free)
    v[60] = float(scene.right_free)
    v[61] = scene.rear_closing / 10.0
    v[62] = _sat(scene.rear_gap, 30.0)
    v[63] = scene.turn_ahead / math.pi
    return v


def encode(world: WorldState) -> StateEmbedding:
    return StateEmbedding(features(analyze(world)), world.t)
