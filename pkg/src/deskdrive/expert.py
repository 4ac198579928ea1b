"""Deterministic rule-based expert that labels states with meta-actions.

Path: yield to a fast vehicle closing from behind by leaving the lane, pass a
stopped or crawling lead through a free adjacent lane (left preferred), take
the turn primitive while on a curved stretch of route, otherwise follow the
lane.

Speed (first match wins): stop for red lights and unsatisfied stop signs
within braking range (creeping forward if halted short of a stop-sign
region); brake rapidly when time-to-collision with the lead is under 2 s or a
crossing conflict is under 1.5 s away; stop for crossing conflicts within 3 s
and hold well behind a stopped lead; slow down when closing on a
lead; hold slow speed through turns; speed up from rest; otherwise cruise at
moderate speed.
"""

from __future__ import annotations

from .meta import MetaAction, Path, Speed
from .scene import Scene, analyze
from .sim import WorldState

TTC_BRAKE = 2.0
CONFLICT_BRAKE = 1.5
CONFLICT_STOP = 3.0
BLOCKED_GAP = 25.0
BLOCKED_SPEED = 1.0
HOLD_GAP = 12.0
REAR_GAP = 30.0
REAR_CLOSING = 3.0
TURN_NEAR = 0.2
TURN_AHEAD = 0.5


def braking_distance(v: float) -> float:
    return v * v / 3.0 + 0.5 * v + 2.0


def expert_path(sc: Scene) -> Path:
    if sc.rear_gap < REAR_GAP and sc.rear_closing > REAR_CLOSING:
        if sc.right_free:
            return Path.ChangeLaneRight
        if sc.left_free:
            return Path.ChangeLaneLeft
    if sc.lead_gap < BLOCKED_GAP and sc.lead_speed < BLOCKED_SPEED:
        if sc.left_free:
            return Path.ChangeLaneLeft
        if sc.right_free:
            return Path.ChangeLaneRight
    if abs(sc.turn_near) > TURN_NEAR:
        return Path.TurnLeft if sc.turn_near > 0 else Path.TurnRight
    return Path.LaneFollow


def expert_speed(sc: Scene, path: Path) -> Speed:
    v = sc.speed
    if sc.control_present:
        near = sc.control_dist < braking_distance(v)
        if sc.control_kind == "RedLight" and (near or sc.control_inside):
            return Speed.Stop
        if sc.control_kind == "StopSign" and near and not sc.control_satisfied:
            if not sc.control_inside and v < 0.5 and sc.control_dist > 0.0:
                return Speed.MaintainSlowSpeed
            return Speed.Stop
    changing = path in (Path.ChangeLaneLeft, Path.ChangeLaneRight)
    if sc.lead_ttc < TTC_BRAKE or (sc.conflict_time < CONFLICT_BRAKE and v > 2.0):
        return Speed.SlowdownRapidly
    if sc.conflict_time <= CONFLICT_STOP:
        return Speed.Stop
    if not changing:
        if sc.lead_speed < BLOCKED_SPEED and sc.lead_gap < braking_distance(v) + HOLD_GAP:
            return Speed.Stop
        if sc.lead_gap < 2.0 * v + 8.0 and sc.lead_closing > 0.5:
            return Speed.SlowDown
    if abs(sc.turn_ahead) > TURN_AHEAD or abs(sc.turn_near) > TURN_NEAR:
        return Speed.MaintainSlowSpeed
    if v < 1.0:
        return Speed.SpeedUp
    return Speed.MaintainModerateSpeed


def label_scene(sc: Scene) -> MetaAction:
    path = expert_path(sc)
    return MetaAction(expert_speed(sc, path), path)


def expert_label(world: WorldState) -> MetaAction:
    return label_scene(analyze(world))
