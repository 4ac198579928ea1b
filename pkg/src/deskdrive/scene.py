"""Ego-relative scene analysis shared by the encoder and the rule-based expert."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import to_local, wrap_angle
from .sim import EGO_HALF_EXTENTS, STOP_SPEED, WorldState

LOOKAHEAD_DISTANCES = (4.0, 8.0, 12.0, 16.0, 20.0)
N_NEAREST = 6
CONTROL_RANGE = 60.0
LEAD_RANGE = 50.0
REAR_RANGE = 30.0
CONFLICT_HORIZON = 4.0
CONFLICT_MARGIN = 0.75  # clearance added to the summed footprints
ADJ_FRONT, ADJ_REAR = 15.0, 20.0
NO_VALUE = math.inf


@dataclass(frozen=True)
class Scene:
    speed: float
    heading_error: float
    lane: int
    lane_offset: float
    lane_width: float
    left_lane: bool
    right_lane: bool
    lookahead: np.ndarray  # (5, 2) current-lane centre points, ego frame
    turn_near: float  # route heading change over the next 2 m
    turn_ahead: float  # route heading change over the next 15 m
    agents: np.ndarray  # (K, 5): dx, dy, rel vx, rel vy, present
    lead_gap: float
    lead_closing: float
    lead_speed: float
    lead_ttc: float
    rear_gap: float
    rear_closing: float
    left_free: bool
    right_free: bool
    conflict_time: float
    control_present: bool
    control_kind: str
    control_dist: float  # distance from ego to the stop line along the route
    control_inside: bool
    control_satisfied: bool
    remaining_route: float
    remaining_time: float


def _agent_velocity(a) -> np.ndarray:
    return np.array([math.cos(a.heading), math.sin(a.heading)]) * a.speed


def analyze(world: WorldState) -> Scene:
    spec = world.spec
    ego = world.ego
    route = spec.route_line
    w = spec.lane_width
    pos = np.array([ego.x, ego.y])

    s_ego, lat, _ = route.project(pos)
    lane = int(np.clip(round(lat / w), -spec.lanes_right, spec.lanes_left))
    lane_line = spec.lane_lines[lane]
    s_lane, lane_offset, _ = lane_line.project(pos)
    heading_error = wrap_angle(route.heading_at(s_ego) - ego.heading)
    look = np.array([lane_line.point_at(s_lane + d) for d in LOOKAHEAD_DISTANCES])
    look = to_local(look, ego.x, ego.y, ego.heading)
    h0 = route.heading_at(s_ego)
    turn_near = wrap_angle(route.heading_at(s_ego + 2.0) - h0)
    turn_ahead = wrap_angle(route.heading_at(s_ego + 15.0) - h0)

    ego_vel = np.array([math.cos(ego.heading), math.sin(ego.heading)]) * ego.speed
    lane_dir = h0

    n = len(world.agents)
    feats = np.zeros((N_NEAREST, 5))
    lead_gap = rear_gap = NO_VALUE
    lead_closing = rear_closing = lead_speed = 0.0
    left_free = right_free = True
    conflict = NO_VALUE
    if n:
        apos = np.array([[a.x, a.y] for a in world.agents])
        avel = np.array([_agent_velocity(a) for a in world.agents])
        dist = np.hypot(*(apos - pos).T)
        order = sorted(range(n), key=lambda i: (dist[i], i))[:N_NEAREST]
        rel_p = to_local(apos, ego.x, ego.y, ego.heading)
        rel_v = to_local(avel - ego_vel + pos, ego.x, ego.y, ego.heading)
        for slot, i in enumerate(order):
            feats[slot] = (rel_p[i, 0], rel_p[i, 1], rel_v[i, 0], rel_v[i, 1], 1.0)

        conflict_candidates = []
        for i, a in enumerate(world.agents):
            s_a, lat_a, _ = route.project(apos[i])
            a_lane = round(lat_a / w)
            along = a.speed * math.cos(a.heading - lane_dir)
            ds = s_a - s_ego
            half = a.half_extents[0] + EGO_HALF_EXTENTS[0]
            in_lane = abs(lat_a - lane * w) < 0.5 * w + 0.3
            if in_lane and ds > 0.0 and ds - half < LEAD_RANGE:
                gap = max(ds - half, 0.0)
                if gap < lead_gap:
                    lead_gap, lead_speed = gap, along
                    lead_closing = ego.speed - along
                continue
            if in_lane and ds <= 0.0 and -ds - half < REAR_RANGE:
                gap = max(-ds - half, 0.0)
                if gap < rear_gap:
                    rear_gap, rear_closing = gap, along - ego.speed
                continue
            if a_lane == lane + 1 and -ADJ_REAR < ds < ADJ_FRONT and abs(lat_a - (lane + 1) * w) < 0.5 * w + 0.3:
                left_free = False
            if a_lane == lane - 1 and -ADJ_REAR < ds < ADJ_FRONT and abs(lat_a - (lane - 1) * w) < 0.5 * w + 0.3:
                right_free = False
            if a.speed > 1.0:  # parked or crawling cars are handled as leads
                conflict_candidates.append(i)

        if conflict_candidates:
            ts = np.arange(0.0, CONFLICT_HORIZON + 1e-9, 0.25)
            v_pred = max(ego.speed, 3.0)
            s_path = s_lane + v_pred * ts
            ego_path = np.array([lane_line.point_at(sk) for sk in s_path])
            ego_head = np.array([lane_line.heading_at(sk) for sk in s_path])
            idx = np.array(conflict_candidates)
            fut = apos[idx, None, :] + avel[idx, None, :] * ts[None, :, None]
            rel = fut - ego_path[None]
            c, sn = np.cos(ego_head), np.sin(ego_head)
            lon = rel[..., 0] * c + rel[..., 1] * sn
            lat_rel = -rel[..., 0] * sn + rel[..., 1] * c
            # agent footprint projected onto the ego's longitudinal and lateral axes
            rel_h = np.array([world.agents[i].heading for i in idx])[:, None] - ego_head[None]
            ext = np.array([world.agents[i].half_extents for i in idx])
            reach_lon = np.abs(np.cos(rel_h)) * ext[:, :1] + np.abs(np.sin(rel_h)) * ext[:, 1:]
            reach_lat = np.abs(np.sin(rel_h)) * ext[:, :1] + np.abs(np.cos(rel_h)) * ext[:, 1:]
            hit = ((np.abs(lon) < reach_lon + EGO_HALF_EXTENTS[0] + CONFLICT_MARGIN)
                   & (np.abs(lat_rel) < reach_lat + EGO_HALF_EXTENTS[1] + CONFLICT_MARGIN))
            if hit.any():
                conflict = float(ts[np.argmax(hit.any(axis=0))])

    lead_ttc = lead_gap / lead_closing if (lead_gap < NO_VALUE and lead_closing > 0.1) else NO_VALUE
    if lane + 1 > spec.lanes_left:
        left_free = False
    if lane - 1 < -spec.lanes_right:
        right_free = False

    control_present = False
    control_kind = ""
    control_dist = NO_VALUE
    control_inside = control_satisfied = False
    for c in world.controls:
        u, _ = c.local(ego.x, ego.y)
        d_line = c.trigger[0] - u
        inside = c.contains(ego.x, ego.y)
        ahead = d_line > -0.5 and d_line < CONTROL_RANGE
        s_c, lat_c, _ = route.project(c.pose[:2])
        if not ahead or abs(lat_c) > (spec.lanes_left + spec.lanes_right + 1) * w or u < -CONTROL_RANGE:
            continue
        if d_line < control_dist:
            control_present = True
            control_kind = c.kind
            control_dist = d_line
            control_inside = inside
            control_satisfied = inside and (ego.speed < STOP_SPEED or
                                            (c.was_inside and c.min_speed_inside < STOP_SPEED))

    remaining_route = max(0.0, route.length - world.progress_arc) / route.length
    remaining_time = max(0.0, spec.time_limit - world.t) / spec.time_limit
    return Scene(
        speed=ego.speed,
        heading_error=heading_error,
        lane=lane,
        lane_offset=lane_offset,
        lane_width=w,
        left_lane=lane + 1 <= spec.lanes_left,
        right_lane=lane - 1 >= -spec.lanes_right,
        lookahead=look,
        turn_near=turn_near,
        turn_ahead=turn_ahead,
        agents=feats,
        lead_gap=lead_gap,
        lead_closing=lead_closing,
        lead_speed=lead_speed,
        lead_ttc=lead_ttc,
        rear_gap=rear_gap,
        rear_closing=rear_closing,
        left_free=left_free,
        right_free=right_free,
        conflict_time=conflict,
        control_present=control_present,
        control_kind=control_kind,
        control_dist=control_dist,
        control_inside=control_inside,
        control_satisfied=control_satisfied,
        remaining_route=remaining_route,
        remaining_time=remaining_time,
    )
