"""Bundled starter scenarios and seeded variants of them."""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .sim import AgentScript, ScenarioSpec, TrafficControl

LANE = 3.5


def straight(length: float, y: float = 0.0) -> tuple:
    return ((0.0, y), (length, y))


def turn_route(before: float, after: float, direction: int, radius: float = 8.0, n_arc: int = 24) -> tuple:
    """Straight along +x, a quarter turn (left if ``direction`` > 0), then straight."""
    pts = [(0.0, 0.0), (before, 0.0)]
    for k in range(1, n_arc + 1):
        a = 0.5 * math.pi * k / n_arc
        pts.append((before + radius * math.sin(a), direction * radius * (1.0 - math.cos(a))))
    end_x, end_y = pts[-1]
    pts.append((end_x, end_y + direction * after))
    return tuple(pts)


def car(x, y, h=0.0, profile=((0.0, 0.0),), behavior="cruise", path=None) -> AgentScript:
    return AgentScript(pose=(float(x), float(y), float(h)), speed_profile=tuple(profile), behavior=behavior,
                       path=path)


def light(x, phases, hl=4.0, hw=2.0, y=0.0, h=0.0) -> TrafficControl:
    return TrafficControl("traffic_light", (float(x), float(y), float(h)), (hl, hw), tuple(phases))


def stop_sign(x, hl=4.0, hw=2.0, y=0.0, h=0.0) -> TrafficControl:
    return TrafficControl("stop_sign", (float(x), float(y), float(h)), (hl, hw))


def spec(id, category, route, agents=(), controls=(), time_limit=40.0, lanes_left=0, lanes_right=0,
         ego_start=(0.0, 0.0, 0.0)) -> ScenarioSpec:
    s = ScenarioSpec(id=id, category=category, route=tuple(route), lane_width=LANE, agents=tuple(agents),
                     controls=tuple(controls), time_limit=time_limit, ego_start=tuple(ego_start),
                     lanes_left=lanes_left, lanes_right=lanes_right)
    s.validate()
    return s


def starter_pack() -> list[ScenarioSpec]:
    """Twenty routes, four per ability category."""
    down = -0.5 * math.pi
    up = 0.5 * math.pi
    return [
        # Merging: traffic joining or crossing the ego lane ahead
        spec("merge_ramp_right", "Merging", straight(110.0),
             [car(25.0, -22.0, 0.0, ((0.0, 6.0),), path=((25.0, -22.0), (55.0, 0.0), (400.0, 0.0)))]),
        spec("merge_stop_cross", "Merging", straight(100.0),
             [car(52.0, 45.0, down, ((0.0, 6.0),))], [stop_sign(40.0)]),
        spec("merge_two_ramp", "Merging", straight(120.0),
             [car(20.0, -25.0, 0.0, ((0.0, 5.5),), path=((20.0, -25.0), (50.0, 0.0), (400.0, 0.0))),
              car(5.0, -25.0, 0.0, ((0.0, 5.5),), path=((5.0, -25.0), (35.0, -8.0), (50.0, 0.0), (400.0, 0.0)))]),
        spec("merge_left_cross", "Merging", straight(100.0),
             [car(48.0, -50.0, up, ((0.0, 7.0),)), car(56.0, 60.0, down, ((0.0, 5.0),))]),
        # Overtaking: blocked ego lane with a free lane to the left
        spec("overtake_static", "Overtaking", straight(110.0),
             [car(45.0, 0.0, 0.0, behavior="static")], lanes_left=1),
        spec("overtake_crawler", "Overtaking", straight(120.0),
             [car(35.0, 0.0, 0.0, ((0.0, 0.5),))], lanes_left=1),
        spec("overtake_wait_left", "Overtaking", straight(120.0),
             [car(40.0, 0.0, 0.0, behavior="static"), car(-25.0, LANE, 0.0, ((0.0, 7.5),))], lanes_left=1),
        spec("overtake_two_static", "Overtaking", straight(140.0),
             [car(40.0, 0.0, 0.0, behavior="static"), car(95.0, LANE, 0.0, behavior="static")], lanes_left=1),
        # Emergency braking: hazards appearing in the ego path
        spec("brake_lead_stop", "EmergencyBrake", straight(120.0),
             [car(30.0, 0.0, 0.0, ((0.0, 5.0), (7.0, 5.0), (8.0, 0.0), (11.0, 0.0), (13.0, 5.0)))]),
        spec("brake_cross_fast", "EmergencyBrake", straight(100.0),
             [car(45.0, -48.0, up, ((0.0, 9.0),))]),
        spec("brake_cut_in", "EmergencyBrake", straight(110.0),
             [car(20.0, LANE, 0.0, ((0.0, 7.0), (5.0, 7.0), (6.5, 0.0), (9.0, 0.0), (11.0, 5.0)),
                  path=((20.0, LANE), (45.0, LANE), (55.0, 0.0), (400.0, 0.0)))], lanes_left=1),
        spec("brake_lead_hard", "EmergencyBrake", straight(120.0),
             [car(25.0, 0.0, 0.0, ((0.0, 6.0), (8.0, 6.0), (8.8, 0.0), (12.0, 0.0), (14.0, 6.0)))]),
        # Give way: yield to emergency vehicles and priority traffic
        spec("giveway_emergency", "GiveWay", straight(130.0),
             [car(-30.0, 0.0, 0.0, ((0.0, 0.0), (4.0, 0.0), (5.0, 11.0)))], lanes_right=1),
        spec("giveway_emergency_left", "GiveWay", straight(130.0),
             [car(-30.0, 0.0, 0.0, ((0.0, 0.0), (5.0, 0.0), (6.0, 11.0)))], lanes_left=1),
        spec("giveway_priority_right", "GiveWay", straight(100.0),
             [car(50.0, -40.0, up, ((0.0, 6.0),)), car(50.0, -60.0, up, ((0.0, 6.0),))]),
        spec("giveway_emergency_busy", "GiveWay", straight(140.0),
             [car(-35.0, 0.0, 0.0, ((0.0, 0.0), (5.0, 0.0), (6.0, 12.0))),
              car(60.0, -LANE, 0.0, ((0.0, 3.0),))], lanes_right=1),
        # Traffic signs: lights and stop signs
        spec("sign_red_to_green", "TrafficSign", straight(100.0),
             controls=[light(40.0, ((0.0, "red"), (12.0, "green")))]),
        spec("sign_stop", "TrafficSign", straight(100.0), controls=[stop_sign(45.0)]),
        spec("sign_green_to_red", "TrafficSign", straight(120.0),
             controls=[light(70.0, ((0.0, "green"), (9.0, "red"), (17.0, "green")))]),
        spec("sign_stop_turn_right", "TrafficSign", turn_route(45.0, 50.0, -1), controls=[stop_sign(38.0)],
             time_limit=45.0),
    ]


def jitter(s: ScenarioSpec, rng: np.random.Generator, index: int) -> ScenarioSpec:
    """A perturbed copy: agent timing/placement, signal phases and ego start pose."""
    agents = []
    for a in s.agents:
        dx = rng.uniform(-3.0, 3.0)
        scale = rng.uniform(0.85, 1.15)
        h = a.pose[2]
        pose = (a.pose[0] + dx * math.cos(h), a.pose[1] + dx * math.sin(h), h)
        prof = tuple((t, v * scale) for t, v in a.speed_profile)
        if a.path is not None:
            agents.append(dataclasses.replace(a, speed_profile=prof))
        else:
            agents.append(dataclasses.replace(a, pose=pose, speed_profile=prof))
    controls = []
    for c in s.controls:
        shift = rng.uniform(-1.5, 1.5)
        phases = tuple((max(0.0, t + shift) if t > 0 else t, col) for t, col in c.phases)
        controls.append(dataclasses.replace(c, phases=phases))
    ey = rng.uniform(-0.3, 0.3)
    eh = rng.uniform(-0.05, 0.05)
    ex, _, _ = s.ego_start
    return dataclasses.replace(s, id=f"{s.id}~{index}", agents=tuple(agents), controls=tuple(controls),
                               ego_start=(ex, s.ego_start[1] + ey, s.ego_start[2] + eh))
