"""Deterministic 2D closed-loop driving simulator.

The ego is a kinematic bicycle tracking a :class:`~deskdrive.trajectory.Trajectory`
(pure pursuit on the path waypoints, proportional speed control toward the
speed implied by the speed waypoints). Scripted agents follow time-indexed
speed tables along straight lines or polylines. Episodes end on the first
enabled penalty event, on reaching the destination, or on timeout, and emit a
sparse terminal reward.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geometry import Polyline, boxes_overlap, to_local, to_world, wrap_angle
from .trajectory import Trajectory

WHEELBASE = 2.7
SUBSTEP = 0.1
LOOKAHEAD = 4.0
SPEED_GAIN = 1.0
MAX_STEER = 0.6
MAX_ACCEL = 4.0
MAX_BRAKE = 8.0
EGO_HALF_EXTENTS = (2.25, 1.0)
STOP_SPEED = 0.1
MAX_DEVIATION = 30.0
GOAL_TOLERANCE = 1.0
MIN_ROUTE_LENGTH = 20.0
DECISION_DT = 0.5

CATEGORIES = ("Merging", "Overtaking", "EmergencyBrake", "GiveWay", "TrafficSign")
BEHAVIORS = ("cruise", "reactive", "static")


class PenaltyKind(str, enum.Enum):
    Collision = "Collision"
    RedLight = "RedLight"
    RouteDeviation = "RouteDeviation"
    StopSignViolation = "StopSignViolation"


ALL_PENALTIES = frozenset(PenaltyKind)


@dataclass(frozen=True)
class PenaltyEvent:
    kind: PenaltyKind
    t: float


class ScenarioValidationError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class SimulationInputError(ValueError):
    """Non-finite trajectory or bad step size."""


# ---------------------------------------------------------------------------
# Scenario description
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AgentScript:
    """A scripted vehicle.

    ``speed_profile`` is a table of ``(t, v)`` knots interpolated linearly and
    held constant past the last knot. ``reactive`` agents additionally brake
    when the ego is in their corridor just ahead; ``static`` agents never move.
    """

    pose: tuple[float, float, float]
    speed_profile: tuple[tuple[float, float], ...] = ((0.0, 0.0),)
    behavior: str = "cruise"
    half_extents: tuple[float, float] = EGO_HALF_EXTENTS
    path: tuple[tuple[float, float], ...] | None = None

    @cached_property
    def polyline(self) -> Polyline:
        if self.path is not None:
            return Polyline(self.path)
        x, y, h = self.pose
        return Polyline([(x, y), (x + 2000.0 * math.cos(h), y + 2000.0 * math.sin(h))])

    @cached_property
    def start_s(self) -> float:
        return self.polyline.project(self.pose[:2])[0] if self.path is not None else 0.0

    def profile_speed(self, t: float) -> float:
        knots = self.speed_profile
        ts = [k[0] for k in knots]
        vs = [k[1] for k in knots]
        return float(np.interp(t, ts, vs))


@dataclass(frozen=True)
class TrafficControl:
    """A traffic light or stop sign guarding a rectangular trigger region.

    The region is centred on ``pose`` and oriented along the direction of
    travel; its far edge is the stop line. ``phases`` lists ``(t_start,
    "red"|"green")`` for lights and is ignored for stop signs.
    """

    kind: str
    pose: tuple[float, float, float]
    half_extents: tuple[float, float] = (2.0, 2.0)
    phases: tuple[tuple[float, str], ...] = ()

    def state_at(self, t: float) -> str:
        if self.kind == "stop_sign":
            return "StopSign"
        current = "green"
        for t0, color in self.phases:
            if t0 <= t + 1e-12:
                current = color
        return "RedLight" if current == "red" else "GreenLight"


@dataclass(frozen=True)
class ScenarioSpec:
    id: str
    category: str
    route: tuple[tuple[float, float], ...]
    lane_width: float
    agents: tuple[AgentScript, ...]
    controls: tuple[TrafficControl, ...]
    time_limit: float
    ego_start: tuple[float, float, float]
    lanes_left: int = 0
    lanes_right: int = 0

    @cached_property
    def route_line(self) -> Polyline:
        return Polyline(self.route)

    @cached_property
    def lane_lines(self) -> dict[int, Polyline]:
        """Lane centre lines keyed by signed lane index (left positive)."""
        base = self.route_line
        return {k: (base if k == 0 else base.offset(k * self.lane_width))
                for k in range(-self.lanes_right, self.lanes_left + 1)}

    def validate(self) -> None:
        if not self.id:
            raise ScenarioValidationError("id", "must be non-empty")
        if self.category not in CATEGORIES:
            raise ScenarioValidationError("category", f"unknown category {self.category!r}")
        if len(self.route) < 2:
            raise ScenarioValidationError("route", "needs at least 2 points")
        pts = np.asarray(self.route, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or not np.all(np.isfinite(pts)):
            raise ScenarioValidationError("route", "points must be finite (x, y) pairs")
        length = float(np.sum(np.hypot(*np.diff(pts, axis=0).T)))
        if length < MIN_ROUTE_LENGTH:
            raise ScenarioValidationError("route", f"length {length:.2f} m is below {MIN_ROUTE_LENGTH} m")
        if not self.lane_width > 0:
            raise ScenarioValidationError("lane_width", "must be positive")
        if not self.time_limit > 0:
            raise ScenarioValidationError("time_limit", "must be positive")
        if self.lanes_left < 0 or self.lanes_right < 0:
            raise ScenarioValidationError("lanes_left" if self.lanes_left < 0 else "lanes_right",
                                          "must be non-negative")
        if len(self.ego_start) != 3 or not all(math.isfinite(v) for v in self.ego_start):
            raise ScenarioValidationError("ego_start", "must be a finite (x, y, heading) pose")
        for i, a in enumerate(self.agents):
            if a.behavior not in BEHAVIORS:
                raise ScenarioValidationError(f"agents[{i}].behavior", f"unknown behavior {a.behavior!r}")
            if not a.speed_profile:
                raise ScenarioValidationError(f"agents[{i}].speed_profile", "must be non-empty")
        for i, c in enumerate(self.controls):
            if c.kind not in ("traffic_light", "stop_sign"):
                raise ScenarioValidationError(f"controls[{i}].kind", f"unknown control {c.kind!r}")


_SPEC_FIELDS = {f.name for f in dataclasses.fields(ScenarioSpec)}
_AGENT_FIELDS = {f.name for f in dataclasses.fields(AgentScript)}
_CONTROL_FIELDS = {f.name for f in dataclasses.fields(TrafficControl)}


def _tup(v):
    return tuple(_tup(x) for x in v) if isinstance(v, (list, tuple)) else v


def _check_fields(d: dict, allowed: set, where: str, required: Iterable[str] = ()) -> None:
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ScenarioValidationError(f"{where}{unknown[0]}", "unknown field")
    for name in required:
        if name not in d:
            raise ScenarioValidationError(f"{where}{name}", "missing field")


def scenario_from_dict(d: dict) -> ScenarioSpec:
    """Build and validate a spec; unknown fields are rejected."""
    _check_fields(d, _SPEC_FIELDS, "",
                  ("id", "category", "route", "lane_width", "time_limit", "ego_start"))
    agents = []
    for i, a in enumerate(d.get("agents", [])):
        _check_fields(a, _AGENT_FIELDS, f"agents[{i}].", ("pose",))
        kw = {k: _tup(v) for k, v in a.items()}
        if kw.get("path") is not None and len(kw["path"]) < 2:
            raise ScenarioValidationError(f"agents[{i}].path", "needs at least 2 points")
        agents.append(AgentScript(**kw))
    controls = []
    for i, c in enumerate(d.get("controls", [])):
        _check_fields(c, _CONTROL_FIELDS, f"controls[{i}].", ("kind", "pose"))
        controls.append(TrafficControl(**{k: _tup(v) for k, v in c.items()}))
    spec = ScenarioSpec(
        id=str(d["id"]),
        category=d["category"],
        route=_tup(d["route"]),
        lane_width=float(d["lane_width"]),
        agents=tuple(agents),
        controls=tuple(controls),
        time_limit=float(d["time_limit"]),
        ego_start=_tup(d["ego_start"]),
        lanes_left=int(d.get("lanes_left", 0)),
        lanes_right=int(d.get("lanes_right", 0)),
    )
    spec.validate()
    return spec


def scenario_to_dict(spec: ScenarioSpec) -> dict:
    def lst(v):
        return [lst(x) for x in v] if isinstance(v, tuple) else v

    out = {}
    for f in dataclasses.fields(ScenarioSpec):
        v = getattr(spec, f.name)
        if f.name == "agents":
            v = [{g.name: lst(getattr(a, g.name)) for g in dataclasses.fields(AgentScript)} for a in v]
        elif f.name == "controls":
            v = [{g.name: lst(getattr(c, g.name)) for g in dataclasses.fields(TrafficControl)} for c in v]
        out[f.name] = lst(v)
    return out


def read_scenario(path: str | Path) -> ScenarioSpec:
    with open(path) as fh:
        return scenario_from_dict(json.load(fh))


def write_scenario(spec: ScenarioSpec, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(scenario_to_dict(spec), fh, indent=1)
        fh.write("\n")


def read_scenario_dir(path: str | Path) -> list[ScenarioSpec]:
    return [read_scenario(p) for p in sorted(Path(path).glob("*.json"))]


# ---------------------------------------------------------------------------
# Runtime state
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EgoState:
    x: float
    y: float
    heading: float
    speed: float


@dataclass(frozen=True)
class AgentState:
    x: float
    y: float
    heading: float
    speed: float
    s: float
    half_extents: tuple[float, float]


@dataclass(frozen=True)
class ControlState:
    """Current signal state plus the ego's history in the trigger region.

    ``was_inside`` and ``min_speed_inside`` summarise samples up to and
    including the previous ego position, which is what makes crossing
    detection a pure function of one state.
    """

    kind: str  # RedLight | GreenLight | StopSign
    pose: tuple[float, float, float]
    trigger: tuple[float, float]
    was_inside: bool = False
    min_speed_inside: float = math.inf

    def local(self, x: float, y: float) -> tuple[float, float]:
        u, w = to_local(np.array([x, y]), *self.pose)
        return float(u), float(w)

    def contains(self, x: float, y: float) -> bool:
        u, w = self.local(x, y)
        return abs(u) <= self.trigger[0] and abs(w) <= self.trigger[1]


@dataclass(frozen=True)
class WorldState:
    ego: EgoState
    agents: tuple[AgentState, ...]
    controls: tuple[ControlState, ...]
    spec: ScenarioSpec = field(repr=False, compare=False)
    t: float = 0.0
    step_index: int = 0
    prev_xy: tuple[float, float] = (0.0, 0.0)
    progress_arc: float = 0.0
    seed: int = 0

    def record(self) -> dict:
        """Plain-data snapshot used for traces and determinism checks."""
        return {
            "t": self.t,
            "step": self.step_index,
            "ego": [self.ego.x, self.ego.y, self.ego.heading, self.ego.speed],
            "agents": [[a.x, a.y, a.heading, a.speed, a.s] for a in self.agents],
            "controls": [[c.kind, c.was_inside, c.min_speed_inside if math.isfinite(c.min_speed_inside) else None]
                         for c in self.controls],
            "prev": list(self.prev_xy),
            "progress": self.progress_arc,
        }

    def serialize(self) -> bytes:
        return json.dumps(self.record(), sort_keys=True).encode()


@dataclass(frozen=True)
class StepResult:
    world: WorldState
    events: tuple[PenaltyEvent, ...]
    reached_destination: bool
    timed_out: bool
    done: bool
    reward: int
    ignored_events: tuple[PenaltyEvent, ...] = ()


def _agent_state(script: AgentScript, s: float, speed: float) -> AgentState:
    line = script.polyline
    p = line.point_at(script.start_s + s)
    h = line.heading_at(script.start_s + s)
    return AgentState(float(p[0]), float(p[1]), wrap_angle(h), float(speed), float(s), tuple(script.half_extents))


def load_scenario(spec: ScenarioSpec, seed: int) -> WorldState:
    """Initial world: ego at ``ego_start`` at rest, agents at their initial poses, t = 0."""
    spec.validate()
    x, y, h = (float(v) for v in spec.ego_start)
    agents = tuple(
        _agent_state(a, 0.0, 0.0 if a.behavior == "static" else a.profile_speed(0.0)) for a in spec.agents
    )
    controls = tuple(ControlState(c.state_at(0.0), tuple(c.pose), tuple(c.half_extents)) for c in spec.controls)
    world = WorldState(
        ego=EgoState(x, y, wrap_angle(h), 0.0),
        agents=agents,
        controls=controls,
        spec=spec,
        prev_xy=(x, y),
        seed=int(seed),
    )
    s, _, _ = spec.route_line.project((x, y))
    return dataclasses.replace(world, progress_arc=float(np.clip(s, 0.0, spec.route_line.length)))


# ---------------------------------------------------------------------------
# Predicates
# ---------------------------------------------------------------------------


def lane_bounds(spec: ScenarioSpec) -> tuple[float, float]:
    """Signed lateral extent of the drivable road around the route centre line."""
    w = spec.lane_width
    return -(spec.lanes_right + 0.5) * w, (spec.lanes_left + 0.5) * w


def detect_penalties(world: WorldState) -> list[PenaltyEvent]:
    """All penalty events present in ``world`` (pure)."""
    ego = world.ego
    spec = world.spec
    events = []
    ego_box = (ego.x, ego.y, ego.heading, *EGO_HALF_EXTENTS)
    for a in world.agents:
        if boxes_overlap(ego_box, (a.x, a.y, a.heading, *a.half_extents)):
            events.append(PenaltyEvent(PenaltyKind.Collision, world.t))
            break

    px, py = world.prev_xy
    red = stop = False
    for c in world.controls:
        u, w = c.local(ego.x, ego.y)
        hl, hw = c.trigger
        if c.kind == "RedLight" and not red:
            pu, pw = c.local(px, py)
            if pu <= hl < u and (abs(w) <= hw or abs(pw) <= hw):
                red = True
        elif c.kind == "StopSign" and not stop:
            if c.was_inside and u > hl and c.min_speed_inside >= STOP_SPEED:
                stop = True
    if red:
        events.append(PenaltyEvent(PenaltyKind.RedLight, world.t))

    _, lat, _ = spec.route_line.project((ego.x, ego.y))
    lo, hi = lane_bounds(spec)
    if abs(lat) > MAX_DEVIATION or not lo <= lat <= hi:
        events.append(PenaltyEvent(PenaltyKind.RouteDeviation, world.t))
    if stop:
        events.append(PenaltyEvent(PenaltyKind.StopSignViolation, world.t))
    return events


def route_progress(world: WorldState) -> float:
    """Fraction of route arc length covered so far (running maximum)."""
    line = world.spec.route_line
    s, _, _ = line.project((world.ego.x, world.ego.y))
    s = max(world.progress_arc, float(np.clip(s, 0.0, line.length)))
    return s / line.length


# ---------------------------------------------------------------------------
# Dynamics
# ---------------------------------------------------------------------------


def implied_speed(traj: Trajectory) -> float:
    """Speed one second ahead implied by the speed waypoints.

    Mean speed between the 0.5 s and 1.5 s waypoints; for a linear speed
    profile this equals the profile speed at t = 1 s, which offsets the
    first-order lag of the proportional speed loop.
    """
    sw = traj.speed_waypoints
    return float(np.hypot(*(sw[2] - sw[0])))


def _pure_pursuit(ego: EgoState, path_world: np.ndarray) -> float:
    local = to_local(path_world, ego.x, ego.y, ego.heading)
    dist = np.hypot(local[:, 0], local[:, 1])
    ok = np.nonzero((dist >= LOOKAHEAD) & (local[:, 0] > 0.0))[0]
    target = local[ok[0]] if len(ok) else local[-1]
    ld = float(np.hypot(*target))
    if ld < 1e-6:
        return 0.0
    alpha = math.atan2(target[1], target[0])
    delta = math.atan2(2.0 * WHEELBASE * math.sin(alpha), ld)
    return float(np.clip(delta, -MAX_STEER, MAX_STEER))


def _advance_agents(world: WorldState, h: float, t_new: float) -> tuple[AgentState, ...]:
    ego = world.ego
    out = []
    for script, a in zip(world.spec.agents, world.agents):
        if script.behavior == "static":
            out.append(a)
            continue
        target = script.profile_speed(t_new)
        v = a.speed
        if script.behavior == "reactive":
            du, dw = to_local(np.array([ego.x, ego.y]), a.x, a.y, a.heading)
            gap = du - a.half_extents[0] - EGO_HALF_EXTENTS[0]
            if -EGO_HALF_EXTENTS[0] < gap < 4.0 + 1.2 * v and abs(dw) < a.half_extents[1] + EGO_HALF_EXTENTS[1] + 0.5:
                v = max(0.0, v - 6.0 * h)
            else:
                v = min(target, v + 3.0 * h) if v < target else target
        else:
            v = target
        out.append(_agent_state(script, a.s + v * h, v))
    return tuple(out)


def _update_controls(world: WorldState, t_new: float) -> tuple[ControlState, ...]:
    ego = world.ego
    out = []
    for script, c in zip(world.spec.controls, world.controls):
        inside = c.contains(ego.x, ego.y)
        min_speed = min(c.min_speed_inside, ego.speed) if inside else math.inf
        out.append(ControlState(script.state_at(t_new), c.pose, c.trigger, inside, min_speed))
    return tuple(out)


def _check_traj(traj: Trajectory) -> None:
    if not (np.all(np.isfinite(traj.path_waypoints)) and np.all(np.isfinite(traj.speed_waypoints))):
        raise SimulationInputError("trajectory contains non-finite waypoints")


def step(world: WorldState, traj: Trajectory, dt: float = DECISION_DT,
         penalties: frozenset = ALL_PENALTIES) -> StepResult:
    """Execute ``traj`` (ego frame of ``world.ego``) for ``dt`` seconds.

    Integration runs in 0.1 s substeps and stops at the first substep that
    produces an enabled penalty event or reaches the destination. Penalty
    kinds outside ``penalties`` are reported as ``ignored_events`` and neither
    end the episode nor affect the reward.
    """
    if not (isinstance(dt, (int, float)) and math.isfinite(dt) and dt > 0):
        raise SimulationInputError(f"dt must be positive, got {dt!r}")
    _check_traj(traj)
    spec = world.spec
    ego0 = world.ego
    path_world = to_world(traj.path_waypoints, ego0.x, ego0.y, ego0.heading)
    v_ref = implied_speed(traj)
    n = max(1, int(math.ceil(dt / SUBSTEP - 1e-9)))
    h = dt / n
    line = spec.route_line

    events: list[PenaltyEvent] = []
    ignored: list[PenaltyEvent] = []
    reached = timed_out = False
    for _ in range(n):
        ego = world.ego
        delta = _pure_pursuit(ego, path_world) if ego.speed > 0.0 else 0.0
        v = ego.speed
        x = ego.x + v * math.cos(ego.heading) * h
        y = ego.y + v * math.sin(ego.heading) * h
        heading = wrap_angle(ego.heading + v / WHEELBASE * math.tan(delta) * h) if v > 0.0 else ego.heading
        acc = float(np.clip(SPEED_GAIN * (v_ref - v), -MAX_BRAKE, MAX_ACCEL))
        v_new = max(0.0, v + acc * h)
        if v_ref < 0.05 and v_new < 0.05:
            v_new = 0.0
        t_new = world.t + h
        controls = _update_controls(world, t_new)
        agents = _advance_agents(world, h, t_new)
        s, _, _ = line.project((x, y))
        world = WorldState(
            ego=EgoState(x, y, heading, v_new),
            agents=agents,
            controls=controls,
            spec=spec,
            t=t_new,
            step_index=world.step_index,
            prev_xy=(ego.x, ego.y),
            progress_arc=max(world.progress_arc, float(np.clip(s, 0.0, line.length))),
            seed=world.seed,
        )
        for e in detect_penalties(world):
            (events if e.kind in penalties else ignored).append(e)
        reached = line.length - world.progress_arc <= GOAL_TOLERANCE
        if events or reached:
            break
    world = dataclasses.replace(world, step_index=world.step_index + 1)
    timed_out = not (events or reached) and world.t >= spec.time_limit - 1e-9
    done = bool(events) or reached or timed_out
    if events:
        reward = -1
    elif reached:
        reward = 1
    else:
        reward = 0
    return StepResult(world, tuple(events), reached, timed_out, done, reward, tuple(ignored))


def write_trace(records: Sequence[dict], path: str | Path) -> None:
    """Line-delimited JSON episode trace."""
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def trace_record(result: StepResult) -> dict:
    w = result.world
    return {
        "t": round(w.t, 9),
        "ego": [w.ego.x, w.ego.y, w.ego.heading, w.ego.speed],
        "events": [e.kind.value for e in result.events],
        "ignored": [e.kind.value for e in result.ignored_events],
        "reward": result.reward,
    }
