"""Meta-action -> trajectory generation.

Two generators share one contract: the procedural :func:`oracle_trajectory`
(which also supervises imitation) and the learned :class:`TrajectoryDecoder`,
a latent-variable model whose GRU rollout emits path headings and speed
distances that are integrated into waypoints.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
import torch
from torch import nn

from .encoder import EMBED_DIM, StateEmbedding, encode
from .geometry import Polyline, to_local
from .meta import ALL_ACTIONS, N_JOINT, N_PATH, N_SPEED, MetaAction, Path, Speed
from .sim import WorldState
from .trajectory import N_PATH_POINTS, N_SPEED_POINTS, SPEED_INTERVAL, Trajectory

TURN_RADIUS = 8.0
LANE_CHANGE_LENGTH = 20.0
SPEED_BANDS = {
    Speed.Stop: 0.0,
    Speed.MaintainSlowSpeed: 2.0,
    Speed.MaintainModerateSpeed: 5.0,
    Speed.MaintainFastSpeed: 8.0,
}
ACCEL = 2.0
RAPID_ACCEL = 4.0
DTYPE = torch.float64
# sharp softplus on interval distances so a full stop is reachable
SPEED_SHARPNESS = 10.0


class SelectionError(RuntimeError):
    pass


class DecoderError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Procedural generator
# ---------------------------------------------------------------------------


def speed_target(speed: Speed, v0: float) -> tuple[float, float]:
    """``(target speed, |acceleration|)`` for a longitudinal meta-action."""
    if speed in SPEED_BANDS:
        return SPEED_BANDS[speed], ACCEL
    if speed is Speed.SpeedUp:
        return v0 + 2.0, ACCEL
    if speed is Speed.SlowDown:
        return max(v0 - 2.0, 0.0), ACCEL
    return max(v0 - 4.0, 0.0), RAPID_ACCEL


def speed_profile_distances(speed: Speed, v0: float) -> np.ndarray:
    """Distance travelled at 0.5 s, 1.0 s, ..., 3.0 s under a ramp toward the target."""
    v0 = max(float(v0), 0.0)
    target, a = speed_target(speed, v0)
    t = SPEED_INTERVAL * np.arange(1, N_SPEED_POINTS + 1)
    if target == v0:
        return v0 * t
    sign = 1.0 if target > v0 else -1.0
    t_reach = abs(target - v0) / a
    ramp = v0 * t + 0.5 * sign * a * t**2
    s_reach = v0 * t_reach + 0.5 * sign * a * t_reach**2
    return np.where(t <= t_reach, ramp, s_reach + target * (t - t_reach))


def _arc(sign: float) -> np.ndarray:
    phi = 2.0 * math.asin(0.5 / TURN_RADIUS)
    ang = phi * np.arange(1, N_PATH_POINTS + 1)
    return np.stack([TURN_RADIUS * np.sin(ang), sign * TURN_RADIUS * (1.0 - np.cos(ang))], axis=1)


def _smoothstep(u):
    return 3.0 * u**2 - 2.0 * u**3


def _lane_change(world: WorldState, direction: int) -> np.ndarray:
    """Cubic lateral blend to the adjacent lane centre (one lane width over 20 m of route).

    The blend lives in route coordinates and resumes at the fraction of the
    change already completed, so issuing the same lane change on consecutive
    ticks traces one continuous manoeuvre instead of restarting it.
    """
    spec = world.spec
    ego = world.ego
    line = spec.route_line
    w = spec.lane_width
    s0, lat0, _ = line.project((ego.x, ego.y))
    lane = analyze_lane(world)
    target = (lane + direction) * w
    done = float(np.clip(direction * (lat0 - lane * w) / w, 0.0, 1.0 - 1e-9))
    u0 = 0.5 - math.sin(math.asin(1.0 - 2.0 * done) / 3.0)
    s = s0 + np.linspace(0.0, 2.0 * LANE_CHANGE_LENGTH, 201)
    u = np.clip(u0 + (s - s0) / LANE_CHANGE_LENGTH, 0.0, 1.0)
    frac = (_smoothstep(u) - _smoothstep(u0)) / (1.0 - _smoothstep(u0))
    d = lat0 + (target - lat0) * frac
    pts = np.empty((len(s), 2))
    for k, (sk, dk) in enumerate(zip(s, d)):
        h = line.heading_at(float(sk))
        pts[k] = line.point_at(float(sk)) + dk * np.array([-math.sin(h), math.cos(h)])
    walk = Polyline(pts).chord_walk(0.0, N_PATH_POINTS)
    return to_local(walk, ego.x, ego.y, ego.heading)


_STRAIGHT = np.stack([np.arange(1.0, N_PATH_POINTS + 1), np.zeros(N_PATH_POINTS)], axis=1)
_LEFT_ARC = _arc(1.0)
_RIGHT_ARC = _arc(-1.0)


def oracle_path(world: WorldState, path: Path) -> np.ndarray:
    if path is Path.Straight:
        return _STRAIGHT.copy()
    if path is Path.TurnLeft:
        return _LEFT_ARC.copy()
    if path is Path.TurnRight:
        return _RIGHT_ARC.copy()
    if path is Path.ChangeLaneLeft:
        return _lane_change(world, 1)
    if path is Path.ChangeLaneRight:
        return _lane_change(world, -1)
    ego = world.ego
    scene_lane = analyze_lane(world)
    line = world.spec.lane_lines[scene_lane]
    s0, _, _ = line.project((ego.x, ego.y))
    pts = line.chord_walk(s0, N_PATH_POINTS)
    return to_local(pts, ego.x, ego.y, ego.heading)


def analyze_lane(world: WorldState) -> int:
    spec = world.spec
    _, lat, _ = spec.route_line.project((world.ego.x, world.ego.y))
    return int(np.clip(round(lat / spec.lane_width), -spec.lanes_right, spec.lanes_left))


def speed_waypoints_along(path: np.ndarray, distances: np.ndarray) -> np.ndarray:
    line = Polyline(np.vstack([[0.0, 0.0], path]))
    return np.array([line.point_at(float(d)) for d in distances])


def oracle_trajectory(world: WorldState, meta: MetaAction) -> Trajectory:
    meta = MetaAction(Speed(meta[0]), Path(meta[1]))
    path = oracle_path(world, meta.path)
    dist = speed_profile_distances(meta.speed, world.ego.speed)
    return Trajectory(path, speed_waypoints_along(path, dist))


def feasible(world: WorldState, meta: MetaAction) -> bool:
    """Lane changes need an adjacent lane; every other primitive is always defined."""
    if meta.path not in (Path.ChangeLaneLeft, Path.ChangeLaneRight):
        return True
    lane = analyze_lane(world)
    spec = world.spec
    if meta.path is Path.ChangeLaneLeft:
        return lane + 1 <= spec.lanes_left
    return lane - 1 >= -spec.lanes_right


def feasibility_mask(world: WorldState) -> np.ndarray:
    lane = analyze_lane(world)
    spec = world.spec
    mask = np.ones((N_SPEED, N_PATH), dtype=bool)
    mask[:, Path.ChangeLaneLeft] = lane + 1 <= spec.lanes_left
    mask[:, Path.ChangeLaneRight] = lane - 1 >= -spec.lanes_right
    return mask.ravel()


# ---------------------------------------------------------------------------
# Learned generator
# ---------------------------------------------------------------------------


def _init_uniform(module: nn.Module, gen: torch.Generator) -> None:
    for m in module.modules():
        if isinstance(m, nn.Linear):
            bound = 1.0 / math.sqrt(m.in_features)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=gen)
                m.bias.uniform_(-bound, bound, generator=gen)
        elif isinstance(m, nn.GRUCell):
            bound = 1.0 / math.sqrt(m.hidden_size)
            with torch.no_grad():
                for p in m.parameters():
                    p.uniform_(-bound, bound, generator=gen)


def one_hot_meta(speed_idx: torch.Tensor, path_idx: torch.Tensor) -> torch.Tensor:
    return torch.cat([nn.functional.one_hot(speed_idx, N_SPEED), nn.functional.one_hot(path_idx, N_PATH)],
                     dim=-1).to(DTYPE)


def interpolate_along(path: torch.Tensor, arc: torch.Tensor) -> torch.Tensor:
    """Points at arc lengths ``arc`` (B, M) along origin + ``path`` (B, N, 2), extrapolating the last segment."""
    b = path.shape[0]
    pts = torch.cat([path.new_zeros(b, 1, 2), path], dim=1)
    seg = pts[:, 1:] - pts[:, :-1]
    seg_len = torch.sqrt((seg**2).sum(-1) + 1e-12)
    cum = torch.cat([path.new_zeros(b, 1), torch.cumsum(seg_len, dim=1)], dim=1)
    idx = torch.searchsorted(cum.detach().contiguous(), arc.detach().contiguous(), right=True) - 1
    idx = idx.clamp(0, seg.shape[1] - 1)
    start = torch.gather(pts[:, :-1], 1, idx.unsqueeze(-1).expand(-1, -1, 2))
    direction = torch.gather(seg, 1, idx.unsqueeze(-1).expand(-1, -1, 2))
    length = torch.gather(seg_len, 1, idx)
    base = torch.gather(cum, 1, idx)
    frac = (arc - base) / length
    return start + direction * frac.unsqueeze(-1)


class TrajectoryDecoder(nn.Module):
    """Condition -> N(mu, sigma^2) latent -> GRU rollout -> waypoints.

    The condition is the state embedding concatenated with the one-hot
    meta-action. At each of the 20 recurrent steps the path head emits a
    heading increment (the path advances 1 m along the accumulated heading)
    and, for the first 6 steps, the speed head emits the distance covered in
    that 0.5 s interval; speed waypoints are then placed along the decoded
    path. A linear start head sets the path origin offset and initial heading
    so lane following can re-centre.
    """

    def __init__(self, embed_dim: int = EMBED_DIM, latent_dim: int = 8, hidden: int = 64,
                 cond_hidden: int = 128, seed: int = 0):
        super().__init__()
        self.dims = {"embed_dim": embed_dim, "latent_dim": latent_dim, "hidden": hidden, "cond_hidden": cond_hidden}
        self.cond = nn.Sequential(nn.Linear(embed_dim + N_SPEED + N_PATH, cond_hidden, dtype=DTYPE), nn.Tanh(),
                                  nn.Linear(cond_hidden, cond_hidden, dtype=DTYPE), nn.Tanh())
        self.mu = nn.Linear(cond_hidden, latent_dim, dtype=DTYPE)
        self.logvar = nn.Linear(cond_hidden, latent_dim, dtype=DTYPE)
        self.init_h = nn.Linear(latent_dim, hidden, dtype=DTYPE)
        self.cell = nn.GRUCell(latent_dim, hidden, dtype=DTYPE)
        self.path_head = nn.Linear(hidden, 1, dtype=DTYPE)
        self.speed_head = nn.Linear(hidden, 1, dtype=DTYPE)
        self.start_head = nn.Linear(latent_dim, 3, dtype=DTYPE)
        gen = torch.Generator().manual_seed(seed)
        _init_uniform(self, gen)

    def encode_condition(self, emb: torch.Tensor, speed_idx: torch.Tensor, path_idx: torch.Tensor):
        c = self.cond(torch.cat([emb, one_hot_meta(speed_idx, path_idx)], dim=-1))
        return self.mu(c), self.logvar(c)

    def rollout(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = torch.tanh(self.init_h(z))
        dtheta, dist = [], []
        for k in range(N_PATH_POINTS):
            h = self.cell(z, h)
            dtheta.append(self.path_head(h))
            if k < N_SPEED_POINTS:
                dist.append(self.speed_head(h))
        start = self.start_head(z)
        theta = start[:, 2:3] + torch.cumsum(torch.cat(dtheta, dim=1), dim=1)
        steps = torch.stack([torch.cos(theta), torch.sin(theta)], dim=-1)
        path = start[:, None, :2] + torch.cumsum(steps, dim=1)
        arc = torch.cumsum(2.0 * nn.functional.softplus(torch.cat(dist, dim=1), beta=SPEED_SHARPNESS), dim=1)
        return path, interpolate_along(path, arc)

    def forward(self, emb, speed_idx, path_idx, eps: torch.Tensor | None = None):
        """Returns ``(path (B,20,2), speed (B,6,2), mu, logvar)``; ``eps=None`` decodes the mean."""
        mu, logvar = self.encode_condition(emb, speed_idx, path_idx)
        z = mu if eps is None else mu + torch.exp(0.5 * logvar) * eps
        path, speed = self.rollout(z)
        return path, speed, mu, logvar


def _check_finite_params(module: nn.Module) -> None:
    for p in module.parameters():
        if not torch.isfinite(p).all():
            raise DecoderError("decoder parameters contain non-finite values")


def decode_batch(embs: np.ndarray, metas, params: TrajectoryDecoder,
                 rng: np.random.Generator | None = None, deterministic: bool = True) -> list[Trajectory]:
    _check_finite_params(params)
    embs = torch.as_tensor(np.atleast_2d(embs), dtype=DTYPE)
    si = torch.tensor([int(m[0]) for m in metas])
    pi = torch.tensor([int(m[1]) for m in metas])
    eps = None
    if not deterministic:
        if rng is None:
            raise ValueError("stochastic decoding needs an rng")
        eps = torch.as_tensor(rng.standard_normal((len(metas), params.dims["latent_dim"])), dtype=DTYPE)
    with torch.no_grad():
        path, speed, _, _ = params(embs, si, pi, eps)
    return [Trajectory(p.numpy(), s.numpy()) for p, s in zip(path, speed)]


def decode(emb: StateEmbedding, meta: MetaAction, params: TrajectoryDecoder,
           rng: np.random.Generator | None = None, deterministic: bool = False) -> Trajectory:
    """Sample z by reparameterisation (or take the mean) and roll out one trajectory."""
    return decode_batch(emb.values[None], [meta], params, rng, deterministic)[0]


# ---------------------------------------------------------------------------
# Candidate set and selection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CandidateEntry:
    action: MetaAction
    trajectory: Trajectory
    feasible: bool


@dataclass(frozen=True)
class CandidateSet:
    entries: tuple[CandidateEntry, ...]

    @property
    def mask(self) -> np.ndarray:
        return np.array([e.feasible for e in self.entries])


Source = Literal["oracle", "decoder"]


class Generator:
    """Uniform front end over the two trajectory sources."""

    def __init__(self, decoder: TrajectoryDecoder | None = None):
        self.decoder = decoder

    @property
    def source(self) -> Source:
        return "oracle" if self.decoder is None else "decoder"

    def trajectory(self, world: WorldState, meta: MetaAction, emb: StateEmbedding | None = None) -> Trajectory:
        if self.decoder is None:
            return oracle_trajectory(world, meta)
        if emb is None:
            emb = encode(world)
        return decode_batch(emb.values[None], [meta], self.decoder)[0]


def candidate_set(world: WorldState, source: Source | TrajectoryDecoder = "oracle") -> CandidateSet:
    """One trajectory per joint meta-action, with infeasible entries flagged."""
    mask = feasibility_mask(world)
    if isinstance(source, TrajectoryDecoder):
        trajs = decode_batch(np.repeat(encode(world).values[None], N_JOINT, axis=0), ALL_ACTIONS, source)
    elif source == "oracle":
        trajs = [oracle_trajectory(world, a) for a in ALL_ACTIONS]
    else:
        raise ValueError("decoder source needs a TrajectoryDecoder instance")
    return CandidateSet(tuple(CandidateEntry(a, t, bool(m)) for a, t, m in zip(ALL_ACTIONS, trajs, mask)))


def select_index(joint_probs: np.ndarray, mask: np.ndarray) -> int:
    """Argmax of the joint score over feasible entries, lowest index on ties."""
    if not mask.any():
        raise SelectionError("no feasible candidate")
    scores = np.where(mask, joint_probs, -np.inf)
    return int(np.argmax(scores))


def select_optimal(cands: CandidateSet, dist) -> tuple[MetaAction, Trajectory]:
    """Pick the feasible candidate maximising p(speed) * p(path)."""
    i = select_index(dist.joint(), cands.mask)
    e = cands.entries[i]
    return e.action, e.trajectory
