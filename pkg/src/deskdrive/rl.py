"""Online RL stage: rollout collection, advantage estimation and PPO updates.

Collection fans episodes out over worker processes, each holding its own
simulator and a read-only copy of the policy; every (route, round) episode
draws from its own seed stream, so the merged buffer does not depend on the
worker count. Training is single-threaded: ``epochs`` passes over the whole
buffer in shuffled minibatches, minimising

    ppo_weight * clipped-surrogate loss + value_weight * value MSE
    + kl_weight * KL(reference || policy) - entropy_weight * entropy.
"""

from __future__ import annotations

import concurrent.futures as cf
import copy
import json
import math
import multiprocessing as mp
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path as FsPath
from typing import Sequence

import numpy as np
import torch

from .action_expert import Generator, TrajectoryDecoder
from .encoder import EMBED_DIM, SCHEMA, StateEmbedding, encode
from .meta import MetaAction, Path, Speed
from .policy import (DTYPE, DecisionPolicy, entropy_terms, forward, kl_terms, log_prob, sample)
from .sim import ALL_PENALTIES, PenaltyKind, ScenarioSpec, load_scenario, step

BUFFER_MAGIC = b"DDRB"
BUFFER_VERSION = 1


class CollectionError(RuntimeError):
    def __init__(self, scenario_id: str, cause: BaseException):
        super().__init__(f"rollout failed on scenario {scenario_id}: {cause!r}")
        self.scenario_id = scenario_id


class RLTrainingError(RuntimeError):
    """Non-finite loss; ``policy`` is the last finite checkpoint."""

    def __init__(self, message: str, policy: DecisionPolicy):
        super().__init__(message)
        self.policy = policy


@dataclass(frozen=True)
class TrainerConfig:
    gamma: float = 0.99
    lam: float = 1.0
    clip_epsilon: float = 0.2
    batch_size: int = 32
    value_weight: float = 0.5
    kl_weight: float = 0.5
    ppo_weight: float = 1.0
    entropy_weight: float = 0.0
    epochs: int = 10
    rollout_rounds: int = 2
    episodes_per_route: int = 16
    workers: int = 24
    learning_rate: float = 1e-3
    prepass_attempts: int = 5
    value_warmup_epochs: int = 30
    normalize_advantages: bool = True
    penalties: frozenset = ALL_PENALTIES
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if not self.clip_epsilon > 0:
            raise ValueError("clip_epsilon must be positive")
        for name in ("batch_size", "epochs", "rollout_rounds", "episodes_per_route", "workers", "prepass_attempts"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.value_warmup_epochs < 0:
            raise ValueError("value_warmup_epochs must be nonnegative")
        for name in ("value_weight", "kl_weight", "ppo_weight", "entropy_weight", "learning_rate"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        unknown = set(self.penalties) - set(ALL_PENALTIES)
        if unknown:
            raise ValueError(f"unknown penalty kinds {unknown}")


# ---------------------------------------------------------------------------
# Buffer types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Transition:
    emb: StateEmbedding
    action: MetaAction
    logprob: float
    value: float
    reward: int
    done: bool
    scenario_id: str


@dataclass(eq=False)
class Episode:
    """One route attempt. ``truncated`` marks a time-limit ending, bootstrapped with ``final_value``."""

    scenario_id: str
    round_index: int
    transitions: list[Transition] = field(default_factory=list)
    truncated: bool = False
    final_value: float = 0.0
    ignored: tuple[str, ...] = ()

    @property
    def rewards(self) -> np.ndarray:
        return np.array([t.reward for t in self.transitions], dtype=float)

    @property
    def values(self) -> np.ndarray:
        return np.array([t.value for t in self.transitions], dtype=float)

    @property
    def success(self) -> bool:
        return bool(self.transitions) and self.transitions[-1].reward == 1

    @property
    def bootstrap(self) -> float:
        return self.final_value if self.truncated else 0.0


@dataclass(eq=False)
class RolloutBuffer:
    episodes: list[Episode] = field(default_factory=list)
    round_index: int = 0

    def __len__(self) -> int:
        return sum(len(e.transitions) for e in self.episodes)

    def transitions(self) -> list[Transition]:
        return [t for e in self.episodes for t in e.transitions]


# ---------------------------------------------------------------------------
# Collection
# ---------------------------------------------------------------------------


def route_key(scenario_id: str) -> int:
    return zlib.crc32(scenario_id.encode())


def episode_rng(seed: int, scenario_id: str, round_index: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, route_key(scenario_id), round_index, stream]))


def run_episode(policy: DecisionPolicy, generator: Generator, spec: ScenarioSpec, rng: np.random.Generator,
                round_index: int = 0, penalties: frozenset = ALL_PENALTIES, seed: int = 0) -> Episode:
    """Sample decisions from ``policy`` until the episode ends."""
    world = load_scenario(spec, seed)
    ep = Episode(spec.id, round_index)
    ignored: list[str] = []
    while True:
        emb = encode(world)
        dist, value = forward(emb, policy)
        action, logprob = sample(dist, rng)
        result = step(world, generator.trajectory(world, action, emb), penalties=penalties)
        ignored.extend(e.kind.value for e in result.ignored_events)
        ep.transitions.append(Transition(emb, action, logprob, value, result.reward, result.done, spec.id))
        world = result.world
        if result.done:
            break
    if result.timed_out:
        ep.truncated = True
        ep.final_value = forward(encode(world), policy)[1]
    ep.ignored = tuple(ignored)
    return ep


def _job(args) -> Episode:
    policy, decoder, spec, seed, round_index, stream, penalties = args
    try:
        rng = episode_rng(seed, spec.id, round_index, stream)
        return run_episode(policy, Generator(decoder), spec, rng, round_index, penalties, seed)
    except Exception as exc:  # surfaced with the route id
        raise CollectionError(spec.id, exc) from exc


def _init_worker() -> None:
    torch.set_num_threads(1)


def _run_jobs(jobs: list, workers: int) -> list[Episode]:
    workers = max(1, min(workers, len(jobs)))
    if workers == 1:
        return [_job(j) for j in jobs]
    ctx = mp.get_context("spawn")
    with cf.ProcessPoolExecutor(max_workers=workers, mp_context=ctx, initializer=_init_worker) as pool:
        return list(pool.map(_job, jobs))


def _decoder_of(generator) -> TrajectoryDecoder | None:
    if isinstance(generator, Generator):
        return generator.decoder
    if isinstance(generator, TrajectoryDecoder):
        return generator
    if generator in (None, "oracle"):
        return None
    raise ValueError(f"unknown trajectory source {generator!r}")


def collect(policy: DecisionPolicy, generator, scenarios: Sequence[ScenarioSpec], cfg: TrainerConfig,
            round_index: int = 0, rounds: int | None = None) -> RolloutBuffer:
    """Sampled episodes with a frozen policy, merged in (route, round) order.

    Each route is run ``cfg.episodes_per_route`` times per round for ``rounds`` rounds starting at
    ``round_index`` (default: ``cfg.rollout_rounds`` rounds). The round index
    seeds each episode, so a round's episodes do not depend on the worker count.
    """
    if len(scenarios) == 0:
        raise ValueError("collect needs at least one scenario")
    rounds = cfg.rollout_rounds if rounds is None else rounds
    frozen = copy.deepcopy(policy).eval()
    decoder = _decoder_of(generator)
    jobs = [(frozen, decoder, spec, cfg.seed, r, k, cfg.penalties)
            for spec in scenarios for r in range(round_index, round_index + rounds)
            for k in range(cfg.episodes_per_route)]
    return RolloutBuffer(_run_jobs(jobs, cfg.workers), round_index)


PREPASS_STREAM = 1_000_003


def prepass(policy: DecisionPolicy, generator, scenarios: Sequence[ScenarioSpec],
            cfg: TrainerConfig) -> tuple[list[ScenarioSpec], list[Episode]]:
    """Sampled attempts on every route; returns the routes failed at least once and all attempts.

    Every penalty kind ends an attempt here regardless of ``cfg.penalties``.
    """
    frozen = copy.deepcopy(policy).eval()
    decoder = _decoder_of(generator)
    jobs = [(frozen, decoder, spec, cfg.seed, a, PREPASS_STREAM, ALL_PENALTIES)
            for spec in scenarios for a in range(cfg.prepass_attempts)]
    eps = _run_jobs(jobs, cfg.workers)
    n = cfg.prepass_attempts
    selected = [spec for i, spec in enumerate(scenarios) if not all(e.success for e in eps[i * n:(i + 1) * n])]
    return selected, eps


def select_failed_routes(policy: DecisionPolicy, generator, scenarios: Sequence[ScenarioSpec],
                         cfg: TrainerConfig) -> list[ScenarioSpec]:
    """Routes the policy fails in at least one of ``cfg.prepass_attempts`` sampled attempts."""
    return prepass(policy, generator, scenarios, cfg)[0]


# ---------------------------------------------------------------------------
# Advantages
# ---------------------------------------------------------------------------


def td_deltas_array(rewards, values, gamma: float, bootstrap: float = 0.0) -> np.ndarray:
    """delta_t = r_t + gamma * V(s_{t+1}) - V(s_t), with V after the last step = ``bootstrap``."""
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    nxt = np.append(v[1:], bootstrap)
    return r + gamma * nxt - v


def td_deltas(episode: Episode, gamma: float) -> np.ndarray:
    return td_deltas_array(episode.rewards, episode.values, gamma, episode.bootstrap)


def gae(deltas, gamma: float, lam: float) -> np.ndarray:
    """Backward recursion G_t = delta_t + gamma * lam * G_{t+1}, G_T = 0."""
    d = np.asarray(deltas, dtype=float)
    out = np.empty_like(d)
    acc = 0.0
    for t in range(len(d) - 1, -1, -1):
        acc = d[t] + gamma * lam * acc
        out[t] = acc
    return out


@dataclass(frozen=True)
class AdvantageEstimates:
    delta: np.ndarray
    gae: np.ndarray
    return_target: np.ndarray


def advantages(episode: Episode, gamma: float, lam: float) -> AdvantageEstimates:
    d = td_deltas(episode, gamma)
    g = gae(d, gamma, lam)
    return AdvantageEstimates(d, g, g + episode.values)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Minibatch:
    emb: torch.Tensor
    speed: torch.Tensor
    path: torch.Tensor
    old_logprob: torch.Tensor
    advantage: torch.Tensor
    return_target: torch.Tensor

    def __len__(self) -> int:
        return len(self.emb)

    def take(self, idx) -> "Minibatch":
        return Minibatch(*(getattr(self, f)[idx] for f in
                           ("emb", "speed", "path", "old_logprob", "advantage", "return_target")))


def make_minibatch(emb, speed, path, old_logprob, advantage, return_target) -> Minibatch:
    return Minibatch(torch.as_tensor(np.asarray(emb, dtype=float), dtype=DTYPE),
                     torch.as_tensor(np.asarray(speed), dtype=torch.long),
                     torch.as_tensor(np.asarray(path), dtype=torch.long),
                     torch.as_tensor(np.asarray(old_logprob, dtype=float), dtype=DTYPE),
                     torch.as_tensor(np.asarray(advantage, dtype=float), dtype=DTYPE),
                     torch.as_tensor(np.asarray(return_target, dtype=float), dtype=DTYPE))


def buffer_minibatch(buffer: RolloutBuffer, gamma: float, lam: float) -> Minibatch:
    """All transitions with their raw advantages and value targets."""
    emb, sp, pa, lp, adv, ret = [], [], [], [], [], []
    for ep in buffer.episodes:
        est = advantages(ep, gamma, lam)
        for t, g, r in zip(ep.transitions, est.gae, est.return_target):
            emb.append(t.emb.values)
            sp.append(int(t.action[0]))
            pa.append(int(t.action[1]))
            lp.append(t.logprob)
            adv.append(g)
            ret.append(r)
    return make_minibatch(np.reshape(emb, (-1, EMBED_DIM)), sp, pa, lp, adv, ret)


def standardize_advantages(mb: Minibatch) -> Minibatch:
    """Zero-mean, unit-variance advantages; an all-zero batch stays all zero."""
    a = mb.advantage
    return replace(mb, advantage=(a - a.mean()) / (a.std(unbiased=False) + 1e-8))


def ppo_objective_terms(new_logprob: torch.Tensor, old_logprob: torch.Tensor, advantage: torch.Tensor,
                        eps: float) -> torch.Tensor:
    """Per-sample min(rho * G, clip(rho, 1-eps, 1+eps) * G)."""
    rho = torch.exp(new_logprob - old_logprob)
    return torch.minimum(rho * advantage, torch.clamp(rho, 1.0 - eps, 1.0 + eps) * advantage)


def _heads(mb: Minibatch, params: DecisionPolicy):
    return params(mb.emb)


def ppo_loss(mb: Minibatch, params: DecisionPolicy, cfg: TrainerConfig, heads=None) -> torch.Tensor:
    """Negated mean clipped surrogate (a quantity to minimise)."""
    ls, lp, _ = heads if heads is not None else _heads(mb, params)
    new = log_prob(ls, lp, mb.speed, mb.path)
    return -ppo_objective_terms(new, mb.old_logprob, mb.advantage, cfg.clip_epsilon).mean()


def value_loss(mb: Minibatch, params: DecisionPolicy, heads=None) -> torch.Tensor:
    _, _, v = heads if heads is not None else _heads(mb, params)
    return ((v - mb.return_target) ** 2).mean()


def kl_loss(mb: Minibatch, params: DecisionPolicy, ref: DecisionPolicy, heads=None) -> torch.Tensor:
    """Mean over states of KL(reference || policy), both heads summed."""
    ls, lp, _ = heads if heads is not None else _heads(mb, params)
    with torch.no_grad():
        rs, rp, _ = ref(mb.emb)
    return kl_terms(ls, lp, rs, rp).mean()


def total_loss(mb: Minibatch, params: DecisionPolicy, ref: DecisionPolicy, cfg: TrainerConfig):
    """``(total, parts)`` for one minibatch; parts are detached floats plus the clip fraction."""
    heads = _heads(mb, params)
    l_ppo = ppo_loss(mb, params, cfg, heads)
    l_v = value_loss(mb, params, heads)
    l_kl = kl_loss(mb, params, ref, heads)
    ent = entropy_terms(heads[0], heads[1]).mean()
    total = cfg.ppo_weight * l_ppo + cfg.value_weight * l_v + cfg.kl_weight * l_kl - cfg.entropy_weight * ent
    with torch.no_grad():
        rho = torch.exp(log_prob(heads[0], heads[1], mb.speed, mb.path) - mb.old_logprob)
        clipped = ((rho - 1.0).abs() > cfg.clip_epsilon).double().mean()
    parts = {"ppo": l_ppo.item(), "value": l_v.item(), "kl": l_kl.item(), "entropy": ent.item(),
             "clip_fraction": clipped.item()}
    return total, parts


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def train_rl(buffer: RolloutBuffer, policy: DecisionPolicy, ref: DecisionPolicy, cfg: TrainerConfig,
             log=None, round_index: int = 0) -> tuple[DecisionPolicy, list[dict]]:
    """``cfg.epochs`` shuffled passes over the buffer; returns a trained copy and per-epoch metrics."""
    if len(buffer) == 0:
        raise ValueError("train_rl needs a non-empty buffer")
    cfg.validate()
    policy = copy.deepcopy(policy)
    data = buffer_minibatch(buffer, cfg.gamma, cfg.lam)
    if cfg.normalize_advantages:
        data = standardize_advantages(data)
    opt = torch.optim.Adam(policy.parameters(), lr=cfg.learning_rate)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5EED]))
    n = len(data)
    history = []
    last_good = copy.deepcopy(policy)
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        sums: dict[str, float] = {}
        for start in range(0, n, cfg.batch_size):
            mb = data.take(torch.as_tensor(perm[start:start + cfg.batch_size]))
            total, parts = total_loss(mb, policy, ref, cfg)
            if not torch.isfinite(total):
                raise RLTrainingError(f"non-finite RL loss at epoch {epoch}", last_good)
            opt.zero_grad()
            total.backward()
            opt.step()
            parts["total"] = total.item()
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v * len(mb)
        row = {"round": round_index, "epoch": epoch, **{k: v / n for k, v in sums.items()}}
        with torch.no_grad():
            ls, lp, _ = policy(data.emb)
            rs, rp, _ = ref(data.emb)
            row["mean_kl"] = kl_terms(ls, lp, rs, rp).mean().item()
            row["mean_entropy"] = entropy_terms(ls, lp).mean().item()
        history.append(row)
        if log is not None:
            log(row)
        last_good = copy.deepcopy(policy)
    return policy, history


def warmup_value(policy: DecisionPolicy, episodes: Sequence[Episode], cfg: TrainerConfig,
                 log=None) -> DecisionPolicy:
    """Fit only the value head to the returns of ``episodes``; trunk and decision heads stay bitwise fixed.

    Run before the first collection so the stored values are a usable
    baseline rather than the untrained head's output.
    """
    policy = copy.deepcopy(policy)
    if cfg.value_warmup_epochs == 0 or not episodes:
        return policy
    data = buffer_minibatch(RolloutBuffer(list(episodes)), cfg.gamma, cfg.lam)
    opt = torch.optim.Adam(policy.value_head.parameters(), lr=cfg.learning_rate)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7A1E]))
    for epoch in range(cfg.value_warmup_epochs):
        perm = rng.permutation(len(data))
        for start in range(0, len(data), cfg.batch_size):
            mb = data.take(torch.as_tensor(perm[start:start + cfg.batch_size]))
            opt.zero_grad()
            value_loss(mb, policy).backward()
            opt.step()
        if log is not None:
            with torch.no_grad():
                log({"warmup_epoch": epoch, "value": value_loss(data, policy).item()})
    return policy


@dataclass(eq=False)
class RLRun:
    policy: DecisionPolicy
    buffers: list[RolloutBuffer]
    history: list[dict]
    selected: list[str]

    @property
    def buffer(self) -> RolloutBuffer:
        """All rounds' episodes in collection order."""
        return RolloutBuffer([e for b in self.buffers for e in b.episodes], 0)


def run_rl(policy: DecisionPolicy, ref: DecisionPolicy, generator, scenarios: Sequence[ScenarioSpec],
           cfg: TrainerConfig, selected: Sequence[ScenarioSpec] | None = None, log=None,
           warmup: Sequence[Episode] = ()) -> RLRun:
    """Failed-route pre-pass (unless ``selected`` is given), value warm-up, then alternating rounds.

    The pre-pass attempts double as the warm-up data; pass them as ``warmup``
    when supplying ``selected`` yourself. Every round collects
    ``cfg.episodes_per_route`` episodes per selected route with the current
    policy and trains ``cfg.epochs`` epochs on that round's buffer only.
    History rows carry a ``round`` field.
    """
    if selected is None:
        selected, warmup = prepass(policy, generator, scenarios, cfg)
    if not selected:
        return RLRun(copy.deepcopy(policy), [], [], [])
    policy = warmup_value(policy, warmup, cfg)
    buffers, history = [], []
    for r in range(cfg.rollout_rounds):
        buffer = collect(policy, generator, selected, cfg, round_index=r, rounds=1)
        round_cfg = replace(cfg, seed=cfg.seed + 7919 * r)
        policy, rows = train_rl(buffer, policy, ref, round_cfg, log=log, round_index=r)
        buffers.append(buffer)
        history.extend(rows)
    return RLRun(policy, buffers, history, [s.id for s in selected])


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------


STEP_DTYPE = np.dtype([
    ("emb", "<f8", (EMBED_DIM,)),
    ("frame_t", "<f8"),
    ("speed", "u1"),
    ("path", "u1"),
    ("logprob", "<f8"),
    ("value", "<f8"),
    ("reward", "i1"),
    ("done", "u1"),
])


def buffer_bytes(buffer: RolloutBuffer) -> bytes:
    schema = SCHEMA.encode()
    out = [BUFFER_MAGIC, struct.pack("<HI", BUFFER_VERSION, len(schema)), schema,
           struct.pack("<II", buffer.round_index, len(buffer.episodes))]
    for ep in buffer.episodes:
        sid = ep.scenario_id.encode()
        ign = ",".join(ep.ignored).encode()
        out.append(struct.pack("<H", len(sid)) + sid)
        out.append(struct.pack("<IBd", ep.round_index, int(ep.truncated), ep.final_value))
        out.append(struct.pack("<H", len(ign)) + ign)
        arr = np.zeros(len(ep.transitions), dtype=STEP_DTYPE)
        for i, t in enumerate(ep.transitions):
            arr[i] = (t.emb.values, t.emb.frame_t, int(t.action[0]), int(t.action[1]), t.logprob, t.value,
                      t.reward, int(t.done))
        out.append(struct.pack("<I", len(arr)) + arr.tobytes())
    return b"".join(out)


def buffer_from_bytes(data: bytes) -> RolloutBuffer:
    if data[:4] != BUFFER_MAGIC:
        raise ValueError("not a rollout buffer file")
    version, slen = struct.unpack_from("<HI", data, 4)
    if version != BUFFER_VERSION:
        raise ValueError(f"unsupported buffer version {version}")
    off = 10
    if data[off:off + slen].decode() != SCHEMA:
        raise ValueError("embedding schema mismatch")
    off += slen
    round_index, n_ep = struct.unpack_from("<II", data, off)
    off += 8
    episodes = []
    for _ in range(n_ep):
        (ln,) = struct.unpack_from("<H", data, off)
        off += 2
        sid = data[off:off + ln].decode()
        off += ln
        r, trunc, fv = struct.unpack_from("<IBd", data, off)
        off += struct.calcsize("<IBd")
        (ln,) = struct.unpack_from("<H", data, off)
        off += 2
        ign = data[off:off + ln].decode()
        off += ln
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        arr = np.frombuffer(data, dtype=STEP_DTYPE, count=n, offset=off)
        off += n * STEP_DTYPE.itemsize
        trans = [Transition(StateEmbedding(np.array(a["emb"]), float(a["frame_t"])),
                            MetaAction(Speed(int(a["speed"])), Path(int(a["path"]))), float(a["logprob"]),
                            float(a["value"]), int(a["reward"]), bool(a["done"]), sid) for a in arr]
        episodes.append(Episode(sid, r, trans, bool(trunc), fv, tuple(ign.split(",")) if ign else ()))
    return RolloutBuffer(episodes, round_index)


def write_buffer(buffer: RolloutBuffer, path: str | FsPath) -> None:
    FsPath(path).write_bytes(buffer_bytes(buffer))


def read_buffer(path: str | FsPath) -> RolloutBuffer:
    return buffer_from_bytes(FsPath(path).read_bytes())


def write_metrics(rows: Sequence[dict], path: str | FsPath) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def penalty_set(names: Sequence[str]) -> frozenset:
    return frozenset(PenaltyKind(n) for n in names)


def with_overrides(cfg: TrainerConfig, **kw) -> TrainerConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
