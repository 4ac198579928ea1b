"""Closed-loop evaluation, driving-score arithmetic and ablation runners."""

from __future__ import annotations

import concurrent.futures as cf
import csv
import io
import json
import math
import multiprocessing as mp
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
import torch

from .action_expert import Generator, TrajectoryDecoder, feasibility_mask, select_index
from .encoder import encode
from .meta import MetaAction
from .policy import DecisionPolicy, forward
from .rl import RLRun, TrainerConfig, _decoder_of, prepass, run_rl
from .sim import CATEGORIES, PenaltyKind, ScenarioSpec, load_scenario, route_progress, step

REPORT_SCHEMA = "deskdrive-eval/v1"
INFRACTION_MULTIPLIER = {
    PenaltyKind.Collision: 0.60,
    PenaltyKind.RedLight: 0.70,
    PenaltyKind.StopSignViolation: 0.80,
    PenaltyKind.RouteDeviation: 1.00,
}
CATEGORY_SHORT = {"Merging": "M", "Overtaking": "O", "EmergencyBrake": "EB", "GiveWay": "GW", "TrafficSign": "TS"}
PENALTY_SHORT = {PenaltyKind.Collision: "C", PenaltyKind.RedLight: "TL", PenaltyKind.RouteDeviation: "RD",
                 PenaltyKind.StopSignViolation: "S"}
PENALTY_ORDER = (PenaltyKind.Collision, PenaltyKind.RedLight, PenaltyKind.RouteDeviation,
                 PenaltyKind.StopSignViolation)
REGULARIZATION_VARIANTS = ("PPO-Vanilla", "PPO-Entropy", "PPO-KL")


def driving_score(route_completion: float, infractions: Iterable) -> float:
    """100 * completion * product of the per-infraction multipliers."""
    if not 0.0 <= route_completion <= 1.0:
        raise ValueError("route_completion must lie in [0, 1]")
    score = 100.0 * route_completion
    for kind in infractions:
        score *= INFRACTION_MULTIPLIER[PenaltyKind(kind)]
    return score


@dataclass(frozen=True)
class RouteResult:
    scenario_id: str
    category: str
    route_completion: float
    infractions: tuple[str, ...]
    success: bool
    duration: float
    split: str = "other"
    error: str | None = None

    @property
    def driving_score(self) -> float:
        return driving_score(self.route_completion, self.infractions)


@dataclass(eq=False)
class EvalReport:
    routes: list[RouteResult]
    ds: float
    sr: float
    ability_means: dict[str, float]
    mean_ability: float
    splits: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "ds": self.ds,
            "sr": self.sr,
            "ability_means": self.ability_means,
            "mean_ability": self.mean_ability,
            "splits": self.splits,
            "routes": [dict(asdict(r), driving_score=r.driving_score) for r in self.routes],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scenario_id", "category", "split", "route_completion", "driving_score", "success",
                    "infractions", "duration", "error"])
        for r in self.routes:
            w.writerow([r.scenario_id, r.category, r.split, repr(r.route_completion), repr(r.driving_score),
                        int(r.success), ";".join(r.infractions), repr(r.duration), r.error or ""])
        return buf.getvalue()


def _aggregate(routes: Sequence[RouteResult]) -> tuple[float, float]:
    if not routes:
        return math.nan, math.nan
    return (float(np.mean([r.driving_score for r in routes])),
            100.0 * sum(r.success for r in routes) / len(routes))


def build_report(routes: Sequence[RouteResult]) -> EvalReport:
    """Aggregate DS, SR and per-category success percentages from per-route results."""
    ds, sr = _aggregate(routes)
    ability = {}
    for cat in CATEGORIES:
        rs = [r for r in routes if r.category == cat]
        if rs:
            ability[cat] = 100.0 * sum(r.success for r in rs) / len(rs)
    mean_ability = float(np.mean(list(ability.values()))) if ability else math.nan
    splits = {}
    for tag in sorted({r.split for r in routes}):
        rs = [r for r in routes if r.split == tag]
        sds, ssr = _aggregate(rs)
        splits[tag] = {"n": len(rs), "ds": sds, "sr": ssr}
    return EvalReport(list(routes), ds, sr, ability, mean_ability, splits)


def choose_action(world, emb, policy: DecisionPolicy) -> MetaAction:
    """Greedy feasible decision: argmax of p(speed) * p(path) over the feasibility mask.

    Equivalent to ``select_optimal(candidate_set(world, ...), dist)`` but only
    the chosen trajectory is generated.
    """
    dist, _ = forward(emb, policy)
    return MetaAction.from_index(select_index(dist.joint(), feasibility_mask(world)))


def run_route(policy: DecisionPolicy, generator: Generator, spec: ScenarioSpec, seed: int,
              split: str = "other") -> RouteResult:
    world = load_scenario(spec, seed)
    try:
        while True:
            emb = encode(world)
            action = choose_action(world, emb, policy)
            result = step(world, generator.trajectory(world, action, emb))
            world = result.world
            if result.done:
                break
    except Exception as exc:  # the route fails, evaluation carries on
        return RouteResult(spec.id, spec.category, route_progress(world), (), False, world.t, split,
                           f"{type(exc).__name__}: {exc}")
    completion = 1.0 if result.reached_destination else route_progress(world)
    infractions = tuple(e.kind.value for e in result.events)
    success = result.reached_destination and not infractions
    return RouteResult(spec.id, spec.category, completion, infractions, success, world.t, split)


def _eval_job(args) -> RouteResult:
    policy, decoder, spec, seed, split = args
    return run_route(policy, Generator(decoder), spec, seed, split)


def _init_worker() -> None:
    torch.set_num_threads(1)


def evaluate(policy: DecisionPolicy, generator, routes: Sequence[ScenarioSpec], seed: int = 0,
             rollout_ids: Iterable[str] = (), workers: int = 1) -> EvalReport:
    """One deterministic greedy attempt per route, aggregated into an :class:`EvalReport`."""
    if len(routes) == 0:
        raise ValueError("evaluate needs at least one route")
    rollout_ids = set(rollout_ids)
    decoder = _decoder_of(generator)
    jobs = [(policy, decoder, spec, seed, "rollout" if spec.id in rollout_ids else "other") for spec in routes]
    workers = max(1, min(workers, len(jobs)))
    if workers == 1:
        results = [_eval_job(j) for j in jobs]
    else:
        with cf.ProcessPoolExecutor(max_workers=workers, mp_context=mp.get_context("spawn"),
                                    initializer=_init_worker) as pool:
            results = list(pool.map(_eval_job, jobs))
    return build_report(results)


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class AblationRow:
    id: int
    setting: str
    config: dict
    report: EvalReport
    history: list[dict] = field(default_factory=list)
    selected: list[str] = field(default_factory=list)

    def values(self) -> dict:
        d = {"ID": self.id, "setting": self.setting, "DS": self.report.ds, "SR": self.report.sr}
        for cat in CATEGORIES:
            d[CATEGORY_SHORT[cat]] = self.report.ability_means.get(cat, math.nan)
        d["Mean"] = self.report.mean_ability
        return d


@dataclass(eq=False)
class AblationTable:
    name: str
    rows: list[AblationRow]

    def records(self) -> list[dict]:
        return [r.values() for r in self.rows]

    def render(self) -> str:
        """Aligned plain-text table."""
        recs = self.records()
        cols = list(recs[0].keys()) if recs else ["ID", "setting", "DS", "SR"]

        def fmt(v):
            return f"{v:.2f}" if isinstance(v, float) else str(v)

        cells = [cols] + [[fmt(r[c]) for c in cols] for r in recs]
        widths = [max(len(row[i]) for row in cells) for i in range(len(cols))]
        lines = ["  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(row, widths)))
                 for row in cells]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return f"{self.name}\n" + "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({"schema": REPORT_SCHEMA, "name": self.name, "rows": [
            dict(r.values(), config=r.config, selected=r.selected, report=r.report.to_dict()) for r in self.rows]},
            indent=2, sort_keys=True) + "\n"


def _cfg_dict(cfg: TrainerConfig) -> dict:
    d = asdict(cfg)
    d["penalties"] = sorted(PenaltyKind(p).value for p in cfg.penalties)
    return d


def _rl_row(row_id: int, setting: str, policy_il, ref, generator, scenarios, cfg, pre, eval_seed,
            log=None) -> AblationRow:
    selected, warmup = pre
    run = run_rl(policy_il, ref, generator, scenarios, cfg, selected=selected, log=log, warmup=warmup)
    report = evaluate(run.policy, generator, scenarios, eval_seed, run.selected, cfg.workers)
    return AblationRow(row_id, setting, _cfg_dict(cfg), report, run.history, run.selected)


def penalty_label(kinds: Iterable) -> str:
    kinds = [PenaltyKind(k) for k in kinds]
    if not kinds:
        return "none"
    return "+".join(PENALTY_SHORT[k] for k in PENALTY_ORDER if k in kinds)


def ablate_penalties(policy_il: DecisionPolicy, ref: DecisionPolicy, generator, scenarios: Sequence[ScenarioSpec],
                     cfg: TrainerConfig = TrainerConfig(), eval_seed: int = 0, log=None) -> AblationTable:
    """Row 1 is the imitation policy without RL; rows 2-5 train with cumulative penalty sets C, +TL, +RD, +S.

    Disabled kinds are masked from the training reward only; evaluation always
    scores every kind. All rows share one failed-route pre-pass and its warm-up data.
    """
    pre = prepass(policy_il, generator, scenarios, cfg)
    ids = [s.id for s in pre[0]]
    rows = [AblationRow(1, "none", {"rl": False}, evaluate(policy_il, generator, scenarios, eval_seed, ids,
                                                           cfg.workers), [], ids)]
    for k in range(1, len(PENALTY_ORDER) + 1):
        enabled = frozenset(PENALTY_ORDER[:k])
        rows.append(_rl_row(k + 1, penalty_label(enabled), policy_il, ref, generator, scenarios,
                            replace(cfg, penalties=enabled), pre, eval_seed, log))
    return AblationTable("penalty events", rows)


def ablate_rounds(policy_il: DecisionPolicy, ref: DecisionPolicy, generator, scenarios: Sequence[ScenarioSpec],
                  rounds_list: Sequence[int] = (1, 2, 3, 4), cfg: TrainerConfig = TrainerConfig(),
                  eval_seed: int = 0, log=None) -> AblationTable:
    pre = prepass(policy_il, generator, scenarios, cfg)
    rows = [_rl_row(i + 1, f"rounds={r}", policy_il, ref, generator, scenarios, replace(cfg, rollout_rounds=r),
                    pre, eval_seed, log) for i, r in enumerate(rounds_list)]
    return AblationTable("rollout rounds", rows)


def regularization_config(variant: str, cfg: TrainerConfig) -> TrainerConfig:
    if variant == "PPO-Vanilla":
        return replace(cfg, kl_weight=0.0, entropy_weight=0.0)
    if variant == "PPO-Entropy":
        return replace(cfg, kl_weight=0.0, entropy_weight=0.01)
    if variant == "PPO-KL":
        return cfg
    raise ValueError(f"unknown regularization variant {variant!r}")


def ablate_regularization(policy_il: DecisionPolicy, ref: DecisionPolicy, generator,
                          scenarios: Sequence[ScenarioSpec], cfg: TrainerConfig = TrainerConfig(),
                          eval_seed: int = 0, log=None) -> AblationTable:
    pre = prepass(policy_il, generator, scenarios, cfg)
    rows = [_rl_row(i + 1, v, policy_il, ref, generator, scenarios, regularization_config(v, cfg), pre,
                    eval_seed, log) for i, v in enumerate(REGULARIZATION_VARIANTS)]
    return AblationTable("policy regularization", rows)
