"""Command-line entry point.

    deskdrive scenarios gen | dataset gen | il train | rl collect | rl train
    deskdrive pipeline | eval | ablate {penalties,rounds,regularization} | report

Exit codes: 0 success, 1 usage, 2 invalid configuration or inputs, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import shutil
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import __version__, checkpoint
from .action_expert import Generator, TrajectoryDecoder
from .config import ConfigError, RunConfig, apply_env, load_config, validate
from .evaluation import (EvalReport, ablate_penalties, ablate_regularization, ablate_rounds, build_report,
                         evaluate)
from .il import export_csv, generate_dataset, read_dataset, train_il, write_dataset
from .policy import DecisionPolicy
from .rl import RolloutBuffer, collect, prepass, read_buffer, train_rl, warmup_value, write_buffer, write_metrics
from .scenarios import starter_pack
from .sim import read_scenario_dir, write_scenario

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class InputError(Exception):
    """Missing or unreadable input artifact (reported as a validation failure)."""


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def code_version() -> str:
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:16]}"


def file_hash(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Run:
    """Tracks outputs of one command; writes its manifest or quarantines partial outputs."""

    def __init__(self, name: str, cfg: RunConfig, out: Path):
        self.name = name
        self.cfg = cfg
        self.out = out
        self.inputs: dict[str, str] = {}
        self.outputs: list[Path] = []

    def input(self, path: Path) -> Path:
        path = Path(path)
        if not path.exists():
            raise InputError(f"missing input {path}")
        if path.is_file():
            self.inputs[str(path)] = file_hash(path)
        return path

    def output(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(path)
        return path

    def write_text(self, path: Path, text: str) -> Path:
        self.output(path).write_text(text)
        return path

    def manifest(self, extra: dict | None = None) -> Path:
        m = {
            "command": self.name,
            "config": self.cfg.to_dict(),
            "code_version": code_version(),
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": {str(p): file_hash(p) for p in self.outputs if p.is_file()},
        }
        if extra:
            m.update(extra)
        path = self.out / "manifests" / f"{self.name.replace(' ', '_')}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(m, indent=2, sort_keys=True) + "\n")
        return path

    def quarantine(self) -> Path:
        dest = self.out / "failed" / self.name.replace(" ", "_")
        if dest.exists():
            shutil.rmtree(dest)
        dest.mkdir(parents=True)
        for p in self.outputs:
            if p.exists():
                rel = p.relative_to(self.out) if p.is_relative_to(self.out) else Path(p.name)
                target = dest / rel
                target.parent.mkdir(parents=True, exist_ok=True)
                shutil.move(str(p), str(target))
        return dest


# ---------------------------------------------------------------------------
# Layout helpers
# ---------------------------------------------------------------------------


class Layout:
    def __init__(self, cfg: RunConfig, out: Path):
        p = cfg.paths
        self.out = out
        self.scenario_dir = Path(p.scenario_dir) if p.scenario_dir else None
        self.dataset = Path(p.dataset) if p.dataset else out / "dataset.bin"
        self.ckpt = Path(p.checkpoint_dir) if p.checkpoint_dir else out / "checkpoints"
        self.reports = Path(p.report_dir) if p.report_dir else out / "reports"
        self.rl = out / "rl"

    def scenarios(self, run: Run):
        if self.scenario_dir is None:
            return starter_pack()
        run.input(self.scenario_dir)
        for f in sorted(self.scenario_dir.glob("*.json")):
            run.input(f)
        specs = read_scenario_dir(self.scenario_dir)
        if not specs:
            raise InputError(f"no scenario files in {self.scenario_dir}")
        return specs

    def load_policy(self, run: Run, name: str) -> DecisionPolicy:
        return checkpoint.load(DecisionPolicy, run.input(self.ckpt / name))

    def generator(self, run: Run, cfg: RunConfig) -> Generator:
        if cfg.eval.generator == "oracle":
            return Generator()
        return Generator(checkpoint.load(TrajectoryDecoder, run.input(self.ckpt / "il_decoder.ckpt")))


def _report_files(run: Run, report: EvalReport, stem: Path) -> None:
    run.write_text(stem.with_suffix(".json"), report.to_json())
    run.write_text(stem.with_suffix(".csv"), report.to_csv())


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_scenarios_gen(cfg, lay: Layout, run: Run, args) -> None:
    target = lay.scenario_dir or lay.out / "scenarios"
    for spec in starter_pack():
        path = run.output(target / f"{spec.id}.json")
        write_scenario(spec, path)
    run.manifest({"scenarios": [s.id for s in starter_pack()]})
    print(f"wrote {len(starter_pack())} scenarios to {target}")


def _dataset(cfg, lay, run, args):
    scenarios = lay.scenarios(run)
    records = generate_dataset(scenarios, cfg.dataset.steps_per_scenario, cfg.seed, cfg.dataset.epsilon,
                               cfg.dataset.n_aux)
    write_dataset(records, run.output(lay.dataset))
    if getattr(args, "csv", False):
        run.write_text(lay.dataset.with_suffix(".csv"), export_csv(records))
    print(f"dataset: {len(records)} records over {len(scenarios)} scenarios -> {lay.dataset}")
    return records


def cmd_dataset_gen(cfg, lay, run, args) -> None:
    _dataset(cfg, lay, run, args)
    run.manifest()


def _il(cfg, lay, run, records=None):
    if records is None:
        records = read_dataset(run.input(lay.dataset))
    t0 = time.time()
    policy, decoder, metrics = train_il(records, DecisionPolicy(seed=cfg.seed), TrajectoryDecoder(seed=cfg.seed),
                                        cfg.il)
    checkpoint.save(policy, run.output(lay.ckpt / "il_policy.ckpt"))
    checkpoint.save(decoder, run.output(lay.ckpt / "il_decoder.ckpt"))
    checkpoint.save(metrics.reference, run.output(lay.ckpt / "reference.ckpt"))
    summary = metrics.summary()
    run.write_text(lay.reports / "il_metrics.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    write_metrics(metrics.history, run.output(lay.reports / "il_history.jsonl"))
    print(f"IL: held-out accuracy {metrics.heldout_accuracy:.4f}, decoder L1 {metrics.heldout_l1:.4f} m "
          f"({time.time() - t0:.0f} s)")
    return policy, decoder, metrics


def cmd_il_train(cfg, lay, run, args) -> None:
    _il(cfg, lay, run)
    run.manifest()


def _round_policy_path(lay: Layout, r: int) -> Path:
    if r == 0:
        warm = lay.rl / "policy_warm.ckpt"
        return warm if warm.exists() else lay.ckpt / "il_policy.ckpt"
    return lay.rl / f"policy_round{r - 1}.ckpt"


def _existing_rounds(lay: Layout, pattern: str) -> list[int]:
    return sorted(int(p.stem.rsplit("round", 1)[1]) for p in lay.rl.glob(pattern))


def _select(cfg, lay, run, policy, generator, scenarios):
    """Pre-pass, then fit the value head on its attempts; returns the routes and the warmed policy."""
    selected, episodes = prepass(policy, generator, scenarios, cfg.rl)
    run.write_text(lay.rl / "selected.json", json.dumps([s.id for s in selected], indent=2) + "\n")
    write_buffer(RolloutBuffer(episodes), run.output(lay.rl / "prepass.bin"))
    print(f"failed-route pre-pass selected {len(selected)}/{len(scenarios)} routes")
    if not selected:
        (lay.rl / "policy_warm.ckpt").unlink(missing_ok=True)
        return selected, policy
    warm = warmup_value(policy, episodes, cfg.rl)
    checkpoint.save(warm, run.output(lay.rl / "policy_warm.ckpt"))
    return selected, warm


def _collect_round(cfg, lay, run, policy, generator, selected, r):
    buffer = collect(policy, generator, selected, cfg.rl, round_index=r, rounds=1)
    write_buffer(buffer, run.output(lay.rl / f"buffer_round{r}.bin"))
    print(f"round {r}: collected {len(buffer.episodes)} episodes, {len(buffer)} transitions")
    return buffer


def _train_round(cfg, lay, run, buffer, policy, ref, r):
    round_cfg = replace(cfg.rl, seed=cfg.rl.seed + 7919 * r)
    trained, history = train_rl(buffer, policy, ref, round_cfg, round_index=r)
    checkpoint.save(trained, run.output(lay.rl / f"policy_round{r}.ckpt"))
    checkpoint.save(trained, run.output(lay.ckpt / "rl_policy.ckpt"))
    write_metrics(history, run.output(lay.reports / f"rl_metrics_round{r}.jsonl"))
    return trained, history


def _no_rl(lay, run, policy):
    print("no failed routes: RL policy equals the imitation policy")
    checkpoint.save(policy, run.output(lay.ckpt / "rl_policy.ckpt"))


def cmd_rl_collect(cfg, lay, run, args) -> None:
    """Collect the next round (or ``--round``) with the policy produced by the previous round.

    Round 0 first runs the failed-route pre-pass and the value warm-up.
    """
    r = args.round if args.round is not None else len(_existing_rounds(lay, "policy_round*.ckpt"))
    run.name = f"rl collect round{r}"
    start = lay.ckpt / "il_policy.ckpt" if r == 0 else _round_policy_path(lay, r)
    policy = checkpoint.load(DecisionPolicy, run.input(start))
    generator = lay.generator(run, cfg)
    scenarios = lay.scenarios(run)
    if r == 0:
        selected, policy = _select(cfg, lay, run, policy, generator, scenarios)
    else:
        ids = set(json.loads(run.input(lay.rl / "selected.json").read_text()))
        selected = [s for s in scenarios if s.id in ids]
    if selected:
        _collect_round(cfg, lay, run, policy, generator, selected, r)
    run.manifest()


def cmd_rl_train(cfg, lay, run, args) -> None:
    """Train on the latest collected round (or ``--round``)."""
    rounds = _existing_rounds(lay, "buffer_round*.bin")
    r = args.round if args.round is not None else (rounds[-1] if rounds else 0)
    run.name = f"rl train round{r}"
    policy = checkpoint.load(DecisionPolicy, run.input(_round_policy_path(lay, r)))
    ref = lay.load_policy(run, "reference.ckpt")
    path = lay.rl / f"buffer_round{r}.bin"
    if path.exists():
        _train_round(cfg, lay, run, read_buffer(run.input(path)), policy, ref, r)
    elif r == 0 and _selected_ids(lay) == [] and (lay.rl / "selected.json").exists():
        _no_rl(lay, run, policy)
    else:
        raise InputError(f"missing input {path}")
    run.manifest()


def _selected_ids(lay: Layout) -> list[str]:
    path = lay.rl / "selected.json"
    return json.loads(path.read_text()) if path.exists() else []


def cmd_pipeline(cfg, lay, run, args) -> None:
    scenarios = lay.scenarios(run)
    records = _dataset(cfg, lay, run, args)
    policy, decoder, metrics = _il(cfg, lay, run, records)
    generator = Generator() if cfg.eval.generator == "oracle" else Generator(decoder)
    selected, trained = _select(cfg, lay, run, policy, generator, scenarios)
    if not selected:
        _no_rl(lay, run, policy)
    for r in range(cfg.rl.rollout_rounds if selected else 0):
        buffer = _collect_round(cfg, lay, run, trained, generator, selected, r)
        trained, _ = _train_round(cfg, lay, run, buffer, trained, metrics.reference, r)
    ids = [s.id for s in selected]
    il_report = evaluate(policy, generator, scenarios, cfg.seed, ids, cfg.eval.workers)
    rl_report = evaluate(trained, generator, scenarios, cfg.seed, ids, cfg.eval.workers)
    _report_files(run, il_report, lay.reports / "eval_il")
    _report_files(run, rl_report, lay.reports / "eval_rl")
    text = render_summary(il_report, rl_report)
    run.write_text(lay.reports / "summary.txt", text)
    run.manifest()
    print(text, end="")


def cmd_eval(cfg, lay, run, args) -> None:
    policy_path = Path(args.policy) if args.policy else lay.ckpt / (
        "rl_policy.ckpt" if (lay.ckpt / "rl_policy.ckpt").exists() else "il_policy.ckpt")
    policy = checkpoint.load(DecisionPolicy, run.input(policy_path))
    report = evaluate(policy, lay.generator(run, cfg), lay.scenarios(run), cfg.seed, _selected_ids(lay),
                      cfg.eval.workers)
    stem = lay.reports / (args.name or "eval")
    _report_files(run, report, stem)
    run.manifest({"policy": str(policy_path)})
    print(f"DS {report.ds:.2f}  SR {report.sr:.2f}%  -> {stem.with_suffix('.json')}")


def cmd_ablate(cfg, lay, run, args) -> None:
    policy = lay.load_policy(run, "il_policy.ckpt")
    ref = lay.load_policy(run, "reference.ckpt")
    generator = lay.generator(run, cfg)
    scenarios = lay.scenarios(run)
    rl_cfg = cfg.rl
    if args.which == "penalties":
        table = ablate_penalties(policy, ref, generator, scenarios, rl_cfg, cfg.seed)
    elif args.which == "rounds":
        rounds = tuple(int(r) for r in args.rounds_list.split(","))
        if any(r <= 0 for r in rounds):
            raise ConfigError("--rounds-list", "round counts must be positive")
        table = ablate_rounds(policy, ref, generator, scenarios, rounds, rl_cfg, cfg.seed)
    else:
        table = ablate_regularization(policy, ref, generator, scenarios, rl_cfg, cfg.seed)
    base = lay.reports / f"ablate_{args.which}"
    for row in table.rows:
        row_run = Run(f"ablate {args.which} row{row.id}", cfg, lay.out)
        row_run.inputs = dict(run.inputs)
        row_run.write_text(base / f"row{row.id}.json", row.report.to_json())
        write_metrics(row.history, row_run.output(base / f"row{row.id}_metrics.jsonl"))
        row_run.manifest({"row": row.values(), "row_config": row.config})
        run.outputs.extend(row_run.outputs)
    run.write_text(base / "table.json", table.to_json())
    run.write_text(base / "table.txt", table.render())
    run.manifest()
    print(table.render(), end="")


def render_summary(il: EvalReport, rl: EvalReport) -> str:
    lines = [f"{'':8}{'DS':>8}{'SR':>8}{'Mean':>8}"]
    for name, r in (("IL", il), ("IL+RL", rl)):
        lines.append(f"{name:8}{r.ds:8.2f}{r.sr:8.2f}{r.mean_ability:8.2f}")
    for tag in sorted(set(il.splits) | set(rl.splits)):
        a, b = il.splits.get(tag, {}), rl.splits.get(tag, {})
        lines.append(f"{tag} routes (n={a.get('n', 0)}): SR {a.get('sr', float('nan')):.2f} -> "
                     f"{b.get('sr', float('nan')):.2f}, DS {a.get('ds', float('nan')):.2f} -> "
                     f"{b.get('ds', float('nan')):.2f}")
    return "\n".join(lines) + "\n"


def _read_report(path: Path) -> EvalReport:
    from .evaluation import RouteResult

    d = json.loads(path.read_text())
    routes = [RouteResult(r["scenario_id"], r["category"], r["route_completion"], tuple(r["infractions"]),
                          r["success"], r["duration"], r["split"], r["error"]) for r in d["routes"]]
    return build_report(routes)


def cmd_report(cfg, lay, run, args) -> None:
    il_path, rl_path = lay.reports / "eval_il.json", lay.reports / "eval_rl.json"
    parts = []
    if il_path.exists() and rl_path.exists():
        parts.append(render_summary(_read_report(run.input(il_path)), _read_report(run.input(rl_path))))
    for f in sorted(lay.reports.glob("ablate_*/table.txt")):
        parts.append(run.input(f).read_text())
    if not parts:
        raise InputError(f"no reports found under {lay.reports}")
    text = "\n".join(parts)
    run.write_text(lay.reports / "report.txt", text)
    run.manifest()
    print(text, end="")


COMMANDS = {
    ("scenarios", "gen"): cmd_scenarios_gen,
    ("dataset", "gen"): cmd_dataset_gen,
    ("il", "train"): cmd_il_train,
    ("rl", "collect"): cmd_rl_collect,
    ("rl", "train"): cmd_rl_train,
    ("pipeline",): cmd_pipeline,
    ("eval",): cmd_eval,
    ("ablate",): cmd_ablate,
    ("report",): cmd_report,
}


def build_parser() -> Parser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--workers", type=int, help="rollout and evaluation worker processes")
    common.add_argument("--rounds", type=int, help="rollout rounds (collect/train cycles)")
    common.add_argument("--epochs", type=int, help="RL training epochs")
    common.add_argument("--out", default="runs", help="output directory (default: runs)")

    parser = Parser(prog="deskdrive", description="Meta-action driving policy: imitation then online RL.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)
    for group, actions in (("scenarios", ["gen"]), ("dataset", ["gen"]), ("il", ["train"]),
                           ("rl", ["collect", "train"])):
        g = sub.add_parser(group).add_subparsers(dest="action", required=True, parser_class=Parser)
        for a in actions:
            p = g.add_parser(a, parents=[common])
            if group == "dataset":
                p.add_argument("--csv", action="store_true", help="also write a CSV export")
            if group == "rl":
                p.add_argument("--round", type=int, help="round index (default: the next/latest round)")
    p = sub.add_parser("pipeline", parents=[common])
    p.add_argument("--csv", action="store_true", help="also write a CSV export of the dataset")
    p = sub.add_parser("eval", parents=[common])
    p.add_argument("--policy", help="policy checkpoint (default: RL policy if present, else IL)")
    p.add_argument("--name", help="report file stem (default: eval)")
    p = sub.add_parser("ablate", parents=[common])
    p.add_argument("which", choices=["penalties", "rounds", "regularization"])
    p.add_argument("--rounds-list", default="1,2,3,4", help="comma-separated round counts")
    sub.add_parser("report", parents=[common])
    return parser


def resolve_config(args) -> RunConfig:
    cfg = apply_env(load_config(args.config))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    rl_over = {}
    if args.workers is not None:
        rl_over["workers"] = args.workers
        cfg = replace(cfg, eval=replace(cfg.eval, workers=args.workers))
    if args.rounds is not None:
        rl_over["rollout_rounds"] = args.rounds
    if args.epochs is not None:
        rl_over["epochs"] = args.epochs
    cfg = replace(cfg, rl=replace(cfg.rl, **rl_over)).resolved()
    validate(cfg)
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"deskdrive: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    key = (args.command, args.action) if getattr(args, "action", None) else (args.command,)
    name = " ".join(key) + (f" {args.which}" if args.command == "ablate" else "")
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"deskdrive: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = Run(name, cfg, out)
    try:
        COMMANDS[key](cfg, Layout(cfg, out), run, args)
    except (ConfigError, InputError, checkpoint.CheckpointError) as exc:
        dest = run.quarantine()
        print(f"deskdrive: invalid input: {exc} (partial outputs in {dest})", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:
        dest = run.quarantine()
        print(f"deskdrive: {name} failed: {type(exc).__name__}: {exc} (partial outputs in {dest})",
              file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
