"""Imitation stage: expert dataset generation and joint policy/decoder training.

The expert drives every scenario (and seeded jittered variants of it) while
labelling each decision tick. With probability ``epsilon`` the executed action
is perturbed so that the recorded states also cover recoveries from mistakes;
the label is always the expert's. Each record also carries a few auxiliary
(meta-action, oracle trajectory) pairs for randomly drawn meta-actions, so the
decoder learns every primitive and not only the ones the expert prefers.
"""

from __future__ import annotations

import copy
import csv
import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path as FsPath
from typing import Sequence

import numpy as np
import torch

from .action_expert import TrajectoryDecoder, feasibility_mask, oracle_trajectory
from .encoder import EMBED_DIM, SCHEMA, StateEmbedding, encode
from .expert import expert_label
from .meta import N_PATH, MetaAction, Path, Speed
from .policy import DTYPE, DecisionPolicy, ce_loss_tensor, log_prob, snapshot
from .scenarios import jitter
from .sim import ScenarioSpec, load_scenario, step
from .trajectory import TRAJ_DIM, Trajectory

DATASET_MAGIC = b"DDDS"
DATASET_VERSION = 1
ID_WIDTH = 48


class ILTrainingError(RuntimeError):
    """Raised when the loss stops being finite; carries the last finite models."""

    def __init__(self, message: str, policy: DecisionPolicy, decoder: TrajectoryDecoder):
        super().__init__(message)
        self.policy = policy
        self.decoder = decoder


class DatasetError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ExpertRecord:
    emb: StateEmbedding
    label: MetaAction
    expert_traj: Trajectory
    scenario_id: str
    aux: tuple[tuple[MetaAction, Trajectory], ...] = ()


@dataclass(frozen=True)
class ILConfig:
    learning_rate: float = 3e-4
    batch_size: int = 64
    epochs: int = 60
    holdout: float = 0.1
    seed: int = 0
    vae_weight: float = 0.1
    cosine_decay: bool = True

    def validate(self) -> None:
        if not 0.0 < self.holdout < 1.0:
            raise ValueError("holdout must lie in (0, 1)")
        for name in ("learning_rate", "batch_size", "epochs"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.vae_weight < 0:
            raise ValueError("vae_weight must be nonnegative")


# ---------------------------------------------------------------------------
# Dataset generation
# ---------------------------------------------------------------------------


def _perturb(label: MetaAction, mask: np.ndarray, rng: np.random.Generator) -> MetaAction:
    """Replace either the speed or the path of ``label`` by a random feasible value."""
    for _ in range(20):
        if rng.random() < 0.5:
            cand = MetaAction(Speed(int(rng.integers(len(Speed)))), label.path)
        else:
            cand = MetaAction(label.speed, Path(int(rng.integers(N_PATH))))
        if mask[cand.index]:
            return cand
    return label


def _aux_actions(label: MetaAction, mask: np.ndarray, n: int, rng: np.random.Generator) -> list[MetaAction]:
    pool = np.flatnonzero(mask)
    pool = pool[pool != label.index]
    picks = rng.choice(pool, size=min(n, len(pool)), replace=False)
    return [MetaAction.from_index(int(i)) for i in sorted(picks)]


def drive_scenario(spec: ScenarioSpec, steps: int, seed: int, index: int, epsilon: float = 0.2,
                   n_aux: int = 2) -> list[ExpertRecord]:
    """Records for one scenario: the original route first, then jittered variants until ``steps`` ticks."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    out: list[ExpertRecord] = []
    episode = 0
    while len(out) < steps:
        variant = spec if episode == 0 else jitter(spec, rng, episode)
        world = load_scenario(variant, seed)
        while len(out) < steps:
            label = expert_label(world)
            mask = feasibility_mask(world)
            aux = tuple((m, oracle_trajectory(world, m)) for m in _aux_actions(label, mask, n_aux, rng))
            out.append(ExpertRecord(encode(world), label, oracle_trajectory(world, label), variant.id, aux))
            executed = _perturb(label, mask, rng) if rng.random() < epsilon else label
            result = step(world, oracle_trajectory(world, executed))
            world = result.world
            if result.done:
                break
        episode += 1
    return out


def generate_dataset(scenarios: Sequence[ScenarioSpec], steps_per_scenario: int, seed: int,
                     epsilon: float = 0.2, n_aux: int = 2) -> list[ExpertRecord]:
    """Expert-labelled records, ``steps_per_scenario`` decision ticks per scenario, deterministic in ``seed``."""
    if len(scenarios) == 0:
        raise ValueError("generate_dataset needs at least one scenario")
    if steps_per_scenario <= 0:
        raise ValueError("steps_per_scenario must be positive")
    records: list[ExpertRecord] = []
    for i, spec in enumerate(scenarios):
        records.extend(drive_scenario(spec, steps_per_scenario, seed, i, epsilon, n_aux))
    return records


# ---------------------------------------------------------------------------
# Dataset files
# ---------------------------------------------------------------------------


def record_dtype(n_aux: int) -> np.dtype:
    return np.dtype([
        ("scenario_id", f"S{ID_WIDTH}"),
        ("frame_t", "<f8"),
        ("emb", "<f8", (EMBED_DIM,)),
        ("speed", "u1"),
        ("path", "u1"),
        ("traj", "<f8", (TRAJ_DIM,)),
        ("aux_speed", "u1", (n_aux,)),
        ("aux_path", "u1", (n_aux,)),
        ("aux_traj", "<f8", (n_aux, TRAJ_DIM)),
    ])


def to_array(records: Sequence[ExpertRecord]) -> np.ndarray:
    n_aux = min((len(r.aux) for r in records), default=0)
    arr = np.zeros(len(records), dtype=record_dtype(n_aux))
    for i, r in enumerate(records):
        sid = r.scenario_id.encode()
        if len(sid) > ID_WIDTH:
            raise DatasetError(f"scenario id longer than {ID_WIDTH} bytes: {r.scenario_id}")
        arr[i]["scenario_id"] = sid
        arr[i]["frame_t"] = r.emb.frame_t
        arr[i]["emb"] = r.emb.values
        arr[i]["speed"], arr[i]["path"] = int(r.label[0]), int(r.label[1])
        arr[i]["traj"] = r.expert_traj.flat()
        for k in range(n_aux):
            m, t = r.aux[k]
            arr[i]["aux_speed"][k], arr[i]["aux_path"][k] = int(m[0]), int(m[1])
            arr[i]["aux_traj"][k] = t.flat()
    return arr


def from_array(arr: np.ndarray) -> list[ExpertRecord]:
    n_aux = arr.dtype["aux_speed"].shape[0] if arr.dtype["aux_speed"].shape else 1
    out = []
    for row in arr:
        aux = tuple((MetaAction(Speed(int(row["aux_speed"][k])), Path(int(row["aux_path"][k]))),
                     Trajectory.from_flat(row["aux_traj"][k])) for k in range(n_aux))
        out.append(ExpertRecord(StateEmbedding(np.array(row["emb"]), float(row["frame_t"])),
                                MetaAction(Speed(int(row["speed"])), Path(int(row["path"]))),
                                Trajectory.from_flat(row["traj"]), row["scenario_id"].decode(), aux))
    return out


def dataset_bytes(records: Sequence[ExpertRecord]) -> bytes:
    arr = to_array(records)
    schema = SCHEMA.encode()
    n_aux = arr.dtype["aux_speed"].shape[0] if arr.dtype["aux_speed"].shape else 1
    head = DATASET_MAGIC + struct.pack("<HI", DATASET_VERSION, len(schema)) + schema
    head += struct.pack("<HQ", n_aux, len(arr))
    return head + arr.tobytes()


def write_dataset(records: Sequence[ExpertRecord], path: str | FsPath) -> None:
    FsPath(path).write_bytes(dataset_bytes(records))


def read_dataset_array(path: str | FsPath) -> np.ndarray:
    data = FsPath(path).read_bytes()
    if data[:4] != DATASET_MAGIC:
        raise DatasetError("not a dataset file")
    version, slen = struct.unpack_from("<HI", data, 4)
    if version != DATASET_VERSION:
        raise DatasetError(f"unsupported dataset version {version}")
    off = 10
    schema = data[off:off + slen].decode()
    off += slen
    if schema != SCHEMA:
        raise DatasetError(f"embedding schema mismatch: file has {schema!r}")
    n_aux, n = struct.unpack_from("<HQ", data, off)
    off += 10
    dt = record_dtype(n_aux)
    if len(data) - off != n * dt.itemsize:
        raise DatasetError("dataset payload size does not match its record count")
    return np.frombuffer(data, dtype=dt, count=n, offset=off)


def read_dataset(path: str | FsPath) -> list[ExpertRecord]:
    return from_array(read_dataset_array(path))


def export_csv(records: Sequence[ExpertRecord]) -> str:
    """One row per record: id, time, label, embedding and flattened expert trajectory."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scenario_id", "frame_t", "speed", "path"] + [f"e{i}" for i in range(EMBED_DIM)]
               + [f"traj{i}" for i in range(TRAJ_DIM)])
    for r in records:
        w.writerow([r.scenario_id, repr(r.emb.frame_t), r.label[0].name, r.label[1].name]
                   + [repr(float(v)) for v in r.emb.values] + [repr(float(v)) for v in r.expert_traj.flat()])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def vae_kl(mu, logvar):
    """KL( N(mu, exp(logvar)) || N(0, I) ), summed over the last axis."""
    if isinstance(mu, torch.Tensor):
        return 0.5 * (torch.exp(logvar) + mu**2 - 1.0 - logvar).sum(-1)
    mu = np.asarray(mu, dtype=float)
    logvar = np.asarray(logvar, dtype=float)
    return 0.5 * np.sum(np.exp(logvar) + mu**2 - 1.0 - logvar, axis=-1)


def waypoint_l1(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-sample mean over waypoints of |dx| + |dy| (flattened 52-vectors in, shape (B,) out)."""
    return (pred - target).abs().reshape(pred.shape[0], -1, 2).sum(-1).mean(-1)


@dataclass
class Tensors:
    """Training arrays: one policy row per record, one decoder row per (record, trajectory)."""

    emb: torch.Tensor
    speed: torch.Tensor
    path: torch.Tensor
    dec_rec: torch.Tensor
    dec_speed: torch.Tensor
    dec_path: torch.Tensor
    dec_traj: torch.Tensor
    dec_expert: torch.Tensor

    @classmethod
    def from_records(cls, records: Sequence[ExpertRecord]) -> "Tensors":
        emb = torch.as_tensor(np.stack([r.emb.values for r in records]), dtype=DTYPE)
        speed = torch.tensor([int(r.label[0]) for r in records])
        path = torch.tensor([int(r.label[1]) for r in records])
        rec, ds, dp, dt, de = [], [], [], [], []
        for i, r in enumerate(records):
            for k, (m, t) in enumerate(((r.label, r.expert_traj),) + tuple(r.aux)):
                rec.append(i)
                ds.append(int(m[0]))
                dp.append(int(m[1]))
                dt.append(t.flat())
                de.append(k == 0)
        return cls(emb, speed, path, torch.tensor(rec), torch.tensor(ds), torch.tensor(dp),
                   torch.as_tensor(np.stack(dt), dtype=DTYPE), torch.tensor(de))

    def subset(self, idx: np.ndarray) -> "Tensors":
        idx_t = torch.as_tensor(idx, dtype=torch.long)
        remap = torch.full((len(self.emb),), -1, dtype=torch.long)
        remap[idx_t] = torch.arange(len(idx_t))
        keep = remap[self.dec_rec] >= 0
        return Tensors(self.emb[idx_t], self.speed[idx_t], self.path[idx_t], remap[self.dec_rec][keep],
                       self.dec_speed[keep], self.dec_path[keep], self.dec_traj[keep], self.dec_expert[keep])


def _decoded_flat(decoder: TrajectoryDecoder, emb, si, pi, eps=None):
    path, speed, mu, logvar = decoder(emb, si, pi, eps)
    return torch.cat([path.reshape(len(emb), -1), speed.reshape(len(emb), -1)], dim=1), mu, logvar


def il_loss_terms(policy: DecisionPolicy, decoder: TrajectoryDecoder, data: Tensors, rec_idx: torch.Tensor,
                  dec_idx: torch.Tensor, eps: torch.Tensor | None) -> dict[str, torch.Tensor]:
    """Mean BC (waypoint L1), CE and VAE-KL over one minibatch."""
    ce = ce_loss_tensor(policy, data.emb[rec_idx], data.speed[rec_idx], data.path[rec_idx])
    emb = data.emb[data.dec_rec[dec_idx]]
    pred, mu, logvar = _decoded_flat(decoder, emb, data.dec_speed[dec_idx], data.dec_path[dec_idx], eps)
    bc = waypoint_l1(pred, data.dec_traj[dec_idx]).mean()
    kl = vae_kl(mu, logvar).mean()
    return {"bc": bc, "ce": ce, "vae_kl": kl}


@dataclass
class ILMetrics:
    history: list[dict] = field(default_factory=list)
    heldout_accuracy: float = math.nan
    heldout_speed_accuracy: float = math.nan
    heldout_path_accuracy: float = math.nan
    heldout_l1: float = math.nan
    heldout_aux_l1: float = math.nan
    train_accuracy: float = math.nan
    train_ce: float = math.nan
    train_l1: float = math.nan
    max_spacing_error: float = math.nan
    n_train: int = 0
    n_heldout: int = 0
    reference: DecisionPolicy | None = None

    def summary(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k not in ("history", "reference")}
        d["epochs"] = len(self.history)
        return d


@torch.no_grad()
def evaluate_il(policy: DecisionPolicy, decoder: TrajectoryDecoder, data: Tensors) -> dict[str, float]:
    """Accuracy of argmax decisions and mean-mode decoder L1 against the oracle."""
    if len(data.emb) == 0:
        return {}
    ls, lp, _ = policy(data.emb)
    sp_ok = ls.argmax(-1) == data.speed
    pa_ok = lp.argmax(-1) == data.path
    ce = float(-log_prob(ls, lp, data.speed, data.path).mean())
    pred, _, _ = _decoded_flat(decoder, data.emb[data.dec_rec], data.dec_speed, data.dec_path)
    err = waypoint_l1(pred, data.dec_traj)
    path_pts = pred[:, :40].reshape(len(pred), 20, 2)
    steps = torch.linalg.norm(path_pts[:, 1:] - path_pts[:, :-1], dim=-1)
    return {
        "accuracy": float((sp_ok & pa_ok).double().mean()),
        "speed_accuracy": float(sp_ok.double().mean()),
        "path_accuracy": float(pa_ok.double().mean()),
        "ce": ce,
        "l1": float(err[data.dec_expert].mean()),
        "aux_l1": float(err[~data.dec_expert].mean()) if (~data.dec_expert).any() else math.nan,
        "spacing_error": float((steps - 1.0).abs().max()),
    }


def split_indices(n: int, holdout: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    n_hold = int(math.floor(n * holdout))
    return np.sort(perm[n_hold:]), np.sort(perm[:n_hold])


def train_il(dataset: Sequence[ExpertRecord], policy: DecisionPolicy, decoder: TrajectoryDecoder,
             cfg: ILConfig = ILConfig(), log=None) -> tuple[DecisionPolicy, TrajectoryDecoder, ILMetrics]:
    """Jointly fit the decision heads (CE) and the decoder (L1 BC + weighted VAE KL) with Adam.

    Inputs are not modified; trained copies are returned. ``metrics.reference``
    is the frozen snapshot of the trained policy used as the RL reference.
    """
    if len(dataset) == 0:
        raise ValueError("train_il needs a non-empty dataset")
    cfg.validate()
    policy = copy.deepcopy(policy)
    decoder = copy.deepcopy(decoder)
    data = Tensors.from_records(dataset)
    train_idx, held_idx = split_indices(len(dataset), cfg.holdout, cfg.seed)
    train, held = data.subset(train_idx), data.subset(held_idx)
    n_dec_per_rec = len(train.dec_rec) / max(len(train.emb), 1)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(list(policy.parameters()) + list(decoder.parameters()), lr=cfg.learning_rate)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.epochs) if cfg.cosine_decay else None
    latent = decoder.dims["latent_dim"]
    metrics = ILMetrics(n_train=len(train_idx), n_heldout=len(held_idx))
    last_good = (copy.deepcopy(policy), copy.deepcopy(decoder))
    n = len(train.emb)
    for epoch in range(cfg.epochs):
        perm = torch.randperm(n, generator=gen)
        dec_perm = torch.randperm(len(train.dec_rec), generator=gen)
        dec_batch = max(1, int(round(cfg.batch_size * n_dec_per_rec)))
        sums = {"bc": 0.0, "ce": 0.0, "vae_kl": 0.0, "total": 0.0}
        n_batches = 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            rec_idx = perm[start:start + cfg.batch_size]
            dec_idx = dec_perm[b * dec_batch:(b + 1) * dec_batch]
            if len(dec_idx) == 0:
                dec_idx = dec_perm[:dec_batch]
            eps = torch.randn(len(dec_idx), latent, generator=gen, dtype=DTYPE)
            terms = il_loss_terms(policy, decoder, train, rec_idx, dec_idx, eps)
            total = terms["bc"] + terms["ce"] + cfg.vae_weight * terms["vae_kl"]
            if not torch.isfinite(total):
                raise ILTrainingError(f"non-finite IL loss at epoch {epoch}", *last_good)
            opt.zero_grad()
            total.backward()
            opt.step()
            for k, v in terms.items():
                sums[k] += v.item()
            sums["total"] += total.item()
            n_batches += 1
        if sched is not None:
            sched.step()
        row = {"epoch": epoch, **{k: v / n_batches for k, v in sums.items()}}
        if len(held.emb):
            ev = evaluate_il(policy, decoder, held)
            row.update({"heldout_accuracy": ev["accuracy"], "heldout_l1": ev["l1"]})
        metrics.history.append(row)
        if log is not None:
            log(row)
        last_good = (copy.deepcopy(policy), copy.deepcopy(decoder))
    tr = evaluate_il(policy, decoder, train)
    metrics.train_accuracy, metrics.train_ce, metrics.train_l1 = tr["accuracy"], tr["ce"], tr["l1"]
    metrics.max_spacing_error = tr["spacing_error"]
    if len(held.emb):
        ev = evaluate_il(policy, decoder, held)
        metrics.heldout_accuracy = ev["accuracy"]
        metrics.heldout_speed_accuracy = ev["speed_accuracy"]
        metrics.heldout_path_accuracy = ev["path_accuracy"]
        metrics.heldout_l1 = ev["l1"]
        metrics.heldout_aux_l1 = ev["aux_l1"]
        metrics.max_spacing_error = max(metrics.max_spacing_error, ev["spacing_error"])
    metrics.reference = snapshot(policy)
    return policy, decoder, metrics
