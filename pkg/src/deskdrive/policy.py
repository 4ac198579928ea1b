"""Decision policy: state embedding -> factorised speed/path distribution + state value."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .encoder import EMBED_DIM, StateEmbedding
from .meta import N_PATH, N_SPEED, MetaAction, Path, Speed

DTYPE = torch.float64


class PolicyConfigError(ValueError):
    pass


def _init_uniform(module: nn.Module, gen: torch.Generator) -> None:
    for m in module.modules():
        if isinstance(m, nn.Linear):
            bound = 1.0 / math.sqrt(m.in_features)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=gen)
                m.bias.uniform_(-bound, bound, generator=gen)


class DecisionPolicy(nn.Module):
    """Shared tanh trunk, two categorical heads and an MLP value head.

    The value head reads a detached copy of the trunk features, so value
    regression never moves the trunk or the policy heads.
    """

    def __init__(self, embed_dim: int = EMBED_DIM, hidden: int = 128, value_hidden: int = 64, seed: int = 0):
        super().__init__()
        self.dims = {"embed_dim": embed_dim, "hidden": hidden, "value_hidden": value_hidden}
        self.trunk = nn.Sequential(
            nn.Linear(embed_dim, hidden, dtype=DTYPE), nn.Tanh(),
            nn.Linear(hidden, hidden, dtype=DTYPE), nn.Tanh(),
        )
        self.speed_head = nn.Linear(hidden, N_SPEED, dtype=DTYPE)
        self.path_head = nn.Linear(hidden, N_PATH, dtype=DTYPE)
        self.value_head = nn.Sequential(
            nn.Linear(hidden, value_hidden, dtype=DTYPE), nn.Tanh(),
            nn.Linear(value_hidden, 1, dtype=DTYPE),
        )
        _init_uniform(self, torch.Generator().manual_seed(seed))

    def forward(self, x: torch.Tensor):
        if x.shape[-1] != self.dims["embed_dim"]:
            raise PolicyConfigError(f"embedding has {x.shape[-1]} features, trunk expects {self.dims['embed_dim']}")
        h = self.trunk(x)
        return self.speed_head(h), self.path_head(h), self.value_head(h.detach()).squeeze(-1)

    def policy_parameters(self):
        """Trunk and decision heads (everything except the value head)."""
        for name, p in self.named_parameters():
            if not name.startswith("value_head."):
                yield p


def snapshot(policy: DecisionPolicy) -> DecisionPolicy:
    """Frozen deep copy used as the KL reference."""
    ref = copy.deepcopy(policy)
    for p in ref.parameters():
        p.requires_grad_(False)
    return ref.eval()


@dataclass(frozen=True, eq=False)
class ActionDistribution:
    speed_probs: np.ndarray
    path_probs: np.ndarray

    def joint(self) -> np.ndarray:
        """Joint probabilities in speed-major order (42 entries)."""
        return np.outer(self.speed_probs, self.path_probs).ravel()

    def prob(self, action: MetaAction) -> float:
        return float(self.speed_probs[int(action[0])] * self.path_probs[int(action[1])])


def _as_batch(emb) -> torch.Tensor:
    if isinstance(emb, StateEmbedding):
        emb = emb.values
    return torch.as_tensor(np.atleast_2d(np.asarray(emb, dtype=float)), dtype=DTYPE)


def forward(emb, params: DecisionPolicy) -> tuple[ActionDistribution, float]:
    with torch.no_grad():
        ls, lp, v = params(_as_batch(emb))
    return (ActionDistribution(F.softmax(ls[0], -1).numpy(), F.softmax(lp[0], -1).numpy()), float(v[0]))


def forward_batch(embs: np.ndarray, params: DecisionPolicy) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with torch.no_grad():
        ls, lp, v = params(_as_batch(embs))
    return F.softmax(ls, -1).numpy(), F.softmax(lp, -1).numpy(), v.numpy()


def _draw(probs: np.ndarray, u: float) -> int:
    cdf = np.cumsum(probs)
    return int(min(np.searchsorted(cdf, u * cdf[-1], side="right"), len(probs) - 1))


def sample(dist: ActionDistribution, rng: np.random.Generator) -> tuple[MetaAction, float]:
    """Independent speed and path draws; logprob is the sum of the two head log-probabilities."""
    si = _draw(dist.speed_probs, rng.random())
    pi = _draw(dist.path_probs, rng.random())
    logprob = math.log(dist.speed_probs[si]) + math.log(dist.path_probs[pi])
    return MetaAction(Speed(si), Path(pi)), min(logprob, 0.0)


def greedy(dist: ActionDistribution) -> MetaAction:
    return MetaAction(Speed(int(np.argmax(dist.speed_probs))), Path(int(np.argmax(dist.path_probs))))


# -- differentiable terms (tensors in, scalar tensor out) --------------------


def log_prob(speed_logits, path_logits, speed_idx, path_idx) -> torch.Tensor:
    ls = F.log_softmax(speed_logits, -1).gather(-1, speed_idx.unsqueeze(-1)).squeeze(-1)
    lp = F.log_softmax(path_logits, -1).gather(-1, path_idx.unsqueeze(-1)).squeeze(-1)
    return ls + lp


def kl_terms(speed_logits, path_logits, ref_speed_logits, ref_path_logits) -> torch.Tensor:
    """Per-state KL(P_ref || P_theta), summed over both heads."""
    out = 0.0
    for lg, ref in ((speed_logits, ref_speed_logits), (path_logits, ref_path_logits)):
        lref = F.log_softmax(ref, -1)
        out = out + (lref.exp() * (lref - F.log_softmax(lg, -1))).sum(-1)
    return out


def entropy_terms(speed_logits, path_logits) -> torch.Tensor:
    out = 0.0
    for lg in (speed_logits, path_logits):
        lp = F.log_softmax(lg, -1)
        out = out - (lp.exp() * lp).sum(-1)
    return out


def ce_loss_tensor(params: DecisionPolicy, embs: torch.Tensor, speed_idx, path_idx) -> torch.Tensor:
    ls, lp, _ = params(embs)
    return -log_prob(ls, lp, speed_idx, path_idx).mean()


# -- numpy-facing wrappers ---------------------------------------------------


def kl_to_reference(emb, params: DecisionPolicy, ref_params: DecisionPolicy) -> float:
    x = _as_batch(emb)
    with torch.no_grad():
        ls, lp, _ = params(x)
        rs, rp, _ = ref_params(x)
        return float(kl_terms(ls, lp, rs, rp).sum())


def ce_loss(batch: Sequence[tuple], params: DecisionPolicy) -> float:
    """Mean negative log-likelihood of ``(emb, MetaAction)`` labels."""
    if len(batch) == 0:
        raise ValueError("ce_loss needs a non-empty batch")
    x = torch.cat([_as_batch(e) for e, _ in batch])
    si = torch.tensor([int(m[0]) for _, m in batch])
    pi = torch.tensor([int(m[1]) for _, m in batch])
    with torch.no_grad():
        return float(ce_loss_tensor(params, x, si, pi))
