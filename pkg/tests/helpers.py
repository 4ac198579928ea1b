"""Shared builders for tests."""

import dataclasses

import numpy as np

from deskdrive.scenarios import car, spec, straight
from deskdrive.sim import EgoState, load_scenario


def place(world, x=0.0, y=0.0, heading=0.0, speed=0.0):
    """Copy of ``world`` with the ego moved; progress and crossing history follow the new pose."""
    line = world.spec.route_line
    s, _, _ = line.project((x, y))
    return dataclasses.replace(world, ego=EgoState(x, y, heading, speed), prev_xy=(x, y),
                               progress_arc=float(np.clip(s, 0.0, line.length)))


def world_at(scn, x=0.0, y=0.0, heading=0.0, speed=0.0, seed=0):
    return place(load_scenario(scn, seed), x, y, heading, speed)


def lead_spec(gap=30.0, v=5.0):
    return spec("lead", "EmergencyBrake", straight(150.0), [car(gap, 0.0, 0.0, ((0.0, v),))])


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-12)


def fd_check(loss_fn, params, h=1e-5):
    """Relative error between autograd and central finite differences of ``loss_fn()`` w.r.t. ``params``."""
    import torch

    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = torch.cat([p.grad.reshape(-1) for p in params]).clone()
    numeric = []
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                numeric.append((up - down) / (2 * h))
    numeric = torch.tensor(numeric, dtype=analytic.dtype)
    scale = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
    return (analytic - numeric).norm().item() / scale, analytic.norm().item()
