"""Shared checks for the unit and acceptance suites."""

from __future__ import annotations

import numpy as np
import torch

from frameoracle import objectives as obj
from frameoracle.model import SelectorConfig, init_params

FD_STEP = 1e-4
REL_FLOOR = 1e-5


def rel_error(a: float, b: float, floor: float = REL_FLOOR) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def fd_max_rel_error(fn, tensors, rng: np.random.Generator, per_tensor: int = 4, step: float = FD_STEP) -> float:
    """Largest relative gap between autograd and central differences.

    ``fn()`` recomputes a scalar from ``tensors`` (float64 leaves); up to
    ``per_tensor`` random entries of each tensor are perturbed.
    """
    for t in tensors:
        t.grad = None
    fn().backward()
    grads = [t.grad.detach().clone() for t in tensors]
    worst = 0.0
    with torch.no_grad():
        for t, g in zip(tensors, grads):
            flat, gflat = t.view(-1), g.view(-1)
            picks = rng.choice(flat.numel(), size=min(per_tensor, flat.numel()), replace=False)
            for j in picks:
                orig = flat[j].item()
                flat[j] = orig + step
                up = fn().item()
                flat[j] = orig - step
                down = fn().item()
                flat[j] = orig
                worst = max(worst, rel_error(gflat[j].item(), (up - down) / (2 * step)))
    return worst


def ranknet_instance(rng):
    n = int(rng.integers(2, 9))
    y = torch.tensor(rng.standard_normal(n), dtype=torch.float64, requires_grad=True)
    teacher = rng.integers(0, 3, size=n).astype(float)  # includes ties
    t = torch.tensor(obj.pairwise_labels(teacher).t)
    return (lambda: obj.ranknet_loss_tensor(y, t)), [y]


def k_loss_instance(rng, kind: str):
    """Random logits and k*; redrawn while E[k] sits at the SmoothL1 kink (|d| = 1)."""
    while True:
        k_max = int(rng.integers(2, 9))
        logits = torch.tensor(rng.standard_normal(k_max), dtype=torch.float64, requires_grad=True)
        k_star = torch.tensor(float(rng.integers(1, k_max + 1)), dtype=torch.float64)
        gap = abs(float(obj.expected_k(torch.softmax(logits.detach(), -1))) - float(k_star))
        if abs(gap - 1.0) > 1e-3:
            break
    cfg = obj.KTargetConfig(alpha=float(rng.uniform(0, 1)), sigma=float(rng.uniform(0.5, 2.0)))

    def fn():
        probs = torch.softmax(logits, dim=-1)
        if kind == "evo":
            return obj.evo_loss_tensor(probs, k_star)
        return obj.k_head_loss_tensor(probs, k_star, cfg)

    return fn, [logits]


def selector_instance(rng):
    d_model = int(rng.choice([8, 16, 32]))
    n_heads = int(rng.choice([h for h in (1, 2, 4) if d_model % h == 0]))
    n = int(rng.integers(2, 9))
    cfg = SelectorConfig(
        d_model=d_model,
        n_layers=int(rng.integers(1, 3)),
        n_heads=n_heads,
        d_v=6,
        d_t=5,
        k_max=n,
        dropout=0.0,
        max_frames=8,
        max_tokens=4,
        ff_mult=2,
    )
    params = init_params(cfg, int(rng.integers(1 << 30))).double()
    params.train()
    frames = torch.tensor(rng.standard_normal((1, n, 6)), dtype=torch.float64)
    tokens = torch.tensor(rng.standard_normal((1, int(rng.integers(1, 5)), 5)), dtype=torch.float64)
    teacher = torch.tensor(rng.standard_normal((1, n)), dtype=torch.float64)
    k_star = torch.tensor([float(rng.integers(1, n + 1))], dtype=torch.float64)
    kcfg = obj.KTargetConfig()

    def fn():
        scores, logits = params(frames, tokens)
        probs = torch.softmax(logits, dim=-1)
        rank = obj.ranknet_loss_tensor(scores, obj.pairwise_sign(teacher))
        return (rank + obj.k_head_loss_tensor(probs, k_star, kcfg)).sum()

    return fn, [p for p in params.parameters()]

