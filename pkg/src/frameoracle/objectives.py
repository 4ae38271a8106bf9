"""Losses and target generators for the four training stages.

Loss functions take torch tensors and stay differentiable; thin wrappers
accept the value objects from :mod:`frameoracle.core`.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core import AnnotatedExample, CandidateSet, KDistribution, ScoreVector, TaskRecord

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-9


class TaskLossOracle(Protocol):
    def __call__(self, task: TaskRecord, subset: Sequence[int]) -> float: ...


class OracleError(RuntimeError):
    def __init__(self, message: str, subset: tuple[int, ...]):
        super().__init__(f"{message} (subset={list(subset)})")
        self.subset = subset


@dataclass(frozen=True)
class KTargetConfig:
    lambda_k: float = 0.0105
    k_grid: tuple[int, ...] | None = None  # None means 1..k_max
    alpha: float = 0.5
    sigma: float = 1.0
    w_rank: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        if self.lambda_k < 0:
            raise ValueError("lambda_k must be >= 0")
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")
        if self.k_grid is not None:
            grid = tuple(int(k) for k in self.k_grid)
            if not grid:
                raise ValueError("k_grid must be non-empty")
            if grid[0] < 1 or any(b <= a for a, b in zip(grid, grid[1:])):
                raise ValueError("k_grid must be strictly increasing and >= 1")
            object.__setattr__(self, "k_grid", grid)

    def grid(self, k_max: int) -> tuple[int, ...]:
        if self.k_grid is None:
            return tuple(range(1, k_max + 1))
        if self.k_grid[-1] > k_max:
            raise ValueError(f"k_grid exceeds k_max={k_max}")
        return self.k_grid


@dataclass(frozen=True)
class PairwiseLabels:
    t: np.ndarray

    def __post_init__(self) -> None:
        t = np.asarray(self.t, dtype=np.int8)
        if t.ndim != 2 or t.shape[0] != t.shape[1]:
            raise ValueError("pairwise labels must be a square matrix")
        if not np.array_equal(t, -t.T):
            raise ValueError("pairwise labels must be antisymmetric")
        t.flags.writeable = False
        object.__setattr__(self, "t", t)


@dataclass(frozen=True)
class StageTargets:
    """Exactly one of the stage-specific target kinds."""

    teacher_scores: ScoreVector | None = None
    loo_scores: ScoreVector | None = None
    k_star: int | None = None
    sft: tuple[tuple[int, ...], int] | None = None

    def __post_init__(self) -> None:
        filled = [v is not None for v in (self.teacher_scores, self.loo_scores, self.k_star, self.sft)]
        if sum(filled) != 1:
            raise ValueError("exactly one target kind must be populated")


# ---------------------------------------------------------------- ranking


def pairwise_labels(teacher_scores: ScoreVector | Sequence[float]) -> PairwiseLabels:
    s = np.asarray(getattr(teacher_scores, "scores", teacher_scores), dtype=np.float64)
    return PairwiseLabels(np.sign(s[:, None] - s[None, :]).astype(np.int8))


def pairwise_sign(teacher: torch.Tensor) -> torch.Tensor:
    """Batched ``sign(s_i - s_j)`` for teacher scores of shape [..., N]."""
    return torch.sign(teacher.unsqueeze(-1) - teacher.unsqueeze(-2))


def ranknet_loss_tensor(pred: torch.Tensor, t: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Sum over i<j of log(1 + exp(-t_ij (y_i - y_j))), skipping tied pairs.

    ``pred`` is [..., N]; ``t`` is [..., N, N]. ``mask`` ([..., N]) drops padded
    frames. Returns one loss per leading batch element.
    """
    n = pred.shape[-1]
    diff = pred.unsqueeze(-1) - pred.unsqueeze(-2)
    upper = torch.ones(n, n, dtype=torch.bool, device=pred.device).triu(1)
    keep = upper & (t != 0)
    if mask is not None:
        keep = keep & mask.unsqueeze(-1) & mask.unsqueeze(-2)
    # padded scores may be -inf; zero them before the product so no nan leaks
    diff = torch.where(keep, diff, torch.zeros((), dtype=diff.dtype, device=diff.device))
    terms = F.softplus(-t.to(diff.dtype) * diff)
    return torch.where(keep, terms, torch.zeros((), dtype=terms.dtype, device=terms.device)).sum(dim=(-1, -2))


def ranknet_loss(predicted, labels: PairwiseLabels):
    """RankNet loss for one example.

    Accepts a :class:`ScoreVector` (returns ``float``) or a 1-D tensor (returns a
    differentiable scalar tensor).
    """
    as_float = isinstance(predicted, ScoreVector)
    y = torch.tensor(predicted.scores, dtype=torch.float64) if as_float else predicted
    t = torch.tensor(np.asarray(labels.t), device=y.device)
    if t.shape != (y.shape[-1], y.shape[-1]):
        raise ValueError(f"{y.shape[-1]} scores but labels are {tuple(t.shape)}")
    loss = ranknet_loss_tensor(y, t)
    return float(loss) if as_float else loss


# ------------------------------------------------------------ LOO targets


def _call_oracle(oracle: TaskLossOracle, task: TaskRecord, subset: tuple[int, ...]) -> float:
    try:
        value = float(oracle(task, subset))
    except OracleError:
        raise
    except Exception as exc:
        raise OracleError(f"task-loss oracle failed: {exc}", subset) from exc
    if not math.isfinite(value):
        raise OracleError("task-loss oracle returned a non-finite loss", subset)
    return value


def loo_targets(frames: CandidateSet | int, task: TaskRecord, oracle: TaskLossOracle) -> ScoreVector:
    """Importance of each frame as the task-loss increase when it is left out.

    Makes exactly N + 1 oracle calls: the full set first, then one per frame.
    """
    n = frames if isinstance(frames, int) else frames.n
    full = tuple(range(n))
    base = _call_oracle(oracle, task, full)
    scores = []
    for i in range(n):
        without = full[:i] + full[i + 1 :]
        scores.append(_call_oracle(oracle, task, without) - base)
    return ScoreVector(tuple(scores))


# ------------------------------------------------------------- k* targets


def zscore(values: Sequence[float]) -> np.ndarray:
    """Population z-score; a flat input maps to all zeros."""
    v = np.asarray(values, dtype=np.float64)
    sd = v.std()
    if sd == 0 or not np.isfinite(sd):
        return np.zeros_like(v)
    return (v - v.mean()) / sd


def kstar_from_losses(grid: Sequence[int], losses: Sequence[float], lambda_k: float) -> int:
    if len(grid) == 0 or len(grid) != len(losses):
        raise ValueError("k grid and loss list must be non-empty and aligned")
    objective = zscore(losses) + lambda_k * np.asarray(grid, dtype=np.float64)
    # np.argmin returns the first minimum, i.e. the smaller k on ties
    return int(grid[int(np.argmin(objective))])


def kstar_target(
    frames: CandidateSet | int,
    rank_scores: ScoreVector,
    task: TaskRecord,
    oracle: TaskLossOracle,
    cfg: KTargetConfig,
    k_max: int | None = None,
) -> int:
    """Frame count trading z-scored task loss against a linear frame cost."""
    n = frames if isinstance(frames, int) else frames.n
    if len(rank_scores) != n:
        raise ValueError("rank_scores length does not match the candidate set")
    grid = cfg.grid(min(k_max or n, n))
    losses = [_call_oracle(oracle, task, rank_scores.top_k(k)) for k in grid]
    return kstar_from_losses(grid, losses, cfg.lambda_k)


# ----------------------------------------------------------- K head losses


def expected_k(probs: torch.Tensor) -> torch.Tensor:
    ks = torch.arange(1, probs.shape[-1] + 1, dtype=probs.dtype, device=probs.device)
    return (probs * ks).sum(dim=-1)


def _check_kstar(k_star, k_max: int) -> None:
    ks = torch.as_tensor(k_star)
    if (ks < 1).any() or (ks > k_max).any():
        raise ValueError(f"k_star outside [1, {k_max}]")


def evo_loss_tensor(probs: torch.Tensor, k_star: torch.Tensor) -> torch.Tensor:
    _check_kstar(k_star, probs.shape[-1])
    target = torch.as_tensor(k_star, dtype=probs.dtype, device=probs.device)
    return F.smooth_l1_loss(expected_k(probs), target.expand(probs.shape[:-1]), reduction="none", beta=1.0)


def evo_loss(dist, k_star: int):
    """SmoothL1 between the distribution's expected k and ``k_star``."""
    if isinstance(dist, KDistribution):
        probs = torch.tensor(dist.probs, dtype=torch.float64)
        return float(evo_loss_tensor(probs, torch.tensor(float(k_star))))
    return evo_loss_tensor(dist, torch.as_tensor(k_star))


def class_target_tensor(k_star: torch.Tensor, k_max: int, sigma: float, dtype=torch.float64) -> torch.Tensor:
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    _check_kstar(k_star, k_max)
    ks = torch.arange(1, k_max + 1, dtype=dtype)
    centre = torch.as_tensor(k_star, dtype=dtype).unsqueeze(-1)
    logits = -((ks - centre) ** 2) / (2.0 * sigma**2)
    return torch.softmax(logits, dim=-1)


def class_target(k_star: int, k_max: int, sigma: float = 1.0) -> KDistribution:
    """Gaussian soft target over 1..k_max centred on ``k_star``, renormalised."""
    probs = class_target_tensor(torch.tensor(float(k_star)), k_max, sigma)
    probs = probs / probs.sum()
    return KDistribution(tuple(probs.tolist()))


def kl_to_target(target: torch.Tensor, probs: torch.Tensor) -> torch.Tensor:
    """KL(target || probs), flooring probabilities at 1e-9 where needed."""
    if bool(((probs <= 0) & (target > 0)).any()):
        log.warning("K distribution has zero mass where the target does not; clamping to %g", PROB_FLOOR)
    log_p = torch.log(probs.clamp_min(PROB_FLOOR))
    log_t = torch.log(target.clamp_min(torch.finfo(target.dtype).tiny))
    return torch.where(target > 0, target * (log_t - log_p), torch.zeros_like(target)).sum(dim=-1)


def k_head_loss_tensor(probs: torch.Tensor, k_star: torch.Tensor, cfg: KTargetConfig) -> torch.Tensor:
    evo = evo_loss_tensor(probs, k_star)
    target = class_target_tensor(k_star, probs.shape[-1], cfg.sigma, dtype=probs.dtype).to(probs.device)
    return (1.0 - cfg.alpha) * evo + cfg.alpha * kl_to_target(target, probs)


def k_head_loss(dist, k_star: int, cfg: KTargetConfig):
    """``(1 - alpha) * evo + alpha * KL(soft target || dist)``."""
    if isinstance(dist, KDistribution):
        probs = torch.tensor(dist.probs, dtype=torch.float64)
        return float(k_head_loss_tensor(probs, torch.tensor(float(k_star)), cfg))
    return k_head_loss_tensor(dist, torch.as_tensor(k_star), cfg)


# ------------------------------------------------------------ SFT (stage 4)


def keyframe_teacher(keyframes: Sequence[int], n: int) -> np.ndarray:
    t = np.zeros(n, dtype=np.float64)
    t[list(keyframes)] = 1.0
    return t


def sft_loss_tensor(scores, probs, keyframe_mask, k_true, cfg: KTargetConfig):
    """Batched stage-4 loss. ``keyframe_mask`` is a float [B, N] 0/1 teacher."""
    rank = ranknet_loss_tensor(scores, pairwise_sign(keyframe_mask))
    return cfg.w_rank * rank + k_head_loss_tensor(probs, k_true, cfg)


def sft_loss(scores, dist, annotation: AnnotatedExample, cfg: KTargetConfig):
    if annotation.keyframe_indices is None:
        raise ValueError(f"record {annotation.id} has no keyframe_indices")
    as_float = isinstance(scores, ScoreVector)
    y = torch.tensor(scores.scores, dtype=torch.float64) if as_float else scores
    p = torch.tensor(dist.probs, dtype=torch.float64) if isinstance(dist, KDistribution) else dist
    teacher = torch.as_tensor(keyframe_teacher(annotation.keyframe_indices, y.shape[-1]), dtype=y.dtype)
    loss = sft_loss_tensor(y, p, teacher, torch.tensor(float(annotation.num_selected_frames)), cfg)
    return float(loss) if as_float else loss


# -------------------------------------------------------- target caching


@dataclass
class TargetCache:
    """In-memory target cache keyed by (example id, stage), persistable as JSONL."""

    entries: dict[tuple[int, int], object] = field(default_factory=dict)

    def get_or_compute(self, example_id: int, stage: int, fn: Callable[[], object]):
        key = (example_id, stage)
        if key not in self.entries:
            self.entries[key] = fn()
        return self.entries[key]

    def dump(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for (eid, stage), value in sorted(self.entries.items()):
                if isinstance(value, ScoreVector):
                    value = list(value.scores)
                fh.write(json.dumps({"id": eid, "stage": stage, "target": value}) + "\n")

    @classmethod
    def load(cls, path) -> "TargetCache":
        cache = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    d = json.loads(line)
                    value = d["target"]
                    cache.entries[(d["id"], d["stage"])] = ScoreVector(tuple(value)) if isinstance(value, list) else value
        return cache
