"""Four-stage training: teacher alignment, LOO ranking, K head, then SFT.

Each stage freezes a subset of parameter groups, gives the rest their own
learning rate, and trains with AdamW under a cosine schedule. Only trainable
tensors are handed to the optimizer, so frozen tensors never get moments and
never move.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import torch

from . import objectives as obj
from .backends import BackendError, BackendSuite
from .core import ScoreVector, TrainExample
from .model import (
    GROUPS,
    FrameOracle,
    SelectorConfig,
    collate,
    init_params,
    load_checkpoint,
    predict_batched,
    save_checkpoint,
    set_trainable,
)

log = logging.getLogger(__name__)

LOSS_KINDS = ("ranknet_teacher", "ranknet_loo", "k_head", "sft")
STAGE_LOSS = {1: "ranknet_teacher", 2: "ranknet_loo", 3: "k_head", 4: "sft"}

# Short default step budgets; override per stage with the "steps" config key.
DEFAULT_STEPS = {1: 250, 2: 250, 3: 600, 4: 1000}


class NonFiniteLossError(FloatingPointError):
    pass


class StageError(RuntimeError):
    """A curriculum stage failed; ``last_checkpoint`` points at the last good stage."""

    def __init__(self, message: str, stage: int, last_checkpoint: Path | None):
        super().__init__(message)
        self.stage = stage
        self.last_checkpoint = last_checkpoint


@dataclass(frozen=True)
class StageConfig:
    stage: int
    group_learning_rates: dict[str, float]
    frozen_groups: frozenset[str]
    batch_size: int
    max_steps: int
    loss_kind: str
    weight_decay: float = 0.01
    k_target: obj.KTargetConfig = field(default_factory=obj.KTargetConfig)

    def __post_init__(self) -> None:
        object.__setattr__(self, "frozen_groups", frozenset(self.frozen_groups))
        object.__setattr__(self, "group_learning_rates", dict(self.group_learning_rates))
        problems = self.problems()
        if problems:
            raise ValueError(f"invalid stage {self.stage} config: " + "; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        if self.stage not in (1, 2, 3, 4):
            out.append("stage must be 1..4")
        if self.loss_kind not in LOSS_KINDS:
            out.append(f"unknown loss_kind {self.loss_kind!r}")
        unknown = (set(self.group_learning_rates) | set(self.frozen_groups)) - set(GROUPS)
        if unknown:
            out.append(f"unknown groups {sorted(unknown)}")
        for g in GROUPS:
            lr = self.group_learning_rates.get(g, 0.0)
            if g in self.frozen_groups and lr != 0.0:
                out.append(f"frozen group {g} has learning rate {lr}")
            if g not in self.frozen_groups and not lr > 0.0:
                out.append(f"trainable group {g} needs a positive learning rate")
        if self.batch_size < 1 or self.max_steps < 0:
            out.append("batch_size must be >= 1 and max_steps >= 0")
        return out

    @property
    def trainable_groups(self) -> tuple[str, ...]:
        return tuple(g for g in GROUPS if g not in self.frozen_groups)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["frozen_groups"] = sorted(self.frozen_groups)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "StageConfig":
        d = dict(d)
        if "k_target" in d and isinstance(d["k_target"], Mapping):
            kt = dict(d["k_target"])
            if kt.get("k_grid") is not None:
                kt["k_grid"] = tuple(kt["k_grid"])
            d["k_target"] = obj.KTargetConfig(**kt)
        d["frozen_groups"] = frozenset(d.get("frozen_groups", ()))
        return cls(**d)


def default_stage_configs(variant: str = "frames16", steps: Mapping[int, int] | None = None) -> list[StageConfig]:
    """Per-stage rates, freezes and batch sizes for the 16- or 64-frame selector."""
    if variant not in ("frames16", "frames64"):
        raise ValueError(f"unknown variant {variant!r}")
    budget = {**DEFAULT_STEPS, **(steps or {})}
    batch = {"frames16": (16, 16, 16, 8), "frames64": (2, 16, 16, 8)}[variant]
    body = ("projectors", "encoder")
    rates = {
        1: {**{g: 1e-4 for g in body}},
        2: {"rank_head": 1e-4, **{g: 1e-5 for g in body}},
        3: {"k_head": 1e-4, **{g: 1e-7 for g in body}},
        4: {"rank_head": 5e-5, "k_head": 5e-5, **{g: 1e-5 for g in body}},
    }
    return [
        StageConfig(
            stage=s,
            group_learning_rates=rates[s],
            frozen_groups=frozenset(g for g in GROUPS if g not in rates[s]),
            batch_size=batch[s - 1],
            max_steps=budget[s],
            loss_kind=STAGE_LOSS[s],
        )
        for s in (1, 2, 3, 4)
    ]


@dataclass
class TrainState:
    params: FrameOracle
    optimizer: torch.optim.Optimizer | None = None
    scheduler: Any = None
    step: int = 0
    stage: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    history: list[dict[str, Any]] = field(default_factory=list)

    def moment_tensors(self) -> list[torch.Tensor]:
        if self.optimizer is None:
            return []
        return [p for p in self.optimizer.state]


def cosine_factor(step: int, total: int) -> float:
    if total <= 0:
        return 1.0
    return 0.5 * (1.0 + math.cos(math.pi * min(step, total) / total))


def prepare_stage(params: FrameOracle, cfg: StageConfig, seed: int = 0) -> TrainState:
    """Apply the stage's freeze mask and build its optimizer and schedule."""
    set_trainable(params, {g: g not in cfg.frozen_groups for g in GROUPS})
    groups = []
    for g in cfg.trainable_groups:
        tensors = [p for p in params.group_parameters(g) if p.requires_grad]
        if tensors:
            groups.append({"params": tensors, "lr": cfg.group_learning_rates[g], "name": g})
    optimizer = torch.optim.AdamW(groups, weight_decay=cfg.weight_decay) if groups else None
    scheduler = (
        torch.optim.lr_scheduler.LambdaLR(optimizer, lambda s: cosine_factor(s, cfg.max_steps))
        if optimizer is not None
        else None
    )
    return TrainState(params, optimizer, scheduler, 0, cfg.stage, np.random.default_rng([seed, cfg.stage]))


# ------------------------------------------------------------------ batching


def _pad_rows(rows: Sequence[Sequence[float]], n: int, fill: float = 0.0) -> torch.Tensor:
    out = torch.full((len(rows), n), fill, dtype=torch.float32)
    for b, r in enumerate(rows):
        out[b, : len(r)] = torch.as_tensor(np.asarray(r, dtype=np.float32))
    return out


# ------------------------------------------------------------------- targets


def stage_targets(
    state: TrainState,
    cfg: StageConfig,
    data: Sequence[TrainExample],
    backends: BackendSuite,
    cache: obj.TargetCache | None = None,
) -> list:
    """Per-example supervision for one stage, computed once at stage entry."""
    cache = cache if cache is not None else obj.TargetCache()
    kind = cfg.loss_kind
    k_max = state.params.config.k_max
    if kind == "ranknet_teacher":
        backends.require("similarity_teacher")
        return [
            np.asarray(backends.similarity_teacher(ex.frames, ex.prompt), dtype=np.float64) for ex in data
        ]
    if kind == "ranknet_loo":
        backends.require("task_loss_oracle")
        return [
            np.asarray(
                cache.get_or_compute(ex.task.example_id, 2, lambda ex=ex: obj.loo_targets(ex.frames, ex.task, backends.task_loss_oracle)).scores
            )
            for ex in data
        ]
    if kind == "k_head":
        backends.require("task_loss_oracle")
        scores = predict_batched(state.params, data)[0]
        out = []
        for ex, s in zip(data, scores):
            k = cache.get_or_compute(
                ex.task.example_id,
                3,
                lambda ex=ex, s=s: obj.kstar_target(
                    ex.frames, ScoreVector(tuple(s)), ex.task, backends.task_loss_oracle, cfg.k_target, k_max=k_max
                ),
            )
            out.append(int(k))
        return out
    if kind == "sft":
        out = []
        for ex in data:
            ann = ex.annotation
            if ann is None or ann.keyframe_indices is None:
                raise BackendError(f"stage 4 needs keyframe annotations; example {ex.task.example_id} has none")
            out.append((tuple(ann.keyframe_indices), min(int(ann.num_selected_frames), k_max)))
        return out
    raise ValueError(kind)


def stage_loss(params: FrameOracle, cfg: StageConfig, batch: Sequence[TrainExample], targets: Sequence) -> torch.Tensor:
    f, x, fm, tm = collate(batch)
    scores, k_logits = params(f, x, fm, tm)
    n = scores.shape[1]
    if cfg.loss_kind in ("ranknet_teacher", "ranknet_loo"):
        teacher = _pad_rows(targets, n)
        t = obj.pairwise_sign(teacher)
        return obj.ranknet_loss_tensor(scores, t, fm).mean()
    probs = torch.softmax(k_logits, dim=-1)
    if cfg.loss_kind == "k_head":
        k_star = torch.tensor([float(k) for k in targets])
        return obj.k_head_loss_tensor(probs, k_star, cfg.k_target).mean()
    teacher = torch.zeros(len(batch), n)
    for b, (kf, _) in enumerate(targets):
        teacher[b, list(kf)] = 1.0
    k_true = torch.tensor([float(k) for _, k in targets])
    rank = obj.ranknet_loss_tensor(scores, obj.pairwise_sign(teacher), fm)
    return (cfg.k_target.w_rank * rank + obj.k_head_loss_tensor(probs, k_true, cfg.k_target)).mean()


# ------------------------------------------------------------------ training


def _batches(rng: np.random.Generator, n: int, batch_size: int) -> Iterable[np.ndarray]:
    while True:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield order[start : start + batch_size]


def run_stage(
    params_or_state: FrameOracle | TrainState,
    cfg: StageConfig,
    data: Sequence[TrainExample],
    backends: BackendSuite,
    seed: int = 0,
    cache: obj.TargetCache | None = None,
    metrics_path: Path | None = None,
) -> TrainState:
    """Train one stage for ``cfg.max_steps`` steps and return the new state."""
    params = params_or_state.params if isinstance(params_or_state, TrainState) else params_or_state
    if not data:
        raise ValueError(f"stage {cfg.stage} received no training data")
    state = prepare_stage(params, cfg, seed)
    if isinstance(params_or_state, TrainState):
        state.history = params_or_state.history
    targets = stage_targets(state, cfg, data, backends, cache)
    batches = _batches(state.rng, len(data), cfg.batch_size)
    torch.manual_seed(_stage_seed(seed, cfg.stage))
    params.train()
    metrics = open(metrics_path, "a", encoding="utf-8") if metrics_path else None
    t0 = time.perf_counter()
    try:
        for _ in range(cfg.max_steps):
            idx = next(batches)
            batch = [data[i] for i in idx]
            loss = stage_loss(params, cfg, batch, [targets[i] for i in idx])
            if not torch.isfinite(loss):
                raise NonFiniteLossError(
                    f"stage {cfg.stage} step {state.step}: loss={loss.item()} on examples "
                    f"{[data[i].task.example_id for i in idx]}"
                )
            lr = state.scheduler.get_last_lr()[0] if state.scheduler else 0.0
            if state.optimizer is not None:
                state.optimizer.zero_grad(set_to_none=True)
                loss.backward()
                state.optimizer.step()
                state.scheduler.step()
            state.step += 1
            row = {"stage": cfg.stage, "step": state.step, "loss": loss.item(), "lr": lr}
            state.history.append(row)
            if metrics:
                metrics.write(json.dumps(row) + "\n")
    finally:
        if metrics:
            metrics.close()
        params.eval()
    log.info("stage %d: %d steps in %.1fs", cfg.stage, cfg.max_steps, time.perf_counter() - t0)
    return state


def _stage_seed(seed: int, stage: int) -> int:
    return (int(seed) * 1_000_003 + stage * 7919) % (2**31)


@dataclass
class CurriculumResult:
    params: FrameOracle
    stage_logs: dict[int, list[dict[str, Any]]]
    checkpoints: dict[int, Path]


def run_curriculum(
    seed: int,
    variant: str,
    data: Mapping[int, Sequence[TrainExample]],
    backends: BackendSuite,
    model_config: SelectorConfig | None = None,
    stage_configs: Sequence[StageConfig] | None = None,
    checkpoint_dir: Path | str | None = None,
    params: FrameOracle | None = None,
    after_stage=None,
) -> CurriculumResult:
    """Run the stages in ``stage_configs`` (default: all four) in order.

    ``data`` maps stage number to its example stream. Passing ``params``
    resumes from a checkpoint, e.g. running stages 3-4 on a stage-2 model.
    ``after_stage(stage, params)`` is called after each completed stage.
    """
    configs = list(stage_configs) if stage_configs is not None else default_stage_configs(variant)
    order = [c.stage for c in configs]
    if any(b <= a for a, b in zip(order, order[1:])):
        raise ValueError(f"stages must run in increasing order, got {order}")
    missing = [s for s in order if not data.get(s)]
    if missing:
        raise ValueError(f"no data routed to stage(s) {missing}")
    if params is None:
        params = init_params(model_config or SelectorConfig.for_variant(variant), seed)
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    logs: dict[int, list[dict[str, Any]]] = {}
    ckpts: dict[int, Path] = {}
    last: Path | None = None
    cache = obj.TargetCache()
    for cfg in configs:
        try:
            state = run_stage(
                params,
                cfg,
                data[cfg.stage],
                backends,
                seed=seed,
                cache=cache,
                metrics_path=(ckpt_dir / "metrics.jsonl") if ckpt_dir else None,
            )
        except Exception as exc:
            raise StageError(f"stage {cfg.stage} failed: {exc}", cfg.stage, last) from exc
        logs[cfg.stage] = state.history
        if ckpt_dir:
            last = ckpt_dir / f"stage{cfg.stage}.pt"
            save_checkpoint(params, last, {"stage": cfg.stage, "seed": seed, "variant": variant})
            ckpts[cfg.stage] = last
        if after_stage is not None:
            after_stage(cfg.stage, params)
    return CurriculumResult(params, logs, ckpts)


def stage_configs_from_mapping(raw: Mapping[str, Any], variant: str = "frames16") -> list[StageConfig]:
    """Default stage configs patched by ``{"stages": {"1": {...}, ...}}``.

    Unspecified fields keep their defaults; ``"steps"`` may also be given as
    ``{"steps": {"3": 600}}`` for the common case of changing budgets only.
    """
    variant = raw.get("variant", variant)
    steps = {int(k): int(v) for k, v in (raw.get("steps") or {}).items()}
    overrides = raw.get("stages") or {}
    unknown = set(map(str, overrides)) - {"1", "2", "3", "4"}
    if unknown:
        raise ValueError(f"unknown stage(s) in config: {sorted(unknown)}")
    out = []
    for cfg in default_stage_configs(variant, steps):
        patch = overrides.get(str(cfg.stage), {})
        out.append(StageConfig.from_dict({**cfg.to_dict(), **patch}) if patch else cfg)
    return out


def load_stage_configs(path, variant: str = "frames16") -> list[StageConfig]:
    """Read stage overrides from a JSON config file (see :func:`stage_configs_from_mapping`)."""
    with open(path, encoding="utf-8") as fh:
        return stage_configs_from_mapping(json.load(fh), variant)


def resume(path) -> FrameOracle:
    return load_checkpoint(path)[0]

