"""Adaptive keyframe selection for video question answering.

A light transformer reads N pre-sampled frame embeddings together with the
question tokens and emits per-frame relevance scores (rank head) and a
distribution over how many frames to keep (K head).
"""

from __future__ import annotations

from .backends import BackendError, BackendSuite, PlantedWorld, planted_task_loss, planted_world
from .core import (
    AnnotatedExample,
    CandidateSet,
    KDistribution,
    MiningTrajectory,
    PromptEncoding,
    ScoreVector,
    SelectionResult,
    TaskRecord,
    TrainExample,
)
from .harness import EvalReport, estimate_visual_tokens, evaluate, select, select_topk
from .model import FrameOracle, SelectorConfig, forward, init_params, set_trainable
from .objectives import (
    class_target,
    evo_loss,
    k_head_loss,
    kstar_target,
    loo_targets,
    ranknet_loss,
    sft_loss,
)

__version__ = "0.1.0"

__all__ = [
    "AnnotatedExample",
    "BackendError",
    "BackendSuite",
    "CandidateSet",
    "EvalReport",
    "FrameOracle",
    "KDistribution",
    "MiningTrajectory",
    "PlantedWorld",
    "PromptEncoding",
    "ScoreVector",
    "SelectionResult",
    "SelectorConfig",
    "TaskRecord",
    "TrainExample",
    "class_target",
    "estimate_visual_tokens",
    "evaluate",
    "evo_loss",
    "forward",
    "init_params",
    "k_head_loss",
    "kstar_target",
    "loo_targets",
    "planted_task_loss",
    "planted_world",
    "ranknet_loss",
    "select",
    "select_topk",
    "set_trainable",
    "sft_loss",
]
