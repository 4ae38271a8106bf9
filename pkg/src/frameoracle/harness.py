"""Selection, evaluation and token accounting on top of a trained selector."""

from __future__ import annotations

import math
import re
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .backends import BackendError, BackendSuite
from .core import CandidateSet, KDistribution, PromptEncoding, ScoreVector, SelectionResult, TrainExample
from .mining import default_matcher
from .model import FrameOracle, forward, predict_batched

# Visual tokens per frame for a 7B video VLM: 11,644 tokens at 16 frames.
TOKENS_PER_FRAME = 11_644.0 / 16


def decode_k(dist: KDistribution, n: int, rule: str = "argmax") -> int:
    if rule == "argmax":
        k = dist.argmax_k()
    elif rule == "expectation":
        k = int(math.floor(dist.expected_k() + 0.5))
    else:
        raise ValueError(f"unknown decode rule {rule!r}")
    return max(1, min(k, dist.k_max, n))


def _result(scores: ScoreVector, dist: KDistribution, k: int) -> SelectionResult:
    return SelectionResult(scores, dist, k, scores.top_k(k))


def select(params: FrameOracle, frames: CandidateSet, prompt: PromptEncoding) -> SelectionResult:
    """Adaptive selection: K from the K head, frames from the rank head, in temporal order."""
    if frames.n < 1:
        raise ValueError("candidate set is empty")
    scores, dist = forward(params, frames, prompt)
    return _result(scores, dist, decode_k(dist, frames.n, params.config.decode))


def select_topk(params: FrameOracle, frames: CandidateSet, prompt: PromptEncoding, k: int) -> SelectionResult:
    """Fixed-k selection that ignores the K head."""
    if not 1 <= k <= frames.n:
        raise ValueError(f"k={k} outside [1, {frames.n}]")
    scores, dist = forward(params, frames, prompt)
    return _result(scores, dist, k)


def estimate_visual_tokens(n_frames: float, tokens_per_frame: float = TOKENS_PER_FRAME) -> float:
    """Visual tokens for ``n_frames`` at a fixed per-frame rate.

    For a run with varying K this is only an approximation: a mean of 10.4
    frames gives 10.4 * 727.75 = 7,568.6, while counting tokens per sample
    over the same mix gave 7,581.6. Sum per-sample estimates when the exact
    figure matters.
    """
    if n_frames < 0 or tokens_per_frame < 0:
        raise ValueError("frame count and per-frame token rate must be non-negative")
    return n_frames * tokens_per_frame


def parse_mode(mode: str) -> int | None:
    """``"adaptive"`` -> None, ``"topk:8"`` -> 8."""
    if mode == "adaptive":
        return None
    m = re.fullmatch(r"topk:(\d+)", mode)
    if not m or int(m.group(1)) < 1:
        raise ValueError(f"mode must be 'adaptive' or 'topk:K', got {mode!r}")
    return int(m.group(1))


@dataclass
class EvalReport:
    n_examples: int
    mean_chosen_k: float
    accuracy: float
    keyframe_recall: float | None = None
    keyframe_precision: float | None = None
    mean_abs_k_error: float | None = None
    token_estimate_mean: float = 0.0
    n_backend_errors: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(
    params: FrameOracle,
    examples: Sequence[TrainExample],
    backends: BackendSuite,
    mode: str = "adaptive",
    tokens_per_frame: float = TOKENS_PER_FRAME,
    matcher: Callable[[str, str], bool] = default_matcher,
    workers: int = 4,
) -> EvalReport:
    """Select frames for every example, then score answers and keyframe overlap."""
    if not examples:
        raise ValueError("nothing to evaluate")
    fixed_k = parse_mode(mode)
    all_scores, all_probs = predict_batched(params, examples)
    selections = []
    for ex, s, p in zip(examples, all_scores, all_probs):
        scores = ScoreVector(tuple(s))
        dist = KDistribution(tuple((p / p.sum()).tolist()))
        k = fixed_k if fixed_k is not None else decode_k(dist, ex.frames.n, params.config.decode)
        if not 1 <= k <= ex.frames.n:
            raise ValueError(f"k={k} outside [1, {ex.frames.n}] for example {ex.task.example_id}")
        selections.append(_result(scores, dist, k))

    def answer(pair):
        ex, sel = pair
        if backends.qa_oracle is None:
            return None
        try:
            return matcher(backends.qa_oracle(ex.task, list(sel.selected_indices)), ex.task.answer)
        except BackendError:
            return "error"

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        verdicts = list(pool.map(answer, zip(examples, selections)))

    correct = sum(1 for v in verdicts if v is True)
    errors = sum(1 for v in verdicts if v == "error")
    recalls, precisions, k_errs = [], [], []
    for ex, sel in zip(examples, selections):
        ann = ex.annotation
        if ann is not None and ann.keyframe_indices:
            truth = set(ann.keyframe_indices)
            hit = len(truth & set(sel.selected_indices))
            recalls.append(hit / len(truth))
            precisions.append(hit / sel.chosen_k)
        if ann is not None:
            k_errs.append(abs(sel.chosen_k - ann.num_selected_frames))
    ks = np.array([s.chosen_k for s in selections], dtype=np.float64)
    return EvalReport(
        n_examples=len(examples),
        mean_chosen_k=float(ks.mean()),
        accuracy=correct / len(examples),
        keyframe_recall=float(np.mean(recalls)) if recalls else None,
        keyframe_precision=float(np.mean(precisions)) if precisions else None,
        mean_abs_k_error=float(np.mean(k_errs)) if k_errs else None,
        token_estimate_mean=float(np.mean([estimate_visual_tokens(k, tokens_per_frame) for k in ks])),
        n_backend_errors=errors,
    )


# ----------------------------------------------------------- embedding files
#
# Layout (little-endian):
#   bytes 0-3   magic b"FOEM"
#   bytes 4-5   uint16 format version (1)
#   bytes 6-7   uint16 reserved (0)
#   bytes 8-11  uint32 N (rows)
#   bytes 12-15 uint32 D (columns)
#   bytes 16-23 ASCII dtype name, NUL padded ("float32" or "float64")
#   bytes 24-   N*D values, row-major

EMB_MAGIC = b"FOEM"
EMB_HEADER = struct.Struct("<4sHHII8s")
EMB_DTYPES = {"float32": "<f4", "float64": "<f8"}


def write_embeddings(path, matrix) -> None:
    arr = np.asarray(matrix)
    if arr.ndim != 2:
        raise ValueError("embedding matrix must be 2-D")
    name = "float64" if arr.dtype == np.float64 else "float32"
    data = np.ascontiguousarray(arr, dtype=EMB_DTYPES[name])
    with open(path, "wb") as fh:
        fh.write(EMB_HEADER.pack(EMB_MAGIC, 1, 0, data.shape[0], data.shape[1], name.encode("ascii")))
        fh.write(data.tobytes(order="C"))


def read_embeddings(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < EMB_HEADER.size:
        raise ValueError(f"{path}: file too short for an embedding header")
    magic, version, _, n, d, name = EMB_HEADER.unpack_from(raw)
    if magic != EMB_MAGIC or version != 1:
        raise ValueError(f"{path}: not a version-1 embedding file")
    dtype = EMB_DTYPES.get(name.rstrip(b"\0").decode("ascii"))
    if dtype is None:
        raise ValueError(f"{path}: unsupported dtype {name!r}")
    payload = raw[EMB_HEADER.size :]
    expected = n * d * np.dtype(dtype).itemsize
    if len(payload) != expected:
        raise ValueError(f"{path}: payload has {len(payload)} bytes, header implies {expected}")
    return np.frombuffer(payload, dtype=dtype).reshape(n, d).copy()
