"""Value objects shared across the selector, trainer, miner and CLI.

Everything here is immutable once built. Array-backed types keep a read-only
numpy copy so they can be passed between worker threads without locking.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

GRID_SIZE = 64
CONFIDENCE_LEVELS = ("high", "medium", "low")
VERDICTS = ("accepted", "answer_mismatch", "insufficient")

# Key order of a released dataset record.
RECORD_KEYS = (
    "id",
    "question",
    "ground_truth_answer",
    "video",
    "keyframes_dir",
    "duration",
    "num_selected_frames",
)


def _frozen_matrix(values: Any, name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float32, copy=True)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class CandidateSet:
    """The N uniformly pre-sampled frames of one video, as embeddings."""

    video_id: str
    frame_embeddings: np.ndarray
    frame_indices: tuple[int, ...]
    timestamps_s: tuple[float, ...]
    duration_s: float

    def __post_init__(self) -> None:
        emb = _frozen_matrix(self.frame_embeddings, "frame_embeddings")
        object.__setattr__(self, "frame_embeddings", emb)
        object.__setattr__(self, "frame_indices", tuple(int(i) for i in self.frame_indices))
        object.__setattr__(self, "timestamps_s", tuple(float(t) for t in self.timestamps_s))
        n = emb.shape[0]
        if n < 1:
            raise ValueError("candidate set needs at least one frame")
        if len(self.frame_indices) != n or len(self.timestamps_s) != n:
            raise ValueError("frame_indices / timestamps_s must have one entry per embedding row")
        if any(b <= a for a, b in zip(self.frame_indices, self.frame_indices[1:])):
            raise ValueError("frame_indices must be strictly increasing")
        if any(t < 0 or t > self.duration_s for t in self.timestamps_s):
            raise ValueError("timestamps must lie in [0, duration_s]")

    @property
    def n(self) -> int:
        return self.frame_embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.frame_embeddings.shape[1]

    @classmethod
    def uniform(cls, video_id: str, embeddings: Any, duration_s: float, total_frames: int | None = None):
        """Candidate set sampled at the centres of N equal slices of the video."""
        emb = np.asarray(embeddings, dtype=np.float32)
        n = emb.shape[0]
        total = total_frames if total_frames is not None else n
        indices = [int((i + 0.5) * total / n) for i in range(n)]
        stamps = [(i + 0.5) * duration_s / n for i in range(n)]
        return cls(video_id, emb, tuple(indices), tuple(stamps), float(duration_s))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CandidateSet):
            return NotImplemented
        return (
            self.video_id == other.video_id
            and np.array_equal(self.frame_embeddings, other.frame_embeddings)
            and self.frame_indices == other.frame_indices
            and self.timestamps_s == other.timestamps_s
            and self.duration_s == other.duration_s
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "video_id": self.video_id,
            "frame_embeddings": self.frame_embeddings.tolist(),
            "frame_indices": list(self.frame_indices),
            "timestamps_s": list(self.timestamps_s),
            "duration_s": self.duration_s,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "CandidateSet":
        return cls(
            d["video_id"],
            np.asarray(d["frame_embeddings"], dtype=np.float32),
            tuple(d["frame_indices"]),
            tuple(d["timestamps_s"]),
            float(d["duration_s"]),
        )


@dataclass(frozen=True, eq=False)
class PromptEncoding:
    prompt_text: str
    token_embeddings: np.ndarray

    def __post_init__(self) -> None:
        emb = _frozen_matrix(self.token_embeddings, "token_embeddings")
        if emb.shape[0] < 1:
            raise ValueError("prompt needs at least one token")
        object.__setattr__(self, "token_embeddings", emb)

    @property
    def token_count(self) -> int:
        return self.token_embeddings.shape[0]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PromptEncoding):
            return NotImplemented
        return self.prompt_text == other.prompt_text and np.array_equal(
            self.token_embeddings, other.token_embeddings
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "prompt_text": self.prompt_text,
            "token_embeddings": self.token_embeddings.tolist(),
            "token_count": self.token_count,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "PromptEncoding":
        enc = cls(d["prompt_text"], np.asarray(d["token_embeddings"], dtype=np.float32))
        if "token_count" in d and int(d["token_count"]) != enc.token_count:
            raise ValueError("token_count does not match token_embeddings")
        return enc


@dataclass(frozen=True)
class ScoreVector:
    scores: tuple[float, ...]

    def __post_init__(self) -> None:
        vals = tuple(float(s) for s in self.scores)
        if not all(math.isfinite(s) for s in vals):
            raise ValueError("scores must be finite")
        object.__setattr__(self, "scores", vals)

    def __len__(self) -> int:
        return len(self.scores)

    def top_k(self, k: int) -> tuple[int, ...]:
        """Positions of the k highest scores, ties to the earlier frame, ascending."""
        order = sorted(range(len(self.scores)), key=lambda i: (-self.scores[i], i))
        return tuple(sorted(order[:k]))

    def to_dict(self) -> dict[str, Any]:
        return {"scores": list(self.scores)}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ScoreVector":
        return cls(tuple(d["scores"]))


@dataclass(frozen=True)
class KDistribution:
    """Categorical distribution over k = 1..k_max (``probs[i]`` is p(k=i+1))."""

    probs: tuple[float, ...]

    def __post_init__(self) -> None:
        vals = tuple(float(p) for p in self.probs)
        if not vals:
            raise ValueError("k_max must be >= 1")
        if any(p < 0 or not math.isfinite(p) for p in vals):
            raise ValueError("probabilities must be finite and non-negative")
        if abs(sum(vals) - 1.0) > 1e-6:
            raise ValueError(f"probabilities sum to {sum(vals)!r}, not 1")
        object.__setattr__(self, "probs", vals)

    @property
    def k_max(self) -> int:
        return len(self.probs)

    def argmax_k(self) -> int:
        best = max(range(self.k_max), key=lambda i: (self.probs[i], -i))
        return best + 1

    def expected_k(self) -> float:
        return sum((i + 1) * p for i, p in enumerate(self.probs))

    def to_dict(self) -> dict[str, Any]:
        return {"probs": list(self.probs), "k_max": self.k_max}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "KDistribution":
        dist = cls(tuple(d["probs"]))
        if "k_max" in d and int(d["k_max"]) != dist.k_max:
            raise ValueError("k_max does not match probs length")
        return dist


@dataclass(frozen=True)
class SelectionResult:
    scores: ScoreVector
    k_distribution: KDistribution
    chosen_k: int
    selected_indices: tuple[int, ...]

    def __post_init__(self) -> None:
        sel = tuple(int(i) for i in self.selected_indices)
        object.__setattr__(self, "selected_indices", sel)
        # fixed-k selection may exceed k_max, so only N bounds chosen_k here
        if not 1 <= self.chosen_k <= len(self.scores):
            raise ValueError(f"chosen_k={self.chosen_k} out of range")
        if len(sel) != self.chosen_k:
            raise ValueError("selected_indices must have exactly chosen_k entries")
        if any(b <= a for a, b in zip(sel, sel[1:])):
            raise ValueError("selected_indices must be strictly ascending")
        if sel != self.scores.top_k(self.chosen_k):
            raise ValueError("selected_indices are not the top-chosen_k frames by score")

    def to_dict(self) -> dict[str, Any]:
        return {
            "scores": self.scores.to_dict(),
            "k_distribution": self.k_distribution.to_dict(),
            "chosen_k": self.chosen_k,
            "selected_indices": list(self.selected_indices),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SelectionResult":
        return cls(
            ScoreVector.from_dict(d["scores"]),
            KDistribution.from_dict(d["k_distribution"]),
            int(d["chosen_k"]),
            tuple(d["selected_indices"]),
        )


@dataclass(frozen=True)
class AnnotatedExample:
    """One released dataset record.

    Not validated on construction so that malformed records loaded from disk
    can still be represented and reported by :func:`validate`.
    """

    id: int
    question: str
    ground_truth_answer: str
    video: str
    keyframes_dir: str
    duration: float
    num_selected_frames: int
    keyframe_indices: tuple[int, ...] | None = None

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "id": self.id,
            "question": self.question,
            "ground_truth_answer": self.ground_truth_answer,
            "video": self.video,
            "keyframes_dir": self.keyframes_dir,
            "duration": self.duration,
            "num_selected_frames": self.num_selected_frames,
        }
        if self.keyframe_indices is not None:
            d["keyframe_indices"] = list(self.keyframe_indices)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "AnnotatedExample":
        missing = [k for k in RECORD_KEYS if k not in d]
        if missing:
            raise ValueError(f"record missing keys: {missing}")
        kf = d.get("keyframe_indices")
        return cls(
            id=d["id"],
            question=d["question"],
            ground_truth_answer=d["ground_truth_answer"],
            video=d["video"],
            keyframes_dir=d["keyframes_dir"],
            duration=d["duration"],
            num_selected_frames=d["num_selected_frames"],
            keyframe_indices=None if kf is None else tuple(kf),
        )

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> "AnnotatedExample":
        return cls.from_dict(json.loads(text))


def validation_errors(example: AnnotatedExample) -> list[str]:
    errors = []
    if isinstance(example.id, bool) or not isinstance(example.id, int):
        errors.append("id must be an integer")
    for name in ("question", "ground_truth_answer", "video", "keyframes_dir"):
        if not isinstance(getattr(example, name), str):
            errors.append(f"{name} must be a string")
    if isinstance(example.duration, bool) or not isinstance(example.duration, (int, float)):
        errors.append("duration must be a number")
    elif not math.isfinite(example.duration) or example.duration < 0:
        errors.append("duration must be finite and non-negative")
    n = example.num_selected_frames
    if isinstance(n, bool) or not isinstance(n, int):
        errors.append("num_selected_frames must be an integer")
    elif n < 1:
        errors.append("num_selected_frames must be >= 1")
    kf = example.keyframe_indices
    if kf is not None:
        if isinstance(n, int) and len(kf) != n:
            errors.append(f"{len(kf)} keyframe_indices listed but num_selected_frames={n}")
        if any(isinstance(i, bool) or not isinstance(i, int) or not 0 <= i < GRID_SIZE for i in kf):
            errors.append(f"keyframe_indices must be integers in [0, {GRID_SIZE - 1}]")
        elif len(set(kf)) != len(kf):
            errors.append("keyframe_indices contain duplicates")
    return errors


def validate(example: AnnotatedExample) -> bool:
    return not validation_errors(example)


@dataclass(frozen=True)
class FrameRecord:
    caption: str
    relevance: int
    iteration_seen: int

    def __post_init__(self) -> None:
        if isinstance(self.relevance, bool) or self.relevance not in (1, 2, 3, 4, 5):
            raise ValueError(f"relevance must be an integer 1..5, got {self.relevance!r}")


@dataclass(frozen=True)
class MiningTrajectory:
    """What the mining agent saw and said while exploring one video."""

    visited: dict[int, FrameRecord]
    confidence_history: tuple[str, ...]
    answer_history: tuple[str, ...]
    final_answer: str = ""
    verdict: str | None = None
    reason: str = ""

    def __post_init__(self) -> None:
        if any(not 0 <= i < GRID_SIZE for i in self.visited):
            raise ValueError("visited frame index outside the 64-frame grid")
        if len(self.confidence_history) != len(self.answer_history) or not self.answer_history:
            raise ValueError("confidence and answer histories must have equal length >= 1")
        if any(c not in CONFIDENCE_LEVELS for c in self.confidence_history):
            raise ValueError("unknown confidence level")
        if self.verdict is not None and self.verdict not in VERDICTS:
            raise ValueError(f"unknown verdict {self.verdict!r}")

    def relevances(self) -> dict[int, int]:
        return {i: r.relevance for i, r in sorted(self.visited.items())}

    def to_dict(self) -> dict[str, Any]:
        return {
            "visited": {
                str(i): {"caption": r.caption, "relevance": r.relevance, "iteration_seen": r.iteration_seen}
                for i, r in sorted(self.visited.items())
            },
            "confidence_history": list(self.confidence_history),
            "answer_history": list(self.answer_history),
            "final_answer": self.final_answer,
            "verdict": self.verdict,
            "reason": self.reason,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "MiningTrajectory":
        return cls(
            visited={int(i): FrameRecord(**r) for i, r in d["visited"].items()},
            confidence_history=tuple(d["confidence_history"]),
            answer_history=tuple(d["answer_history"]),
            final_answer=d.get("final_answer", ""),
            verdict=d.get("verdict"),
            reason=d.get("reason", ""),
        )


@dataclass(frozen=True)
class TaskRecord:
    """A video/question/answer triple as seen by task-loss and QA oracles."""

    example_id: int
    video: str
    question: str
    answer: str
    duration: float = 0.0


@dataclass(frozen=True)
class TrainExample:
    """Inputs for one training or evaluation step."""

    task: TaskRecord
    frames: CandidateSet
    prompt: PromptEncoding
    annotation: AnnotatedExample | None = None
    meta: dict[str, Any] = field(default_factory=dict, compare=False)


def load_records(path) -> list[AnnotatedExample]:
    """Read records from a JSON array file or a JSONL file."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    stripped = text.lstrip()
    if stripped.startswith("["):
        items = json.loads(text)
    else:
        items = [json.loads(line) for line in text.splitlines() if line.strip()]
    return [AnnotatedExample.from_dict(d) for d in items]


def dump_records(records: Sequence[AnnotatedExample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([r.to_dict() for r in records], fh, indent=2, ensure_ascii=False)
        fh.write("\n")
