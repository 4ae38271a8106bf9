"""Backend interfaces and the deterministic planted-evidence world.

Every external model the system talks to (visual encoder, text encoder,
similarity teacher, task-loss oracle, QA verifiers, mining agent) sits behind
a small protocol here. :class:`PlantedWorld` implements all of them from a
seed, with each question's evidence frames known by construction.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Protocol, Sequence

import numpy as np

from .core import AnnotatedExample, CandidateSet, PromptEncoding, TaskRecord, TrainExample

PLANTED_SCHEME = "planted://"


class BackendError(RuntimeError):
    """A backend call failed; ``retryable`` tells callers whether to try again."""

    def __init__(self, message: str, *, retryable: bool = False, attempts: int = 1, backend: str = ""):
        super().__init__(message)
        self.retryable = retryable
        self.attempts = attempts
        self.backend = backend


class PreconditionError(BackendError, ValueError):
    def __init__(self, message: str, backend: str = ""):
        super().__init__(message, retryable=False, backend=backend)


class VisualEncoder(Protocol):
    def __call__(self, video: str, n_frames: int) -> CandidateSet: ...


class TextEncoder(Protocol):
    def __call__(self, text: str) -> PromptEncoding: ...


class SimilarityTeacher(Protocol):
    def __call__(self, frames: CandidateSet, prompt: PromptEncoding) -> np.ndarray: ...


class TaskLossOracle(Protocol):
    def __call__(self, task: TaskRecord, subset: Sequence[int]) -> float: ...


class QAOracle(Protocol):
    def __call__(self, task: TaskRecord, subset: Sequence[int]) -> str: ...


class AgentBackend(Protocol):
    def __call__(self, video: str, prompt: str, frame_indices: Sequence[int]) -> str:
        """Return the agent's raw (JSON) reply for ``prompt`` shown ``frame_indices``."""


@dataclass
class BackendSuite:
    visual_encoder: VisualEncoder | None = None
    text_encoder: TextEncoder | None = None
    similarity_teacher: SimilarityTeacher | None = None
    task_loss_oracle: TaskLossOracle | None = None
    qa_oracle: QAOracle | None = None
    agent: AgentBackend | None = None
    verifiers: list[QAOracle] = field(default_factory=list)

    def require(self, *roles: str) -> None:
        missing = [r for r in roles if not getattr(self, r)]
        if missing:
            raise BackendError(f"backend suite is missing: {', '.join(missing)}")


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _seed_for(*parts: Any) -> int:
    digest = hashlib.blake2b(repr(parts).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def heavy_tail_sizes(rng: np.random.Generator, n: int, upper: int) -> np.ndarray:
    """Heavy-tailed evidence sizes: median about 5, mean about 7, capped at ``upper``.

    Lognormal with median 5 and mean 7 (sigma^2 = 2 ln 1.4), rounded.
    """
    sigma = math.sqrt(2.0 * math.log(1.4))
    raw = rng.lognormal(mean=math.log(5.0), sigma=sigma, size=n)
    return np.clip(np.rint(raw), 1, upper).astype(int)


def _place_evidence(rng: np.random.Generator, size: int, n: int, layout: str) -> tuple[int, ...]:
    if size >= n:
        return tuple(range(n))
    if layout == "scattered":
        return tuple(sorted(rng.choice(n, size=size, replace=False).tolist()))
    # clustered: one to three contiguous runs, as events usually are
    n_runs = int(min(size, rng.integers(1, 4)))
    cuts = np.sort(rng.choice(np.arange(1, size), size=n_runs - 1, replace=False)) if n_runs > 1 else []
    lengths = np.diff(np.concatenate([[0], cuts, [size]])).astype(int)
    chosen: set[int] = set()
    for length in lengths:
        for _ in range(50):
            start = int(rng.integers(0, n - length + 1))
            span = set(range(start, start + length))
            if not span & chosen:
                chosen |= span
                break
        else:
            free = [i for i in range(n) if i not in chosen]
            chosen |= set(rng.choice(free, size=length, replace=False).tolist())
    return tuple(sorted(chosen))


@dataclass
class PlantedWorld:
    """Synthetic videos whose answer-bearing frames are planted.

    Evidence frames are unit vectors tilted at most ``evidence_spread`` off the question
    vector (cosine >= 0.8 at the default ``evidence_spread``); every other frame
    is an independent random direction. Prompts are noisy copies of the
    question vector.
    """

    seed: int = 0
    n_examples: int = 500
    n_frames: int = 16
    dim: int = 64
    n_tokens: int = 8
    evidence_sizes: tuple[int, int] | str = (2, 8)
    layout: str = "clustered"
    evidence_spread: float = 0.5
    token_noise: float = 0.3
    teacher_noise: float = 0.02
    cost_per_frame: float = 0.001
    duration_range: tuple[float, float] = (120.0, 180.0)

    def __post_init__(self) -> None:
        if self.n_frames < 1 or self.n_examples < 0:
            raise ValueError("invalid world size")
        if self.evidence_spread > 0.75:
            raise ValueError("evidence_spread > 0.75 would break the cosine >= 0.8 guarantee")
        rng = np.random.default_rng(self.seed)
        n, d = self.n_frames, self.dim
        if isinstance(self.evidence_sizes, str):
            if self.evidence_sizes != "heavy_tail":
                raise ValueError(f"unknown evidence size prior {self.evidence_sizes!r}")
            sizes = heavy_tail_sizes(rng, self.n_examples, upper=min(30, n))
        else:
            lo, hi = self.evidence_sizes
            if not 1 <= lo <= hi <= n:
                raise ValueError("evidence sizes must satisfy 1 <= lo <= hi <= n_frames")
            sizes = rng.integers(lo, hi + 1, size=self.n_examples)
        self.questions = _unit(rng.standard_normal((self.n_examples, d)))
        self.evidence: list[tuple[int, ...]] = []
        self.frames = np.empty((self.n_examples, n, d), dtype=np.float32)
        self.tokens = np.empty((self.n_examples, self.n_tokens, d), dtype=np.float32)
        self.durations = rng.uniform(*self.duration_range, size=self.n_examples).round(3)
        for i in range(self.n_examples):
            q = self.questions[i]
            ev = _place_evidence(rng, int(sizes[i]), n, self.layout)
            self.evidence.append(ev)
            emb = _unit(rng.standard_normal((n, d)))
            for j in ev:
                u = rng.standard_normal(d)
                u -= (u @ q) * q
                u /= np.linalg.norm(u)
                emb[j] = _unit(q + self.evidence_spread * rng.uniform(0.0, 1.0) * u)
            self.frames[i] = emb
            self.tokens[i] = _unit(q + self.token_noise * rng.standard_normal((self.n_tokens, d)) / math.sqrt(d))

    # -- descriptors ---------------------------------------------------

    def video(self, i: int) -> str:
        return f"{PLANTED_SCHEME}{self.seed}/{i}"

    def question(self, i: int) -> str:
        return f"What happens in event {i} of planted video {self.seed}?"

    def answer(self, i: int) -> str:
        return f"event-{i}-outcome"

    def wrong_answer(self, i: int) -> str:
        return f"event-{i}-unknown"

    def task(self, i: int) -> TaskRecord:
        self._check(i)
        return TaskRecord(i, self.video(i), self.question(i), self.answer(i), float(self.durations[i]))

    def example_id(self, ref: str | TaskRecord | int) -> int:
        if isinstance(ref, TaskRecord):
            return self._check(ref.example_id)
        if isinstance(ref, int):
            return self._check(ref)
        m = re.fullmatch(rf"{re.escape(PLANTED_SCHEME)}(\d+)/(\d+)", ref)
        if not m or int(m.group(1)) != self.seed:
            raise PreconditionError(f"{ref!r} is not a video of planted world {self.seed}", backend="planted")
        return self._check(int(m.group(2)))

    def _check(self, i: int) -> int:
        if not 0 <= i < self.n_examples:
            raise KeyError(f"unknown planted example id {i}")
        return i

    # -- encoders --------------------------------------------------------

    def candidate_set(self, i: int) -> CandidateSet:
        return CandidateSet.uniform(self.video(i), self.frames[i], float(self.durations[i]))

    def prompt(self, i: int) -> PromptEncoding:
        return PromptEncoding(self.question(i), self.tokens[i])

    def visual_encoder(self, video: str, n_frames: int | None = None) -> CandidateSet:
        i = self.example_id(video)
        if n_frames not in (None, self.n_frames):
            raise PreconditionError(f"planted world {self.seed} has {self.n_frames} frames per video, not {n_frames}")
        return self.candidate_set(i)

    def text_encoder(self, text: str) -> PromptEncoding:
        m = re.fullmatch(r"What happens in event (\d+) of planted video (\d+)\?", text)
        if m and int(m.group(2)) == self.seed and int(m.group(1)) < self.n_examples:
            return self.prompt(int(m.group(1)))
        rng = np.random.default_rng(_seed_for("text", self.seed, text))
        return PromptEncoding(text, _unit(rng.standard_normal((self.n_tokens, self.dim))).astype(np.float32))

    def example(self, i: int) -> TrainExample:
        return TrainExample(self.task(i), self.candidate_set(i), self.prompt(i), self.annotation(i), {"evidence": self.evidence[i]})

    def examples(self, ids: Sequence[int] | None = None) -> list[TrainExample]:
        return [self.example(i) for i in (range(self.n_examples) if ids is None else ids)]

    def annotation(self, i: int) -> AnnotatedExample:
        ev = self.evidence[i]
        return AnnotatedExample(
            id=i,
            question=self.question(i),
            ground_truth_answer=self.answer(i),
            video=self.video(i),
            keyframes_dir=f"planted/{self.seed}/keyframes/{i}",
            duration=float(self.durations[i]),
            num_selected_frames=len(ev),
            keyframe_indices=tuple(ev),
        )

    # -- teacher and oracles -----------------------------------------------

    def similarity_teacher(self, frames: CandidateSet, prompt: PromptEncoding) -> np.ndarray:
        """Cosine of each frame with the mean prompt token, plus seeded jitter."""
        q = _unit(np.asarray(prompt.token_embeddings, dtype=np.float64).mean(axis=0))
        e = _unit(np.asarray(frames.frame_embeddings, dtype=np.float64))
        sims = e @ q
        if self.teacher_noise:
            rng = np.random.default_rng(_seed_for("teacher", self.seed, frames.video_id, prompt.prompt_text))
            sims = sims + self.teacher_noise * rng.standard_normal(sims.shape)
        return sims

    def task_loss(self, task: TaskRecord | int, subset: Sequence[int]) -> float:
        """Missing-evidence count plus a small per-frame cost."""
        i = self.example_id(task)
        chosen = set(int(s) for s in subset)
        if any(not 0 <= s < self.n_frames for s in chosen):
            raise PreconditionError(f"subset index outside [0, {self.n_frames})", backend="planted")
        missing = sum(1 for e in self.evidence[i] if e not in chosen)
        return missing + self.cost_per_frame * len(chosen)

    def qa_oracle(self, required_fraction: float = 1.0, name: str = "planted-qa") -> "PlantedQA":
        return PlantedQA(self, required_fraction, name)

    def agent(self, **kwargs) -> "PlantedAgent":
        return PlantedAgent(self, **kwargs)

    def suite(self, n_verifiers: int = 3) -> BackendSuite:
        return BackendSuite(
            visual_encoder=self.visual_encoder,
            text_encoder=self.text_encoder,
            similarity_teacher=self.similarity_teacher,
            task_loss_oracle=self.task_loss,
            qa_oracle=self.qa_oracle(),
            agent=self.agent(),
            verifiers=[self.qa_oracle(name=f"planted-verifier-{k}") for k in range(n_verifiers)],
        )

    def corpus(self) -> list[dict[str, Any]]:
        """Mining input rows: id, video, question, answer, duration."""
        return [
            {"id": i, "video": self.video(i), "question": self.question(i), "answer": self.answer(i), "duration": float(self.durations[i])}
            for i in range(self.n_examples)
        ]


def planted_world(seed: int, n_examples: int, n_frames: int, evidence_sizes=(2, 8), **kwargs) -> PlantedWorld:
    return PlantedWorld(seed=seed, n_examples=n_examples, n_frames=n_frames, evidence_sizes=evidence_sizes, **kwargs)


def planted_task_loss(world: PlantedWorld, example_id: int, subset: Sequence[int]) -> float:
    return world.task_loss(example_id, subset)


@dataclass
class PlantedQA:
    """Answers correctly only when enough of the evidence is in the subset."""

    world: PlantedWorld
    required_fraction: float = 1.0
    name: str = "planted-qa"

    def __call__(self, task: TaskRecord, subset: Sequence[int]) -> str:
        if len(subset) == 0:
            raise PreconditionError("QA oracle needs at least one frame", backend=self.name)
        i = self.world.example_id(task)
        ev = self.world.evidence[i]
        seen = sum(1 for e in ev if e in set(subset))
        need = math.ceil(self.required_fraction * len(ev))
        return self.world.answer(i) if seen >= need else self.world.wrong_answer(i)


_BUFFER_FRAME_RE = re.compile(r"(?:^|\")frame (\d+):", re.MULTILINE)


@dataclass
class PlantedAgent:
    """Mining agent for a planted world speaking the JSON reply format.

    Evidence frames get relevance 5. Other frames get 2 when within
    ``context_radius`` of evidence and 1 otherwise; a seeded coin flips this
    with probability ``noise``. Confidence turns high once every evidence frame
    has been shown; the answer is right once half of them have.

    Stateless: frames shown earlier are read back from the prompt's buffer.
    """

    world: PlantedWorld
    context_radius: int = 5
    noise: float = 0.1
    wrong_ids: frozenset[int] = frozenset()

    def relevance(self, i: int, frame: int) -> int:
        ev = self.world.evidence[i]
        if frame in ev:
            return 5
        near = min(abs(frame - e) for e in ev) <= self.context_radius
        rng = np.random.default_rng(_seed_for("agent", self.world.seed, i, frame))
        if rng.random() < self.noise:
            near = not near
        return 2 if near else 1

    def __call__(self, video: str, prompt: str, frame_indices: Sequence[int]) -> str:
        i = self.world.example_id(video)
        deep = "new_frame_analysis" in prompt
        seen = {int(f) for f in frame_indices}
        if deep:
            seen.update(int(m) for m in _BUFFER_FRAME_RE.findall(prompt))
        ev = self.world.evidence[i]
        n_seen = sum(1 for e in ev if e in seen)
        analysis = [
            {"index": int(f), "caption": f"planted frame {int(f)}", "relevance": self.relevance(i, int(f))}
            for f in frame_indices
        ]
        if i in self.wrong_ids or n_seen < math.ceil(len(ev) / 2):
            answer = self.world.wrong_answer(i)
        else:
            answer = self.world.answer(i)
        reply: dict[str, Any] = {
            "new_frame_analysis" if deep else "frame_analysis": analysis,
            "confidence": "high" if n_seen >= len(ev) else "medium",
            "answer_attempt": answer,
            "reasoning": f"{n_seen} of the shown frames carry the event",
        }
        if deep:
            reply["revised_prev_scores"] = []
        return json.dumps(reply)


def latency_injected(fn: Callable, delay_s: float, sleep: Callable[[float], None] | None = None) -> Callable:
    """Wrap a backend so every call waits ``delay_s`` first; results are untouched."""
    pause = sleep or time.sleep

    def wrapped(*args, **kwargs):
        pause(delay_s)
        return fn(*args, **kwargs)

    return wrapped


def suite_from_config(cfg: Mapping[str, Any]) -> tuple[BackendSuite, PlantedWorld | None]:
    """Build backends from a config mapping.

    ``{"kind": "planted", ...world params}`` builds a synthetic world.
    ``{"kind": "http", "qa_endpoint": ...}`` wires HTTP verifiers (see
    :mod:`frameoracle.adapters`).
    """
    kind = cfg.get("kind", "planted")
    if kind == "planted":
        params = {k: v for k, v in cfg.items() if k not in ("kind", "n_verifiers", "agent")}
        for key in ("evidence_sizes", "duration_range"):
            if isinstance(params.get(key), list):
                params[key] = tuple(params[key])
        world = PlantedWorld(**params)
        suite = world.suite(int(cfg.get("n_verifiers", 3)))
        if "agent" in cfg:
            agent_kw = dict(cfg["agent"])
            if "wrong_ids" in agent_kw:
                agent_kw["wrong_ids"] = frozenset(agent_kw["wrong_ids"])
            suite.agent = world.agent(**agent_kw)
        return suite, world
    if kind == "http":
        from .adapters import http_suite

        return http_suite(cfg), None
    raise ValueError(f"unknown backend kind {kind!r}")

