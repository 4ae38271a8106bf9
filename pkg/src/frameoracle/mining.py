"""Keyframe mining and verification for building annotated VideoQA records.

Mining drives an agent over a 64-frame grid: probe three anchors, then keep
descending into the adjacent-anchor gap with the highest summed relevance,
four new frames at a time, until the answer is confident and stable.
Verification keeps frames at or above a relevance threshold and retains the instance only
if every verifier answers correctly from those frames alone.
"""

from __future__ import annotations

import json
import logging
import math
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

from .backends import AgentBackend, BackendError, QAOracle
from .core import (
    CONFIDENCE_LEVELS,
    GRID_SIZE,
    AnnotatedExample,
    FrameRecord,
    MiningTrajectory,
    TaskRecord,
)
from .stats import keyframe_summary

log = logging.getLogger(__name__)

ANCHORS = (0, 31, 63)
DENSE_ANCHORS = 4
LAST = GRID_SIZE - 1

Matcher = Callable[[str, str], bool]


class AgentResponseError(ValueError):
    """The agent's reply did not match the expected JSON schema."""


class MiningError(RuntimeError):
    def __init__(self, message: str, reason: str):
        super().__init__(message)
        self.reason = reason


@dataclass(frozen=True)
class MiningConfig:
    lambda_rel: int = 4
    max_iterations: int = 10
    retries: int = 2
    templates_dir: Path | None = None
    keyframes_root: str = "keyframes"


def load_template(name: str, templates_dir: Path | None = None) -> str:
    if templates_dir is not None:
        return (Path(templates_dir) / f"{name}.txt").read_text(encoding="utf-8")
    return resources.files("frameoracle.prompts").joinpath(f"{name}.txt").read_text(encoding="utf-8")


def format_duration(seconds: float) -> str:
    return f"{seconds:.1f}"


def initial_prompt(duration: float, question: str, indices: Sequence[int], templates_dir=None) -> str:
    return load_template("initial_analysis", templates_dir).format(
        duration_seconds=format_duration(duration),
        n_indices=len(indices),
        initial_indices=[int(i) for i in indices],
        question=question,
    )


def deep_dive_prompt(
    duration: float, question: str, buffer: str, indices: Sequence[int], segment: tuple[int, int], templates_dir=None
) -> str:
    return load_template("deep_dive", templates_dir).format(
        duration_seconds=format_duration(duration),
        question=question,
        buffer=buffer,
        n_indices=len(indices),
        indices=[int(i) for i in indices],
        start_idx=segment[0],
        end_idx=segment[1],
    )


# ----------------------------------------------------------- agent replies


@dataclass(frozen=True)
class FrameAnalysis:
    index: int
    caption: str
    relevance: int


@dataclass(frozen=True)
class AgentResponse:
    frame_analysis: tuple[FrameAnalysis, ...]
    revised_prev_scores: tuple[tuple[int, int], ...]
    confidence: str
    answer_attempt: str
    reasoning: str


def _relevance(value: Any, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or not 1 <= value <= 5:
        raise AgentResponseError(f"{where}: relevance must be an integer 1-5, got {value!r}")
    return value


def _strip_fences(text: str) -> str:
    m = re.search(r"```(?:json)?\s*(.*?)```", text, re.DOTALL)
    return m.group(1) if m else text


def parse_agent_response(
    text: str, requested: Sequence[int], shown_before: Iterable[int] = (), deep: bool = False
) -> AgentResponse:
    """Strictly validate an agent reply against the initial or deep-dive schema."""
    try:
        data = json.loads(_strip_fences(text))
    except json.JSONDecodeError as exc:
        raise AgentResponseError(f"reply is not JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise AgentResponseError("reply must be a JSON object")
    key = "new_frame_analysis" if deep else "frame_analysis"
    rows = data.get(key)
    if not isinstance(rows, list):
        raise AgentResponseError(f"missing list {key!r}")
    analysis = []
    for row in rows:
        if not isinstance(row, dict) or not isinstance(row.get("index"), int) or isinstance(row.get("index"), bool):
            raise AgentResponseError(f"malformed {key} entry {row!r}")
        analysis.append(FrameAnalysis(row["index"], str(row.get("caption", "")), _relevance(row.get("relevance"), key)))
    got = sorted(a.index for a in analysis)
    if got != sorted(int(i) for i in requested):
        raise AgentResponseError(f"{key} covers frames {got}, expected {sorted(requested)}")
    revised = []
    if deep:
        prev = set(shown_before)
        raw = data.get("revised_prev_scores", [])
        if not isinstance(raw, list):
            raise AgentResponseError("revised_prev_scores must be a list")
        for row in raw:
            if not isinstance(row, dict) or not isinstance(row.get("index"), int):
                raise AgentResponseError(f"malformed revision {row!r}")
            if row["index"] not in prev:
                raise AgentResponseError(f"revision for frame {row['index']} which was never shown")
            revised.append((row["index"], _relevance(row.get("relevance"), "revised_prev_scores")))
    conf = data.get("confidence")
    if conf not in CONFIDENCE_LEVELS:
        raise AgentResponseError(f"confidence must be one of {CONFIDENCE_LEVELS}, got {conf!r}")
    answer = data.get("answer_attempt")
    if not isinstance(answer, str):
        raise AgentResponseError("answer_attempt must be a string")
    return AgentResponse(tuple(analysis), tuple(revised), conf, answer, str(data.get("reasoning", "")))


def _ask(agent: AgentBackend, video: str, prompt: str, indices, shown_before, deep: bool, retries: int) -> AgentResponse:
    last: Exception | None = None
    for attempt in range(retries + 1):
        try:
            return parse_agent_response(agent(video, prompt, list(indices)), indices, shown_before, deep)
        except AgentResponseError as exc:
            last = exc
        except BackendError as exc:
            last = exc
            if not exc.retryable:
                break
        log.debug("agent reply rejected for %s (attempt %d): %s", video, attempt + 1, last)
    raise MiningError(f"agent failed for {video}: {last}", "agent_error")


# ------------------------------------------------------------ exploration


@dataclass(frozen=True)
class ExplorationState:
    video: str
    question: str
    duration: float
    segment: tuple[int, int]
    trajectory: MiningTrajectory
    iteration: int

    def __post_init__(self) -> None:
        s, e = self.segment
        if not 0 <= s < e <= LAST:
            raise ValueError(f"invalid segment {self.segment}")
        if self.iteration < 1:
            raise ValueError("iteration must be >= 1")

    @property
    def visited(self) -> frozenset[int]:
        return frozenset(self.trajectory.visited)

    def relevance(self, index: int) -> int:
        return self.trajectory.visited[index].relevance

    @property
    def buffer(self) -> str:
        """Per-frame notes so far, one line per visited frame in temporal order."""
        return "\n".join(
            f"frame {i}: {r.caption} (relevance {r.relevance})" for i, r in sorted(self.trajectory.visited.items())
        )


def _record(state_traj: MiningTrajectory | None, resp: AgentResponse, iteration: int) -> MiningTrajectory:
    visited = dict(state_traj.visited) if state_traj else {}
    for a in resp.frame_analysis:
        visited[a.index] = FrameRecord(a.caption, a.relevance, iteration)
    for idx, rel in resp.revised_prev_scores:
        visited[idx] = replace(visited[idx], relevance=rel)
    conf = (state_traj.confidence_history if state_traj else ()) + (resp.confidence,)
    answers = (state_traj.answer_history if state_traj else ()) + (resp.answer_attempt,)
    return MiningTrajectory(visited, conf, answers, final_answer=resp.answer_attempt)


def initial_probe(
    video: str, question: str, agent: AgentBackend, duration: float = 0.0, cfg: MiningConfig = MiningConfig()
) -> ExplorationState:
    prompt = initial_prompt(duration, question, ANCHORS, cfg.templates_dir)
    resp = _ask(agent, video, prompt, ANCHORS, (), False, cfg.retries)
    return ExplorationState(video, question, duration, (0, LAST), _record(None, resp, 1), 1)


def _gaps(anchors: Sequence[int]) -> list[tuple[int, int]]:
    return [(a, b) for a, b in zip(anchors, anchors[1:])]


def _room(gap: tuple[int, int], visited: frozenset[int]) -> int:
    return sum(1 for i in range(gap[0] + 1, gap[1]) if i not in visited)


def _best_gap(state: ExplorationState, gaps: Sequence[tuple[int, int]]) -> tuple[int, int]:
    # max() keeps the first maximum, so ties go to the earlier gap
    return max(gaps, key=lambda g: state.relevance(g[0]) + state.relevance(g[1]))


def choose_segment(state: ExplorationState) -> tuple[int, int]:
    """Adjacent anchor pair inside the current segment with the largest summed relevance.

    Pairs with no unvisited frame between them are only considered when no
    other pair is left.
    """
    s, e = state.segment
    anchors = sorted(i for i in state.visited if s <= i <= e)
    if len(anchors) < 2:
        raise ValueError(f"segment {state.segment} has fewer than two scored anchors")
    gaps = _gaps(anchors)
    open_gaps = [g for g in gaps if _room(g, state.visited)]
    return _best_gap(state, open_gaps or gaps)


def fallback_segment(state: ExplorationState) -> tuple[int, int] | None:
    """Most relevant gap anywhere with unvisited frames; ties go to the wider gap.

    Used once the current segment is exhausted. Preferring the wider gap on
    ties keeps a search that has seen only low-relevance frames from
    sweeping one end of the video.
    """
    gaps = [g for g in _gaps(sorted(state.visited)) if _room(g, state.visited)]
    if not gaps:
        return None
    return max(gaps, key=lambda g: (state.relevance(g[0]) + state.relevance(g[1]), _room(g, state.visited)))


def dense_anchors(segment: tuple[int, int], visited: Iterable[int] = (), count: int = DENSE_ANCHORS) -> list[int]:
    """Evenly spaced interior frames of ``segment``, rounded half up, minus visited ones."""
    s, e = segment
    seen = set(visited)
    out: list[int] = []
    for i in range(count):
        idx = math.floor((s * (count - i) + e * (i + 1)) / (count + 1) + 0.5)
        if s < idx < e and idx not in seen and idx not in out:
            out.append(idx)
    return out


def deepen(state: ExplorationState, agent: AgentBackend, cfg: MiningConfig = MiningConfig()) -> ExplorationState:
    """Score new frames inside the best gap, falling back to the best open gap anywhere."""
    segment = choose_segment(state)
    if _room(segment, state.visited) < DENSE_ANCHORS:
        # exhausted: too little left here for a full round of anchors
        segment = fallback_segment(state)
        if segment is None:
            return state
    new = dense_anchors(segment, state.visited)
    if not new:
        # even spacing only hit visited frames; take the unvisited ones spread across the gap
        free = [i for i in range(segment[0] + 1, segment[1]) if i not in state.visited]
        new = sorted({free[math.floor(j * len(free) / DENSE_ANCHORS)] for j in range(min(DENSE_ANCHORS, len(free)))})
    prompt = deep_dive_prompt(state.duration, state.question, state.buffer, new, segment, cfg.templates_dir)
    resp = _ask(agent, state.video, prompt, new, state.visited, True, cfg.retries)
    iteration = state.iteration + 1
    traj = _record(state.trajectory, resp, iteration)
    return replace(state, segment=segment, trajectory=traj, iteration=iteration)


def normalize_answer(text: str) -> str:
    return re.sub(r"\s+", " ", text.strip().lower()).rstrip(".!?")


def is_stable(state: ExplorationState) -> bool:
    t = state.trajectory
    return (
        len(t.answer_history) >= 2
        and t.confidence_history[-1] == "high"
        and normalize_answer(t.answer_history[-1]) == normalize_answer(t.answer_history[-2])
    )


def should_stop(state: ExplorationState, cfg: MiningConfig = MiningConfig()) -> bool:
    return is_stable(state) or len(state.visited) >= GRID_SIZE or state.iteration >= cfg.max_iterations


def default_matcher(prediction: str, truth: str) -> bool:
    return normalize_answer(prediction) == normalize_answer(truth)


def mine(
    video: str,
    question: str,
    ground_truth: str,
    agent: AgentBackend,
    duration: float = 0.0,
    cfg: MiningConfig = MiningConfig(),
    matcher: Matcher = default_matcher,
) -> MiningTrajectory:
    state = initial_probe(video, question, agent, duration, cfg)
    while not should_stop(state, cfg):
        nxt = deepen(state, agent, cfg)
        if nxt is state:
            break
        state = nxt
    traj = state.trajectory
    if not is_stable(state) and len(state.visited) < GRID_SIZE:
        return replace(traj, verdict="answer_mismatch", reason="iteration budget exhausted before a stable answer")
    if not matcher(traj.final_answer, ground_truth):
        return replace(traj, verdict="answer_mismatch", reason="final answer does not match ground truth")
    return replace(traj, verdict="accepted")


def filter_keyframes(traj: MiningTrajectory, lambda_rel: int = 4) -> list[int]:
    return sorted(i for i, r in traj.visited.items() if r.relevance >= lambda_rel)


def verify_sufficiency(
    keyframes: Sequence[int],
    task: TaskRecord,
    verifiers: Sequence[QAOracle],
    matcher: Matcher = default_matcher,
) -> bool:
    """True iff every verifier answers correctly from the keyframes alone."""
    if not verifiers:
        raise ValueError("at least one verifier must be configured")
    if not keyframes:
        return False
    return all(matcher(v(task, list(keyframes)), task.answer) for v in verifiers)


# --------------------------------------------------------------- dataset


@dataclass
class DatasetBuild:
    records: list[AnnotatedExample]
    trajectories: dict[int, MiningTrajectory]
    outcomes: dict[int, str]
    stats: dict[str, Any] = field(default_factory=dict)

    @property
    def discards(self) -> Counter:
        return Counter(v for v in self.outcomes.values() if v != "retained")

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "dataset.json", "w", encoding="utf-8") as fh:
            json.dump([r.to_dict() for r in self.records], fh, indent=2, ensure_ascii=False)
            fh.write("\n")
        with open(out / "trajectories.jsonl", "w", encoding="utf-8") as fh:
            for i, t in sorted(self.trajectories.items()):
                fh.write(json.dumps({"id": i, "outcome": self.outcomes[i], **t.to_dict()}) + "\n")
        report = {"n_input": len(self.outcomes), "n_retained": len(self.records), "discards": dict(sorted(self.discards.items())), **self.stats}
        (out / "discard_report.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")


def _process(row: Mapping[str, Any], agent, verifiers, cfg: MiningConfig, matcher) -> tuple[str, MiningTrajectory | None, AnnotatedExample | None]:
    task = TaskRecord(int(row["id"]), row["video"], row["question"], row["answer"], float(row.get("duration", 0.0)))
    try:
        traj = mine(task.video, task.question, task.answer, agent, task.duration, cfg, matcher)
    except MiningError as exc:
        log.warning("instance %s discarded: %s", task.example_id, exc)
        return exc.reason, None, None
    if traj.verdict != "accepted":
        return traj.verdict, traj, None
    keyframes = filter_keyframes(traj, cfg.lambda_rel)
    if not keyframes:
        return "insufficient", replace(traj, verdict="insufficient", reason=f"no frame reached relevance {cfg.lambda_rel}"), None
    try:
        ok = verify_sufficiency(keyframes, task, verifiers, matcher)
    except BackendError as exc:
        log.warning("verification failed for %s: %s", task.example_id, exc)
        return "backend_error", traj, None
    if not ok:
        return "verification_failed", traj, None
    record = AnnotatedExample(
        id=task.example_id,
        question=task.question,
        ground_truth_answer=task.answer,
        video=task.video,
        keyframes_dir=f"{cfg.keyframes_root}/{task.example_id}",
        duration=task.duration,
        num_selected_frames=len(keyframes),
        keyframe_indices=tuple(keyframes),
    )
    return "retained", traj, record


def build_dataset(
    corpus: Sequence[Mapping[str, Any]],
    agent: AgentBackend,
    verifiers: Sequence[QAOracle],
    lambda_rel: int = 4,
    cfg: MiningConfig | None = None,
    workers: int = 4,
    matcher: Matcher = default_matcher,
) -> DatasetBuild:
    """Mine, filter and verify every corpus row; failures are counted, never fatal."""
    if not verifiers:
        raise ValueError("at least one verifier must be configured")
    cfg = replace(cfg or MiningConfig(), lambda_rel=lambda_rel)
    rows = [dict(r, id=r.get("id", n)) for n, r in enumerate(corpus)]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(lambda r: _process(r, agent, verifiers, cfg, matcher), rows))
    build = DatasetBuild([], {}, {})
    for row, (outcome, traj, record) in sorted(zip(rows, results), key=lambda p: p[0]["id"]):
        build.outcomes[row["id"]] = outcome
        if traj is not None:
            build.trajectories[row["id"]] = traj
        if record is not None:
            build.records.append(record)
    if build.records:
        build.stats = keyframe_summary(build.records)
    return build


def read_corpus(path) -> list[dict[str, Any]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh):
            if line.strip():
                row = json.loads(line)
                missing = [k for k in ("video", "question", "answer") if k not in row]
                if missing:
                    raise ValueError(f"corpus line {n + 1} missing {missing}")
                rows.append(row)
    return rows
