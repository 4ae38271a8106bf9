from __future__ import annotations

import json

import pytest

from frameoracle import mining as mn
from frameoracle.backends import BackendError, PlantedWorld
from frameoracle.core import FrameRecord, MiningTrajectory, TaskRecord, validate


class ScriptedAgent:
    """Replies with fixed relevances; ``bad`` replies are returned first."""

    def __init__(self, relevance, answers=("ans",), confidence=("high",), bad=(), revisions=()):
        self.relevance = relevance
        self.answers = list(answers)
        self.confidence = list(confidence)
        self.bad = list(bad)
        self.revisions = list(revisions)
        self.calls = []

    def __call__(self, video, prompt, frame_indices):
        self.calls.append((prompt, list(frame_indices)))
        if self.bad:
            return self.bad.pop(0)
        deep = "new_frame_analysis" in prompt
        n = len(self.calls)
        rows = [{"index": i, "caption": f"c{i}", "relevance": self.relevance(i)} for i in frame_indices]
        reply = {
            "new_frame_analysis" if deep else "frame_analysis": rows,
            "confidence": self.confidence[min(n, len(self.confidence)) - 1],
            "answer_attempt": self.answers[min(n, len(self.answers)) - 1],
            "reasoning": "",
        }
        if deep:
            reply["revised_prev_scores"] = self.revisions.pop(0) if self.revisions else []
        return json.dumps(reply)


def _rel(table, default=1):
    return lambda i: table.get(i, default)


def _state(relevances, segment=(0, 63), answers=("a",), conf=("medium",), iteration=1):
    traj = MiningTrajectory({i: FrameRecord("", r, 1) for i, r in relevances.items()}, tuple(conf), tuple(answers))
    return mn.ExplorationState("v", "q", 10.0, segment, traj, iteration)


# ----------------------------------------------------------------- probing


def test_initial_probe_scores_anchors_and_stores_relevances():
    agent = ScriptedAgent(_rel({0: 2, 31: 5, 63: 3}))
    state = mn.initial_probe("v", "why?", agent, 126.9)
    assert state.visited == {0, 31, 63}
    assert state.trajectory.relevances() == {0: 2, 31: 5, 63: 3}
    prompt = agent.calls[0][0]
    assert "126.9" in prompt and "[0, 31, 63]" in prompt and "why?" in prompt


def test_prompt_templates_fill_every_slot():
    p1 = mn.initial_prompt(10.0, "q?", [0, 31, 63])
    p2 = mn.deep_dive_prompt(10.0, "q?", "frame 0: x (relevance 2)", [37, 44], (31, 63))
    for p in (p1, p2):
        assert "{" + "question" + "}" not in p and "q?" in p
    assert "frame 0: x (relevance 2)" in p2 and "[37, 44]" in p2


def test_relevance_out_of_range_is_retried():
    bad = json.dumps({"frame_analysis": [{"index": i, "caption": "", "relevance": 7} for i in (0, 31, 63)], "confidence": "high", "answer_attempt": "a"})
    agent = ScriptedAgent(_rel({}), bad=[bad])
    state = mn.initial_probe("v", "q", agent)
    assert len(agent.calls) == 2 and state.visited == {0, 31, 63}


def test_persistently_malformed_agent_raises_with_reason():
    agent = ScriptedAgent(_rel({}), bad=["not json"] * 5)
    with pytest.raises(mn.MiningError) as err:
        mn.initial_probe("v", "q", agent, cfg=mn.MiningConfig(retries=2))
    assert err.value.reason == "agent_error" and len(agent.calls) == 3


def test_non_retryable_backend_error_stops_immediately():
    calls = []

    def agent(video, prompt, idx):
        calls.append(1)
        raise BackendError("401", retryable=False)

    with pytest.raises(mn.MiningError):
        mn.initial_probe("v", "q", agent)
    assert len(calls) == 1


@pytest.mark.parametrize(
    "reply",
    [
        {"frame_analysis": [{"index": 0, "relevance": 3}], "confidence": "high", "answer_attempt": "a"},
        {"frame_analysis": [{"index": i, "relevance": True} for i in (0, 31, 63)], "confidence": "high", "answer_attempt": "a"},
        {"frame_analysis": [{"index": i, "relevance": 3} for i in (0, 31, 63)], "confidence": "sure", "answer_attempt": "a"},
        {"frame_analysis": [{"index": i, "relevance": 3} for i in (0, 31, 63)], "confidence": "high"},
    ],
)
def test_parse_rejects_schema_violations(reply):
    with pytest.raises(mn.AgentResponseError):
        mn.parse_agent_response(json.dumps(reply), [0, 31, 63])


def test_parse_accepts_fenced_json_and_rejects_unseen_revision():
    body = {"new_frame_analysis": [{"index": 5, "caption": "x", "relevance": 4}], "confidence": "low", "answer_attempt": "a", "revised_prev_scores": [{"index": 31, "relevance": 2}]}
    resp = mn.parse_agent_response("```json\n" + json.dumps(body) + "\n```", [5], shown_before={0, 31, 63}, deep=True)
    assert resp.revised_prev_scores == ((31, 2),)
    with pytest.raises(mn.AgentResponseError):
        mn.parse_agent_response(json.dumps(body), [5], shown_before={0, 63}, deep=True)


# ----------------------------------------------------------- segmentation


def test_choose_segment_larger_sum_and_tie_to_earlier():
    assert mn.choose_segment(_state({0: 2, 31: 5, 63: 3})) == (31, 63)
    assert mn.choose_segment(_state({0: 3, 31: 1, 63: 3})) == (0, 31)


def test_choose_segment_stays_inside_current_segment():
    state = _state({0: 5, 31: 2, 37: 3, 44: 5, 50: 4, 57: 1, 63: 2}, segment=(31, 63))
    seg = mn.choose_segment(state)
    assert seg == (44, 50)
    assert 31 <= seg[0] < seg[1] <= 63


def test_dense_anchors_worked_example():
    assert mn.dense_anchors((31, 63)) == [37, 44, 50, 57]
    assert mn.dense_anchors((31, 63), visited={44}) == [37, 50, 57]


def test_deepen_samples_four_frames_and_applies_revisions():
    agent = ScriptedAgent(_rel({0: 2, 31: 5, 63: 3}), confidence=("medium",), revisions=[[{"index": 31, "relevance": 2}]])
    state = mn.initial_probe("v", "q", agent)
    nxt = mn.deepen(state, agent)
    assert nxt.segment == (31, 63)
    assert nxt.visited - state.visited == {37, 44, 50, 57}
    assert nxt.relevance(31) == 2
    assert nxt.iteration == 2 and len(nxt.trajectory.answer_history) == 2
    assert "frame 31: c31 (relevance 5)" in agent.calls[-1][0]


def test_deepen_falls_back_when_segment_exhausted():
    rel = {i: 1 for i in range(31, 64)} | {0: 1, 31: 5, 63: 5}
    state = _state(rel, segment=(31, 63))
    agent = ScriptedAgent(_rel({}))
    nxt = mn.deepen(state, agent)
    assert nxt.segment == (0, 31)
    assert nxt.visited - state.visited == {6, 12, 19, 25}


def test_deepen_returns_same_state_when_grid_covered():
    state = _state({i: 1 for i in range(64)})
    assert mn.deepen(state, ScriptedAgent(_rel({}))) is state


# --------------------------------------------------------------- stopping


@pytest.mark.parametrize(
    "conf, answers, visited, iteration, expected",
    [
        (("medium", "high", "high"), ("x", "Yes ", "yes."), 3, 3, True),
        (("high",), ("x",), 3, 1, False),
        (("medium", "medium"), ("x", "x"), 64, 2, True),
        (("medium", "high"), ("x", "y"), 3, 10, True),
        (("medium", "high"), ("x", "y"), 3, 9, False),
    ],
)
def test_should_stop(conf, answers, visited, iteration, expected):
    state = _state({i: 1 for i in range(visited)}, answers=answers, conf=conf, iteration=iteration)
    assert mn.should_stop(state) is expected


# ------------------------------------------------------------------ mining


def test_mine_accepts_and_marks_evidence():
    world = PlantedWorld(seed=3, n_examples=5, n_frames=64, evidence_sizes=(2, 4))
    agent = world.agent()
    for i in range(5):
        traj = mn.mine(world.video(i), world.question(i), world.answer(i), agent)
        assert len(traj.visited) >= 3
        if traj.verdict == "accepted":
            for e in world.evidence[i]:
                if e in traj.visited:
                    assert traj.visited[e].relevance == 5


def test_mine_wrong_answer_is_answer_mismatch():
    world = PlantedWorld(seed=3, n_examples=5, n_frames=64, evidence_sizes=(2, 4))
    traj = mn.mine(world.video(0), world.question(0), world.answer(0), world.agent(wrong_ids=frozenset({0})))
    assert traj.verdict == "answer_mismatch"


def test_mine_budget_exhaustion_is_answer_mismatch_with_reason():
    agent = ScriptedAgent(_rel({}), confidence=("medium",))
    traj = mn.mine("v", "q", "ans", agent, cfg=mn.MiningConfig(max_iterations=3))
    assert traj.verdict == "answer_mismatch" and "budget" in traj.reason
    assert len(traj.answer_history) == 3


def test_visited_set_is_monotone():
    world = PlantedWorld(seed=4, n_examples=3, n_frames=64, evidence_sizes=(3, 6))
    agent = world.agent()
    state = mn.initial_probe(world.video(1), world.question(1), agent)
    seen = set(state.visited)
    while not mn.should_stop(state):
        state = mn.deepen(state, agent)
        assert seen <= state.visited and all(0 <= i <= 63 for i in state.visited)
        seen = set(state.visited)


# ----------------------------------------------------------- filtering


def _traj(rel):
    return MiningTrajectory({i: FrameRecord("", r, 1) for i, r in rel.items()}, ("high",), ("a",))


def test_filter_keyframes_examples():
    rel = {0: 2, 31: 5, 44: 4, 63: 1}
    assert mn.filter_keyframes(_traj(rel), 4) == [31, 44]
    assert mn.filter_keyframes(_traj(rel), 1) == [0, 31, 44, 63]
    assert mn.filter_keyframes(_traj({0: 1, 31: 2}), 4) == []


def test_verify_sufficiency_unanimity():
    task = TaskRecord(0, "v", "q", "yes", 1.0)
    right = lambda t, s: "yes"
    wrong = lambda t, s: "no"
    assert mn.verify_sufficiency([1], task, [right] * 3)
    assert not mn.verify_sufficiency([1], task, [right, right, wrong])
    with pytest.raises(ValueError):
        mn.verify_sufficiency([1], task, [])

    def never(t, s):
        raise AssertionError("verifier called on empty keyframes")

    assert not mn.verify_sufficiency([], task, [never])


# ------------------------------------------------------------- pipeline


@pytest.fixture(scope="module")
def built():
    world = PlantedWorld(seed=0, n_examples=60, n_frames=64, evidence_sizes="heavy_tail")
    agent = world.agent(wrong_ids=frozenset({1, 2}))
    suite = world.suite()
    return world, mn.build_dataset(world.corpus(), agent, suite.verifiers, lambda_rel=4, workers=2)


def test_build_dataset_retained_records_are_fixed_points(built):
    world, build = built
    assert build.records
    verifiers = world.suite().verifiers
    for rec in build.records:
        assert validate(rec)
        assert rec.num_selected_frames == len(rec.keyframe_indices)
        assert set(world.evidence[rec.id]) <= set(rec.keyframe_indices)
        task = TaskRecord(rec.id, rec.video, rec.question, rec.ground_truth_answer, rec.duration)
        assert mn.verify_sufficiency(rec.keyframe_indices, task, verifiers)
        traj = build.trajectories[rec.id]
        assert set(rec.keyframe_indices) == set(mn.filter_keyframes(traj, 4))


def test_build_dataset_wrong_answers_discarded(built):
    _, build = built
    assert build.outcomes[1] == build.outcomes[2] == "answer_mismatch"
    assert sum(build.discards.values()) + len(build.records) == 60


def test_build_dataset_deterministic_and_written(built, tmp_path):
    world, build = built
    again = mn.build_dataset(world.corpus(), world.agent(wrong_ids=frozenset({1, 2})), world.suite().verifiers, workers=3)
    build.write(tmp_path / "a")
    again.write(tmp_path / "b")
    for name in ("dataset.json", "trajectories.jsonl", "discard_report.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_build_dataset_survives_backend_failures():
    world = PlantedWorld(seed=1, n_examples=4, n_frames=64, evidence_sizes=(2, 3))

    def broken(task, subset):
        raise BackendError("down")

    build = mn.build_dataset(world.corpus(), world.agent(), [broken])
    assert not build.records
    assert set(build.outcomes.values()) <= {"backend_error", "answer_mismatch", "insufficient"}


def test_read_corpus(tmp_path):
    p = tmp_path / "c.jsonl"
    p.write_text('{"video": "v", "question": "q", "answer": "a"}\n\n')
    assert mn.read_corpus(p) == [{"video": "v", "question": "q", "answer": "a"}]
    p.write_text('{"video": "v"}\n')
    with pytest.raises(ValueError, match="line 1"):
        mn.read_corpus(p)
