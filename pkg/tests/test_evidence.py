import pytest
from hypothesis import given, strategies as st

from evolvekit.errors import (
    EmptyPatternSet,
    EmptyWindow,
    EndOutOfRange,
    NonMonotonicEpisode,
    PassedExceedsTotal,
    ZeroTotal,
)
from evolvekit.evidence import EvidenceLog, TaskInput, Trajectory, TrajectoryStep, mine_signatures, task_score


def traj(ep, errors=(), score=1.0):
    steps = [TrajectoryStep(i, "error", e, True) for i, e in enumerate(errors)]
    return Trajectory(ep, TaskInput(ep, f"task {ep}"), tuple(steps)).with_score(score)


def test_task_score_examples():
    assert task_score(7, 8) == 0.875
    assert task_score(0, 3) == 0.0
    with pytest.raises(ZeroTotal):
        task_score(0, 0)
    with pytest.raises(PassedExceedsTotal):
        task_score(4, 3)


@given(st.integers(1, 500).flatmap(lambda n: st.tuples(st.integers(0, n), st.just(n))))
def test_task_score_in_unit_interval(pt):
    p, n = pt
    assert 0.0 <= task_score(p, n) <= 1.0


def test_log_is_dense_and_append_only(tmp_path):
    log = EvidenceLog(tmp_path)
    log.record_trajectory(traj(0))
    with pytest.raises(NonMonotonicEpisode):
        log.record_trajectory(traj(2))
    log.record_trajectory(traj(1))
    raw = log.raw(0)
    assert EvidenceLog(tmp_path).raw(0) == raw and len(EvidenceLog(tmp_path)) == 2
    assert log[1] == traj(1)


def test_windows():
    log = EvidenceLog()
    for i in range(25):
        log.record_trajectory(traj(i))
    assert [t.episode for t in log.evidence_window(24)] == list(range(15, 25))
    assert [t.episode for t in log.evidence_window(3)] == [0, 1, 2, 3]
    assert len(log.evidence_window(24, W=1)) == 1
    with pytest.raises(EndOutOfRange):
        log.evidence_window(25)


def test_mining():
    window = [traj(i, ["HTTP 401 Unauthorized"] if i % 10 else [], 0.0) for i in range(20)]
    sigs = mine_signatures(window, ["401", "timeout", "401"])
    assert sigs[0].pattern == "401" and sigs[0].match_count == 18
    assert len(sigs[0].sample_episodes) == 5
    assert sigs[1].match_count == 0
    with pytest.raises(EmptyWindow):
        mine_signatures([], ["x"])
    with pytest.raises(EmptyPatternSet):
        mine_signatures(window, [])


def test_mining_sees_quoted_strings_inside_payloads():
    t = Trajectory(0, TaskInput(0, "x"), (TrajectoryStep(0, "tool_result", {"error": "KeyError: 'status'"}, True),))
    assert mine_signatures([t], ["KeyError: 'status'"])[0].match_count == 1


@given(st.lists(st.lists(st.sampled_from(["a", "b", "ab", "zz"]), max_size=3), min_size=1, max_size=12))
def test_mining_count_matches_brute_force(errors):
    window = [traj(i, e, 0.0) for i, e in enumerate(errors)]
    for sig in mine_signatures(window, ["a", "b", "zz"]):
        assert sig.match_count == sum(any(sig.pattern in x for x in e) for e in errors)
        assert sig.match_count <= sig.window_size
