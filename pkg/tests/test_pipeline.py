import json

import pytest
from hypothesis import given, strategies as st

from conftest import all_roles, mock
from twnv.backends import CallLedger, ImageRef
from twnv.benchmark import Sample
from twnv.instructions import render_numerical
from twnv.geometry import CameraMotion
from twnv.pipeline import (
    FALLBACK,
    PLAN_PARSE_FAILURE,
    SOURCE_VIEW,
    SYNTH_FAILURE,
    VERIFIER_UNPARSEABLE,
    ConfigError,
    Engine,
    LedgerMismatch,
    OrderedSink,
    RunConfig,
    SampleFailed,
    VerifierVerdict,
    call_budget,
    choice_normalizer,
    config_hash,
    load_results,
    majority_vote,
    parse_verdict,
    run_baseline,
    run_iterative,
    run_simple,
    run_text_reflection,
    select_best_view,
    strip_timestamps,
)

PLAN = render_numerical(CameraMotion(dy=1.0, pitch=-15))
PLAN_PROSE = "Raise the camera: dx = 0, dy = 1.0, dz = 0, yaw = 0, pitch = -15, roll = 0."
REJECT = "accepted: no\nvisibility: 2\nquality: 4\nconsistency: 4\nfeedback: object occluded"
ACCEPT = "accepted: yes\nvisibility: 5\nquality: 4\nconsistency: 5\nfeedback: fine"


def entries(reasoner="B", planner=PLAN, verifier=None, synth=None, extra=()):
    out = [{"role": "planner", "reply": planner}]
    out.append({"role": "reasoner", "replies": reasoner} if isinstance(reasoner, list) else {"role": "reasoner", "reply": reasoner})
    if verifier is not None:
        out.append({"role": "verifier", "replies": verifier})
    if synth is not None:
        out.append({"role": "synthesizer", "reply": synth})
    out.append({"role": "judge", "reply": "instruction_adequate: yes\nview_faithful: yes"})
    return out + list(extra)


def go(sample, tmp_path, cfg, fixture):
    return Engine(cfg, all_roles(mock(fixture)), tmp_path / "out").run(sample)


# --- config ---

@pytest.mark.parametrize("kw", [
    dict(condition="iterative", n=0),
    dict(condition="text_reflection", r=0),
    dict(condition="baseline", k=0),
    dict(condition="simple", instruction_format="sketch"),
    dict(condition="teleport"),
])
def test_config_invariants(kw):
    with pytest.raises(ConfigError):
        RunConfig(**kw)


def test_config_hash_ignores_fixture_path(tmp_path):
    from twnv.backends import BackendConfig
    (tmp_path / "a.jsonl").write_text('{"default":"A"}\n')
    (tmp_path / "b.jsonl").write_text('{"default":"A"}\n')
    ha = config_hash(RunConfig("baseline", backends={"reasoner": BackendConfig("mock", fixture=str(tmp_path / "a.jsonl"))}))
    hb = config_hash(RunConfig("baseline", backends={"reasoner": BackendConfig("mock", fixture=str(tmp_path / "b.jsonl"))}))
    assert ha == hb
    assert ha != config_hash(RunConfig("baseline", k=1))


# --- baseline ---

def test_baseline_three_votes(sample, tmp_path):
    rec = go(sample, tmp_path, RunConfig("baseline", k=3), entries(reasoner=["B", "B", "B"]))
    assert rec.final_answer == "B"
    assert rec.ledger.vlm_calls == 3 and rec.ledger.per_role == {"reasoner": 3}
    assert rec.ledger.synth_calls == 0
    assert all(r.chosen_label == SOURCE_VIEW for r in rec.runs)


def test_baseline_k1(sample, tmp_path):
    rec = go(sample, tmp_path, RunConfig("baseline", k=1), entries())
    assert rec.ledger.vlm_calls == 1


def test_baseline_one_timeout(sample, tmp_path):
    rec = go(sample, tmp_path, RunConfig("baseline", k=3), entries(reasoner=["A", "!error:timeout", "A"]))
    assert rec.votes == ["A", None, "A"]
    assert rec.final_answer == "A"
    assert "Timeout" in rec.runs[1].error
    assert rec.ledger.vlm_calls == 2


def test_all_runs_fail_raises_sample_failed(sample, tmp_path):
    with pytest.raises(SampleFailed) as info:
        go(sample, tmp_path, RunConfig("baseline", k=2), entries(reasoner="!error:server"))
    rec = info.value.record
    assert rec.failed and rec.summary().failed
    assert (tmp_path / "out" / "s1__baseline" / "record.json").is_file()


def test_unreadable_source_fails_sample(tmp_path, sample):
    bad = Sample("s2", str(tmp_path / "nope.png"), "q?", (("A", "x"), ("B", "y")), "A", "size", "s", "other")
    with pytest.raises(SampleFailed):
        go(bad, tmp_path, RunConfig("baseline", k=1), entries())


# --- simple ---

def test_simple_two_vlm_calls_one_synth(sample, tmp_path):
    rec = go(sample, tmp_path, RunConfig("simple", k=1), entries())
    run = rec.runs[0]
    assert [e.stage for e in run.events] == ["plan", "synth", "reason"]
    assert call_budget(rec)["vlm_per_vote_run"] == [2]
    assert call_budget(rec)["synth_per_vote_run"] == [1]
    assert run.instructions[0]["text"] == PLAN
    assert run.chosen_label == "views/run0_round0.png"


def test_simple_prose_plan_gives_identical_trace(sample, tmp_path):
    canon = go(sample, tmp_path / "a", RunConfig("simple", k=1), entries(planner=PLAN))
    prose = go(sample, tmp_path / "b", RunConfig("simple", k=1), entries(planner=PLAN_PROSE))
    a, b = canon.runs[0], prose.runs[0]
    assert a.instructions == b.instructions
    assert a.chosen_view.sha256 == b.chosen_view.sha256
    assert [e.fingerprint for e in a.events[1:]] == [e.fingerprint for e in b.events[1:]]


def test_simple_synth_failure_falls_back(sample, tmp_path):
    rec = go(sample, tmp_path, RunConfig("simple", k=1), entries(synth="!error:server"))
    run = rec.runs[0]
    assert run.chosen_view == rec.source_image and run.chosen_label == SOURCE_VIEW
    assert run.has_flag(SYNTH_FAILURE) and run.has_flag(FALLBACK)
    assert rec.final_answer == "B"


def test_simple_plan_parse_failure_falls_back(sample, tmp_path):
    rec = go(sample, tmp_path, RunConfig("simple", k=1), entries(planner="just look around"))
    run = rec.runs[0]
    assert run.has_flag(PLAN_PARSE_FAILURE)
    assert [e.stage for e in run.events] == ["plan", "reason"]
    assert rec.ledger.synth_calls == 0


# --- iterative ---

def test_iterative_reject_then_accept(sample, tmp_path):
    rec = go(sample, tmp_path, RunConfig("iterative", n=2, k=1), entries(verifier=[REJECT, ACCEPT]))
    run = rec.runs[0]
    stages = [e.stage for e in run.events]
    assert stages == ["plan", "synth", "verify", "plan", "synth", "verify", "reason"]
    second_plan = json.loads((rec.transcript_dir / run.events[3].call).read_text())
    assert "object occluded" in second_plan["request"]["parts"][0]["text"]
    assert run.chosen_label == "views/run0_round1.png"
    assert run.chosen_view == run.views[1].image


def test_iterative_all_reject_falls_back_to_source(sample, tmp_path):
    rec = go(sample, tmp_path, RunConfig("iterative", n=1, k=1), entries(verifier=[REJECT]))
    run = rec.runs[0]
    assert run.chosen_view == rec.source_image
    # plan, verify, re-plan, reason
    assert call_budget(rec)["vlm_per_vote_run"] == [4]
    assert call_budget(rec)["synth_per_vote_run"] == [2]


def test_iterative_first_accept_exits_early(sample, tmp_path):
    rec = go(sample, tmp_path, RunConfig("iterative", n=2, k=1), entries(verifier=[ACCEPT]))
    run = rec.runs[0]
    assert sum(e.stage == "verify" for e in run.events) == 1
    assert run.chosen_label == "views/run0_round0.png"


def test_iterative_unparseable_verdict_accepts_with_warning(sample, tmp_path):
    rec = go(sample, tmp_path, RunConfig("iterative", n=2, k=1), entries(verifier=["looks good to me"]))
    run = rec.runs[0]
    assert run.has_flag(VERIFIER_UNPARSEABLE)
    assert run.chosen_label == "views/run0_round0.png"


@pytest.mark.parametrize("n", [1, 2, 3])
def test_iterative_budget_bound(sample, tmp_path, n):
    rec = go(sample, tmp_path, RunConfig("iterative", n=n, k=2), entries(verifier=[REJECT]))
    assert all(v <= 2 + 2 * n for v in call_budget(rec)["vlm_per_vote_run"])


# --- text reflection ---

def test_text_reflection_last_answer_wins(sample, tmp_path):
    rec = go(sample, tmp_path, RunConfig("text_reflection", r=1, k=1), entries(reasoner=["A", "Critique...\nAnswer: B"]))
    assert rec.runs[0].raw_answer == "B"
    assert call_budget(rec)["vlm_per_vote_run"] == [2]


def test_text_reflection_r4(sample, tmp_path):
    rec = go(sample, tmp_path, RunConfig("text_reflection", r=4, k=1), entries())
    assert call_budget(rec)["vlm_per_vote_run"] == [5]


def test_text_reflection_uses_source_only(sample, tmp_path):
    rec = go(sample, tmp_path, RunConfig("text_reflection", r=2, k=1), entries())
    for ev in rec.runs[0].events:
        body = json.loads((rec.transcript_dir / ev.call).read_text())
        images = [p["image"] for p in body["request"]["parts"] if "image" in p]
        assert [i["sha256"] for i in images] == [rec.source_image.sha256]


# --- voting ---

def test_majority_vote_rules():
    assert majority_vote(["A", "A", "B"]) == "A"
    assert majority_vote(["A", "B", "C"]) == "A"
    assert majority_vote(["C", "B", "B", "C"]) == "C"
    with pytest.raises(ValueError):
        majority_vote([])


def test_majority_vote_choice_normalization():
    choices = (("A", "left"), ("B", "right"))
    assert majority_vote(["b.", "B", "B) left"], choice_normalizer(choices)) == "B"


@given(st.lists(st.sampled_from("ABC"), min_size=1, max_size=9))
def test_majority_vote_is_a_mode(votes):
    winner = majority_vote(votes)
    assert votes.count(winner) == max(votes.count(v) for v in set(votes))
    tied = [v for v in votes if votes.count(v) == votes.count(winner)]
    assert winner == tied[0]


# --- verdicts ---

def test_parse_verdict_forms():
    v = parse_verdict(REJECT)
    assert (v.accepted, v.visibility_score, v.feedback) == (False, 2, "object occluded")
    j = parse_verdict('{"accepted": true, "visibility": 4, "quality": 4, "consistency": 3}')
    assert j.accepted and j.mean_score == pytest.approx(11 / 3)
    assert parse_verdict("accepted: yes\nvisibility: 9") is None
    assert parse_verdict("nope") is None
    bare = parse_verdict("accepted: no\nvisibility: 1\nquality: 1\nconsistency: 1")
    assert bare.feedback


def test_verdict_invariants():
    with pytest.raises(ValueError):
        VerifierVerdict(True, 0, 3, 3)
    with pytest.raises(ValueError):
        VerifierVerdict(False, 3, 3, 3, "")


def test_select_best_view_tie_goes_to_later_round():
    a, b = ImageRef("a", "1"), ImageRef("b", "2")
    v = VerifierVerdict(True, 4, 4, 4)
    assert select_best_view([(0, v, a), (1, v, b)]) == (1, b)
    better = VerifierVerdict(True, 5, 5, 5)
    assert select_best_view([(0, better, a), (1, v, b)]) == (0, a)
    assert select_best_view([(0, VerifierVerdict(False, 5, 5, 5, "x"), a)]) is None


# --- budgets, determinism, persistence ---

def test_call_budget_detects_mismatch(sample, tmp_path):
    rec = go(sample, tmp_path, RunConfig("baseline", k=1), entries())
    rec.ledger.record_vlm("reasoner")
    with pytest.raises(LedgerMismatch):
        call_budget(rec)


def test_module_entry_points_check_condition(sample, tmp_path):
    backends = all_roles(mock(entries(verifier=[ACCEPT])))
    assert run_baseline(sample, RunConfig("baseline", k=1), backends, tmp_path).condition == "baseline"
    assert run_simple(sample, RunConfig("simple", k=1), backends, tmp_path).condition == "simple"
    assert run_iterative(sample, RunConfig("iterative", n=1, k=1), backends, tmp_path).condition == "iterative"
    assert run_text_reflection(sample, RunConfig("text_reflection", r=1, k=1), backends, tmp_path).condition == "text_reflection"
    with pytest.raises(ConfigError):
        run_simple(sample, RunConfig("baseline"), backends, tmp_path)


def test_missing_role_backend(tmp_path):
    with pytest.raises(ConfigError):
        Engine(RunConfig("simple"), {"reasoner": mock([])}, tmp_path)


def test_record_deterministic_minus_timestamps(sample, tmp_path):
    cfg = RunConfig("iterative", n=2, k=3)
    dumps = []
    for _ in range(2):
        rec = go(sample, tmp_path, cfg, entries(verifier=[REJECT, ACCEPT]))
        dumps.append(json.dumps(strip_timestamps(rec.to_dict()), sort_keys=True))
    assert dumps[0] == dumps[1]


def test_chosen_view_provenance(sample, tmp_path):
    rec = go(sample, tmp_path, RunConfig("iterative", n=2, k=3), entries(verifier=[REJECT, ACCEPT, REJECT]))
    for run in rec.runs:
        allowed = {rec.source_image.path} | {v.image.path for v in run.views}
        assert run.chosen_view.path in allowed
        assert f"run{run.index}_" in run.chosen_view.path or run.chosen_view == rec.source_image


def test_judging_and_attribution_recorded(sample, tmp_path):
    rec = go(sample, tmp_path, RunConfig("simple", k=1), entries(reasoner="A"))
    assert rec.judgment.outcome == "incorrect"
    assert rec.error_label.label == "vl_failure"
    assert [e.stage for e in rec.judge_events] == ["attribute"]
    assert call_budget(rec)["totals"]["judge_calls"] == 1


def test_semantic_judge_on_ambiguous_answer(sample, tmp_path):
    fixture = entries(reasoner="It is on the right side.", extra=())
    fixture[-1] = {"role": "judge", "reply": "B"}
    rec = go(sample, tmp_path, RunConfig("baseline", k=1), fixture)
    assert rec.judgment.outcome == "correct"
    fixture = entries(reasoner="hard to say, maybe both")
    fixture[-1] = {"role": "judge", "reply": "none"}
    rec = go(sample, tmp_path, RunConfig("baseline", k=1), fixture)
    assert (rec.judgment.outcome, rec.judgment.method) == ("incorrect", "semantic")


def test_transcript_layout(sample, tmp_path):
    rec = go(sample, tmp_path, RunConfig("simple", k=2), entries())
    root = tmp_path / "out" / "s1__simple-numerical"
    assert rec.transcript_dir == root
    assert sorted(p.name for p in (root / "views").iterdir()) == ["run0_round0.png", "run1_round0.png"]
    data = json.loads((root / "record.json").read_text())
    assert len(data["votes"]) == 2
    assert data["source_image"]["view"] == SOURCE_VIEW
    for run in data["runs"]:
        for ev in run["events"]:
            assert (root / ev["call"]).is_file()


def test_ordered_sink(tmp_path):
    path = tmp_path / "r.jsonl"
    with OrderedSink(path, ["a", "b", "c"]) as sink:
        sink.put("c", {"sample_id": "c", "condition": "x"})
        sink.put("a", {"sample_id": "a", "condition": "x"})
        assert [json.loads(l)["sample_id"] for l in path.read_text().splitlines()] == ["a"]
        sink.skip("b")
    assert [json.loads(l)["sample_id"] for l in path.read_text().splitlines()] == ["a", "c"]
    assert [r.sample_id for r in load_results(path)] == ["a", "c"]
