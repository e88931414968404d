"""The view-planning state machine: baseline, simple, iterative, and text reflection.

Each sample runs K independent vote runs in sequence. A vote run is a list of
stage events (plan, synth, verify, reason, reflect), each pointing at a
request/response file under ``calls/``. Generated views land under ``views/``.
"""

from __future__ import annotations

import json
import logging
import os
import re
import shutil
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

from twnv._util import canonical_json, content_hash
from twnv.backends import (
    SYNTH_ROLE,
    VLM_ROLES,
    Backend,
    BackendConfig,
    BackendError,
    CallLedger,
    ChatRequest,
    ImageRef,
    SynthRequest,
    sha256_file,
)
from twnv.benchmark import ResultSummary, Sample
from twnv.instructions import (
    DEFAULT_VOCABULARY,
    FORMATS,
    InstructionError,
    instruction_to_dict,
    parse_instruction,
    planner_prompt,
    replan_prompt,
    synth_text,
)
from twnv.judging import (
    GENERATION_CONDITIONS,
    INCORRECT,
    ErrorLabel,
    JudgeVerdict,
    answer_key,
    attribute_error,
    extract_answer,
    format_options,
    judge_answer,
)
from twnv.prompts import load_prompt

log = logging.getLogger(__name__)

CONDITIONS = ("baseline", "simple", "iterative", "text_reflection")
ROLES_NEEDED = {
    "baseline": ("reasoner",),
    "simple": ("planner", SYNTH_ROLE, "reasoner"),
    "iterative": ("planner", SYNTH_ROLE, "verifier", "reasoner"),
    "text_reflection": ("reasoner",),
}
SOURCE_VIEW = "I_0"

# Flags a vote run can carry.
PLAN_PARSE_FAILURE = "plan_parse_failure"
PLAN_CALL_FAILURE = "plan_call_failure"
SYNTH_FAILURE = "synth_failure"
FALLBACK = "fallback_baseline"
VERIFIER_UNPARSEABLE = "verifier_unparseable"
VERIFIER_CALL_FAILURE = "verifier_call_failure"
REFLECTION_FAILURE = "reflection_failure"


class ConfigError(ValueError):
    pass


class LedgerMismatch(RuntimeError):
    """Stage events and the live call ledger disagree: an engine bug."""


class SampleFailed(RuntimeError):
    def __init__(self, record: RunRecord, reason: str = "all vote runs failed"):
        super().__init__(f"{record.sample_id}: {reason}")
        self.record = record
        self.reason = reason


@dataclass(frozen=True)
class RunConfig:
    condition: str
    instruction_format: str = "numerical"
    k: int = 3
    n: int = 0
    r: int = 0
    seed: int = 0
    backends: Mapping[str, BackendConfig] = field(default_factory=dict)
    temperature: float = 1.0
    max_output_tokens: int = 1024
    judge: bool = True
    attribute: bool = True

    def __post_init__(self):
        if self.condition not in CONDITIONS:
            raise ConfigError(f"unknown condition {self.condition!r}; expected one of {CONDITIONS}")
        if self.instruction_format not in FORMATS:
            raise ConfigError(f"unknown instruction format {self.instruction_format!r}")
        if not isinstance(self.k, int) or self.k < 1:
            raise ConfigError("k (vote runs) must be an integer >= 1")
        if self.condition == "iterative" and self.n < 1:
            raise ConfigError("iterative mode needs n >= 1 verification rounds; n = 0 is simple mode")
        if self.condition != "iterative" and self.n:
            raise ConfigError(f"n applies to iterative mode only, not {self.condition}")
        if self.condition == "text_reflection" and self.r < 1:
            raise ConfigError("text_reflection needs r >= 1 rounds; r = 0 is the baseline")
        if self.condition != "text_reflection" and self.r:
            raise ConfigError(f"r applies to text_reflection only, not {self.condition}")
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        if self.max_output_tokens <= 0:
            raise ConfigError("max_output_tokens must be positive")
        for role in self.backends:
            if role not in VLM_ROLES + (SYNTH_ROLE,):
                raise ConfigError(f"unknown role {role!r}")

    @property
    def label(self) -> str:
        if self.condition == "baseline":
            return "baseline"
        if self.condition == "text_reflection":
            return f"text_reflection-r{self.r}"
        if self.condition == "simple":
            return f"simple-{self.instruction_format}"
        return f"iterative-n{self.n}-{self.instruction_format}"

    def model_id(self, role: str) -> str:
        cfg = self.backends.get(role)
        return cfg.model_id if cfg else ""

    def to_dict(self, fixture_hashes: Mapping[str, str] | None = None) -> dict:
        """Canonical form for hashing. Fixture paths are replaced by content hashes when given."""
        backends = {}
        for role, b in sorted(self.backends.items()):
            entry = {
                "kind": b.kind,
                "endpoint_url": b.endpoint_url,
                "model_id": b.model_id,
                "auth_env_var": b.auth_env_var,
            }
            if b.kind == "mock":
                entry["fixture"] = (fixture_hashes or {}).get(role, b.fixture)
            backends[role] = entry
        return {
            "condition": self.condition,
            "instruction_format": self.instruction_format,
            "k": self.k,
            "n": self.n,
            "r": self.r,
            "seed": self.seed,
            "temperature": self.temperature,
            "max_output_tokens": self.max_output_tokens,
            "judge": self.judge,
            "attribute": self.attribute,
            "backends": backends,
        }


def config_hash(cfg: RunConfig, base_dir: str | Path | None = None) -> str:
    """Content hash of a run configuration; mock fixtures contribute their bytes, not their paths."""
    fixtures = {}
    for role, b in cfg.backends.items():
        if b.kind == "mock":
            path = Path(b.fixture)
            if base_dir is not None and not path.is_absolute():
                path = Path(base_dir) / path
            if path.is_file():
                fixtures[role] = sha256_file(path)
    return content_hash(cfg.to_dict(fixtures))


# --- verifier protocol ---------------------------------------------------------------

SCORE_FIELDS = ("visibility", "quality", "consistency")
NO_FEEDBACK = "The view was rejected without a stated reason; choose a clearly different viewpoint."


@dataclass(frozen=True)
class VerifierVerdict:
    accepted: bool
    visibility_score: int
    quality_score: int
    consistency_score: int
    feedback: str = ""

    def __post_init__(self):
        for name in ("visibility_score", "quality_score", "consistency_score"):
            v = getattr(self, name)
            if not isinstance(v, int) or not 1 <= v <= 5:
                raise ValueError(f"{name} must be an integer in 1..5, got {v!r}")
        if not self.accepted and not self.feedback.strip():
            raise ValueError("a rejection needs feedback")

    @property
    def mean_score(self) -> float:
        return (self.visibility_score + self.quality_score + self.consistency_score) / 3

    def to_dict(self) -> dict:
        return {
            "accepted": self.accepted,
            "visibility": self.visibility_score,
            "quality": self.quality_score,
            "consistency": self.consistency_score,
            "feedback": self.feedback,
        }


# Used when the verifier reply cannot be read: accept, middle scores.
LENIENT_VERDICT = VerifierVerdict(True, 3, 3, 3, "")

_ACCEPT_RE = re.compile(r"accept(?:ed)?\s*[:=]\s*(yes|no|true|false)", re.IGNORECASE)
_FIELD_RE = {f: re.compile(rf"{f}(?:_score)?\s*[:=]\s*([1-5])(?!\d)", re.IGNORECASE) for f in SCORE_FIELDS}
_FEEDBACK_RE = re.compile(r"feedback\s*[:=]\s*(.*)", re.IGNORECASE | re.DOTALL)


def parse_verdict(reply: str) -> VerifierVerdict | None:
    """Read the structured verifier reply (line form or a JSON object); None if unreadable."""
    text = (reply or "").strip()
    if text.startswith("{"):
        try:
            obj = json.loads(text)
            accepted = obj["accepted"]
            if isinstance(accepted, str):
                accepted = accepted.strip().lower() in ("yes", "true")
            scores = [int(obj.get(f, obj.get(f"{f}_score"))) for f in SCORE_FIELDS]
            feedback = str(obj.get("feedback", "")).strip()
            return _verdict(bool(accepted), scores, feedback)
        except (ValueError, KeyError, TypeError):
            return None
    m = _ACCEPT_RE.search(text)
    if m is None:
        return None
    scores = []
    for f in SCORE_FIELDS:
        sm = _FIELD_RE[f].search(text)
        if sm is None:
            return None
        scores.append(int(sm.group(1)))
    fm = _FEEDBACK_RE.search(text)
    feedback = fm.group(1).strip() if fm else ""
    return _verdict(m.group(1).lower() in ("yes", "true"), scores, feedback)


def _verdict(accepted: bool, scores: list[int], feedback: str) -> VerifierVerdict | None:
    if any(not 1 <= s <= 5 for s in scores):
        return None
    if not accepted and not feedback:
        feedback = NO_FEEDBACK
    return VerifierVerdict(accepted, *scores, feedback)


def select_best_view(candidates: Sequence[tuple[int, VerifierVerdict, ImageRef]]) -> tuple[int, ImageRef] | None:
    """Highest mean verifier score among accepted views; later rounds win ties."""
    accepted = [(r, v, im) for r, v, im in candidates if v.accepted]
    if not accepted:
        return None
    r, _, im = max(accepted, key=lambda c: (c[1].mean_score, c[0]))
    return r, im


# --- records -------------------------------------------------------------------------------


@dataclass
class StageEvent:
    stage: str
    role: str
    round: int
    status: str = "ok"
    fingerprint: str = ""
    call: str | None = None
    output: str | None = None
    detail: dict = field(default_factory=dict)
    started_at: float = 0.0
    finished_at: float = 0.0

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "role": self.role,
            "round": self.round,
            "status": self.status,
            "fingerprint": self.fingerprint,
            "call": self.call,
            "output": self.output,
            "detail": self.detail,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
        }


@dataclass
class GeneratedView:
    round: int
    image: ImageRef
    instruction: str
    verdict: VerifierVerdict | None = None


@dataclass
class VoteRun:
    index: int
    source: ImageRef
    events: list[StageEvent] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)
    instructions: list[dict] = field(default_factory=list)
    views: list[GeneratedView] = field(default_factory=list)
    chosen_view: ImageRef | None = None
    chosen_label: str = SOURCE_VIEW
    raw_answer: str | None = None
    answer: str | None = None
    error: str | None = None

    def __post_init__(self):
        if self.chosen_view is None:
            self.chosen_view = self.source

    @property
    def failed(self) -> bool:
        return self.raw_answer is None

    def flag(self, name: str) -> None:
        if name not in self.flags:
            self.flags.append(name)

    def has_flag(self, name: str) -> bool:
        return name in self.flags

    def judged_view(self) -> ImageRef | None:
        """The view the reasoner saw besides I_0, else the last generated one."""
        if self.chosen_label != SOURCE_VIEW:
            return self.chosen_view
        return self.views[-1].image if self.views else None

    def last_instruction_text(self) -> str | None:
        return self.instructions[-1]["text"] if self.instructions else None

    def vlm_calls(self) -> int:
        return sum(1 for e in self.events if e.ok and e.role in VLM_ROLES)

    def synth_calls(self) -> int:
        return sum(1 for e in self.events if e.ok and e.role == SYNTH_ROLE)


@dataclass
class RunRecord:
    sample_id: str
    condition: str
    condition_label: str
    config_hash: str
    question: str
    choices: tuple[tuple[str, str], ...]
    ground_truth: str
    source_image: ImageRef
    source_path: str
    k: int
    runs: list[VoteRun] = field(default_factory=list)
    final_answer: str | None = None
    final_raw: str | None = None
    judgment: JudgeVerdict | None = None
    error_label: ErrorLabel | None = None
    unattributed: bool = False
    judge_events: list[StageEvent] = field(default_factory=list)
    ledger: CallLedger = field(default_factory=CallLedger)
    failed: bool = False
    error: str | None = None
    manifest_id: str = ""
    transcript_dir: Path | None = None

    @property
    def votes(self) -> list[str | None]:
        return [r.answer for r in self.runs]

    def representative_run(self) -> VoteRun | None:
        """First successful vote run whose answer won the vote."""
        for run in self.runs:
            if not run.failed and run.answer == self.final_answer:
                return run
        return None

    @property
    def chosen_view(self) -> ImageRef | None:
        run = self.representative_run()
        return run.chosen_view if run else None

    def add_judge_event(self, event: StageEvent) -> None:
        self.judge_events.append(event)

    def flags(self) -> list[str]:
        seen: list[str] = []
        for run in self.runs:
            for f in run.flags:
                if f not in seen:
                    seen.append(f)
        return seen

    def _ref(self, ref: ImageRef) -> dict:
        if ref.path == self.source_image.path:
            return {"path": Path(self.source_path).as_posix(), "sha256": ref.sha256, "view": SOURCE_VIEW}
        return ref.to_dict(self.transcript_dir)

    def to_dict(self) -> dict:
        budget = call_budget(self, check=False)
        return {
            "sample_id": self.sample_id,
            "condition": self.condition,
            "condition_label": self.condition_label,
            "config_hash": self.config_hash,
            "manifest_id": self.manifest_id,
            "question": self.question,
            "choices": [list(c) for c in self.choices],
            "ground_truth": self.ground_truth,
            "source_image": self._ref(self.source_image),
            "failed": self.failed,
            "error": self.error,
            "votes": self.votes,
            "final_answer": self.final_answer,
            "final_raw": self.final_raw,
            "judgment": self.judgment.to_dict() if self.judgment else None,
            "error_label": self.error_label.to_dict() if self.error_label else None,
            "unattributed": self.unattributed,
            "budget": budget,
            "ledger": self.ledger.to_dict(),
            "runs": [
                {
                    "index": run.index,
                    "flags": run.flags,
                    "error": run.error,
                    "raw_answer": run.raw_answer,
                    "answer": run.answer,
                    "chosen_view": {"label": run.chosen_label, **self._ref(run.chosen_view)},
                    "instructions": run.instructions,
                    "views": [
                        {
                            "round": v.round,
                            "image": self._ref(v.image),
                            "instruction": v.instruction,
                            "verdict": v.verdict.to_dict() if v.verdict else None,
                        }
                        for v in run.views
                    ],
                    "events": [e.to_dict() for e in run.events],
                }
                for run in self.runs
            ],
            "judge_events": [e.to_dict() for e in self.judge_events],
        }

    def summary(self) -> ResultSummary:
        budget = call_budget(self, check=False)
        return ResultSummary(
            sample_id=self.sample_id,
            condition=self.condition_label,
            outcome=self.judgment.outcome if self.judgment else None,
            final_answer=self.final_answer,
            failed=self.failed,
            error_label=self.error_label.label if self.error_label else None,
            label_source=self.error_label.source if self.error_label else None,
            unattributed=self.unattributed,
            config_hash=self.config_hash,
            manifest_id=self.manifest_id,
            judge_method=self.judgment.method if self.judgment else None,
            votes=tuple(self.votes),
            chosen_views=tuple(r.chosen_label for r in self.runs),
            flags=tuple(self.flags()),
            budget={
                "vlm_per_vote_run": budget["vlm_per_vote_run"],
                "synth_per_vote_run": budget["synth_per_vote_run"],
                "vlm_total": budget["totals"]["vlm_calls"],
                "synth_total": budget["totals"]["synth_calls"],
                "retries": self.ledger.retries,
            },
        )


def strip_timestamps(obj):
    """Drop every ``*_at`` key, recursively; what remains is reproducible."""
    if isinstance(obj, dict):
        return {k: strip_timestamps(v) for k, v in obj.items() if not k.endswith("_at")}
    if isinstance(obj, list):
        return [strip_timestamps(v) for v in obj]
    return obj


# --- voting and budgets -------------------------------------------------------------------


def majority_vote(answers: Sequence[str], normalizer: Callable[[str], str] | None = None) -> str:
    """Most frequent normalized answer; on a tie the earliest vote run wins."""
    if not answers:
        raise ValueError("majority_vote needs at least one answer")
    norm = normalizer or (lambda s: s.strip())
    keys = [norm(a) for a in answers]
    counts = Counter(keys)
    top = max(counts.values())
    return next(k for k in keys if counts[k] == top)


def choice_normalizer(choices) -> Callable[[str], str]:
    return lambda raw: answer_key(raw, choices)


def call_budget(record: RunRecord, check: bool = True) -> dict:
    """Recount calls from stage events; with ``check`` they must match the live ledger."""
    vlm = [run.vlm_calls() for run in record.runs]
    synth = [run.synth_calls() for run in record.runs]
    judge = sum(1 for e in record.judge_events if e.ok)
    totals = {"vlm_calls": sum(vlm) + judge, "synth_calls": sum(synth), "judge_calls": judge}
    if check:
        live = record.ledger.to_dict()
        if (live["vlm_calls"], live["synth_calls"]) != (totals["vlm_calls"], totals["synth_calls"]):
            raise LedgerMismatch(
                f"{record.sample_id}: events count {totals['vlm_calls']} VLM / {totals['synth_calls']} synth, "
                f"ledger says {live['vlm_calls']} / {live['synth_calls']}"
            )
    return {"vlm_per_vote_run": vlm, "synth_per_vote_run": synth, "totals": totals}


def transcript_name(sample_id: str, condition_label: str) -> str:
    safe = re.sub(r"[^A-Za-z0-9._-]+", "_", sample_id)
    return f"{safe}__{condition_label}"


# --- engine --------------------------------------------------------------------------------


class _Trace:
    """Per-sample transcript writer: call files, views, sequence numbers."""

    def __init__(self, root: Path):
        self.root = root
        self.calls = root / "calls"
        self.views = root / "views"
        self.seq = 0

    def reset(self) -> None:
        for sub in (self.calls, self.views):
            if sub.exists():
                shutil.rmtree(sub)
        self.calls.mkdir(parents=True, exist_ok=True)
        self.views.mkdir(parents=True, exist_ok=True)

    def save_call(self, name: str, request: dict, response: dict) -> str:
        self.seq += 1
        rel = f"calls/{self.seq:03d}_{name}.json"
        body = {"request": request, "response": response}
        (self.root / rel).write_text(json.dumps(body, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
        return rel

    def view_path(self, run: int, rnd: int) -> Path:
        return self.views / f"run{run}_round{rnd}.png"


class Engine:
    """Runs one condition over samples, writing transcripts under ``out_root``."""

    def __init__(
        self,
        cfg: RunConfig,
        backends: Mapping[str, Backend],
        out_root: str | Path,
        data_root: str | Path | None = None,
        ledger: CallLedger | None = None,
        manifest_id: str = "",
        cfg_hash: str | None = None,
        table=DEFAULT_VOCABULARY,
    ):
        missing = [r for r in ROLES_NEEDED[cfg.condition] if r not in backends]
        if missing:
            raise ConfigError(f"{cfg.condition} needs backends for roles {missing}")
        self.cfg = cfg
        self.backends = dict(backends)
        self.out_root = Path(out_root)
        self.data_root = Path(data_root) if data_root is not None else None
        self.ledger = ledger if ledger is not None else CallLedger()
        self.manifest_id = manifest_id
        self.cfg_hash = cfg_hash if cfg_hash is not None else config_hash(cfg)
        self.table = table
        self._lock = threading.Lock()

    # -- one sample --

    def run(self, sample: Sample) -> RunRecord:
        """Run all vote runs, vote, judge. Raises SampleFailed after writing the transcript."""
        cfg = self.cfg
        trace = _Trace(self.out_root / transcript_name(sample.id, cfg.label))
        trace.reset()
        src_path = sample.image_file(self.data_root)
        try:
            source = ImageRef.from_path(src_path)
        except OSError as exc:
            source = ImageRef(str(src_path), "")
            record = self._new_record(sample, source, trace)
            return self._fail(record, trace, f"source image unreadable: {exc}")
        record = self._new_record(sample, source, trace)

        for v in range(cfg.k):
            run = VoteRun(v, source)
            record.runs.append(run)
            try:
                self._vote_run(record, run, trace)
            except BackendError as exc:
                run.error = f"{type(exc).__name__}: {exc}"
                log.warning("%s run %d failed: %s", sample.id, v, run.error)

        good = [r for r in record.runs if not r.failed]
        if not good:
            return self._fail(record, trace, "all vote runs failed")
        normalize = choice_normalizer(sample.choices)
        for r in good:
            r.answer = normalize(r.raw_answer)
        record.final_answer = majority_vote([r.raw_answer for r in good], normalize)
        record.final_raw = record.representative_run().raw_answer

        if cfg.judge:
            self._judge(record, sample, trace)
        call_budget(record)
        self._write(record, trace)
        return record

    def _new_record(self, sample: Sample, source: ImageRef, trace: _Trace) -> RunRecord:
        return RunRecord(
            sample_id=sample.id,
            condition=self.cfg.condition,
            condition_label=self.cfg.label,
            config_hash=self.cfg_hash,
            question=sample.question,
            choices=sample.choices,
            ground_truth=sample.ground_truth,
            source_image=source,
            source_path=sample.image,
            k=self.cfg.k,
            manifest_id=self.manifest_id,
            transcript_dir=trace.root,
        )

    def _fail(self, record: RunRecord, trace: _Trace, reason: str) -> RunRecord:
        record.failed = True
        record.error = reason
        self._write(record, trace)
        raise SampleFailed(record, reason)

    def _write(self, record: RunRecord, trace: _Trace) -> None:
        (trace.root / "record.json").write_text(
            json.dumps(record.to_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
        )
        self.ledger.merge(record.ledger)

    # -- calls --

    def _chat(self, record, trace, run, stage, role, parts, rnd, temperature=None) -> str:
        req = ChatRequest(
            role,
            self.cfg.model_id(role),
            tuple(parts),
            temperature=self.cfg.temperature if temperature is None else temperature,
            max_output_tokens=self.cfg.max_output_tokens,
            scope=record.sample_id,
        )
        ev = StageEvent(stage, role, rnd, fingerprint=req.fingerprint(), started_at=time.time())
        name = f"run{run.index}_{stage}_round{rnd}" if run is not None else f"judge_{stage}"
        try:
            reply = self.backends[role].chat(req, record.ledger)
        except BackendError as exc:
            ev.status = "error"
            ev.detail["error"] = f"{type(exc).__name__}: {exc}"
            ev.finished_at = time.time()
            ev.call = trace.save_call(name, req.to_dict(trace.root), {"error": ev.detail["error"]})
            self._append(record, run, ev)
            raise
        ev.finished_at = time.time()
        ev.call = trace.save_call(name, req.to_dict(trace.root), {"text": reply})
        self._append(record, run, ev)
        return reply

    @staticmethod
    def _append(record: RunRecord, run: VoteRun | None, ev: StageEvent) -> None:
        if run is None:
            record.add_judge_event(ev)
        else:
            run.events.append(ev)

    def _synth(self, record, trace, run, text: str, rnd: int) -> ImageRef | None:
        req = SynthRequest(self.cfg.model_id(SYNTH_ROLE), record.source_image, text, scope=record.sample_id)
        ev = StageEvent("synth", SYNTH_ROLE, rnd, fingerprint=req.fingerprint(), started_at=time.time())
        out = trace.view_path(run.index, rnd)
        name = f"run{run.index}_synth_round{rnd}"
        try:
            view = self.backends[SYNTH_ROLE].synthesize(req, record.ledger, out)
        except BackendError as exc:
            ev.status = "error"
            ev.detail["error"] = f"{type(exc).__name__}: {exc}"
            ev.finished_at = time.time()
            ev.call = trace.save_call(name, req.to_dict(trace.root), {"error": ev.detail["error"]})
            run.events.append(ev)
            run.flag(SYNTH_FAILURE)
            return None
        ev.finished_at = time.time()
        ev.output = Path(os.path.relpath(view.path, trace.root)).as_posix()
        ev.call = trace.save_call(name, req.to_dict(trace.root), {"image": view.to_dict(trace.root)})
        run.events.append(ev)
        run.views.append(GeneratedView(rnd, view, text))
        return view

    def _plan(self, record, trace, run, prompt: str, rnd: int):
        try:
            reply = self._chat(record, trace, run, "plan", "planner", (prompt, record.source_image), rnd)
        except BackendError:
            run.flag(PLAN_CALL_FAILURE)
            return None
        try:
            instr = parse_instruction(reply, self.cfg.instruction_format, self.table)
        except InstructionError as exc:
            run.events[-1].detail["parse_error"] = f"{type(exc).__name__}: {exc}"
            run.flag(PLAN_PARSE_FAILURE)
            return None
        info = instruction_to_dict(instr)
        run.events[-1].detail["instruction"] = info
        run.instructions.append({"round": rnd, **info})
        return instr

    def _reason(self, record, trace, run, view: ImageRef | None, instruction: str | None) -> None:
        prompt = load_prompt("reasoner")
        note = ""
        parts: tuple = (record.source_image,)
        if view is not None:
            note = (
                "Image 1 is the original photo. Image 2 shows the same scene from a new camera "
                f"viewpoint, reached with this camera motion: {instruction}\n\n"
            )
            parts = (record.source_image, view)
        text = prompt.render(view_note=note, question=record.question, options=format_options(record.choices))
        reply = self._chat(record, trace, run, "reason", "reasoner", (text, *parts), 0)
        run.raw_answer = extract_answer(reply)

    def _verify(self, record, trace, run, view: ImageRef, instruction: str, rnd: int) -> VerifierVerdict:
        prompt = load_prompt("verifier")
        text = prompt.render(instruction=instruction, question=record.question)
        try:
            reply = self._chat(record, trace, run, "verify", "verifier", (text, record.source_image, view), rnd, 0.0)
        except BackendError:
            run.flag(VERIFIER_CALL_FAILURE)
            return LENIENT_VERDICT
        verdict = parse_verdict(reply)
        if verdict is None:
            run.flag(VERIFIER_UNPARSEABLE)
            run.events[-1].detail["warning"] = "unparseable verdict treated as accept"
            verdict = LENIENT_VERDICT
        run.events[-1].detail["verdict"] = verdict.to_dict()
        return verdict

    # -- conditions --

    def _vote_run(self, record: RunRecord, run: VoteRun, trace: _Trace) -> None:
        cond = self.cfg.condition
        if cond == "baseline":
            self._reason(record, trace, run, None, None)
        elif cond == "text_reflection":
            self._text_reflection(record, trace, run)
        elif cond == "simple":
            self._simple(record, trace, run)
        else:
            self._iterative(record, trace, run)

    def _fallback(self, record, trace, run) -> None:
        run.flag(FALLBACK)
        run.chosen_view, run.chosen_label = record.source_image, SOURCE_VIEW
        self._reason(record, trace, run, None, None)

    def _simple(self, record, trace, run) -> None:
        instr = self._plan(record, trace, run, planner_prompt(record.question, self.cfg.instruction_format, self.table), 0)
        if instr is None:
            return self._fallback(record, trace, run)
        text = synth_text(instr)
        view = self._synth(record, trace, run, text, 0)
        if view is None:
            return self._fallback(record, trace, run)
        run.chosen_view, run.chosen_label = view, trace_label(trace, view)
        self._reason(record, trace, run, view, text)

    def _iterative(self, record, trace, run) -> None:
        base_prompt = planner_prompt(record.question, self.cfg.instruction_format, self.table)
        instr = self._plan(record, trace, run, base_prompt, 0)
        if instr is None:
            return self._fallback(record, trace, run)
        text = synth_text(instr)
        view = self._synth(record, trace, run, text, 0)
        if view is None:
            return self._fallback(record, trace, run)

        candidates: list[tuple[int, VerifierVerdict, ImageRef]] = []
        for rnd in range(1, self.cfg.n + 1):
            # verification rnd judges the view made in round rnd - 1 and is logged under that round
            verdict = self._verify(record, trace, run, view, text, rnd - 1)
            run.views[-1].verdict = verdict
            candidates.append((rnd - 1, verdict, view))
            if verdict.accepted:
                break
            # A view made after the last allowed verification is never verified, so never chosen.
            nxt = self._plan(record, trace, run, replan_prompt(base_prompt, text, verdict.feedback), rnd)
            if nxt is None:
                break
            nxt_text = synth_text(nxt)
            nxt_view = self._synth(record, trace, run, nxt_text, rnd)
            if nxt_view is None:
                break
            text, view = nxt_text, nxt_view

        best = select_best_view(candidates)
        if best is None:
            run.chosen_view, run.chosen_label = record.source_image, SOURCE_VIEW
            self._reason(record, trace, run, None, None)
            return
        rnd, chosen = best
        run.chosen_view, run.chosen_label = chosen, trace_label(trace, chosen)
        instruction = next(v.instruction for v in run.views if v.round == rnd)
        self._reason(record, trace, run, chosen, instruction)

    def _text_reflection(self, record, trace, run) -> None:
        self._reason(record, trace, run, None, None)
        prompt = load_prompt("reflection")
        for rnd in range(1, self.cfg.r + 1):
            text = prompt.render(
                question=record.question, options=format_options(record.choices), previous=run.raw_answer
            )
            try:
                reply = self._chat(record, trace, run, "reflect", "reasoner", (text, record.source_image), rnd)
            except BackendError:
                run.flag(REFLECTION_FAILURE)
                break
            run.raw_answer = extract_answer(reply)

    # -- judging --

    def _judge(self, record: RunRecord, sample: Sample, trace: _Trace) -> None:
        judge = self.backends.get("judge")
        recorder = _RecordingJudge(self, record, trace, judge) if judge is not None else None
        try:
            record.judgment = judge_answer(
                record.final_raw, record.question, record.choices, record.ground_truth,
                recorder, record.ledger, self.cfg.model_id("judge"), record.sample_id,
            )
        except BackendError as exc:
            record.judgment = JudgeVerdict(INCORRECT, "semantic", None, f"judge error: {exc}")
        if (
            self.cfg.attribute
            and record.judgment.outcome == INCORRECT
            and record.condition in GENERATION_CONDITIONS
        ):
            record.error_label = attribute_error(recorder, record, record.ledger, self.cfg.model_id("judge"))
            record.unattributed = record.error_label is None


def trace_label(trace: _Trace, view: ImageRef) -> str:
    return Path(os.path.relpath(view.path, trace.root)).as_posix()


class _RecordingJudge(Backend):
    """Wraps the judge backend so every judge call becomes a record-level stage event."""

    def __init__(self, engine: Engine, record: RunRecord, trace: _Trace, inner: Backend):
        super().__init__(inner.config)
        self.engine, self.record, self.trace, self.inner = engine, record, trace, inner

    def chat(self, req: ChatRequest, ledger: CallLedger) -> str:
        stage = "attribute" if len(req.images) else "semantic"
        ev = StageEvent(stage, req.role, 0, fingerprint=req.fingerprint(), started_at=time.time())
        try:
            reply = self.inner.chat(req, ledger)
        except BackendError as exc:
            ev.status = "error"
            ev.detail["error"] = f"{type(exc).__name__}: {exc}"
            ev.finished_at = time.time()
            ev.call = self.trace.save_call(f"judge_{stage}", req.to_dict(self.trace.root), {"error": ev.detail["error"]})
            self.record.add_judge_event(ev)
            raise
        ev.finished_at = time.time()
        ev.call = self.trace.save_call(f"judge_{stage}", req.to_dict(self.trace.root), {"text": reply})
        self.record.add_judge_event(ev)
        return reply


# --- convenience entry points --------------------------------------------------------------


def _run_condition(condition: str, sample: Sample, cfg: RunConfig, backends, out_root, **kw) -> RunRecord:
    if cfg.condition != condition:
        raise ConfigError(f"run_{condition} called with a {cfg.condition} config")
    return Engine(cfg, backends, out_root, **kw).run(sample)


def run_baseline(sample: Sample, cfg: RunConfig, backends, out_root, **kw) -> RunRecord:
    return _run_condition("baseline", sample, cfg, backends, out_root, **kw)


def run_simple(sample: Sample, cfg: RunConfig, backends, out_root, **kw) -> RunRecord:
    return _run_condition("simple", sample, cfg, backends, out_root, **kw)


def run_iterative(sample: Sample, cfg: RunConfig, backends, out_root, **kw) -> RunRecord:
    return _run_condition("iterative", sample, cfg, backends, out_root, **kw)


def run_text_reflection(sample: Sample, cfg: RunConfig, backends, out_root, **kw) -> RunRecord:
    return _run_condition("text_reflection", sample, cfg, backends, out_root, **kw)


# --- results stream ------------------------------------------------------------------------


class OrderedSink:
    """Append-only JSON-lines writer that emits rows in a fixed key order.

    Rows arriving early wait in memory until every earlier key has been
    written or skipped, so concurrent workers still produce a stable file.
    """

    def __init__(self, path: str | Path, order: Sequence[str]):
        self.path = Path(path)
        self.order = list(order)
        self._pos = 0
        self._pending: dict[str, dict | None] = {}
        self._lock = threading.Lock()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "a", encoding="utf-8")

    def put(self, key: str, row: dict | None) -> None:
        """Queue ``row`` for ``key``; ``None`` marks the key as skipped."""
        with self._lock:
            self._pending[key] = row
            self._drain()

    def skip(self, key: str) -> None:
        self.put(key, None)

    def _drain(self) -> None:
        while self._pos < len(self.order) and self.order[self._pos] in self._pending:
            row = self._pending.pop(self.order[self._pos])
            if row is not None:
                self._fh.write(canonical_json(row) + "\n")
            self._pos += 1
        self._fh.flush()

    def close(self) -> None:
        """Flush whatever arrived, in order, even if earlier keys never did."""
        with self._lock:
            for key in self.order[self._pos:]:
                row = self._pending.pop(key, None)
                if row is not None:
                    self._fh.write(canonical_json(row) + "\n")
            self._pos = len(self.order)
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def load_results(path: str | Path) -> list[ResultSummary]:
    """Read a results stream; a later line for the same (sample, condition, config) wins."""
    latest: dict[tuple, ResultSummary] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                summary = ResultSummary.from_dict(json.loads(line))
            except (json.JSONDecodeError, KeyError) as exc:
                raise ValueError(f"{path}:{lineno}: not a result line ({exc})") from exc
            latest.pop((summary.sample_id, summary.condition, summary.config_hash), None)
            latest[(summary.sample_id, summary.condition, summary.config_hash)] = summary
    return list(latest.values())


def completed_keys(path: str | Path) -> set[tuple[str, str, str]]:
    """(sample_id, condition, config_hash) of every non-failed result already on disk."""
    if not Path(path).is_file():
        return set()
    return {(s.sample_id, s.condition, s.config_hash) for s in load_results(path) if not s.failed}
