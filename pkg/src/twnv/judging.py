"""Answer judging, error attribution, and novel-view quality scoring."""

from __future__ import annotations

import re
import string
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from twnv.backends import Backend, BackendError, CallLedger, ChatRequest, ImageRef
from twnv.prompts import load_prompt

CORRECT, INCORRECT, AMBIGUOUS = "correct", "incorrect", "ambiguous"
ERROR_LABELS = ("wrong_instruction", "bad_generation", "vl_failure")
GENERATION_CONDITIONS = ("simple", "iterative")


class ScoringFailed(RuntimeError):
    pass


Choices = Sequence[tuple[str, str]]


def as_choices(choices) -> list[tuple[str, str]]:
    if isinstance(choices, Mapping):
        return [(str(k), str(v)) for k, v in choices.items()]
    return [(str(c[0]), str(c[1])) for c in choices]


_PUNCT = str.maketrans({c: " " for c in string.punctuation})
_PREFIX_RE = re.compile(r"^(?:the\s+)?(?:final\s+)?answer\s*(?:is)?\s*[:\-]?\s*")
_LETTER_ONLY_RE = re.compile(r"\(?([a-z0-9])[\)\.:]?")
_LETTER_LEAD_RE = re.compile(r"\(?([a-z0-9])(?:\)|\.|:)\s+|\(([a-z0-9])\)\s*")


def normalize_text(text: str) -> str:
    return " ".join(text.lower().translate(_PUNCT).split())


def _strip_decorations(raw: str) -> str:
    s = raw.strip().lower()
    s = _PREFIX_RE.sub("", s)
    return s.strip().rstrip(string.punctuation + " ").strip()


def resolve_choice(raw: str, choices) -> str | None:
    """Map a free-form answer onto one choice id, or None when zero or several fit.

    Accepted letter styles: ``B``, ``b``, ``(B)``, ``B.``, ``B)``, optionally
    followed by the option text. Otherwise a choice matches when its text
    appears in the answer as a whole phrase; exactly one must match.
    """
    opts = as_choices(choices)
    ids = {cid.lower(): cid for cid, _ in opts}
    s = _strip_decorations(raw)

    m = _LETTER_ONLY_RE.fullmatch(s)
    if m and m.group(1) in ids:
        return ids[m.group(1)]
    m = _LETTER_LEAD_RE.match(s)
    if m:
        letter = m.group(1) or m.group(2)
        if letter in ids:
            return ids[letter]

    hay = normalize_text(s)
    hits = []
    for cid, text in opts:
        needle = normalize_text(text)
        if needle and re.search(rf"(?<!\w){re.escape(needle)}(?!\w)", hay):
            hits.append(cid)
    return hits[0] if len(hits) == 1 else None


def match_answer(raw: str, choices, ground_truth: str) -> str:
    opts = as_choices(choices)
    if not opts:
        raise ValueError("choices are empty")
    if ground_truth not in {cid for cid, _ in opts}:
        raise ValueError(f"ground truth {ground_truth!r} is not among the choices")
    found = resolve_choice(raw or "", opts)
    if found is None:
        return AMBIGUOUS
    return CORRECT if found == ground_truth else INCORRECT


_ANSWER_LINE_RE = re.compile(r"^\s*(?:final\s+)?answer\s*[:\-]\s*(.+?)\s*$", re.IGNORECASE | re.MULTILINE)


def extract_answer(reply: str) -> str:
    """Last ``Answer: ...`` line of a reply, else the whole reply stripped."""
    hits = _ANSWER_LINE_RE.findall(reply or "")
    return hits[-1] if hits else (reply or "").strip()


def answer_key(raw: str, choices) -> str:
    """Vote key: the resolved choice id, else the normalized text."""
    found = resolve_choice(raw, choices)
    return found if found is not None else normalize_text(raw)


def format_options(choices) -> str:
    return "\n".join(f"{cid}. {text}" for cid, text in as_choices(choices))


@dataclass(frozen=True)
class JudgeVerdict:
    outcome: str
    method: str
    matched_choice: str | None = None
    rationale: str = ""
    prompt_version: str = ""

    def to_dict(self) -> dict:
        return {
            "outcome": self.outcome,
            "method": self.method,
            "matched_choice": self.matched_choice,
            "rationale": self.rationale,
            "prompt_version": self.prompt_version,
        }

    @classmethod
    def from_dict(cls, d: dict) -> JudgeVerdict:
        return cls(d["outcome"], d["method"], d.get("matched_choice"), d.get("rationale", ""), d.get("prompt_version", ""))


def semantic_judge(
    backend: Backend,
    raw: str,
    question: str,
    choices,
    ground_truth: str,
    ledger: CallLedger,
    model_id: str = "",
    scope: str = "",
) -> JudgeVerdict:
    prompt = load_prompt("judge_semantic")
    text = prompt.render(question=question, options=format_options(choices), answer=raw)
    reply = backend.chat(ChatRequest("judge", model_id, (text,), temperature=0.0, scope=scope), ledger)
    found = None
    if normalize_text(reply) not in ("none", "none of them", "no option"):
        found = resolve_choice(reply, choices)
    if found is None:
        return JudgeVerdict(INCORRECT, "semantic", None, "unresolvable", prompt.tag)
    outcome = CORRECT if found == ground_truth else INCORRECT
    return JudgeVerdict(outcome, "semantic", found, reply.strip(), prompt.tag)


def judge_answer(
    raw: str,
    question: str,
    choices,
    ground_truth: str,
    backend: Backend | None,
    ledger: CallLedger,
    model_id: str = "",
    scope: str = "",
) -> JudgeVerdict:
    """String matching first; the semantic judge only sees ambiguous answers."""
    result = match_answer(raw, choices, ground_truth)
    if result != AMBIGUOUS:
        return JudgeVerdict(result, "string_match", resolve_choice(raw, choices))
    if backend is None:
        return JudgeVerdict(INCORRECT, "string_match", None, "ambiguous and no judge configured")
    return semantic_judge(backend, raw, question, choices, ground_truth, ledger, model_id, scope)


@dataclass(frozen=True)
class ErrorLabel:
    label: str
    source: str = "automated"

    def __post_init__(self):
        if self.label not in ERROR_LABELS:
            raise ValueError(f"unknown error label {self.label!r}")
        if self.source not in ("automated", "manual_override"):
            raise ValueError(f"unknown label source {self.source!r}")

    def to_dict(self) -> dict:
        return {"label": self.label, "source": self.source}


_YES_NO = r"\s*[:=]\s*(yes|no|true|false)"
_ADEQUATE_RE = re.compile(r"instruction[_ ]adequate" + _YES_NO, re.IGNORECASE)
_FAITHFUL_RE = re.compile(r"view[_ ]faithful" + _YES_NO, re.IGNORECASE)
_QUALITY_RE = re.compile(r"quality\s*[:=]\s*([1-5])", re.IGNORECASE)


def parse_attribution(reply: str) -> tuple[bool, bool] | None:
    adequate = _ADEQUATE_RE.search(reply)
    faithful = _FAITHFUL_RE.search(reply)
    if adequate is None:
        return None
    if faithful is not None:
        is_faithful = faithful.group(1).lower() in ("yes", "true")
    else:
        quality = _QUALITY_RE.search(reply)
        if quality is None:
            return None
        is_faithful = int(quality.group(1)) >= 3
    return adequate.group(1).lower() in ("yes", "true"), is_faithful


def attribute_error(
    backend: Backend | None,
    record,
    ledger: CallLedger,
    model_id: str = "",
) -> ErrorLabel | None:
    """Label why a generation-condition record went wrong; None means unattributed.

    Engine flags decide mechanically. Otherwise one judge call answers two
    yes/no questions: no instruction -> wrong_instruction, adequate but
    unfaithful view -> bad_generation, both fine -> vl_failure.
    """
    if record.condition not in GENERATION_CONDITIONS:
        raise ValueError(f"error labels apply to generation conditions, not {record.condition!r}")
    if record.judgment is None or record.judgment.outcome != INCORRECT:
        raise ValueError("error labels apply to incorrect records only")

    run = record.representative_run()
    if run is None:
        return None
    if run.has_flag("plan_parse_failure") or run.has_flag("plan_call_failure"):
        return ErrorLabel("wrong_instruction")
    if run.has_flag("synth_failure"):
        return ErrorLabel("bad_generation")

    view = run.judged_view()
    instruction = run.last_instruction_text()
    if view is None or instruction is None or backend is None:
        return None
    prompt = load_prompt("judge_attribution")
    text = prompt.render(instruction=instruction, question=record.question)
    req = ChatRequest("judge", model_id, (text, record.source_image, view), temperature=0.0, scope=record.sample_id)
    try:
        reply = backend.chat(req, ledger)
    except BackendError:
        return None
    parsed = parse_attribution(reply)
    if parsed is None:
        return None
    adequate, faithful = parsed
    if not adequate:
        return ErrorLabel("wrong_instruction")
    if not faithful:
        return ErrorLabel("bad_generation")
    return ErrorLabel("vl_failure")


def load_overrides(path: str | Path) -> dict[str, str]:
    """Read a manual-override sidecar: ``sample_id label`` per line, ``#`` comments."""
    overrides: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2 or parts[1] not in ERROR_LABELS:
            raise ValueError(f"{path}:{lineno}: expected '<sample_id> <{'|'.join(ERROR_LABELS)}>'")
        overrides[parts[0]] = parts[1]
    return overrides


def apply_overrides(labels: Mapping[str, ErrorLabel | None], overrides: Mapping[str, str]) -> dict[str, ErrorLabel | None]:
    merged = dict(labels)
    for sample_id, label in overrides.items():
        merged[sample_id] = ErrorLabel(label, "manual_override")
    return merged


# --- novel-view quality rubric -------------------------------------------------

RUBRICS = ("ic", "co", "rn")
_SCORE_RE = re.compile(r"score\s*[:=]?\s*([1-5])(?!\d)", re.IGNORECASE)
_BARE_SCORE_RE = re.compile(r"\s*([1-5])(?:\s*/\s*5)?\s*\.?\s*")


@dataclass(frozen=True)
class NvsScore:
    ic: int
    co: int
    rn: int

    def __post_init__(self):
        for name in RUBRICS:
            value = getattr(self, name)
            if not isinstance(value, int) or not 1 <= value <= 5:
                raise ValueError(f"{name} must be an integer in 1..5, got {value!r}")

    @property
    def avg(self) -> float:
        return (self.ic + self.co + self.rn) / 3

    def to_dict(self) -> dict:
        return {"ic": self.ic, "co": self.co, "rn": self.rn, "avg": self.avg}


def parse_score(reply: str) -> int | None:
    m = _SCORE_RE.search(reply) or _BARE_SCORE_RE.fullmatch(reply)
    return int(m.group(1)) if m else None


def score_nvs(
    backend: Backend,
    source: ImageRef,
    gt_view: ImageRef,
    generated: ImageRef,
    ledger: CallLedger,
    model_id: str = "",
    scope: str = "",
) -> NvsScore:
    """Three rubric calls (IC, CO, RN); each unparseable reply is retried once."""
    images = {
        "ic": (gt_view, generated),
        "co": (source, gt_view, generated),
        "rn": (source, gt_view, generated),
    }
    scores = {}
    for rubric in RUBRICS:
        prompt = load_prompt(f"rubric_{rubric}")
        req = ChatRequest("judge", model_id, (prompt.template, *images[rubric]), temperature=0.0, scope=scope)
        for _ in range(2):
            try:
                reply = backend.chat(req, ledger)
            except BackendError as exc:
                raise ScoringFailed(f"{rubric}: {exc}") from exc
            score = parse_score(reply)
            if score is not None:
                break
        else:
            raise ScoringFailed(f"{rubric}: unparseable score {reply[:60]!r}")
        scores[rubric] = score
    return NvsScore(**scores)


def nvs_means(scores: Iterable[NvsScore]) -> dict[str, float]:
    """Benchmark-level means of per-item scores; ``avg`` is the mean of per-item averages."""
    items = list(scores)
    if not items:
        return {"n": 0, "ic": 0.0, "co": 0.0, "rn": 0.0, "avg": 0.0}
    n = len(items)
    return {
        "n": n,
        "ic": sum(s.ic for s in items) / n,
        "co": sum(s.co for s in items) / n,
        "rn": sum(s.rn for s in items) / n,
        "avg": sum(s.ic + s.co + s.rn for s in items) / (3 * n),
    }
