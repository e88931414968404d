"""Benchmark manifests, stratified sampling, and accuracy aggregation."""

from __future__ import annotations

import hashlib
import json
import logging
import random
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from decimal import Decimal
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from twnv._util import percent, round_half_up

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CATEGORIES = ("orientation", "location", "size", "multi_object")
SOURCES = ("threedsr", "realworldqa", "other")
ERROR_LABELS = ("wrong_instruction", "bad_generation", "vl_failure")


class SchemaError(ValueError):
    pass


class QuotaExceedsPool(ValueError):
    pass


class UnknownSample(KeyError):
    pass


class CategoryMismatch(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    id: str
    image: str
    question: str
    choices: tuple[tuple[str, str], ...]
    ground_truth: str
    category: str
    subcategory: str
    source: str

    def __post_init__(self):
        object.__setattr__(self, "choices", tuple((str(a), str(b)) for a, b in self.choices))
        if not self.choices:
            raise ValueError("choices are empty")
        if self.ground_truth not in {cid for cid, _ in self.choices}:
            raise ValueError(f"ground_truth {self.ground_truth!r} is not a choice id")
        if self.category not in CATEGORIES:
            raise ValueError(f"category {self.category!r} not in {CATEGORIES}")
        if self.source not in SOURCES:
            raise ValueError(f"source {self.source!r} not in {SOURCES}")

    def image_file(self, data_root: str | Path | None = None) -> Path:
        path = Path(self.image)
        if data_root is not None and not path.is_absolute():
            path = Path(data_root) / path
        return path

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "id": self.id,
            "image": self.image,
            "question": self.question,
            "choices": [list(c) for c in self.choices],
            "ground_truth": self.ground_truth,
            "category": self.category,
            "subcategory": self.subcategory,
            "source": self.source,
        }


_REQUIRED = ("id", "image", "question", "choices", "ground_truth", "category", "subcategory", "source")


def _parse_choices(value, where: str) -> list[tuple[str, str]]:
    if not isinstance(value, list) or not value:
        raise SchemaError(f"{where}: field 'choices': expected a non-empty list")
    out = []
    for item in value:
        if isinstance(item, dict) and set(item) >= {"id", "text"}:
            out.append((str(item["id"]), str(item["text"])))
        elif isinstance(item, (list, tuple)) and len(item) == 2:
            out.append((str(item[0]), str(item[1])))
        else:
            raise SchemaError(f"{where}: field 'choices': each choice is [id, text] or {{id, text}}")
    ids = [cid for cid, _ in out]
    if len(set(ids)) != len(ids):
        raise SchemaError(f"{where}: field 'choices': duplicate choice ids")
    return out


def parse_sample(row: dict, where: str) -> Sample:
    if not isinstance(row, dict):
        raise SchemaError(f"{where}: expected a JSON object")
    version = row.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaError(f"{where}: field 'schema_version': expected {SCHEMA_VERSION}, got {version!r}")
    for name in _REQUIRED:
        if name not in row:
            raise SchemaError(f"{where}: field '{name}': missing")
    for name in ("id", "image", "question", "ground_truth", "category", "subcategory", "source"):
        if not isinstance(row[name], str) or not row[name].strip():
            raise SchemaError(f"{where}: field '{name}': expected a non-empty string")
    choices = _parse_choices(row["choices"], where)
    if row["ground_truth"] not in {cid for cid, _ in choices}:
        raise SchemaError(f"{where}: field 'ground_truth': {row['ground_truth']!r} is not a choice id")
    if row["category"] not in CATEGORIES:
        raise SchemaError(f"{where}: field 'category': {row['category']!r} not in {CATEGORIES}")
    if row["source"] not in SOURCES:
        raise SchemaError(f"{where}: field 'source': {row['source']!r} not in {SOURCES}")
    return Sample(
        row["id"], row["image"], row["question"], tuple(choices), row["ground_truth"],
        row["category"], row["subcategory"], row["source"],
    )


def load_manifest(
    path: str | Path,
    data_root: str | Path | None = None,
    check_images: str = "warn",
) -> list[Sample]:
    """Load and validate a JSON-lines manifest.

    ``check_images`` is ``"fail"``, ``"warn"`` or ``"ignore"``; image paths
    resolve against ``data_root`` when relative.
    """
    if check_images not in ("fail", "warn", "ignore"):
        raise ValueError(f"check_images must be fail, warn or ignore, not {check_images!r}")
    path = Path(path)
    samples: list[Sample] = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{where}: invalid JSON ({exc.msg})") from exc
            sample = parse_sample(row, where)
            if sample.id in seen:
                raise SchemaError(f"{where}: field 'id': duplicate id {sample.id!r} (first on line {seen[sample.id]})")
            seen[sample.id] = lineno
            samples.append(sample)
    if not samples:
        raise SchemaError(f"{path}: manifest is empty")
    if check_images != "ignore":
        missing = [s for s in samples if not s.image_file(data_root).is_file()]
        if missing:
            msg = f"{len(missing)} image(s) missing, first: {missing[0].image_file(data_root)}"
            if check_images == "fail":
                raise SchemaError(f"{path}: {msg}")
            log.warning("%s: %s", path, msg)
    return samples


def manifest_id(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:12]


def stratified_sample(pool: Sequence[Sample], quotas: Mapping[str, int], seed: int) -> list[Sample]:
    """Draw exactly ``quotas[sub]`` samples per subcategory; output keeps pool order."""
    by_sub: dict[str, list[int]] = defaultdict(list)
    for i, s in enumerate(pool):
        by_sub[s.subcategory].append(i)
    rng = random.Random(seed)
    chosen: list[int] = []
    for sub in sorted(quotas):
        want = quotas[sub]
        have = by_sub.get(sub, [])
        if want < 0:
            raise ValueError(f"negative quota for {sub!r}")
        if want > len(have):
            raise QuotaExceedsPool(f"subcategory {sub!r}: quota {want} exceeds pool size {len(have)}")
        chosen.extend(rng.sample(have, want))
    return [pool[i] for i in sorted(chosen)]


# --- skeleton manifest -------------------------------------------------------------

# (category, subcategory, source, count). Twelve pool subcategories plus three
# real-world ones; the split within each category is a placeholder.
SKELETON_LAYOUT = (
    ("orientation", "viewpoint", "threedsr", 48),
    ("orientation", "heading", "threedsr", 48),
    ("orientation", "egocentric_left_right", "threedsr", 47),
    ("orientation", "egocentric_front_behind", "threedsr", 47),
    ("orientation", "rwqa_orientation", "realworldqa", 35),
    ("location", "depth_ordering", "threedsr", 48),
    ("location", "vertical_comparison", "threedsr", 48),
    ("location", "proximity", "threedsr", 47),
    ("location", "relative_layout", "threedsr", 47),
    ("location", "rwqa_position", "realworldqa", 40),
    ("size", "rwqa_size", "realworldqa", 45),
    ("multi_object", "facing_direction", "threedsr", 49),
    ("multi_object", "relative_proximity", "threedsr", 49),
    ("multi_object", "co_orientation", "threedsr", 49),
    ("multi_object", "alignment", "threedsr", 48),
)


def skeleton_rows() -> list[dict]:
    rows = []
    i = 0
    for category, sub, source, count in SKELETON_LAYOUT:
        for _ in range(count):
            i += 1
            sid = f"twnv-{i:04d}"
            rows.append(
                {
                    "schema_version": SCHEMA_VERSION,
                    "id": sid,
                    "image": f"images/{sid}.png",
                    "question": "PLACEHOLDER: fill from the source benchmark",
                    "choices": [["A", "PLACEHOLDER"], ["B", "PLACEHOLDER"]],
                    "ground_truth": "A",
                    "category": category,
                    "subcategory": sub,
                    "source": source,
                }
            )
    return rows


def skeleton_manifest_path() -> Path:
    return Path(str(resources.files("twnv").joinpath("data/skeleton_manifest.jsonl")))


# --- aggregation ---------------------------------------------------------------------


@dataclass(frozen=True)
class ResultSummary:
    """One line of a results stream: a judged run, without timestamps."""

    sample_id: str
    condition: str
    outcome: str | None = None
    final_answer: str | None = None
    failed: bool = False
    error_label: str | None = None
    label_source: str | None = None
    unattributed: bool = False
    config_hash: str = ""
    manifest_id: str = ""
    judge_method: str | None = None
    votes: tuple = ()
    chosen_views: tuple = ()
    flags: tuple = ()
    budget: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "condition": self.condition,
            "config_hash": self.config_hash,
            "manifest_id": self.manifest_id,
            "failed": self.failed,
            "final_answer": self.final_answer,
            "outcome": self.outcome,
            "judge_method": self.judge_method,
            "error_label": self.error_label,
            "label_source": self.label_source,
            "unattributed": self.unattributed,
            "votes": list(self.votes),
            "chosen_views": list(self.chosen_views),
            "flags": list(self.flags),
            "budget": self.budget,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ResultSummary:
        return cls(
            sample_id=d["sample_id"],
            condition=d["condition"],
            outcome=d.get("outcome"),
            final_answer=d.get("final_answer"),
            failed=bool(d.get("failed", False)),
            error_label=d.get("error_label"),
            label_source=d.get("label_source"),
            unattributed=bool(d.get("unattributed", False)),
            config_hash=d.get("config_hash", ""),
            manifest_id=d.get("manifest_id", ""),
            judge_method=d.get("judge_method"),
            votes=tuple(d.get("votes", ())),
            chosen_views=tuple(d.get("chosen_views", ())),
            flags=tuple(d.get("flags", ())),
            budget=d.get("budget", {}),
        )


@dataclass
class CategoryCount:
    n: int = 0
    correct: int = 0

    @property
    def ratio(self) -> float:
        return self.correct / self.n if self.n else 0.0

    @property
    def accuracy(self) -> float:
        return percent(self.correct, self.n)


@dataclass
class CategoryStats:
    categories: dict[str, CategoryCount] = field(default_factory=lambda: {c: CategoryCount() for c in CATEGORIES})
    failures: int = 0
    error_counts: dict[str, int] = field(default_factory=lambda: {k: 0 for k in ERROR_LABELS})
    unattributed: int = 0

    @property
    def total(self) -> int:
        return sum(c.n for c in self.categories.values())

    @property
    def correct(self) -> int:
        return sum(c.correct for c in self.categories.values())

    @property
    def overall_accuracy(self) -> float:
        """Micro average over all judged samples."""
        return percent(self.correct, self.total)

    @property
    def macro_accuracy(self) -> float:
        ratios = [c.ratio for c in self.categories.values() if c.n]
        if not ratios:
            return 0.0
        return round_half_up(100.0 * sum(ratios) / len(ratios), 1)

    @property
    def error_total(self) -> int:
        return sum(self.error_counts.values())

    def error_percentages(self) -> dict[str, float]:
        total = self.error_total
        return {k: percent(v, total) for k, v in self.error_counts.items()}

    def merge(self, other: CategoryStats) -> CategoryStats:
        if set(self.categories) != set(other.categories):
            raise CategoryMismatch("cannot merge stats over different categories")
        out = CategoryStats(
            {c: CategoryCount(self.categories[c].n + other.categories[c].n,
                              self.categories[c].correct + other.categories[c].correct)
             for c in self.categories},
            self.failures + other.failures,
            {k: self.error_counts.get(k, 0) + other.error_counts.get(k, 0)
             for k in set(self.error_counts) | set(other.error_counts)},
            self.unattributed + other.unattributed,
        )
        return out

    def to_dict(self) -> dict:
        return {
            "categories": {
                c: {"n": v.n, "correct": v.correct, "accuracy": v.accuracy, "ratio": v.ratio}
                for c, v in self.categories.items()
            },
            "total": self.total,
            "correct": self.correct,
            "overall_accuracy": self.overall_accuracy,
            "overall_ratio": self.correct / self.total if self.total else 0.0,
            "macro_accuracy": self.macro_accuracy,
            "failures": self.failures,
            "errors": {
                "counts": dict(self.error_counts),
                "percentages": self.error_percentages(),
                "total": self.error_total,
                "unattributed": self.unattributed,
            },
        }


def aggregate(
    records: Iterable[ResultSummary],
    manifest: Sequence[Sample],
    overrides: Mapping[str, str] | None = None,
) -> CategoryStats:
    """Fold judged results into per-category counts and an error distribution.

    Failed samples are counted apart and never enter a denominator.
    ``overrides`` (sample_id -> label) replace automated error labels.
    """
    by_id = {s.id: s for s in manifest}
    stats = CategoryStats()
    overrides = overrides or {}
    seen: set[str] = set()
    for rec in records:
        sample = by_id.get(rec.sample_id)
        if sample is None:
            raise UnknownSample(rec.sample_id)
        if rec.sample_id in seen:
            raise ValueError(f"duplicate result for sample {rec.sample_id!r}")
        seen.add(rec.sample_id)
        if rec.failed:
            stats.failures += 1
            continue
        cat = stats.categories[sample.category]
        cat.n += 1
        if rec.outcome == "correct":
            cat.correct += 1
            continue
        label = overrides.get(rec.sample_id, rec.error_label)
        if label is not None:
            stats.error_counts[label] = stats.error_counts.get(label, 0) + 1
        elif rec.unattributed:
            stats.unattributed += 1
    return stats


def stats_from_counts(counts: Mapping[str, tuple[int, int]], errors: Mapping[str, int] | None = None) -> CategoryStats:
    """Build stats directly from ``{category: (correct, n)}``."""
    stats = CategoryStats({c: CategoryCount(n, correct) for c, (correct, n) in counts.items()})
    if errors:
        stats.error_counts = dict(errors)
    return stats


def pp_delta(base: float, aug: float) -> float:
    """Absolute percentage-point change, exact on one-decimal inputs."""
    return float(Decimal(repr(aug)) - Decimal(repr(base)))


def relative_gain(base: float, aug: float, digits: int = 1) -> float:
    """``(aug - base) / base`` in percent."""
    if base == 0:
        raise ZeroDivisionError("relative gain undefined for a zero baseline")
    return round_half_up(100.0 * (aug - base) / base, digits)


@dataclass(frozen=True)
class Delta:
    base: float
    aug: float
    pp: float
    relative_gain: float | None

    def cell(self) -> str:
        return f"{self.pp:+.1f} pp"


def compare(base: CategoryStats, aug: CategoryStats) -> dict[str, Delta]:
    """Per-category and overall deltas between two runs, from the reported percentages."""
    if set(base.categories) != set(aug.categories):
        raise CategoryMismatch(f"{sorted(base.categories)} vs {sorted(aug.categories)}")
    pairs = {c: (base.categories[c].accuracy, aug.categories[c].accuracy) for c in base.categories}
    pairs["overall"] = (base.overall_accuracy, aug.overall_accuracy)
    out = {}
    for key, (b, a) in pairs.items():
        out[key] = Delta(b, a, pp_delta(b, a), relative_gain(b, a) if b else None)
    return out


def label_counts(records: Iterable[ResultSummary]) -> Counter:
    return Counter(r.error_label for r in records if r.error_label)
