"""Plain-text, CSV and JSON renderings of accuracy, error, budget and NVS tables."""

from __future__ import annotations

import csv
import io
from typing import Mapping, Sequence

from twnv._util import round_half_up
from twnv.benchmark import CATEGORIES, ERROR_LABELS, CategoryStats, Delta, ResultSummary

CATEGORY_HEADERS = {"orientation": "Orient.", "location": "Loc.", "size": "Size", "multi_object": "Multi-obj"}


class Table:
    def __init__(self, title: str, headers: Sequence[str], rows: Sequence[Sequence[str]], footer: str = ""):
        self.title = title
        self.headers = list(headers)
        self.rows = [list(r) for r in rows]
        self.footer = footer

    def text(self) -> str:
        widths = [len(h) for h in self.headers]
        for row in self.rows:
            for i, cell in enumerate(row):
                widths[i] = max(widths[i], len(cell))
        def fmt(cells):
            first = cells[0].ljust(widths[0])
            rest = [c.rjust(w) for c, w in zip(cells[1:], widths[1:])]
            return "  ".join([first, *rest]).rstrip()
        lines = [self.title, fmt(self.headers), "  ".join("-" * w for w in widths)]
        lines += [fmt(r) for r in self.rows]
        if not self.rows:
            lines.append("(no rows)")
        if self.footer:
            lines.append(self.footer)
        return "\n".join(lines) + "\n"

    def csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.headers)
        writer.writerows(self.rows)
        return buf.getvalue()


def _pct(x: float) -> str:
    return f"{x:.1f}"


def accuracy_table(stats: Mapping[str, CategoryStats]) -> Table:
    headers = ["Condition", *(CATEGORY_HEADERS[c] for c in CATEGORIES), "Overall", "Macro", "n", "Failed"]
    rows = []
    for label, s in stats.items():
        rows.append(
            [label, *(_pct(s.categories[c].accuracy) for c in CATEGORIES),
             _pct(s.overall_accuracy), _pct(s.macro_accuracy), str(s.total), str(s.failures)]
        )
    return Table("Accuracy (%)", headers, rows)


def error_table(stats: Mapping[str, CategoryStats]) -> Table:
    headers = ["Condition"]
    for label in ERROR_LABELS:
        headers += [label, "%"]
    headers += ["Total", "Unattributed"]
    rows = []
    for label, s in stats.items():
        if s.error_total == 0 and s.unattributed == 0:
            continue
        pcts = s.error_percentages()
        row = [label]
        for e in ERROR_LABELS:
            row += [str(s.error_counts.get(e, 0)), _pct(pcts.get(e, 0.0))]
        row += [str(s.error_total), str(s.unattributed)]
        rows.append(row)
    return Table("Error distribution", headers, rows)


def budget_table(results: Mapping[str, Sequence[ResultSummary]]) -> Table:
    headers = ["Condition", "VLM/run", "Synth/run", "VLM total", "Synth total", "Retries"]
    rows = []
    for label, items in results.items():
        per_vlm = [n for r in items for n in r.budget.get("vlm_per_vote_run", [])]
        per_synth = [n for r in items for n in r.budget.get("synth_per_vote_run", [])]
        mean = lambda xs: f"{round_half_up(sum(xs) / len(xs), 2):.2f}" if xs else "-"
        rows.append(
            [label, mean(per_vlm), mean(per_synth),
             str(sum(r.budget.get("vlm_total", 0) for r in items)),
             str(sum(r.budget.get("synth_total", 0) for r in items)),
             str(sum(r.budget.get("retries", 0) for r in items))]
        )
    return Table("Call budget", headers, rows)


def comparison_table(deltas: Mapping[str, Delta], base_label: str, aug_label: str) -> Table:
    headers = ["Category", base_label, aug_label, "Delta", "Rel. gain"]
    rows = []
    for key, d in deltas.items():
        name = CATEGORY_HEADERS.get(key, key.capitalize())
        gain = f"{d.relative_gain:+.1f}%" if d.relative_gain is not None else "-"
        rows.append([name, _pct(d.base), _pct(d.aug), d.cell(), gain])
    return Table(f"Comparison ({aug_label} vs {base_label})", headers, rows)


def nvs_table(groups: Mapping[str, Mapping[str, float]], failed: int = 0) -> Table:
    headers = ["Dataset", "n", "IC", "CO", "RN", "Avg"]
    rows = []
    for name, m in groups.items():
        rows.append(
            [name, str(m["n"]),
             *(f"{round_half_up(m[k], 3):.3f}" for k in ("ic", "co", "rn", "avg"))]
        )
    footer = f"{failed} failed (excluded from means)" if failed else ""
    return Table("Novel-view quality (1-5)", headers, rows, footer)
