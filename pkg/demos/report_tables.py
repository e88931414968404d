"""
Accuracy, error and quality tables
==================================

Counts in, rounded percentages out. Percentages are rounded half-up to one
decimal, and comparisons are made between the reported numbers.
"""

from twnv.benchmark import compare, stats_from_counts
from twnv.judging import NvsScore, nvs_means
from twnv.report import accuracy_table, comparison_table, error_table, nvs_table

base = stats_from_counts({"orientation": (150, 225), "location": (170, 230), "size": (35, 45), "multi_object": (134, 195)})
ours = stats_from_counts(
    {"orientation": (165, 225), "location": (196, 230), "size": (41, 45), "multi_object": (145, 195)},
    {"wrong_instruction": 81, "bad_generation": 85, "vl_failure": 22},
)
print(accuracy_table({"baseline": base, "ours": ours}).text())
print(error_table({"ours": ours}).text())
print(comparison_table(compare(base, ours), "baseline", "ours").text())

# quality scores: benchmark means are means over items, then averaged per item
scores = [NvsScore(3, 3, 2), NvsScore(4, 2, 3), NvsScore(2, 3, 3)]
print(nvs_table({"demo": nvs_means(scores)}).text())
print(accuracy_table({"ours": ours}).csv())
