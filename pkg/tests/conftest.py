import json
import os
import sys
import time
from decimal import ROUND_HALF_UP, Decimal
from functools import lru_cache
from itertools import product

import numpy as np
import pytest
from hypothesis import settings
from PIL import Image

from twnv.backends import MockBackend, MockFixture
from twnv.benchmark import Sample
from twnv.judging import NvsScore

# quick, reproducible property runs by default; HYPOTHESIS_PROFILE=thorough digs deeper
settings.register_profile("default", max_examples=50, derandomize=True, deadline=None)
settings.register_profile("thorough", max_examples=500, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ALL_ROLES = ("planner", "reasoner", "verifier", "judge", "synthesizer")


def write_png(path, seed=0, size=(48, 32)):
    rng = np.random.default_rng(seed)
    Image.fromarray((rng.random((size[1], size[0], 3)) * 255).astype("uint8")).save(path)
    return path


def fixture_text(entries):
    return "\n".join(json.dumps(e) for e in entries) + "\n"


def mock(entries):
    return MockBackend(MockFixture.parse(fixture_text(entries)))


def all_roles(backend):
    return {role: backend for role in ALL_ROLES}


@pytest.fixture
def image(tmp_path):
    return write_png(tmp_path / "img.png")


@pytest.fixture
def sample(tmp_path, image):
    return Sample(
        "s1",
        str(image),
        "Is the mug to the left of the laptop from the camera's view?",
        (("A", "left"), ("B", "right")),
        "B",
        "location",
        "relative_layout",
        "other",
    )


def nvs_items(n, sums):
    """n integer scores per rubric in 1..5 whose rubric totals equal ``sums``."""
    cols = []
    for total in sums:
        assert n <= total <= 5 * n
        base, extra = divmod(total - n, 4)
        col = [5] * base + ([1 + extra] if extra else [])
        col += [1] * (n - len(col))
        assert len(col) == n and sum(col) == total
        cols.append(col)
    return [NvsScore(*t) for t in zip(*cols)]


def ratio3(num, den):
    """num/den rounded half-up to three decimals, computed exactly."""
    return float((Decimal(num) / Decimal(den)).quantize(Decimal("0.001"), ROUND_HALF_UP))


def round3(x):
    return float(Decimal(repr(x)).quantize(Decimal("0.001"), ROUND_HALF_UP))


@lru_cache(maxsize=None)
def find_nvs_count(targets, avg_target, limit=2000):
    # smallest N with integer rubric sums rounding to each target and an average rounding to avg_target
    for n in range(1, limit):
        sums = []
        for t in targets:
            hits = [s for s in range(n, 5 * n + 1) if ratio3(s, n) == t]
            if not hits:
                break
            sums.append(hits)
        else:
            for combo in product(*sums):
                if ratio3(sum(combo), 3 * n) == avg_target:
                    return n, combo
    raise AssertionError("no fixture size found")


def small_manifest(root, n=10, stride=69):
    """An n-row slice of the skeleton manifest with real PNGs under root/images."""
    from twnv.benchmark import skeleton_rows

    rows = skeleton_rows()[::stride][:n]
    (root / "images").mkdir(parents=True, exist_ok=True)
    for i, row in enumerate(rows):
        row["choices"] = [["A", "left"], ["B", "right"]]
        write_png(root / row["image"], seed=i)
    path = root / "manifest.jsonl"
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return path, rows


def run_fixture(path, extra=()):
    """Mock fixture serving every role of every condition."""
    entries = [
        {"role": "planner", "reply": "move x:+0.00m y:+1.00m z:+0.00m, rotate yaw:+0.0deg pitch:-15.0deg roll:+0.0deg"},
        {"role": "reasoner", "replies": ["A", "A", "B"]},
        {"role": "verifier", "replies": [
            "accepted: no\nvisibility: 2\nquality: 3\nconsistency: 4\nfeedback: tilt further",
            "accepted: yes\nvisibility: 5\nquality: 4\nconsistency: 4\nfeedback: ok",
        ]},
        {"role": "judge", "reply": "instruction_adequate: yes\nview_faithful: no"},
        *extra,
    ]
    path.write_text(fixture_text(entries))
    return path


_session_start = time.perf_counter()


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in acceptance.RESULTS:
        terminalreporter.write_line(line)
    elapsed = time.perf_counter() - _session_start
    terminalreporter.write_line(f"{'PASS' if elapsed < 5.0 else 'FAIL'}  Full suite wall time {elapsed:.2f}s (limit 5 s)")
