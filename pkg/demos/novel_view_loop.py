"""
One question, three ways
========================

Answer a spatial question directly, with one imagined view, and with a
verified imagined view. Every model is a scripted mock, so this runs offline
and is fully repeatable; swap the mock for HTTP backends to run for real.
"""

import json
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from twnv.backends import MockBackend, MockFixture
from twnv.benchmark import Sample
from twnv.pipeline import Engine, RunConfig, call_budget

work = Path(tempfile.mkdtemp(prefix="twnv-demo-"))

# a stand-in photo; the mock synthesizer just zooms and shifts it
rng = np.random.default_rng(0)
Image.fromarray((rng.random((96, 128, 3)) * 255).astype("uint8")).save(work / "scene.png")
sample = Sample(
    "demo-1", str(work / "scene.png"),
    "From the camera, is the mug left or right of the laptop?",
    (("A", "left"), ("B", "right")), "B", "location", "relative_layout", "other",
)

# scripted replies: the verifier rejects the first view, then accepts the re-planned one.
# A reply list is walked once per sample, so later vote runs see the last reply.
entries = [
    {"role": "planner", "reply": "move x:+0.00m y:+1.00m z:+0.00m, rotate yaw:+0.0deg pitch:-15.0deg roll:+0.0deg"},
    {"role": "reasoner", "replies": ["A", "B", "B"]},
    {"role": "verifier", "replies": [
        "accepted: no\nvisibility: 2\nquality: 4\nconsistency: 4\nfeedback: the mug is cut off, move further back",
        "accepted: yes\nvisibility: 5\nquality: 4\nconsistency: 5\nfeedback: both objects visible",
    ]},
    {"role": "judge", "reply": "instruction_adequate: yes\nview_faithful: yes"},
]
fixture = MockFixture.parse("\n".join(json.dumps(e) for e in entries))

for cfg in (RunConfig("baseline", k=3), RunConfig("simple", k=3), RunConfig("iterative", n=2, k=3)):
    backend = MockBackend(fixture)
    roles = {r: backend for r in ("planner", "reasoner", "verifier", "judge", "synthesizer")}
    record = Engine(cfg, roles, work / "out").run(sample)
    budget = call_budget(record)
    print(f"{cfg.label:<22} votes={record.votes} final={record.final_answer} "
          f"({record.judgment.outcome}); VLM calls per run {budget['vlm_per_vote_run']}")

# the iterative transcript shows the feedback loop stage by stage
run = record.runs[0]
for event in run.events:
    print(f"  round {event.round} {event.stage:<7} {event.status}")
print("chosen view:", run.chosen_label)
print("transcripts in", record.transcript_dir)
