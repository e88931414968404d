"""Scripted offline backends.

Fixture files are JSON-lines; blank lines and lines starting with ``#`` are
ignored. Each line is one of::

    {"strict": true}                                   # unscripted request -> UnknownFingerprint
    {"default": "Answer: A"}                           # reply for anything unscripted (lenient)
    {"fingerprint": "0123abcd4567ef89", "reply": "B"}
    {"fingerprint": "0123abcd4567ef89", "replies": ["reject ...", "accept ..."]}
    {"role": "reasoner", "reply": "B"}
    {"role": "verifier", "scope": "sample-001", "replies": ["...", "..."]}

Lookup order is fingerprint, then (role, scope), then role, then default.
A ``replies`` sequence hands out one element per call, counted separately
for every request scope, and repeats its last element once exhausted.

A reply of the form ``!error:<kind>`` raises the matching backend error
(``timeout``, ``rate_limited``, ``server``, ``protocol``, ``decode``,
``auth``) instead of answering. Synthesizer entries only ever need error
replies; any other synthesizer reply, or none, runs the geometric stub.
"""

from __future__ import annotations

import hashlib
import json
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path

from PIL import Image
from PIL.PngImagePlugin import PngInfo

from twnv.backends.core import (
    SYNTH_ROLE,
    AuthMissing,
    Backend,
    BackendConfig,
    BackendError,
    CallLedger,
    ChatRequest,
    DecodeError,
    ImageRef,
    ProtocolError,
    RateLimited,
    ServerError,
    SynthRequest,
    Timeout,
    UnknownFingerprint,
    check_source_image,
)
from twnv.geometry import CameraMotion
from twnv.instructions import InstructionError, discrete_to_motion, parse_discrete, parse_numerical

ERROR_PREFIX = "!error:"
_ERRORS: dict[str, type[BackendError]] = {
    "timeout": Timeout,
    "rate_limited": RateLimited,
    "server": ServerError,
    "protocol": ProtocolError,
    "decode": DecodeError,
    "auth": AuthMissing,
}

# stub gains; chosen only so that small motions give visible, distinct images
SHIFT_PER_METER = 0.1
SCALE_PER_METER = 0.1


class FixtureError(ValueError):
    pass


@dataclass
class MockFixture:
    by_fingerprint: dict[str, list[str]] = field(default_factory=dict)
    by_role_scope: dict[tuple[str, str], list[str]] = field(default_factory=dict)
    by_role: dict[str, list[str]] = field(default_factory=dict)
    default: str | None = None
    strict: bool = False

    @classmethod
    def parse(cls, text: str, source: str = "<fixture>") -> MockFixture:
        fx = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                entry = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FixtureError(f"{source}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(entry, dict):
                raise FixtureError(f"{source}:{lineno}: expected an object")
            fx._add(entry, f"{source}:{lineno}")
        return fx

    def _add(self, entry: dict, where: str) -> None:
        keys = set(entry)
        if keys == {"strict"}:
            self.strict = bool(entry["strict"])
            return
        if keys == {"default"}:
            self.default = str(entry["default"])
            return
        if "reply" in entry and "replies" in entry:
            raise FixtureError(f"{where}: give either 'reply' or 'replies', not both")
        if "reply" in entry:
            replies = [str(entry["reply"])]
        elif "replies" in entry:
            replies = entry["replies"]
            if not isinstance(replies, list) or not replies:
                raise FixtureError(f"{where}: 'replies' must be a non-empty list")
            replies = [str(r) for r in replies]
        else:
            raise FixtureError(f"{where}: entry has no reply")
        extra = keys - {"fingerprint", "role", "scope", "reply", "replies"}
        if extra:
            raise FixtureError(f"{where}: unknown keys {sorted(extra)}")
        if "fingerprint" in entry:
            self.by_fingerprint[str(entry["fingerprint"])] = replies
        elif "role" in entry and "scope" in entry:
            self.by_role_scope[(str(entry["role"]), str(entry["scope"]))] = replies
        elif "role" in entry:
            self.by_role[str(entry["role"])] = replies
        else:
            raise FixtureError(f"{where}: entry needs a 'fingerprint' or a 'role'")

    def dump(self) -> str:
        lines = [json.dumps({"strict": self.strict})]
        if self.default is not None:
            lines.append(json.dumps({"default": self.default}))
        for fp, replies in self.by_fingerprint.items():
            lines.append(json.dumps({"fingerprint": fp, "replies": replies}))
        for (role, scope), replies in self.by_role_scope.items():
            lines.append(json.dumps({"role": role, "scope": scope, "replies": replies}))
        for role, replies in self.by_role.items():
            lines.append(json.dumps({"role": role, "replies": replies}))
        return "\n".join(lines) + "\n"


class MockBackend(Backend):
    """Replays scripted replies; synthesizes with a deterministic 2D stub."""

    def __init__(self, fixture: MockFixture, config: BackendConfig | None = None):
        super().__init__(config)
        self.fixture = fixture
        self._counts: dict[tuple, int] = {}
        self._lock = threading.Lock()

    def _next(self, key: tuple, replies: list[str], scope: str) -> str:
        with self._lock:
            n = self._counts.get((key, scope), 0)
            self._counts[(key, scope)] = n + 1
        return replies[min(n, len(replies) - 1)]

    def _lookup(self, fp: str, role: str, scope: str) -> str | None:
        fx = self.fixture
        if fp in fx.by_fingerprint:
            return self._next(("fp", fp), fx.by_fingerprint[fp], scope)
        if (role, scope) in fx.by_role_scope:
            return self._next(("rs", role, scope), fx.by_role_scope[(role, scope)], "")
        if role in fx.by_role:
            return self._next(("r", role), fx.by_role[role], scope)
        return None

    def chat(self, req: ChatRequest, ledger: CallLedger) -> str:
        fp = req.fingerprint()
        reply = self._lookup(fp, req.role, req.scope)
        if reply is None:
            if self.fixture.strict or self.fixture.default is None:
                raise UnknownFingerprint(f"no scripted reply for {req.role} request {fp}")
            reply = self.fixture.default
        _raise_if_error(reply)
        ledger.record_vlm(req.role)
        return reply

    def synthesize(self, req: SynthRequest, ledger: CallLedger, out_path) -> ImageRef:
        check_source_image(req.source_image)
        reply = self._lookup(req.fingerprint(), SYNTH_ROLE, req.scope)
        if reply is not None:
            _raise_if_error(reply)
        out = Path(out_path)
        out.parent.mkdir(parents=True, exist_ok=True)
        stub_synthesize(req.source_image.path, req.instruction_text, out)
        ledger.record_synth()
        return ImageRef.from_path(out)


def _raise_if_error(reply: str) -> None:
    if reply.startswith(ERROR_PREFIX):
        kind = reply[len(ERROR_PREFIX):].strip()
        raise _ERRORS.get(kind, BackendError)(f"scripted error: {kind}")


def mock_from_fixture(path, strict: bool | None = None) -> MockBackend:
    path = Path(path)
    fixture = MockFixture.parse(path.read_text(encoding="utf-8"), source=str(path))
    if strict is not None:
        fixture.strict = strict
    return MockBackend(fixture)


def stub_motion(instruction_text: str) -> CameraMotion:
    try:
        return parse_numerical(instruction_text, strict=False)
    except InstructionError:
        pass
    try:
        return discrete_to_motion(parse_discrete(instruction_text))
    except InstructionError:
        return CameraMotion()


def stub_synthesize(source_path, instruction_text: str, out_path) -> None:
    """Apply the motion as a 2D affine proxy and stamp the instruction hash.

    Horizontal shift follows dx, vertical shift dy, uniform scale dz and
    in-plane rotation roll. Not geometry; only a deterministic stand-in.
    """
    m = stub_motion(instruction_text)
    with Image.open(source_path) as im:
        src = im.convert("RGB")
    w, h = src.size
    cx, cy = w / 2.0, h / 2.0
    scale = min(4.0, max(0.25, 1.0 + SCALE_PER_METER * m.dz))
    # camera right -> content left; camera up -> content down (image y points down)
    tx, ty = -SHIFT_PER_METER * m.dx * w, SHIFT_PER_METER * m.dy * h
    theta = math.radians(m.roll)
    c, s = math.cos(theta), math.sin(theta)
    # PIL wants the output->input map: p_in = c + R(-theta)/scale (p_out - c - t)
    a, b = c / scale, s / scale
    d, e = -s / scale, c / scale
    ox, oy = cx + tx, cy + ty
    data = (a, b, cx - a * ox - b * oy, d, e, cy - d * ox - e * oy)
    out = src.transform((w, h), Image.Transform.AFFINE, data, resample=Image.Resampling.BILINEAR)
    meta = PngInfo()
    meta.add_text("twnv-instruction-sha256", hashlib.sha256(instruction_text.encode("utf-8")).hexdigest())
    out.save(out_path, format="PNG", pnginfo=meta)
