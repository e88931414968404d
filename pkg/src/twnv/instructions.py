"""View instructions in three formats and their text renderings.

The numerical grammar is bit-exact::

    move x:+1.50m y:+0.00m z:+0.00m, rotate yaw:-20.0deg pitch:+0.0deg roll:+0.0deg

Translations are quantized to 0.01 m and angles to 0.1 degrees.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Mapping, Union

from twnv.geometry import CameraMotion, normalize

MAX_TRANSLATION_M = 50.0
FORMATS = ("natural", "discrete", "numerical")


class InstructionError(ValueError):
    pass


class Malformed(InstructionError):
    pass


class MissingField(InstructionError):
    def __init__(self, missing: list[str]):
        self.missing = missing
        super().__init__(f"missing degrees of freedom: {', '.join(missing)}")


class OutOfRange(InstructionError):
    pass


class UnknownDirective(InstructionError):
    pass


def _motion(**kw) -> CameraMotion:
    return CameraMotion(**kw)


DEFAULT_VOCABULARY: dict[str, CameraMotion] = {
    "move_left": _motion(dx=-1.0),
    "move_right": _motion(dx=1.0),
    "move_up": _motion(dy=1.0),
    "move_down": _motion(dy=-1.0),
    "move_forward": _motion(dz=1.0),
    "move_backward": _motion(dz=-1.0),
    "pan_left": _motion(yaw=-30.0),
    "pan_right": _motion(yaw=30.0),
    "tilt_up": _motion(pitch=20.0),
    "tilt_down": _motion(pitch=-20.0),
    "zoom_in": _motion(dz=1.0),
    "zoom_out": _motion(dz=-1.0),
    # orbit: step sideways while turning back toward the subject
    "side_view_left": _motion(dx=-0.5, yaw=45.0),
    "side_view_right": _motion(dx=0.5, yaw=-45.0),
}


@dataclass(frozen=True)
class DiscreteDirective:
    name: str
    magnitude_override: float | None = None

    def __post_init__(self):
        if not self.name:
            raise UnknownDirective("directive name is empty")
        if self.magnitude_override is not None and not math.isfinite(self.magnitude_override):
            raise InstructionError("magnitude_override must be finite")


@dataclass(frozen=True)
class Natural:
    text: str

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise InstructionError("natural instruction text is empty")


@dataclass(frozen=True)
class Discrete:
    directive: DiscreteDirective


@dataclass(frozen=True)
class Numerical:
    motion: CameraMotion


ViewInstruction = Union[Natural, Discrete, Numerical]


def _q(value: float, digits: int) -> float:
    # + 0.0 turns -0.0 into 0.0 so zero always renders with a plus sign
    return round(value, digits) + 0.0


def quantize(m: CameraMotion) -> CameraMotion:
    m = normalize(m)
    return normalize(
        CameraMotion(_q(m.dx, 2), _q(m.dy, 2), _q(m.dz, 2), _q(m.yaw, 1), _q(m.pitch, 1), _q(m.roll, 1))
    )


def render_numerical(m: CameraMotion) -> str:
    q = quantize(m)
    return (
        f"move x:{q.dx:+.2f}m y:{q.dy:+.2f}m z:{q.dz:+.2f}m, "
        f"rotate yaw:{q.yaw:+.1f}deg pitch:{q.pitch:+.1f}deg roll:{q.roll:+.1f}deg"
    )


_T = r"([+-]\d+\.\d{2})"
_A = r"([+-]\d+\.\d)"
_STRICT_RE = re.compile(
    rf"move x:{_T}m y:{_T}m z:{_T}m, rotate yaw:{_A}deg pitch:{_A}deg roll:{_A}deg"
)

_NUM = r"([+-]?\s?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?)"
_SEP = r"\s*(?:[:=]|\bof\b|\bby\b)?\s*"
_LABELS = {
    "dx": r"(?:delta[_ ]?x|Δx|dx|x)",
    "dy": r"(?:delta[_ ]?y|Δy|dy|y)",
    "dz": r"(?:delta[_ ]?z|Δz|dz|z)",
    "yaw": r"yaw",
    "pitch": r"pitch",
    "roll": r"roll",
}
_LENIENT_RES = {
    name: re.compile(rf"(?<![A-Za-z0-9_]){label}{_SEP}{_NUM}", re.IGNORECASE)
    for name, label in _LABELS.items()
}


def _check_range(m: CameraMotion) -> CameraMotion:
    for name in ("dx", "dy", "dz"):
        if abs(getattr(m, name)) > MAX_TRANSLATION_M:
            raise OutOfRange(f"|{name}| exceeds {MAX_TRANSLATION_M} m")
    return m


def _to_float(text: str) -> float:
    value = float(text.replace(" ", ""))
    if not math.isfinite(value):
        raise OutOfRange(f"non-finite value {text!r}")
    return value


def parse_numerical(text: str, *, strict: bool = True) -> CameraMotion:
    """Parse a numerical instruction.

    Strict mode accepts only the canonical grammar. Lenient mode also pulls
    six labeled numbers (x/dx, y/dy, z/dz, yaw, pitch, roll) out of free text
    in any order; when a label repeats, the last occurrence wins.
    """
    if not isinstance(text, str):
        raise Malformed("instruction is not a string")
    match = _STRICT_RE.fullmatch(text.strip())
    if match:
        values = [_to_float(g) for g in match.groups()]
        return _check_range(normalize(CameraMotion(*values)))
    if strict:
        raise Malformed(f"not in canonical grammar: {text.strip()[:80]!r}")

    found: dict[str, float] = {}
    for name, pattern in _LENIENT_RES.items():
        hits = pattern.findall(text)
        if hits:
            found[name] = _to_float(hits[-1])
    if not found:
        raise Malformed(f"no labeled motion values in {text.strip()[:80]!r}")
    missing = [name for name in _LABELS if name not in found]
    if missing:
        raise MissingField(missing)
    return _check_range(normalize(CameraMotion(**found)))


def discrete_to_motion(
    d: DiscreteDirective, table: Mapping[str, CameraMotion] = DEFAULT_VOCABULARY
) -> CameraMotion:
    if d.name not in table:
        raise UnknownDirective(f"unknown directive {d.name!r}")
    base = table[d.name]
    if d.magnitude_override is None:
        return base
    k = d.magnitude_override
    return normalize(
        CameraMotion(base.dx * k, base.dy * k, base.dz * k, base.yaw * k, base.pitch * k, base.roll * k)
    )


def render_discrete(d: DiscreteDirective) -> str:
    text = d.name.replace("_", " ")
    if d.magnitude_override is not None:
        text += f" (x{d.magnitude_override:g})"
    return text


_MAGNITUDE_RE = re.compile(r"(?:magnitude|scale|x)\s*[:=]?\s*(\d+(?:\.\d+)?)", re.IGNORECASE)


def parse_discrete(text: str, table: Mapping[str, CameraMotion] = DEFAULT_VOCABULARY) -> DiscreteDirective:
    """Find the first vocabulary entry named in a Planner reply.

    Names match with underscores or spaces; longer names win over their
    prefixes (``side_view_left`` over ``move_left``).
    """
    lowered = text.lower()
    best: tuple[int, int, str] | None = None
    for name in table:
        pattern = r"\b" + r"[ _-]".join(map(re.escape, name.split("_"))) + r"\b"
        m = re.search(pattern, lowered)
        if m:
            key = (m.start(), -len(name), name)
            if best is None or key < best:
                best = key
    if best is None:
        raise UnknownDirective(f"no vocabulary entry in {text.strip()[:80]!r}")
    tail = lowered[best[0] + len(best[2]):]
    mag = _MAGNITUDE_RE.search(tail[:40])
    return DiscreteDirective(best[2], float(mag.group(1)) if mag else None)


def parse_natural(text: str) -> Natural:
    cleaned = re.sub(r"^\s*(?:instruction|camera motion)\s*:\s*", "", text.strip(), flags=re.IGNORECASE)
    return Natural(cleaned.strip())


def parse_instruction(
    text: str, fmt: str, table: Mapping[str, CameraMotion] = DEFAULT_VOCABULARY
) -> ViewInstruction:
    """Turn a Planner reply into an instruction of the requested format (lenient)."""
    if fmt == "numerical":
        return Numerical(parse_numerical(text, strict=False))
    if fmt == "discrete":
        return Discrete(parse_discrete(text, table))
    if fmt == "natural":
        return parse_natural(text)
    raise ValueError(f"unknown instruction format {fmt!r}")


def synth_text(instr: ViewInstruction) -> str:
    """Text handed to the Synthesizer. Natural text passes through verbatim."""
    if isinstance(instr, Numerical):
        return render_numerical(instr.motion)
    if isinstance(instr, Discrete):
        return render_discrete(instr.directive)
    if isinstance(instr, Natural):
        return instr.text
    raise TypeError(f"not an instruction: {instr!r}")


def instruction_motion(
    instr: ViewInstruction, table: Mapping[str, CameraMotion] = DEFAULT_VOCABULARY
) -> CameraMotion | None:
    if isinstance(instr, Numerical):
        return instr.motion
    if isinstance(instr, Discrete):
        return discrete_to_motion(instr.directive, table)
    return None


def instruction_to_dict(instr: ViewInstruction) -> dict:
    if isinstance(instr, Numerical):
        return {"format": "numerical", "motion": instr.motion.as_dict(), "text": synth_text(instr)}
    if isinstance(instr, Discrete):
        d = instr.directive
        return {
            "format": "discrete",
            "name": d.name,
            "magnitude_override": d.magnitude_override,
            "text": synth_text(instr),
        }
    return {"format": "natural", "text": instr.text}


_PLANNER_HEADER = (
    "You are planning a camera move. Look at the image and the question below, "
    "then decide which new viewpoint of the same scene would best resolve the "
    "spatial ambiguity in the question.\n\n"
    "Question: {question}\n\n"
)

_PLANNER_BODY = {
    "numerical": (
        "Reply with one 6-DOF camera motion relative to the current camera. "
        "Give all six values with units: x (meters, +right), y (meters, +up), "
        "z (meters, +forward), yaw (degrees, +turn right), pitch (degrees, +tilt up), "
        "roll (degrees, +clockwise). Use exactly this form:\n"
        "move x:+0.00m y:+0.00m z:+0.00m, rotate yaw:+0.0deg pitch:+0.0deg roll:+0.0deg"
    ),
    "natural": (
        "Reply with one short sentence describing only how the camera should move "
        "(direction and amount of translation and rotation). Describe camera motion "
        "only: do not name objects, the scene, or what you hope to see."
    ),
}


def planner_prompt(
    question: str, fmt: str, table: Mapping[str, CameraMotion] = DEFAULT_VOCABULARY
) -> str:
    if not question or not question.strip():
        raise ValueError("question is empty")
    head = _PLANNER_HEADER.format(question=question.strip())
    if fmt == "discrete":
        lines = "\n".join(f"- {name}" for name in table)
        return head + (
            "Reply with exactly one directive from this list, optionally followed by "
            "'magnitude: <factor>' to scale it:\n" + lines
        )
    if fmt in _PLANNER_BODY:
        return head + _PLANNER_BODY[fmt]
    raise ValueError(f"unknown instruction format {fmt!r}")


def replan_prompt(original_prompt: str, prior_instruction: str, feedback: str) -> str:
    return (
        f"{original_prompt}\n\n"
        "=== PREVIOUS INSTRUCTION ===\n"
        f"{prior_instruction}\n"
        "=== VERIFIER FEEDBACK ===\n"
        f"{feedback}\n"
        "=== END ===\n"
        "The view produced by the previous instruction was rejected. "
        "Propose a revised instruction in the same format."
    )
