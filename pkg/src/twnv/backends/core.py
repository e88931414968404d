from __future__ import annotations

import hashlib
import json
import os
import random
import threading
import time
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Union

VLM_ROLES = ("planner", "reasoner", "verifier", "judge")
SYNTH_ROLE = "synthesizer"
ROLES = VLM_ROLES + (SYNTH_ROLE,)
BACKEND_KINDS = ("http_chat", "http_image_edit", "mock")

BACKOFF_BASE_S = 1.0
BACKOFF_CAP_S = 30.0


class BackendError(RuntimeError):
    """Base class for every backend failure."""


class Timeout(BackendError):
    pass


class RateLimited(BackendError):
    pass


class ServerError(BackendError):
    pass


class ProtocolError(BackendError):
    pass


class AuthMissing(BackendError):
    pass


class DecodeError(BackendError):
    pass


class UnknownFingerprint(BackendError):
    pass


class SourceImageError(BackendError):
    """The synthesis source image cannot be read; raised before any I/O to the service."""


def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass(frozen=True)
class ImageRef:
    path: str
    sha256: str

    @classmethod
    def from_path(cls, path: str | os.PathLike) -> ImageRef:
        return cls(str(path), sha256_file(path))

    def to_dict(self, relative_to: str | os.PathLike | None = None) -> dict:
        path = self.path
        if relative_to is not None:
            try:
                path = os.path.relpath(self.path, relative_to)
            except ValueError:
                pass
        return {"path": Path(path).as_posix(), "sha256": self.sha256}


Part = Union[str, ImageRef]


@dataclass(frozen=True)
class ChatRequest:
    role: str
    model_id: str
    parts: tuple[Part, ...]
    temperature: float = 1.0
    max_output_tokens: int = 1024
    # Routing hint for scripted mocks; not part of the fingerprint.
    scope: str = ""

    def __post_init__(self):
        object.__setattr__(self, "parts", tuple(self.parts))
        if not any(isinstance(p, str) for p in self.parts):
            raise ValueError("a chat request needs at least one text part")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be positive")

    @property
    def texts(self) -> list[str]:
        return [p for p in self.parts if isinstance(p, str)]

    @property
    def images(self) -> list[ImageRef]:
        return [p for p in self.parts if isinstance(p, ImageRef)]

    def fingerprint(self) -> str:
        return fingerprint(self.role, self.model_id, self.texts, [im.sha256 for im in self.images])

    def to_dict(self, relative_to=None) -> dict:
        return {
            "role": self.role,
            "model_id": self.model_id,
            "temperature": self.temperature,
            "max_output_tokens": self.max_output_tokens,
            "parts": [
                {"text": p} if isinstance(p, str) else {"image": p.to_dict(relative_to)}
                for p in self.parts
            ],
        }


@dataclass(frozen=True)
class SynthRequest:
    model_id: str
    source_image: ImageRef
    instruction_text: str
    scope: str = ""

    def __post_init__(self):
        if not self.instruction_text or not self.instruction_text.strip():
            raise ValueError("instruction_text is empty")

    def fingerprint(self) -> str:
        return fingerprint(SYNTH_ROLE, self.model_id, [self.instruction_text], [self.source_image.sha256])

    def to_dict(self, relative_to=None) -> dict:
        return {
            "role": SYNTH_ROLE,
            "model_id": self.model_id,
            "source_image": self.source_image.to_dict(relative_to),
            "instruction_text": self.instruction_text,
        }


def fingerprint(role: str, model_id: str, texts, image_hashes) -> str:
    """Stable 16-hex-char request hash. Temperature is deliberately excluded."""
    payload = json.dumps(
        [role, model_id, "\n".join(texts), list(image_hashes)],
        ensure_ascii=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


@dataclass
class BackendConfig:
    kind: str
    endpoint_url: str = ""
    auth_env_var: str = ""
    timeout: float = 120.0
    max_retries: int = 3
    requests_per_minute: int = 60
    model_id: str = ""
    fixture: str = ""
    strict: bool | None = None

    def __post_init__(self):
        if self.kind not in BACKEND_KINDS:
            raise ValueError(f"unknown backend kind {self.kind!r}; expected one of {BACKEND_KINDS}")
        if not self.timeout > 0:
            raise ValueError("timeout must be > 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.requests_per_minute <= 0:
            raise ValueError("requests_per_minute must be positive")
        if self.kind == "mock" and not self.fixture:
            raise ValueError("mock backends need a fixture path")
        if self.kind != "mock" and not self.endpoint_url:
            raise ValueError(f"{self.kind} backends need an endpoint_url")


class CallLedger:
    """Thread-safe call counters. Counters only ever go up."""

    def __init__(self):
        self._lock = threading.Lock()
        self.vlm_calls = 0
        self.synth_calls = 0
        self.retries = 0
        self.per_role: dict[str, int] = {}

    def record_vlm(self, role: str) -> None:
        with self._lock:
            self.vlm_calls += 1
            self.per_role[role] = self.per_role.get(role, 0) + 1

    def record_synth(self) -> None:
        with self._lock:
            self.synth_calls += 1
            self.per_role[SYNTH_ROLE] = self.per_role.get(SYNTH_ROLE, 0) + 1

    def record_retry(self) -> None:
        with self._lock:
            self.retries += 1

    def merge(self, other: CallLedger) -> None:
        snap = other.to_dict()
        with self._lock:
            self.vlm_calls += snap["vlm_calls"]
            self.synth_calls += snap["synth_calls"]
            self.retries += snap["retries"]
            for role, n in snap["per_role"].items():
                self.per_role[role] = self.per_role.get(role, 0) + n

    def to_dict(self) -> dict:
        with self._lock:
            return {
                "vlm_calls": self.vlm_calls,
                "synth_calls": self.synth_calls,
                "retries": self.retries,
                "per_role": dict(sorted(self.per_role.items())),
            }

    @classmethod
    def from_dict(cls, data: dict) -> CallLedger:
        ledger = cls()
        ledger.vlm_calls = int(data.get("vlm_calls", 0))
        ledger.synth_calls = int(data.get("synth_calls", 0))
        ledger.retries = int(data.get("retries", 0))
        ledger.per_role = {k: int(v) for k, v in data.get("per_role", {}).items()}
        return ledger

    def vlm_by_role(self) -> int:
        with self._lock:
            return sum(n for role, n in self.per_role.items() if role in VLM_ROLES)


class RateLimiter:
    """Sliding-window limiter: at most ``requests_per_minute`` dispatches in any 60 s window."""

    window_s = 60.0

    def __init__(
        self,
        requests_per_minute: int,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if requests_per_minute <= 0:
            raise ValueError("requests_per_minute must be positive")
        self.limit = requests_per_minute
        self.clock = clock
        self.sleep = sleep
        self._sent: deque[float] = deque()
        self._lock = threading.Lock()

    def acquire(self) -> float:
        """Block until a dispatch is allowed; returns the dispatch time."""
        with self._lock:
            now = self.clock()
            self._expire(now)
            if len(self._sent) >= self.limit:
                deadline = self._sent[0] + self.window_s
                self.sleep(deadline - now)
                # clamp so float rounding in the clock cannot leave the oldest entry inside
                now = max(self.clock(), deadline)
                self._expire(now)
            self._sent.append(now)
            return now

    def _expire(self, now: float) -> None:
        while self._sent and now >= self._sent[0] + self.window_s:
            self._sent.popleft()


def backoff_delay(attempt: int, rng: random.Random, base: float = BACKOFF_BASE_S, cap: float = BACKOFF_CAP_S) -> float:
    """Exponential backoff with equal jitter for retry ``attempt`` (0-based)."""
    ceiling = min(cap, base * (2.0 ** attempt))
    return ceiling / 2.0 + rng.uniform(0.0, ceiling / 2.0)


def read_secret(env_var: str) -> str | None:
    if not env_var:
        return None
    value = os.environ.get(env_var)
    if not value:
        raise AuthMissing(f"environment variable {env_var} is not set")
    return value


class Backend:
    """Common surface for chat and synthesis services."""

    def __init__(self, config: BackendConfig):
        self.config = config

    def chat(self, req: ChatRequest, ledger: CallLedger) -> str:
        raise NotImplementedError(f"{type(self).__name__} does not serve chat requests")

    def synthesize(self, req: SynthRequest, ledger: CallLedger, out_path: str | os.PathLike) -> ImageRef:
        raise NotImplementedError(f"{type(self).__name__} does not serve synthesis requests")

    def close(self) -> None:
        pass


def check_source_image(ref: ImageRef) -> bytes:
    try:
        with open(ref.path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise SourceImageError(f"cannot read source image {ref.path}: {exc}") from exc
    if not data:
        raise SourceImageError(f"source image {ref.path} is empty")
    return data
