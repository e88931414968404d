"""Chat (VLM) and image-edit (Synthesizer) backends behind one interface."""

from __future__ import annotations

from pathlib import Path

from twnv.backends.core import (
    BACKEND_KINDS,
    ROLES,
    SYNTH_ROLE,
    VLM_ROLES,
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
    RateLimiter,
    ServerError,
    SourceImageError,
    SynthRequest,
    Timeout,
    UnknownFingerprint,
    backoff_delay,
    fingerprint,
    sha256_file,
)
from twnv.backends.http import HttpChatBackend, HttpImageEditBackend
from twnv.backends.mock import MockBackend, MockFixture, FixtureError, mock_from_fixture, stub_synthesize


def open_backend(cfg: BackendConfig, base_dir: str | Path | None = None, **http_kwargs) -> Backend:
    """Build a backend handle. Relative fixture paths resolve against ``base_dir``."""
    if cfg.kind == "mock":
        path = Path(cfg.fixture)
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        backend = mock_from_fixture(path, strict=cfg.strict)
        backend.config = cfg
        return backend
    if cfg.kind == "http_chat":
        return HttpChatBackend(cfg, **http_kwargs)
    return HttpImageEditBackend(cfg, **http_kwargs)


def chat(backend: Backend, req: ChatRequest, ledger: CallLedger) -> str:
    return backend.chat(req, ledger)


def synthesize(backend: Backend, req: SynthRequest, ledger: CallLedger, out_path) -> ImageRef:
    return backend.synthesize(req, ledger, out_path)


__all__ = [
    "BACKEND_KINDS", "ROLES", "SYNTH_ROLE", "VLM_ROLES",
    "AuthMissing", "Backend", "BackendConfig", "BackendError", "CallLedger", "ChatRequest",
    "DecodeError", "FixtureError", "HttpChatBackend", "HttpImageEditBackend", "ImageRef",
    "MockBackend", "MockFixture", "ProtocolError", "RateLimited", "RateLimiter", "ServerError",
    "SourceImageError", "SynthRequest", "Timeout", "UnknownFingerprint", "backoff_delay",
    "chat", "fingerprint", "mock_from_fixture", "open_backend", "sha256_file", "stub_synthesize",
    "synthesize",
]
