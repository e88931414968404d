"""HTTP clients for OpenAI-compatible chat and a JSON image-edit service."""

from __future__ import annotations

import base64
import io
import json
import os
import random
import time
from pathlib import Path
from typing import Callable

import httpx
from PIL import Image, UnidentifiedImageError

from twnv.backends.core import (
    Backend,
    BackendConfig,
    CallLedger,
    ChatRequest,
    DecodeError,
    ImageRef,
    ProtocolError,
    RateLimited,
    RateLimiter,
    ServerError,
    SynthRequest,
    Timeout,
    backoff_delay,
    check_source_image,
    read_secret,
)

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def png_bytes(path: str | os.PathLike) -> bytes:
    data = Path(path).read_bytes()
    if data.startswith(PNG_SIGNATURE):
        return data
    with Image.open(io.BytesIO(data)) as im:
        buf = io.BytesIO()
        im.convert("RGB").save(buf, format="PNG")
        return buf.getvalue()


def image_data_url(path: str | os.PathLike) -> str:
    return "data:image/png;base64," + base64.b64encode(png_bytes(path)).decode("ascii")


class _HttpBackend(Backend):
    def __init__(
        self,
        config: BackendConfig,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
        clock: Callable[[], float] = time.monotonic,
        rng: random.Random | None = None,
    ):
        super().__init__(config)
        self.client = httpx.Client(transport=transport, timeout=config.timeout)
        self.sleep = sleep
        self.limiter = RateLimiter(config.requests_per_minute, clock=clock, sleep=sleep)
        self.rng = rng or random.Random()

    def close(self) -> None:
        self.client.close()

    def _post(self, payload: dict, ledger: CallLedger) -> dict:
        # serialize once: retries resend the identical bytes
        body = json.dumps(payload, separators=(",", ":")).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        secret = read_secret(self.config.auth_env_var)
        if secret:
            headers["Authorization"] = f"Bearer {secret}"

        attempts = self.config.max_retries + 1
        for attempt in range(attempts):
            self.limiter.acquire()
            try:
                resp = self.client.post(self.config.endpoint_url, content=body, headers=headers)
            except httpx.TimeoutException as exc:
                raise Timeout(f"{self.config.endpoint_url} timed out after {self.config.timeout}s") from exc
            except httpx.TransportError as exc:
                if attempt + 1 < attempts:
                    ledger.record_retry()
                    self.sleep(backoff_delay(attempt, self.rng))
                    continue
                raise ServerError(f"transport failure: {exc}") from exc

            status = resp.status_code
            if status == 429 or status >= 500:
                if attempt + 1 < attempts:
                    ledger.record_retry()
                    self.sleep(backoff_delay(attempt, self.rng))
                    continue
                if status == 429:
                    raise RateLimited(f"HTTP 429 after {attempts} attempt(s)")
                raise ServerError(f"HTTP {status} after {attempts} attempt(s)")
            if status >= 400:
                raise ProtocolError(f"HTTP {status}: {resp.text[:200]}")
            try:
                return resp.json()
            except ValueError as exc:
                raise ProtocolError("response body is not JSON") from exc
        raise AssertionError("unreachable")


class HttpChatBackend(_HttpBackend):
    def chat(self, req: ChatRequest, ledger: CallLedger) -> str:
        content = []
        for part in req.parts:
            if isinstance(part, str):
                content.append({"type": "text", "text": part})
            else:
                content.append({"type": "image_url", "image_url": {"url": image_data_url(part.path)}})
        payload = {
            "model": req.model_id or self.config.model_id,
            "messages": [{"role": "user", "content": content}],
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        }
        data = self._post(payload, ledger)
        reply = extract_chat_reply(data)
        ledger.record_vlm(req.role)
        return reply


def extract_chat_reply(data) -> str:
    try:
        content = data["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise ProtocolError("response has no choices[0].message.content") from exc
    if isinstance(content, str):
        return content
    if isinstance(content, list):
        texts = [c.get("text", "") for c in content if isinstance(c, dict) and c.get("type") == "text"]
        if texts:
            return "".join(texts)
    raise ProtocolError(f"unsupported message content: {type(content).__name__}")


class HttpImageEditBackend(_HttpBackend):
    def synthesize(self, req: SynthRequest, ledger: CallLedger, out_path) -> ImageRef:
        check_source_image(req.source_image)
        payload = {
            "model": req.model_id or self.config.model_id,
            "image": base64.b64encode(png_bytes(req.source_image.path)).decode("ascii"),
            "prompt": req.instruction_text,
        }
        data = self._post(payload, ledger)
        if not isinstance(data, dict) or not isinstance(data.get("image"), str):
            raise ProtocolError("response has no 'image' field")
        try:
            raw = base64.b64decode(data["image"], validate=True)
            with Image.open(io.BytesIO(raw)) as im:
                im.load()
                image = im.convert("RGB")
        except (ValueError, UnidentifiedImageError, OSError) as exc:
            raise DecodeError("response image is not decodable") from exc
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        image.save(out_path, format="PNG")
        ledger.record_synth()
        return ImageRef.from_path(out_path)
