"""Minimal chat-completions client with bounded exponential backoff."""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import httpx

logger = logging.getLogger(__name__)

ENV_URL = "STRATMAP_LLM_BASE_URL"
ENV_KEY = "STRATMAP_LLM_API_KEY"
ENV_MODEL = "STRATMAP_LLM_MODEL"

ROLES = ("system", "user", "assistant")
RETRY_STATUS = {429, 500, 502, 503, 504}


class LLMError(RuntimeError):
    pass


class NetworkFailure(LLMError):
    pass


class RateLimited(LLMError):
    pass


class MalformedResponse(LLMError):
    pass


@dataclass
class EndpointConfig:
    base_url: str
    api_key: str = ""
    model: str = ""
    timeout: float = 60.0
    max_attempts: int = 4
    backoff: float = 1.0
    verbose: bool = False

    @classmethod
    def from_env(cls, verbose: bool = False) -> "EndpointConfig":
        url = os.environ.get(ENV_URL)
        if not url:
            raise LLMError(f"{ENV_URL} is not set")
        return cls(url, os.environ.get(ENV_KEY, ""), os.environ.get(ENV_MODEL, ""), verbose=verbose)


@dataclass
class ChatRequest:
    model: str
    messages: list[dict[str, str]]
    temperature: float = 0.0
    max_tokens: int = 1024

    def __post_init__(self):
        if not self.messages:
            raise ValueError("message list must be non-empty")
        for m in self.messages:
            if m.get("role") not in ROLES:
                raise ValueError(f"bad message role {m.get('role')!r}")
            if not isinstance(m.get("content"), str):
                raise ValueError("message content must be a string")

    def body(self) -> dict:
        return {
            "model": self.model,
            "messages": self.messages,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }


@dataclass
class ChatResponse:
    content: str
    usage: dict[str, int] = field(default_factory=dict)
    finish_reason: Optional[str] = None


def _parse_response(payload) -> ChatResponse:
    try:
        choice = payload["choices"][0]
        content = choice["message"]["content"]
    except (KeyError, IndexError, TypeError):
        raise MalformedResponse("response lacks choices[0].message.content") from None
    if not isinstance(content, str):
        raise MalformedResponse("message content is not a string")
    usage = payload.get("usage") or {}
    return ChatResponse(
        content,
        {k: int(v) for k, v in usage.items() if isinstance(v, (int, float))},
        choice.get("finish_reason"),
    )


class ChatClient:
    """Thread-safe; usage counters are shared across calls."""

    def __init__(
        self,
        config: EndpointConfig,
        transport: Optional[httpx.BaseTransport] = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.config = config
        self._http = httpx.Client(timeout=config.timeout, transport=transport)
        self._sleep = sleep
        self._lock = threading.Lock()
        self.calls = 0
        self.attempts: list[dict] = []
        self.usage: dict[str, int] = {}

    def _url(self) -> str:
        return self.config.base_url.rstrip("/") + "/chat/completions"

    def _log(self, **entry) -> None:
        with self._lock:
            self.attempts.append(entry)

    def chat(self, request: ChatRequest) -> ChatResponse:
        headers = {"Content-Type": "application/json"}
        if self.config.api_key:
            headers["Authorization"] = f"Bearer {self.config.api_key}"
        body = request.body()
        if not body["model"]:
            body["model"] = self.config.model
        if self.config.verbose:
            logger.info("POST %s (Authorization: Bearer ***) %s", self._url(), json.dumps(body))
        with self._lock:
            self.calls += 1
        error: LLMError = NetworkFailure("no attempt made")
        for attempt in range(1, self.config.max_attempts + 1):
            try:
                resp = self._http.post(self._url(), headers=headers, json=body)
            except httpx.HTTPError as exc:
                self._log(attempt=attempt, error=type(exc).__name__)
                error = NetworkFailure(str(exc))
            else:
                self._log(attempt=attempt, status=resp.status_code)
                if resp.status_code == 429:
                    error = RateLimited("HTTP 429")
                elif resp.status_code in RETRY_STATUS:
                    error = NetworkFailure(f"HTTP {resp.status_code}")
                elif resp.status_code >= 400:
                    raise NetworkFailure(f"HTTP {resp.status_code}: {resp.text[:200]}")
                else:
                    try:
                        payload = resp.json()
                    except ValueError:
                        raise MalformedResponse("response body is not JSON") from None
                    out = _parse_response(payload)
                    if self.config.verbose:
                        logger.info("response: %s", resp.text)
                    with self._lock:
                        for k, v in out.usage.items():
                            self.usage[k] = self.usage.get(k, 0) + v
                    return out
            if attempt < self.config.max_attempts:
                self._sleep(self.config.backoff * 2 ** (attempt - 1))
        raise error

    def close(self) -> None:
        self._http.close()
