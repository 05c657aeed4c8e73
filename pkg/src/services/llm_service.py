import asyncio
import hashlib
import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Awaitable, Callable, Optional

import aiohttp

from errors import ProviderError

logger = logging.getLogger("Toolsift.LlmService")

MAX_ATTEMPTS = 3
RETRY_BACKOFF = (1, 2)  # seconds slept after failed attempt n; none after the last
RETRYABLE_STATUS = {408, 429, 500, 502, 503, 504}


@dataclass(frozen=True)
class LlmRequest:
    messages: list = field(default_factory=list)
    temperature: float = 0.0
    top_p: float = 1.0
    max_tokens: int = 2048


@dataclass(frozen=True)
class LlmResponse:
    text: str
    finish_reason: str = "stop"


async def post_json_with_retries(url: str, headers: dict, body: dict, label: str,
                                 sleep: Callable[[float], Awaitable[None]] = asyncio.sleep) -> dict:
    """POST a JSON body, retrying transport failures and 429/5xx with exponential backoff."""
    last_error = "unknown error"
    for attempt in range(MAX_ATTEMPTS):
        try:
            async with aiohttp.ClientSession() as session:
                async with session.post(url, json=body, headers=headers) as response:
                    if response.status == 200:
                        return await response.json()
                    last_error = f"HTTP {response.status}"
                    if response.status not in RETRYABLE_STATUS:
                        logger.error(f"{label} API Error: {last_error}")
                        raise ProviderError(f"{label} request rejected: {last_error}")
        except (aiohttp.ClientError, asyncio.TimeoutError) as e:
            last_error = str(e) or e.__class__.__name__

        if attempt < MAX_ATTEMPTS - 1:
            delay = RETRY_BACKOFF[attempt]
            logger.warning(f"{label} attempt {attempt + 1} failed ({last_error}); retrying in {delay}s")
            await sleep(delay)

    logger.error(f"Failed to contact {label} after {MAX_ATTEMPTS} attempts: {last_error}")
    raise ProviderError(f"{label} unreachable after {MAX_ATTEMPTS} attempts: {last_error}")


class ChatProvider:
    """Chat-completion client for any OpenAI-compatible endpoint."""

    def __init__(self, base_url: str, api_key: str, model: str):
        self.base_url = base_url.rstrip('/')
        self.api_key = api_key
        self.model = model

    @property
    def cache_tag(self) -> str:
        """Endpoint and model; cached outputs of one never serve another."""
        return f"{self.base_url}|{self.model}"

    async def complete(self, request: LlmRequest) -> LlmResponse:
        body = {
            "model": self.model,
            "messages": list(request.messages),
            "temperature": request.temperature,
            "top_p": request.top_p,
            "max_tokens": request.max_tokens,
        }
        headers = {"Authorization": f"Bearer {self.api_key}"}
        data = await post_json_with_retries(f"{self.base_url}/chat/completions", headers, body, "Chat")

        try:
            choice = data["choices"][0]
            return LlmResponse(
                text=choice["message"]["content"] or "",
                finish_reason=choice.get("finish_reason") or "stop",
            )
        except (KeyError, IndexError, TypeError):
            raise ProviderError(f"Chat response has no choices: {str(data)[:200]}")


async def gather_bounded(factories: list[Callable[[], Awaitable]], limit: int) -> list:
    """Await coroutine factories with at most `limit` running; results keep input order."""
    semaphore = asyncio.Semaphore(max(1, limit))

    async def run(factory):
        async with semaphore:
            return await factory()

    return await asyncio.gather(*(run(f) for f in factories))


class ResponseCache:
    """
    Content-addressed store of serialized stage outputs.

    One file per key; writes go through a temp file and os.replace so
    concurrent writers of distinct keys never see partial files, and a
    duplicate write of identical bytes is harmless.
    """

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(*parts: str) -> str:
        digest = hashlib.sha256()
        for part in parts:
            digest.update(part.encode("utf-8"))
            digest.update(b"\x1f")
        return digest.hexdigest()

    def _path(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.json"

    def get(self, key: str) -> Optional[str]:
        path = self._path(key)
        if not path.exists():
            return None
        return path.read_text(encoding="utf-8")

    def put(self, key: str, text: str) -> None:
        path = self._path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(text)
        os.replace(tmp, path)
