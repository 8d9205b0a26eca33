"""
This module contains the boundary to the teacher LLM that annotates concept
graphs: an HTTP chat-completion client and a replaying mock.
"""

import os
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import requests

from .errors import ContractError, TransportError
from .logger import logger

Message = Dict[str, str]
RETRYABLE_STATUS = {408, 409, 429, 500, 502, 503, 504}


@dataclass
class ProviderConfig:
    """
    Connection and pricing settings of the teacher endpoint.

    Attributes:
        endpoint: URL of a chat-completion style endpoint.
        model: Model name sent with every request.
        temperature: Sampling temperature requested from the teacher.
        max_retries: Retries on transport failures and retryable statuses.
        timeout: Request timeout in seconds.
        price_in: Price per million input tokens.
        price_out: Price per million output tokens.
        currency_factor: Conversion factor applied to reported costs.
        api_key_env: Name of the environment variable holding the API key.
        n_jobs: Maximum number of concurrent annotation requests.
    """

    endpoint: str = "https://open.bigmodel.cn/api/paas/v4/chat/completions"
    model: str = "glm-4.5"
    temperature: float = 0.0
    max_retries: int = 3
    timeout: float = 120.0
    price_in: float = 0.8
    price_out: float = 2.0
    currency_factor: float = 0.14
    api_key_env: str = "CONCEPTDLM_API_KEY"
    n_jobs: int = 4

    def __post_init__(self) -> None:
        if self.price_in < 0 or self.price_out < 0:
            raise ContractError("provider prices must be nonnegative")


@dataclass
class Completion:
    text: str
    tokens_in: int = 0
    tokens_out: int = 0


class TeacherProvider(ABC):
    """Anything that turns a list of role/content messages into a reply."""

    @abstractmethod
    def complete(self, messages: List[Message]) -> Completion:
        """Send ``messages`` and return the teacher's reply."""


class HTTPChatProvider(TeacherProvider):
    """
    Chat-completion client with retries and exponential backoff.

    Transport failures and retryable HTTP statuses are retried up to
    ``config.max_retries`` times before a :class:`TransportError` is raised.
    Any other error status or a malformed reply raises at once.
    """

    def __init__(self, config: ProviderConfig, session: Optional[requests.Session] = None) -> None:
        self.config = config
        self.session = session or requests.Session()

    def _headers(self) -> Dict[str, str]:
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(self.config.api_key_env)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        return headers

    def complete(self, messages: List[Message]) -> Completion:
        payload = {
            "model": self.config.model,
            "messages": messages,
            "temperature": self.config.temperature,
        }
        last_error: Optional[Exception] = None
        for attempt in range(self.config.max_retries + 1):
            try:
                response = self.session.post(
                    self.config.endpoint,
                    json=payload,
                    headers=self._headers(),
                    timeout=self.config.timeout,
                )
            except (requests.ConnectionError, requests.Timeout) as e:
                last_error = e
            else:
                if response.status_code not in RETRYABLE_STATUS:
                    return self._parse(response)
                last_error = requests.HTTPError(f"retryable status {response.status_code}")
            logger.warning(f"Teacher request failed (attempt {attempt + 1}): {last_error}")
            if attempt < self.config.max_retries:
                time.sleep(min(2.0**attempt, 30.0))
        raise TransportError(f"teacher endpoint unreachable: {last_error}")

    @staticmethod
    def _parse(response: requests.Response) -> Completion:
        try:
            response.raise_for_status()
        except requests.HTTPError as e:
            raise TransportError(f"teacher rejected the request: {e}") from e
        try:
            body = response.json()
            usage = body.get("usage") or {}
            return Completion(
                text=body["choices"][0]["message"]["content"] or "",
                tokens_in=int(usage.get("prompt_tokens", 0)),
                tokens_out=int(usage.get("completion_tokens", 0)),
            )
        except (KeyError, IndexError, TypeError, ValueError, AttributeError) as e:
            raise TransportError(f"malformed teacher reply: {e!r}") from e


@dataclass
class MockProvider(TeacherProvider):
    """Replays canned replies in order; the last one repeats when they run out."""

    replies: Sequence[str]
    tokens_in: int = 0
    tokens_out: int = 0
    received: List[List[Message]] = field(default_factory=list)

    def complete(self, messages: List[Message]) -> Completion:
        if not self.replies:
            raise ContractError("MockProvider needs at least one reply")
        self.received.append(messages)
        index = min(len(self.received) - 1, len(self.replies) - 1)
        return Completion(self.replies[index], self.tokens_in, self.tokens_out)


def make_provider(config: ProviderConfig) -> TeacherProvider:
    return HTTPChatProvider(config)
