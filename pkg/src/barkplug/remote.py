"""Shared HTTP plumbing for remote providers (embedding, generation, judging).

The credential is read from the BARKPLUG_API_KEY environment variable and is
never logged.
"""

from __future__ import annotations

import logging
import os
import time

import requests

logger = logging.getLogger(__name__)

API_KEY_ENV = "BARKPLUG_API_KEY"

INITIAL_BACKOFF_SECONDS = 0.5


class TransportError(RuntimeError):
    """A remote call failed after exhausting its retry budget."""

    def __init__(self, message: str, attempts: int):
        super().__init__(f"{message} (after {attempts} attempt(s))")
        self.attempts = attempts


def auth_headers() -> dict[str, str]:
    headers = {"Content-Type": "application/json"}
    key = os.environ.get(API_KEY_ENV)
    if key:
        headers["Authorization"] = f"Bearer {key}"
    return headers


def post_json(
    url: str,
    payload: dict,
    *,
    timeout: float = 30.0,
    max_retries: int = 3,
    session: requests.Session | None = None,
    sleep=time.sleep,
) -> dict:
    """POST JSON with exponential backoff; raises TransportError when exhausted.

    ``max_retries`` counts retries after the first attempt. 5xx responses are
    retried; 4xx responses fail immediately (retrying cannot help).
    """
    http = session or requests
    attempts = 0
    backoff = INITIAL_BACKOFF_SECONDS
    last_error: Exception | None = None
    while attempts <= max_retries:
        attempts += 1
        try:
            response = http.post(url, json=payload, headers=auth_headers(), timeout=timeout)
            if response.status_code >= 500:
                raise requests.RequestException(f"server error {response.status_code}")
            if response.status_code >= 400:
                raise TransportError(
                    f"request to {url} rejected with status {response.status_code}", attempts
                )
            return response.json()
        except TransportError:
            raise
        except (requests.RequestException, ValueError) as exc:
            last_error = exc
            logger.debug("attempt %d against %s failed: %s", attempts, url, exc)
            if attempts <= max_retries:
                sleep(backoff)
                backoff *= 2
    raise TransportError(f"request to {url} failed: {last_error}", attempts)
