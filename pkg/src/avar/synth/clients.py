"""Text-generation backends: a deterministic mock and a generic HTTP completion client."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import time
import urllib.error
import urllib.request
from typing import Protocol

from ..errors import BackendError

log = logging.getLogger(__name__)

API_KEY_ENV = "AVAR_API_KEY"
FAIL_MARKER = "__FAIL__"


class GeneratorClient(Protocol):
    name: str

    def complete(self, prompt: str, max_tokens: int = 512, temperature: float = 0.0) -> str: ...


_NOUNS = ["triangle", "circle", "bar", "axis", "label", "segment", "angle", "legend", "point", "region"]
_VERBS = ["compare", "measure", "read", "count", "locate", "estimate"]


class MockClient:
    """Pure function of (prompt, params): stage chosen from the template's task header.

    Any prompt containing ``__FAIL__`` raises BackendError, which tests use to
    force a per-record failure.
    """

    name = "mock"

    def __init__(self, fail_marker: str = FAIL_MARKER):
        self.fail_marker = fail_marker

    def _digest(self, prompt: str, max_tokens: int, temperature: float) -> bytes:
        return hashlib.sha256(f"{prompt}\x00{max_tokens}\x00{temperature!r}".encode()).digest()

    def complete(self, prompt: str, max_tokens: int = 512, temperature: float = 0.0) -> str:
        if self.fail_marker and self.fail_marker in prompt:
            raise BackendError("mock backend: forced failure")
        d = self._digest(prompt, max_tokens, temperature)
        task = re.search(r"### Task: ([\w-]+)", prompt)
        task = task.group(1) if task else ""
        if task == "visual-description":
            body = _between(prompt, "image")
            objs = ", ".join(_NOUNS[b % len(_NOUNS)] for b in d[:3])
            return f"The image shows {body.strip()}. Visible elements include a {objs}."
        if task == "reflective-reasoning":
            n = 3 + d[0] % 5
            lines = []
            for i in range(n):
                verb, noun = _VERBS[d[i + 1] % len(_VERBS)], _NOUNS[d[i + 8] % len(_NOUNS)]
                lines.append(f"Step {i + 1}: {verb} the {noun}; verifying against the description, this holds.")
            lines.append(f"Answer: {d[20] % 10}")
            return "\n".join(lines)
        if task == "visual-anchor-integration":
            steps = [s for s in _between(prompt, "chain").strip().splitlines() if s.strip()]
            out = []
            for i, s in enumerate(steps):
                if i % 2 == 0 and s.lower().startswith("step"):
                    out.append(f"Let me check the image again. {s}")
                else:
                    out.append(s)
            return "\n".join(out)
        return d.hex()


def _between(text: str, tag: str) -> str:
    m = re.search(rf"<{tag}>\n?(.*?)\n?</{tag}>", text, re.S)
    return m.group(1) if m else ""


class HttpClient:
    """POSTs {prompt, max_tokens, temperature} as JSON and reads {text} back.

    Retries transport errors and 5xx/429 responses with exponential backoff.
    """

    name = "http"

    def __init__(self, endpoint: str, api_key: str | None = None, retries: int = 3, backoff: float = 0.5,
                 timeout: float = 60.0):
        self.endpoint = endpoint
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.retries = retries
        self.backoff = backoff
        self.timeout = timeout

    def complete(self, prompt: str, max_tokens: int = 512, temperature: float = 0.0) -> str:
        body = json.dumps({"prompt": prompt, "max_tokens": max_tokens, "temperature": temperature}).encode()
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last = None
        for attempt in range(self.retries + 1):
            req = urllib.request.Request(self.endpoint, data=body, headers=headers, method="POST")
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    payload = json.loads(resp.read().decode("utf-8"))
                text = payload.get("text") if isinstance(payload, dict) else None
                if not isinstance(text, str):
                    raise BackendError(f"response has no text field: {payload!r:.200}")
                return text
            except urllib.error.HTTPError as exc:
                last = exc
                if exc.code < 500 and exc.code != 429:
                    raise BackendError(f"HTTP {exc.code} from {self.endpoint}") from exc
            except (urllib.error.URLError, TimeoutError, ConnectionError, json.JSONDecodeError) as exc:
                last = exc
            if attempt < self.retries:
                log.warning("backend attempt %d failed: %s", attempt + 1, last)
                time.sleep(self.backoff * 2 ** attempt)
        raise BackendError(f"backend failed after {self.retries + 1} attempts: {last}")


def make_client(backend: str, endpoint: str | None = None, **kw) -> GeneratorClient:
    if backend == "mock":
        return MockClient()
    if backend == "http":
        if not endpoint:
            raise BackendError("http backend needs an endpoint")
        return HttpClient(endpoint, **kw)
    raise ValueError(f"unknown backend {backend!r}")
