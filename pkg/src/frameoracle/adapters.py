"""HTTP adapters for externally hosted verifiers and agents.

Endpoints and credentials come from the environment:

``FRAMEORACLE_QA_ENDPOINT``
    URL accepting ``POST {"video", "question", "frames"}`` and returning
    ``{"answer": str}``.
``FRAMEORACLE_AGENT_ENDPOINT``
    URL accepting ``POST {"video", "prompt", "frames"}`` and returning
    ``{"reply": str}`` (the agent's raw JSON text).
``FRAMEORACLE_API_KEY``
    Optional bearer token sent with every request.

Adapters are not deterministic and are kept out of the default test run;
the conformance tests drive them through an in-process mock transport.
"""

from __future__ import annotations

import os
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import httpx

from .backends import BackendError, BackendSuite, PreconditionError
from .core import TaskRecord

RETRYABLE_STATUS = {429, 500, 502, 503, 504}


@dataclass
class HTTPBackend:
    endpoint: str
    name: str = "http"
    api_key: str | None = None
    timeout_s: float = 60.0
    max_attempts: int = 3
    backoff_s: float = 1.0
    max_concurrency: int = 4
    requests_per_minute: int | None = None
    transport: httpx.BaseTransport | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.max_attempts < 1 or self.max_concurrency < 1:
            raise ValueError("max_attempts and max_concurrency must be >= 1")
        self._slots = threading.BoundedSemaphore(self.max_concurrency)
        self._pace = threading.Lock()
        self._next_send = 0.0

    def _wait_turn(self) -> None:
        # spaces request starts evenly when a per-minute rate is declared
        if not self.requests_per_minute:
            return
        with self._pace:
            now = time.monotonic()
            start = max(now, self._next_send)
            self._next_send = start + 60.0 / self.requests_per_minute
        if start > now:
            time.sleep(start - now)

    def _client(self) -> httpx.Client:
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        return httpx.Client(timeout=self.timeout_s, headers=headers, transport=self.transport)

    def post(self, payload: Mapping[str, Any]) -> dict[str, Any]:
        last = ""
        for attempt in range(1, self.max_attempts + 1):
            try:
                self._wait_turn()
                with self._slots, self._client() as client:
                    resp = client.post(self.endpoint, json=dict(payload))
            except httpx.TransportError as exc:
                last = f"transport error: {exc}"
            else:
                if resp.status_code == 200:
                    try:
                        return resp.json()
                    except ValueError as exc:
                        raise BackendError(f"{self.name}: response is not JSON", backend=self.name, attempts=attempt) from exc
                last = f"HTTP {resp.status_code}"
                if resp.status_code not in RETRYABLE_STATUS:
                    raise BackendError(f"{self.name}: {last}", retryable=False, attempts=attempt, backend=self.name)
            if attempt < self.max_attempts and self.backoff_s:
                time.sleep(self.backoff_s * 2 ** (attempt - 1))
        raise BackendError(f"{self.name}: giving up after {self.max_attempts} attempts ({last})", retryable=True, attempts=self.max_attempts, backend=self.name)


class HTTPQAOracle(HTTPBackend):
    """QA oracle answering from a frame subset via a remote VLM."""

    def __call__(self, task: TaskRecord, subset: Sequence[int]) -> str:
        if len(subset) == 0:
            raise PreconditionError("QA oracle needs at least one frame", backend=self.name)
        data = self.post({"video": task.video, "question": task.question, "frames": [int(i) for i in subset]})
        answer = data.get("answer")
        if not isinstance(answer, str):
            raise BackendError(f"{self.name}: response has no string 'answer'", backend=self.name)
        return answer


class HTTPAgent(HTTPBackend):
    def __call__(self, video: str, prompt: str, frame_indices: Sequence[int]) -> str:
        data = self.post({"video": video, "prompt": prompt, "frames": [int(i) for i in frame_indices]})
        reply = data.get("reply")
        if not isinstance(reply, str):
            raise BackendError(f"{self.name}: response has no string 'reply'", backend=self.name)
        return reply


def http_suite(cfg: Mapping[str, Any], env: Mapping[str, str] | None = None) -> BackendSuite:
    env = os.environ if env is None else env
    key = cfg.get("api_key") or env.get("FRAMEORACLE_API_KEY")
    qa_url = cfg.get("qa_endpoint") or env.get("FRAMEORACLE_QA_ENDPOINT")
    agent_url = cfg.get("agent_endpoint") or env.get("FRAMEORACLE_AGENT_ENDPOINT")
    verifier_urls = cfg.get("verifier_endpoints") or ([qa_url] * int(cfg.get("n_verifiers", 1)) if qa_url else [])
    suite = BackendSuite()
    if qa_url:
        suite.qa_oracle = HTTPQAOracle(qa_url, name="qa", api_key=key)
    suite.verifiers = [HTTPQAOracle(u, name=f"verifier-{n}", api_key=key) for n, u in enumerate(verifier_urls)]
    if agent_url:
        suite.agent = HTTPAgent(agent_url, name="agent", api_key=key)
    return suite
