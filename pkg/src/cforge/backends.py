"""Wire-protocol clients for the model services.

All backends speak the same HTTP/JSON protocol:

    POST /v1/txt2img     {"prompt", "seed"}                          -> {"image-ref"}
    POST /v1/edit        {"parent-image-ref", "attribute",
                          "hyperparams", "seed"}                     -> {"image-ref"}
    POST /v1/embed       {"image-ref"}                               -> {"vector"}
    POST /v1/attributes  {"source-ref", "transformed-ref",
                          "attributes", "prompt-profile"}            -> {"response"}
    POST /v1/age         {"image-ref"}                               -> {"age-years"}
    POST /v1/concepts    {"image-ref", "concepts"}                   -> {"scores"}
    GET  /v1/image/{ref}                                             -> image bytes
    GET  /v1/capabilities                                            -> {"capabilities"}

Errors come back as JSON ``{"error": {"code", "message"}}``. Transport
failures are retried per the endpoint's retry policy; 4xx responses are
semantic errors and never retried. Images travel by reference: backends
store bytes and return content hashes.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from typing import Any, Mapping, Protocol, Sequence

import numpy as np
import requests

from .attrdetect import PromptProfile, UnparseableResponse, parse_attribute_response, profile_to_json
from .domain import DomainError


class BackendError(DomainError):
    """Semantic error signalled by a backend."""

    def __init__(self, status: int, code: str, message: str):
        super().__init__(f"backend error {status} ({code}): {message}")
        self.status = status
        self.code = code
        self.message = message


class BackendUnavailable(DomainError):
    """Endpoint unreachable after the retry policy was exhausted."""


class UnknownParent(BackendError):
    pass


class UnknownImage(BackendError):
    pass


class UnknownConcept(BackendError):
    pass


class NonPositiveAge(DomainError):
    """A backend returned an age estimate that is not a positive integer."""


class TransportError(Exception):
    """Connection-level failure (may be retried)."""


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    backoff: tuple[float, ...] = (0.1, 0.3, 0.9)

    def delay(self, attempt: int) -> float:
        if not self.backoff:
            return 0.0
        return self.backoff[min(attempt, len(self.backoff) - 1)]


@dataclass(frozen=True)
class BackendEndpoint:
    base_url: str = ""
    timeout: float = 60.0
    max_in_flight: int = 4
    retry: RetryPolicy = field(default_factory=RetryPolicy)

    def __post_init__(self) -> None:
        if self.max_in_flight < 1:
            raise DomainError("max-in-flight must be >= 1")


@dataclass(frozen=True)
class EditRequest:
    parent_image_ref: str
    attribute: str
    hyperparams: Mapping[str, float]
    seed: int


@dataclass(frozen=True)
class AttributeDetection:
    source: dict[str, bool]
    transformed: dict[str, bool]
    raw: str
    retries_used: int


class Transport(Protocol):
    def request(self, method: str, path: str, payload: dict | None) -> tuple[int, Any]:
        """Return (status, body); body is a dict for JSON responses, bytes otherwise."""


class InProcessTransport:
    """Routes wire requests to an in-process handler (the mock world)."""

    def __init__(self, handler):
        self._handler = handler

    def request(self, method: str, path: str, payload: dict | None) -> tuple[int, Any]:
        return self._handler(method, path, payload)


class HttpTransport:
    """requests-based transport with one session per thread."""

    def __init__(self, base_url: str, timeout: float = 60.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self._local = threading.local()

    def _session(self) -> requests.Session:
        session = getattr(self._local, "session", None)
        if session is None:
            session = requests.Session()
            self._local.session = session
        return session

    def request(self, method: str, path: str, payload: dict | None) -> tuple[int, Any]:
        url = self.base_url + path
        try:
            resp = self._session().request(method, url, json=payload, timeout=self.timeout)
        except requests.RequestException as exc:
            raise TransportError(str(exc)) from exc
        content_type = resp.headers.get("content-type", "")
        if "application/json" in content_type:
            try:
                return resp.status_code, resp.json()
            except ValueError as exc:
                raise TransportError(f"undecodable JSON from {url}: {exc}") from exc
        return resp.status_code, resp.content


def _error_parts(body: Any) -> tuple[str, str]:
    if isinstance(body, dict) and isinstance(body.get("error"), dict):
        err = body["error"]
        return str(err.get("code", "unknown")), str(err.get("message", ""))
    return "unknown", repr(body)[:200]


class WireBackend:
    """Protocol client: retries, error mapping, and the per-endpoint in-flight bound."""

    def __init__(
        self,
        transport: Transport,
        endpoint: BackendEndpoint | None = None,
        *,
        embedding_dim: int = 768,
        parse_retries: int = 3,
    ):
        self.transport = transport
        self.endpoint = endpoint or BackendEndpoint()
        self.embedding_dim = embedding_dim
        self.parse_retries = parse_retries
        self._sem = threading.BoundedSemaphore(self.endpoint.max_in_flight)

    # -- plumbing -----------------------------------------------------------

    def _call(self, method: str, path: str, payload: dict | None = None) -> Any:
        policy = self.endpoint.retry
        last_transport: TransportError | None = None
        last_error: BackendError | None = None
        for attempt in range(max(1, policy.max_attempts)):
            if attempt:
                time.sleep(policy.delay(attempt - 1))
            try:
                with self._sem:
                    status, body = self.transport.request(method, path, payload)
            except TransportError as exc:
                last_transport = exc
                continue
            if status < 400:
                return body
            code, message = _error_parts(body)
            if 400 <= status < 500:
                # Semantic errors are never retried.
                if code == "unknown-parent":
                    raise UnknownParent(status, code, message)
                if code == "unknown-image":
                    raise UnknownImage(status, code, message)
                if code == "unknown-concept":
                    raise UnknownConcept(status, code, message)
                raise BackendError(status, code, message)
            last_transport = None
            last_error = BackendError(status, code, message)
        if last_transport is not None:
            raise BackendUnavailable(
                f"{method} {path}: endpoint unreachable after {policy.max_attempts} attempts: {last_transport}"
            )
        assert last_error is not None
        raise last_error

    # -- operations ---------------------------------------------------------

    def txt2img(self, prompt: str, seed: int) -> str:
        body = self._call("POST", "/v1/txt2img", {"prompt": prompt, "seed": int(seed)})
        return body["image-ref"]

    def edit(self, request: EditRequest) -> str:
        body = self._call(
            "POST",
            "/v1/edit",
            {
                "parent-image-ref": request.parent_image_ref,
                "attribute": request.attribute,
                "hyperparams": dict(request.hyperparams),
                "seed": int(request.seed),
            },
        )
        return body["image-ref"]

    def embed(self, image_ref: str) -> np.ndarray:
        body = self._call("POST", "/v1/embed", {"image-ref": image_ref})
        vector = np.asarray(body["vector"], dtype=np.float64)
        if vector.ndim != 1 or vector.shape[0] != self.embedding_dim:
            raise BackendError(
                200, "bad-dimension", f"expected {self.embedding_dim}-dim embedding, got shape {vector.shape}"
            )
        return vector

    def detect_attributes(
        self,
        source_ref: str,
        transformed_ref: str,
        attributes: Sequence[str],
        profile: PromptProfile,
    ) -> AttributeDetection:
        payload = {
            "source-ref": source_ref,
            "transformed-ref": transformed_ref,
            "attributes": list(attributes),
            "prompt-profile": profile_to_json(profile, attributes),
        }
        last: UnparseableResponse | None = None
        for attempt in range(1 + self.parse_retries):
            body = self._call("POST", "/v1/attributes", payload)
            raw = body["response"]
            try:
                source_flags, transformed_flags = parse_attribute_response(raw, attributes)
            except UnparseableResponse as exc:
                last = exc
                continue
            return AttributeDetection(source_flags, transformed_flags, raw, attempt)
        assert last is not None
        raise last

    def estimate_age(self, image_ref: str) -> int:
        body = self._call("POST", "/v1/age", {"image-ref": image_ref})
        years = int(body["age-years"])
        if years <= 0:
            raise NonPositiveAge(f"backend returned non-positive age {years} for {image_ref}")
        return years

    def concept_scores(self, image_ref: str, concepts: Sequence[str]) -> dict[str, float]:
        if not concepts:
            return {}
        body = self._call("POST", "/v1/concepts", {"image-ref": image_ref, "concepts": list(concepts)})
        scores = body["scores"]
        return {c: float(scores[c]) for c in concepts}

    def fetch_image(self, image_ref: str) -> bytes:
        body = self._call("GET", f"/v1/image/{image_ref}", None)
        if not isinstance(body, (bytes, bytearray)):
            raise BackendError(200, "bad-body", "image endpoint did not return bytes")
        return bytes(body)

    def capabilities(self) -> list[str]:
        body = self._call("GET", "/v1/capabilities", None)
        return list(body["capabilities"])


def http_backend(
    base_url: str,
    *,
    endpoint: BackendEndpoint | None = None,
    embedding_dim: int = 768,
) -> WireBackend:
    cfg = endpoint or BackendEndpoint(base_url=base_url)
    if not cfg.base_url:
        cfg = BackendEndpoint(
            base_url=base_url,
            timeout=cfg.timeout,
            max_in_flight=cfg.max_in_flight,
            retry=cfg.retry,
        )
    return WireBackend(HttpTransport(cfg.base_url, cfg.timeout), cfg, embedding_dim=embedding_dim)
