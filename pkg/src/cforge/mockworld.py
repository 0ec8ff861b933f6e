"""Deterministic in-process backend carrying latent ground truth.

The mock world answers the full wire protocol without any model inference.
Every response is a deterministic function of (rng-seed, request contents),
so hermetic pipeline runs are reproducible and tests can audit decisions
against the latent attribute state.

Latent records are cached per image-ref and, when a state path is given,
persisted as JSONL so a resumed run in a fresh process can keep editing and
embedding faces generated earlier.
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, ClassVar, Mapping

import numpy as np

from .attrdetect import render_attribute_response
from .backends import BackendEndpoint, InProcessTransport, WireBackend
from .domain import AGE_ATTRIBUTES, ATTRIBUTES, NON_AGE_ATTRIBUTES, image_digest

WIRE_CAPABILITIES = ("txt2img", "edit", "embed", "attributes", "age", "concepts")

_AGE_MIN, _AGE_MAX = 1, 120


@dataclass(frozen=True)
class Latent:
    """Ground-truth state behind one mock image."""

    identity: str
    flags: Mapping[str, bool]  # 17 non-age attributes
    age: int
    distorted: bool

    def vector(self) -> dict[str, bool]:
        return dict(self.flags)


@dataclass
class MockWorld:
    rng_seed: int = 0
    edit_success_rate: float = 0.9
    side_effect_rate: float = 0.1
    distortion_rate: float = 0.1
    source_attribute_rate: float = 0.08
    # Mean absolute hyperparameter value at which an edit reliably distorts
    # (over-edits used for detector training must come out distorted).
    distortion_strength_threshold: float = 10.0
    embedding_dim: int = 768
    state_path: str | None = None
    op_delay: float = 0.0  # widens race windows in concurrency tests

    _latents: dict[str, Latent] = field(default_factory=dict, repr=False)
    _requests: dict[str, dict[str, Any]] = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)
    _state_fh: Any = field(default=None, repr=False)
    _in_flight: int = 0
    max_in_flight_seen: int = 0

    def __post_init__(self) -> None:
        if self.state_path is not None:
            path = Path(self.state_path)
            if path.exists():
                with open(path, "r", encoding="utf-8") as fh:
                    for line in fh:
                        line = line.strip()
                        if not line:
                            continue
                        try:
                            entry = json.loads(line)
                        except json.JSONDecodeError:
                            break  # torn tail from an aborted run
                        self._latents[entry["ref"]] = Latent(
                            identity=entry["identity"],
                            flags={a: bool(v) for a, v in entry["flags"].items()},
                            age=int(entry["age"]),
                            distorted=bool(entry["distorted"]),
                        )
                        self._requests[entry["ref"]] = entry["request"]
            else:
                path.parent.mkdir(parents=True, exist_ok=True)
            self._state_fh = open(path, "a", encoding="utf-8")

    # -- deterministic derivations -------------------------------------------

    def _rng(self, label: str, *parts: Any) -> np.random.Generator:
        key = self.rng_seed.to_bytes(8, "little", signed=False)
        data = "\x1f".join([label, *[json.dumps(p, sort_keys=True) for p in parts]]).encode("utf-8")
        digest = hashlib.blake2b(data, key=key, digest_size=16).digest()
        return np.random.default_rng(int.from_bytes(digest, "little"))

    def _image_bytes(self, request: dict[str, Any]) -> bytes:
        key = self.rng_seed.to_bytes(8, "little", signed=False)
        canon = json.dumps(request, sort_keys=True).encode("utf-8")
        return b"MOCKIMG1" + hashlib.blake2b(canon, key=key, digest_size=40).digest()

    def source_latent(self, prompt: str, seed: int) -> Latent:
        """Latent state of a text-to-image face; pure in (world seed, prompt, seed)."""
        rng = self._rng("source", prompt, seed)
        draws = rng.random(len(NON_AGE_ATTRIBUTES))
        flags = {
            a: bool(draws[i] < self.source_attribute_rate)
            for i, a in enumerate(NON_AGE_ATTRIBUTES)
        }
        age = 18 + int(rng.integers(0, 63))  # [18, 80]
        return Latent(identity=prompt, flags=flags, age=age, distorted=False)

    def edit_latent(
        self, parent: Latent, attribute: str, hyperparams: Mapping[str, float], seed: int
    ) -> Latent:
        """Latent state after an edit; pure in (world seed, parent latent, request)."""
        rng = self._rng("edit", parent.identity, sorted(parent.flags.items()), parent.age, attribute, dict(hyperparams), seed)
        u_success = rng.random()
        u_side = rng.random()
        u_distort = rng.random()
        flip_draw = int(rng.integers(0, len(NON_AGE_ATTRIBUTES)))
        small_age_delta = int(rng.integers(-3, 4))
        big_age_delta = int(rng.integers(10, 26))

        flags = dict(parent.flags)
        age = parent.age
        success = u_success < self.edit_success_rate
        if attribute in AGE_ATTRIBUTES:
            if success:
                age += big_age_delta if attribute == "old" else -big_age_delta
            else:
                age += small_age_delta
            others = list(NON_AGE_ATTRIBUTES)
        else:
            if success:
                flags[attribute] = True
            age += small_age_delta
            others = [a for a in NON_AGE_ATTRIBUTES if a != attribute]
        if u_side < self.side_effect_rate:
            victim = others[flip_draw % len(others)]
            flags[victim] = not flags[victim]
        strength = (
            sum(abs(float(v)) for v in hyperparams.values()) / len(hyperparams)
            if hyperparams
            else 0.0
        )
        if strength >= self.distortion_strength_threshold:
            distorted = True
        else:
            distorted = u_distort < self.distortion_rate
        return Latent(
            identity=parent.identity,
            flags=flags,
            age=max(_AGE_MIN, min(_AGE_MAX, age)),
            distorted=distorted,
        )

    # -- latent store ---------------------------------------------------------

    def latent(self, ref: str) -> Latent:
        return self._latents[ref]

    def has(self, ref: str) -> bool:
        return ref in self._latents

    def _remember(self, ref: str, request: dict[str, Any], latent: Latent) -> None:
        if ref in self._latents:
            return
        self._latents[ref] = latent
        self._requests[ref] = request
        if self._state_fh is not None:
            entry = {
                "ref": ref,
                "request": request,
                "identity": latent.identity,
                "flags": dict(latent.flags),
                "age": latent.age,
                "distorted": latent.distorted,
            }
            self._state_fh.write(json.dumps(entry, sort_keys=True) + "\n")
            self._state_fh.flush()

    # -- operations -----------------------------------------------------------

    def txt2img(self, prompt: str, seed: int) -> str:
        request = {"op": "txt2img", "prompt": prompt, "seed": seed}
        data = self._image_bytes(request)
        ref = image_digest(data)
        with self._lock:
            self._remember(ref, request, self.source_latent(prompt, seed))
        return ref

    def edit(self, parent_ref: str, attribute: str, hyperparams: Mapping[str, float], seed: int) -> str:
        request = {
            "op": "edit",
            "parent": parent_ref,
            "attribute": attribute,
            "hyperparams": dict(hyperparams),
            "seed": seed,
        }
        data = self._image_bytes(request)
        ref = image_digest(data)
        with self._lock:
            parent = self._latents[parent_ref]
            self._remember(ref, request, self.edit_latent(parent, attribute, hyperparams, seed))
        return ref

    def image_bytes(self, ref: str) -> bytes:
        return self._image_bytes(self._requests[ref])

    def embed_vector(self, ref: str) -> np.ndarray:
        """Embedding with latent distortion encoded in coordinate 0.

        Coordinate 0 is +1 for distorted faces and -1 for clean ones, plus
        deterministic noise of total norm < 0.3, so the two classes stay
        linearly separable through the origin even after mean-centering.
        """
        latent = self._latents[ref]
        rng = self._rng("embed", ref)
        vec = np.zeros(self.embedding_dim, dtype=np.float64)
        vec[0] = 1.0 if latent.distorted else -1.0
        vec[0] += rng.uniform(-0.02, 0.02)
        if self.embedding_dim > 1:
            noise = rng.standard_normal(self.embedding_dim - 1)
            norm = float(np.linalg.norm(noise))
            if norm > 0:
                noise *= (0.28 * rng.random()) / norm
            vec[1:] = noise
        return vec

    # Concept scoring: fixed affine functions of the latent flags.
    CONCEPT_TABLE: ClassVar[dict[str, tuple[float, dict[str, float]]]] = {
        "eyeglasses": (0.1, {"glasses": 0.5, "sunglasses": 0.3}),
        "sunglass": (0.1, {"sunglasses": 0.6}),
        "beard": (0.2, {"thick_beard": 0.5, "mustache": 0.25, "goatee": 0.15}),
        "face": (0.8, {"facemask": -0.5, "sunglasses": -0.1}),
        "hair_long": (0.3, {"shoulder_hair": 0.4, "pigtails": 0.3, "buzz_cut": -0.25, "curly_hair": 0.1}),
    }

    def concept_score(self, ref: str, concept: str) -> float:
        latent = self._latents[ref]
        if concept in self.CONCEPT_TABLE:
            base, weights = self.CONCEPT_TABLE[concept]
        else:
            base_rng = self._rng("concept-base", concept)
            base, weights = 0.2 + 0.6 * base_rng.random(), {}
        score = base + sum(w for a, w in weights.items() if latent.flags.get(a, False))
        noise = (self._rng("concept", ref, concept).random() * 2.0 - 1.0) * 0.009
        return score + noise

    # -- wire handler -----------------------------------------------------------

    def handle(self, method: str, path: str, payload: dict | None) -> tuple[int, Any]:
        """In-process wire-protocol endpoint (same contract as the HTTP shim)."""
        with self._lock:
            self._in_flight += 1
            self.max_in_flight_seen = max(self.max_in_flight_seen, self._in_flight)
        try:
            if self.op_delay:
                time.sleep(self.op_delay)
            return self._dispatch(method, path, payload or {})
        finally:
            with self._lock:
                self._in_flight -= 1

    def _dispatch(self, method: str, path: str, payload: dict) -> tuple[int, Any]:
        def error(status: int, code: str, message: str) -> tuple[int, Any]:
            return status, {"error": {"code": code, "message": message}}

        if method == "GET" and path.startswith("/v1/image/"):
            ref = path.rsplit("/", 1)[1]
            if ref not in self._requests:
                return error(404, "unknown-image", f"no such image: {ref}")
            return 200, self.image_bytes(ref)
        if method == "GET" and path == "/v1/capabilities":
            return 200, {"capabilities": list(WIRE_CAPABILITIES)}
        if method != "POST":
            return error(404, "not-found", f"no handler for {method} {path}")

        if path == "/v1/txt2img":
            prompt, seed = payload.get("prompt"), payload.get("seed")
            if not isinstance(prompt, str) or not isinstance(seed, int) or seed < 0:
                return error(400, "malformed-request", "txt2img needs prompt (string) and seed (unsigned int)")
            return 200, {"image-ref": self.txt2img(prompt, seed)}

        if path == "/v1/edit":
            parent = payload.get("parent-image-ref")
            attribute = payload.get("attribute")
            hyperparams = payload.get("hyperparams")
            seed = payload.get("seed")
            if (
                not isinstance(parent, str)
                or not isinstance(attribute, str)
                or not isinstance(hyperparams, dict)
                or not isinstance(seed, int)
                or seed < 0
            ):
                return error(400, "malformed-request", "edit needs parent-image-ref, attribute, hyperparams, seed")
            if attribute not in ATTRIBUTES:
                return error(400, "malformed-request", f"unknown attribute: {attribute}")
            if parent not in self._latents:
                return error(400, "unknown-parent", f"no such parent image: {parent}")
            return 200, {"image-ref": self.edit(parent, attribute, hyperparams, seed)}

        if path == "/v1/embed":
            ref = payload.get("image-ref")
            if not isinstance(ref, str):
                return error(400, "malformed-request", "embed needs image-ref")
            if ref not in self._latents:
                return error(400, "unknown-image", f"no such image: {ref}")
            return 200, {"vector": self.embed_vector(ref).tolist()}

        if path == "/v1/attributes":
            source_ref = payload.get("source-ref")
            transformed_ref = payload.get("transformed-ref")
            attributes = payload.get("attributes")
            if not isinstance(source_ref, str) or not isinstance(transformed_ref, str) or not isinstance(attributes, list):
                return error(400, "malformed-request", "attributes needs source-ref, transformed-ref, attributes")
            for ref in (source_ref, transformed_ref):
                if ref not in self._latents:
                    return error(400, "unknown-image", f"no such image: {ref}")
            bad = [a for a in attributes if a not in NON_AGE_ATTRIBUTES]
            if bad:
                return error(400, "malformed-request", f"not detectable attributes: {bad}")
            source = self._latents[source_ref]
            transformed = self._latents[transformed_ref]
            raw = render_attribute_response(
                {a: source.flags[a] for a in attributes},
                {a: transformed.flags[a] for a in attributes},
            )
            return 200, {"response": raw}

        if path == "/v1/age":
            ref = payload.get("image-ref")
            if not isinstance(ref, str):
                return error(400, "malformed-request", "age needs image-ref")
            if ref not in self._latents:
                return error(400, "unknown-image", f"no such image: {ref}")
            return 200, {"age-years": self._latents[ref].age}

        if path == "/v1/concepts":
            ref = payload.get("image-ref")
            concepts = payload.get("concepts")
            if not isinstance(ref, str) or not isinstance(concepts, list):
                return error(400, "malformed-request", "concepts needs image-ref and concepts")
            if ref not in self._latents:
                return error(400, "unknown-image", f"no such image: {ref}")
            return 200, {"scores": {c: self.concept_score(ref, c) for c in concepts}}

        return error(404, "not-found", f"no handler for {method} {path}")

    def close(self) -> None:
        if self._state_fh is not None:
            self._state_fh.close()
            self._state_fh = None


def mock_backend(
    world: MockWorld, *, endpoint: BackendEndpoint | None = None
) -> WireBackend:
    """Wire client over the in-process mock; exercises the full client stack."""
    cfg = endpoint or BackendEndpoint(base_url="mock://world", retry=_fast_retry())
    return WireBackend(InProcessTransport(world.handle), cfg, embedding_dim=world.embedding_dim)


def _fast_retry():
    from .backends import RetryPolicy

    return RetryPolicy(max_attempts=3, backoff=(0.0, 0.0))
