"""HTTP service implementing the backend wire protocol.

Request bodies are validated by hand so error shapes match the protocol
exactly: 400 ``malformed-request``/``unknown-parent``/``unknown-image``,
503 ``capability-unavailable`` for capabilities whose model failed to
load, 500 ``internal`` with a structured body otherwise. Responses are
content-addressed: every image endpoint returns the SHA-256 of the stored
bytes.
"""

from __future__ import annotations

import logging
from typing import Any

from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse

from .models import ShimConfig, UnknownHyperparams, load_capabilities
from .store import ImageStore

logger = logging.getLogger("cforge_shim")

_HEX64 = frozenset("0123456789abcdef")


def _is_ref(value: Any) -> bool:
    return isinstance(value, str) and len(value) == 64 and set(value) <= _HEX64


def _error(status: int, code: str, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": {"code": code, "message": message}})


def build_app(config: ShimConfig) -> FastAPI:
    app = FastAPI(title="cforge-shim", docs_url=None, redoc_url=None)
    store = ImageStore(config.store_dir)
    models, failures = load_capabilities(config)
    for capability, reason in failures.items():
        logger.warning("capability %s unavailable: %s", capability, reason)
    app.state.models = models
    app.state.failures = failures
    app.state.store = store

    def requires(capability: str) -> JSONResponse | None:
        if capability in models:
            return None
        reason = failures.get(capability, "capability not configured")
        return _error(503, "capability-unavailable", f"{capability}: {reason}")

    async def body_of(request: Request) -> dict | JSONResponse:
        try:
            payload = await request.json()
        except Exception:
            return _error(400, "malformed-request", "request body is not valid JSON")
        if not isinstance(payload, dict):
            return _error(400, "malformed-request", "request body must be a JSON object")
        return payload

    @app.exception_handler(Exception)
    async def internal_error(request: Request, exc: Exception) -> JSONResponse:
        logger.exception("internal error on %s", request.url.path)
        return _error(500, "internal", f"{type(exc).__name__}: {exc}")

    @app.post("/v1/txt2img")
    async def txt2img(request: Request) -> Response:
        unavailable = requires("txt2img")
        if unavailable:
            return unavailable
        payload = await body_of(request)
        if isinstance(payload, JSONResponse):
            return payload
        prompt, seed = payload.get("prompt"), payload.get("seed")
        if not isinstance(prompt, str) or not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            return _error(400, "malformed-request", "txt2img needs prompt (string) and seed (unsigned int)")
        data = models["txt2img"].generate(prompt, seed)
        return JSONResponse({"image-ref": store.put(data)})

    @app.post("/v1/edit")
    async def edit(request: Request) -> Response:
        unavailable = requires("edit")
        if unavailable:
            return unavailable
        payload = await body_of(request)
        if isinstance(payload, JSONResponse):
            return payload
        parent = payload.get("parent-image-ref")
        attribute = payload.get("attribute")
        hyperparams = payload.get("hyperparams")
        seed = payload.get("seed")
        if (
            not _is_ref(parent)
            or not isinstance(attribute, str)
            or not attribute
            or not isinstance(hyperparams, dict)
            or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in hyperparams.values())
            or not isinstance(seed, int)
            or isinstance(seed, bool)
            or seed < 0
        ):
            return _error(
                400, "malformed-request", "edit needs parent-image-ref, attribute, hyperparams, seed"
            )
        parent_bytes = store.get(parent)
        if parent_bytes is None:
            return _error(400, "unknown-parent", f"no such parent image: {parent}")
        try:
            data = models["edit"].edit(parent_bytes, attribute, hyperparams, seed)
        except UnknownHyperparams as exc:
            return _error(400, "malformed-request", str(exc))
        return JSONResponse({"image-ref": store.put(data)})

    @app.post("/v1/embed")
    async def embed(request: Request) -> Response:
        unavailable = requires("embed")
        if unavailable:
            return unavailable
        payload = await body_of(request)
        if isinstance(payload, JSONResponse):
            return payload
        ref = payload.get("image-ref")
        if not _is_ref(ref):
            return _error(400, "malformed-request", "embed needs image-ref")
        data = store.get(ref)
        if data is None:
            return _error(400, "unknown-image", f"no such image: {ref}")
        return JSONResponse({"vector": models["embed"].embed(data)})

    @app.post("/v1/attributes")
    async def attributes(request: Request) -> Response:
        unavailable = requires("attributes")
        if unavailable:
            return unavailable
        payload = await body_of(request)
        if isinstance(payload, JSONResponse):
            return payload
        source_ref = payload.get("source-ref")
        transformed_ref = payload.get("transformed-ref")
        attr_list = payload.get("attributes")
        if (
            not _is_ref(source_ref)
            or not _is_ref(transformed_ref)
            or not isinstance(attr_list, list)
            or not attr_list
            or not all(isinstance(a, str) for a in attr_list)
        ):
            return _error(
                400, "malformed-request", "attributes needs source-ref, transformed-ref, attributes"
            )
        source = store.get(source_ref)
        transformed = store.get(transformed_ref)
        if source is None or transformed is None:
            missing = source_ref if source is None else transformed_ref
            return _error(400, "unknown-image", f"no such image: {missing}")
        raw = models["attributes"].answer(source, transformed, attr_list, payload.get("prompt-profile"))
        return JSONResponse({"response": raw})

    @app.post("/v1/age")
    async def age(request: Request) -> Response:
        unavailable = requires("age")
        if unavailable:
            return unavailable
        payload = await body_of(request)
        if isinstance(payload, JSONResponse):
            return payload
        ref = payload.get("image-ref")
        if not _is_ref(ref):
            return _error(400, "malformed-request", "age needs image-ref")
        data = store.get(ref)
        if data is None:
            return _error(400, "unknown-image", f"no such image: {ref}")
        return JSONResponse({"age-years": models["age"].estimate(data)})

    @app.post("/v1/concepts")
    async def concepts(request: Request) -> Response:
        unavailable = requires("concepts")
        if unavailable:
            return unavailable
        payload = await body_of(request)
        if isinstance(payload, JSONResponse):
            return payload
        ref = payload.get("image-ref")
        concept_list = payload.get("concepts")
        if not _is_ref(ref) or not isinstance(concept_list, list) or not all(
            isinstance(c, str) for c in concept_list
        ):
            return _error(400, "malformed-request", "concepts needs image-ref and concepts")
        data = store.get(ref)
        if data is None:
            return _error(400, "unknown-image", f"no such image: {ref}")
        return JSONResponse({"scores": models["concepts"].score(data, concept_list)})

    @app.get("/v1/image/{ref}")
    async def image(ref: str) -> Response:
        data = store.get(ref) if _is_ref(ref) else None
        if data is None:
            return _error(404, "unknown-image", f"no such image: {ref}")
        return Response(content=data, media_type="image/png")

    @app.get("/v1/capabilities")
    async def capabilities() -> Response:
        return JSONResponse({"capabilities": sorted(models)})

    return app
