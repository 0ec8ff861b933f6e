"""Capability adapters behind the shim's endpoints.

Each capability (txt2img, edit, embed, age, attributes, concepts) is backed
by a model adapter selected in the shim config. The ``procedural`` family
provides deterministic, dependency-light stand-ins so the service can run
hermetically; loader-based adapters (diffusion pipelines, face analysis
stacks, hosted VLMs) raise ``CapabilityUnavailable`` when their stack or
credentials are missing, and the service answers 503 for that capability.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np
from PIL import Image

_SEED_KEY = b"cforge-shim-procedural"


class CapabilityUnavailable(Exception):
    """The capability's model could not be loaded."""


class UnknownHyperparams(Exception):
    def __init__(self, unknown: Sequence[str], accepted: Sequence[str]):
        super().__init__(
            f"unknown hyperparameter keys {sorted(unknown)}; accepted keys: {sorted(accepted)}"
        )
        self.unknown = tuple(unknown)
        self.accepted = tuple(accepted)


def _rng(*parts: Any) -> np.random.Generator:
    data = "\x1f".join(json.dumps(p, sort_keys=True) for p in parts).encode("utf-8")
    digest = hashlib.blake2b(data, key=_SEED_KEY, digest_size=16).digest()
    return np.random.default_rng(int.from_bytes(digest, "little"))


def _encode_png(pixels: np.ndarray) -> bytes:
    image = Image.fromarray(pixels.astype(np.uint8), mode="RGB")
    buf = io.BytesIO()
    image.save(buf, format="PNG")
    return buf.getvalue()


def _decode(png: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(png)) as image:
        return np.asarray(image.convert("RGB"), dtype=np.float64)


class ProceduralTxt2Img:
    """Deterministic face-placeholder renderer: gradient plus keyed noise."""

    def __init__(self, size: int = 64):
        self.size = size

    def generate(self, prompt: str, seed: int) -> bytes:
        rng = _rng("txt2img", prompt, seed)
        size = self.size
        base = np.linspace(40, 215, size, dtype=np.float64)
        canvas = np.zeros((size, size, 3), dtype=np.float64)
        canvas += base[None, :, None]
        canvas += base[:, None, None] * 0.25
        canvas += rng.uniform(-20, 20, size=(size, size, 3))
        return _encode_png(np.clip(canvas, 0, 255))


class ProceduralEdit:
    """Deterministic edit: keyed pattern over an attribute-specific region.

    Hyperparameter keys are forwarded by name; unknown keys are rejected so
    the caller's opaque-map contract stays honest.
    """

    accepted_keys = ("edit_strength", "guidance", "warmup")

    def edit(self, parent_png: bytes, attribute: str, hyperparams: Mapping[str, float], seed: int) -> bytes:
        unknown = [k for k in hyperparams if k not in self.accepted_keys]
        if unknown:
            raise UnknownHyperparams(unknown, self.accepted_keys)
        pixels = _decode(parent_png)
        height, width, _ = pixels.shape
        rng = _rng("edit", hashlib.sha256(parent_png).hexdigest(), attribute, dict(hyperparams), seed)
        strength = float(hyperparams.get("edit_strength", 5.0))
        # patch anchor stays in the upper-left half, so the patch always fits
        row = int(rng.integers(0, max(1, height // 2)))
        col = int(rng.integers(0, max(1, width // 2)))
        patch = rng.uniform(-12.0, 12.0, size=(height // 2, width // 2, 3)) * (1.0 + strength / 5.0)
        pixels[row : row + height // 2, col : col + width // 2, :] += patch
        return _encode_png(np.clip(pixels, 0, 255))


class ProceduralEmbed:
    """Image embedding from downsampled pixel statistics, projected to D."""

    def __init__(self, dimension: int = 768):
        self.dimension = dimension
        rng = _rng("embed-projection", dimension)
        self._projection = rng.standard_normal((64, dimension)) / 8.0

    def embed(self, png: bytes) -> list[float]:
        with Image.open(io.BytesIO(png)) as image:
            small = np.asarray(image.convert("L").resize((8, 8)), dtype=np.float64)
        features = (small.reshape(-1) - 128.0) / 128.0
        vector = features @ self._projection
        return vector.tolist()


class ProceduralAge:
    """Age estimator stand-in: adult age keyed to the image bytes."""

    def estimate(self, png: bytes) -> int:
        digest = hashlib.blake2b(png, key=_SEED_KEY, digest_size=8).digest()
        return 18 + int.from_bytes(digest, "little") % 63


class ProceduralAttributes:
    """Detector stand-in: deterministic Yes/No answers, fenced JSON output."""

    def answer(
        self,
        source_png: bytes,
        transformed_png: bytes,
        attributes: Sequence[str],
        profile: Mapping[str, Any] | None,
    ) -> str:
        src = hashlib.sha256(source_png).hexdigest()
        dst = hashlib.sha256(transformed_png).hexdigest()

        def decide(ref: str, attribute: str) -> str:
            draw = _rng("attr", ref, attribute).random()
            return "Yes" if draw < 0.3 else "No"

        body = {
            "source": {a: decide(src, a) for a in attributes},
            "transformed": {a: decide(dst, a) for a in attributes},
        }
        # Fenced output on purpose: callers must cope with chatty detectors.
        return "```json\n" + json.dumps(body, indent=1) + "\n```"


class ProceduralConcepts:
    """Concept similarity stand-in: stable scores keyed by (image, concept)."""

    def score(self, png: bytes, concepts: Sequence[str]) -> dict[str, float]:
        ref = hashlib.sha256(png).hexdigest()
        return {c: float(_rng("concept", ref, c).random()) for c in concepts}


class VlmProxyAttributes:
    """Pass-through to a hosted vision-language model (needs credentials)."""

    def __init__(self, options: Mapping[str, Any]):
        if not options.get("api-key"):
            raise CapabilityUnavailable("attributes proxy needs an api-key")
        raise CapabilityUnavailable("hosted VLM proxying is not configured in this environment")


_LOADER_IMPORTS = {
    "diffusers-txt2img": "diffusers",
    "diffusers-edit": "diffusers",
    "clip-embed": "open_clip",
    "face-age": "insightface",
}


def _load_external(kind: str, options: Mapping[str, Any]):
    module = _LOADER_IMPORTS[kind]
    try:
        __import__(module)
    except ImportError as exc:
        raise CapabilityUnavailable(f"{kind}: {module} is not installed") from exc
    # Model weights are deployment-specific; without a configured local path
    # the capability stays off rather than half-working.
    path = options.get("model-path")
    if not path:
        raise CapabilityUnavailable(f"{kind}: no model-path configured")
    raise CapabilityUnavailable(f"{kind}: loading from {path!r} is not supported in this build")


@dataclass
class ShimConfig:
    store_dir: str
    embedding_dim: int = 768
    image_size: int = 64
    # capability -> {"kind": ..., **options}; None disables the capability
    specs: dict[str, dict[str, Any] | None] = field(
        default_factory=lambda: {
            "txt2img": {"kind": "procedural"},
            "edit": {"kind": "procedural"},
            "embed": {"kind": "procedural"},
            "age": {"kind": "procedural"},
            "attributes": {"kind": "procedural"},
            "concepts": {"kind": "procedural"},
        }
    )


def load_capabilities(config: ShimConfig) -> tuple[dict[str, Any], dict[str, str]]:
    """Instantiate every configured capability.

    Returns (loaded models by capability, failure reasons by capability).
    """
    loaded: dict[str, Any] = {}
    failed: dict[str, str] = {}
    builders = {
        "txt2img": lambda opts: ProceduralTxt2Img(config.image_size),
        "edit": lambda opts: ProceduralEdit(),
        "embed": lambda opts: ProceduralEmbed(config.embedding_dim),
        "age": lambda opts: ProceduralAge(),
        "attributes": lambda opts: ProceduralAttributes(),
        "concepts": lambda opts: ProceduralConcepts(),
    }
    for capability, spec in config.specs.items():
        if spec is None:
            continue
        kind = spec.get("kind", "procedural")
        try:
            if kind == "procedural":
                loaded[capability] = builders[capability](spec)
            elif capability == "attributes" and kind == "vlm-proxy":
                loaded[capability] = VlmProxyAttributes(spec)
            elif kind in _LOADER_IMPORTS:
                loaded[capability] = _load_external(kind, spec)
            else:
                raise CapabilityUnavailable(f"unknown model kind {kind!r}")
        except CapabilityUnavailable as exc:
            failed[capability] = str(exc)
    return loaded, failed
