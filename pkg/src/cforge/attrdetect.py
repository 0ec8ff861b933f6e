"""Attribute-detector prompt construction and response parsing.

The detector sees one image per query: the source face and the transformed
face concatenated horizontally (source left, transformed right), and must
answer Yes/No for every requested attribute on both faces as a JSON object.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

from .domain import (
    AGE_ATTRIBUTES,
    AttributeVector,
    DomainError,
    FaceRecord,
    NON_AGE_ATTRIBUTES,
    require_attribute,
)


class AgeAttributeInPrompt(DomainError):
    pass


class UnparseableResponse(DomainError):
    """Detector response did not yield the required Yes/No structure."""

    def __init__(self, message: str, fragment: str = ""):
        super().__init__(message if not fragment else f"{message}; offending fragment: {fragment[:200]!r}")
        self.fragment = fragment


DEFAULT_INSTRUCTION_TEMPLATE = (
    "The image shows a pair of faces side by side: the left half is the source "
    "face and the right half is the transformed face. For BOTH faces, state "
    "whether each of the following facial attributes is present: {{attributes}}. "
    'Reply with only a JSON object of the form {"source": {"<attribute>": "Yes" or "No", ...}, '
    '"transformed": {...}} covering every listed attribute for each face.'
)


@dataclass(frozen=True)
class FewShotExample:
    source_ref: str
    transformed_ref: str
    answers: Mapping[str, Mapping[str, bool]]  # {"source": {...}, "transformed": {...}}


@dataclass(frozen=True)
class PromptProfile:
    mode: str = "zero_shot"  # zero_shot | few_shot
    attribute_list: tuple[str, ...] = NON_AGE_ATTRIBUTES
    few_shot_examples: tuple[FewShotExample, ...] = ()
    instruction_template: str = DEFAULT_INSTRUCTION_TEMPLATE

    def __post_init__(self) -> None:
        if self.mode not in ("zero_shot", "few_shot"):
            raise DomainError(f"bad prompt mode: {self.mode!r}")
        if self.mode == "few_shot" and not self.few_shot_examples:
            raise DomainError("few_shot mode requires at least one example")
        for a in self.attribute_list:
            require_attribute(a, non_age=True)


@dataclass(frozen=True)
class PairDetection:
    source: AttributeVector
    transformed: AttributeVector
    raw_response: str
    retries_used: int = 0


def load_instruction_template(path: str) -> str:
    with open(path, "r", encoding="utf-8") as fh:
        return fh.read().strip()


def build_attribute_prompt(
    profile: PromptProfile, attributes: Sequence[str]
) -> tuple[str, dict[str, Any]]:
    """Render (instruction text, image layout descriptor) for one detection query."""
    if not attributes:
        raise DomainError("attribute list must be non-empty")
    for a in attributes:
        if a in AGE_ATTRIBUTES:
            raise AgeAttributeInPrompt(f"age attribute {a!r} is estimated numerically, not prompted")
        require_attribute(a)
    instruction = profile.instruction_template.replace("{{attributes}}", ", ".join(attributes))
    layout: dict[str, Any] = {
        "arrangement": "horizontal-concat",
        "left": "source",
        "right": "transformed",
        "examples": [
            {
                "source-ref": ex.source_ref,
                "transformed-ref": ex.transformed_ref,
                "answers": {face: dict(ans) for face, ans in ex.answers.items()},
            }
            for ex in profile.few_shot_examples
        ],
        "query": "final-pair",
    }
    return instruction, layout


def profile_to_json(profile: PromptProfile, attributes: Sequence[str]) -> dict[str, Any]:
    """Wire form of a prompt profile: rendered instruction plus layout."""
    instruction, layout = build_attribute_prompt(profile, attributes)
    return {"mode": profile.mode, "instruction": instruction, "layout": layout}


def render_attribute_response(
    source_flags: Mapping[str, bool], transformed_flags: Mapping[str, bool]
) -> str:
    """Canonical well-formed detector answer (also used by the mock backend)."""
    body = {
        "source": {a: ("Yes" if v else "No") for a, v in source_flags.items()},
        "transformed": {a: ("Yes" if v else "No") for a, v in transformed_flags.items()},
    }
    return json.dumps(body, indent=1)

_FENCE_RE = re.compile(r"```(?:[a-zA-Z0-9_-]+)?\s*\n?(.*?)\n?\s*```", re.DOTALL)


def _extract_json_object(raw: str) -> Any:
    text = raw.strip()
    fence = _FENCE_RE.search(text)
    if fence:
        text = fence.group(1).strip()
    if not text.startswith("{"):
        brace = re.search(r"\{.*\}", text, re.DOTALL)
        if not brace:
            raise UnparseableResponse("no JSON object in response", raw)
        text = brace.group(0)
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise UnparseableResponse(f"invalid JSON: {exc}", text) from exc


def _coerce_yes_no(value: Any, attribute: str, face: str) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, str):
        token = value.strip().lower()
        if token == "yes":
            return True
        if token == "no":
            return False
    raise UnparseableResponse(f"{face}.{attribute} is not a Yes/No answer", repr(value))


def parse_attribute_response(
    raw: str, attributes: Sequence[str]
) -> tuple[dict[str, bool], dict[str, bool]]:
    """Strict extraction of (source flags, transformed flags) from a raw answer.

    Both faces must be present and every requested attribute answered;
    unrequested extra keys are ignored. Surrounding prose and code fences
    are tolerated.
    """
    obj = _extract_json_object(raw)
    if not isinstance(obj, dict):
        raise UnparseableResponse("response is not an object", raw)
    keymap = {str(k).strip().lower(): k for k in obj}
    out: list[dict[str, bool]] = []
    for face in ("source", "transformed"):
        if face not in keymap:
            raise UnparseableResponse(f"response missing the {face} face", raw)
        answers = obj[keymap[face]]
        if not isinstance(answers, dict):
            raise UnparseableResponse(f"{face} answers are not an object", repr(answers))
        amap = {str(k).strip().lower(): v for k, v in answers.items()}
        flags = {}
        for a in attributes:
            if a not in amap:
                raise UnparseableResponse(f"{face} answer missing attribute {a!r}", raw)
            flags[a] = _coerce_yes_no(amap[a], a, face)
        out.append(flags)
    return out[0], out[1]


def detect_pair(
    source: FaceRecord, transformed: FaceRecord, backend: Any, profile: PromptProfile
) -> PairDetection:
    """Full detector pass for one candidate pair.

    Non-age flags come from the attribute endpoint; ages from the age
    endpoint. The profile must cover all 17 non-age attributes so the
    resulting vectors are complete. Backend errors propagate to the caller,
    who records the pair as detection-failed.
    """
    if set(profile.attribute_list) != set(NON_AGE_ATTRIBUTES):
        raise DomainError("detect_pair needs a profile covering all 17 non-age attributes")
    result = backend.detect_attributes(
        source.image_ref, transformed.image_ref, list(profile.attribute_list), profile
    )
    source_age = backend.estimate_age(source.image_ref)
    transformed_age = backend.estimate_age(transformed.image_ref)
    return PairDetection(
        source=AttributeVector(result.source, source_age),
        transformed=AttributeVector(result.transformed, transformed_age),
        raw_response=result.raw,
        retries_used=result.retries_used,
    )
