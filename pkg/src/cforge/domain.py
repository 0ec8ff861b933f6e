"""Core data model: attributes, demographics, identities, face records, verdicts.

All types are immutable values and safe to share across threads. Serialization
uses the exact field names documented in the manifest schema (kebab-case keys,
one self-describing object per JSONL line).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping


class DomainError(Exception):
    """Base for all engine errors."""


class UnknownDemographic(DomainError):
    pass


class UnknownAttribute(DomainError):
    pass


# Canonical attribute order. All serialized maps iterate in this order.
ATTRIBUTES: tuple[str, ...] = (
    "glasses",
    "sunglasses",
    "mustache",
    "heavy_makeup",
    "shoulder_hair",
    "scarf",
    "pigtails",
    "smile",
    "buzz_cut",
    "head_band",
    "thick_beard",
    "blue_hair",
    "facemask",
    "curly_hair",
    "goatee",
    "old",
    "red_lipstick",
    "red_hair",
    "young",
)

AGE_ATTRIBUTES: tuple[str, ...] = ("old", "young")

NON_AGE_ATTRIBUTES: tuple[str, ...] = tuple(
    a for a in ATTRIBUTES if a not in AGE_ATTRIBUTES
)

_ATTRIBUTE_SET = frozenset(ATTRIBUTES)
_NON_AGE_SET = frozenset(NON_AGE_ATTRIBUTES)


def canonical_attributes() -> list[str]:
    """All 19 attribute tokens in canonical order."""
    return list(ATTRIBUTES)


def is_age_attribute(attribute: str) -> bool:
    return attribute in AGE_ATTRIBUTES


def require_attribute(attribute: str, *, non_age: bool = False) -> str:
    if attribute not in _ATTRIBUTE_SET:
        raise UnknownAttribute(f"unknown attribute: {attribute!r}")
    if non_age and attribute in AGE_ATTRIBUTES:
        raise UnknownAttribute(f"age attribute not allowed here: {attribute!r}")
    return attribute


_ETHNICITY_BY_LETTER = {
    "A": "east_asian",
    "I": "indian",
    "W": "white",
    "B": "black",
}
_SEX_BY_LETTER = {"M": "male", "F": "female"}


@dataclass(frozen=True)
class Demographic:
    """One (ethnicity, sex) group, addressable by a two-letter code."""

    ethnicity: str
    sex: str

    @property
    def code(self) -> str:
        eth = {v: k for k, v in _ETHNICITY_BY_LETTER.items()}[self.ethnicity]
        sx = {v: k for k, v in _SEX_BY_LETTER.items()}[self.sex]
        return eth + sx


# The 8 demographics in report column order.
DEMOGRAPHIC_CODES: tuple[str, ...] = ("AM", "AF", "BM", "BF", "IM", "IF", "WM", "WF")


def parse_demographic(code: str) -> Demographic:
    """Map a two-letter code (case-insensitive) to its demographic."""
    token = code.strip().upper()
    if len(token) != 2 or token[0] not in _ETHNICITY_BY_LETTER or token[1] not in _SEX_BY_LETTER:
        raise UnknownDemographic(f"unknown demographic code: {code!r}")
    return Demographic(_ETHNICITY_BY_LETTER[token[0]], _SEX_BY_LETTER[token[1]])


DEMOGRAPHICS: tuple[Demographic, ...] = tuple(parse_demographic(c) for c in DEMOGRAPHIC_CODES)


def image_digest(data: bytes) -> str:
    """Content address for image bytes: lowercase hex SHA-256."""
    return hashlib.sha256(data).hexdigest()


@dataclass(frozen=True)
class Identity:
    identity_id: str
    display_name: str
    demographic: Demographic
    celebrity: bool
    identity_validated: bool = False


@dataclass(frozen=True)
class FaceRecord:
    """One generated image (source or transformed) with its provenance."""

    face_id: str
    identity_id: str
    variation_index: int
    kind: str  # "source" | "transformed"
    image_ref: str
    gen_params: Mapping[str, Any]
    applied_attribute: str | None = None
    parent_face_id: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("source", "transformed"):
            raise DomainError(f"bad face kind: {self.kind!r}")
        if self.kind == "transformed":
            if self.applied_attribute is None or self.parent_face_id is None:
                raise DomainError("transformed face needs applied-attribute and parent-face-id")
            require_attribute(self.applied_attribute)
        else:
            if self.applied_attribute is not None or self.parent_face_id is not None:
                raise DomainError("source face cannot carry applied-attribute or parent-face-id")


@dataclass(frozen=True)
class AttributeVector:
    """Presence flags for the 17 non-age attributes plus an estimated age."""

    flags: Mapping[str, bool]
    age_years: int

    def __post_init__(self) -> None:
        keys = set(self.flags)
        if keys != _NON_AGE_SET:
            missing = sorted(_NON_AGE_SET - keys)
            extra = sorted(keys - _NON_AGE_SET)
            raise DomainError(f"attribute flags must cover the 17 non-age attributes (missing={missing}, extra={extra})")
        if self.age_years < 0:
            raise DomainError("age-years must be >= 0")
        # Re-key in canonical order so serialization is order-stable.
        object.__setattr__(
            self, "flags", {a: bool(self.flags[a]) for a in NON_AGE_ATTRIBUTES}
        )

    @classmethod
    def from_true(cls, true_attributes: Iterable[str], age_years: int) -> "AttributeVector":
        true_set = set(true_attributes)
        for a in true_set:
            require_attribute(a, non_age=True)
        return cls({a: a in true_set for a in NON_AGE_ATTRIBUTES}, age_years)

    def with_flag(self, attribute: str, value: bool) -> "AttributeVector":
        require_attribute(attribute, non_age=True)
        flags = dict(self.flags)
        flags[attribute] = value
        return AttributeVector(flags, self.age_years)

    def with_age(self, age_years: int) -> "AttributeVector":
        return AttributeVector(dict(self.flags), age_years)


@dataclass(frozen=True)
class DetectionReport:
    """Detector outputs for one face.

    Attribute flags and distortion fields may be filled by different pipeline
    stages; a report is complete once both are present.
    """

    face_id: str
    attributes: AttributeVector | None
    distortion_score: float | None
    distorted: bool | None
    detector_versions: Mapping[str, str] = field(default_factory=dict)


REJECTION_CODES = (
    "DISTORTED",
    "SOURCE_HAS_ATTRIBUTE",
    "SPECIFICITY_VIOLATION",
    "AGE_DRIFT_EXCEEDED",
    "AGE_CHANGE_INSUFFICIENT",
)


def specificity_reason(attribute: str) -> str:
    return f"SPECIFICITY_VIOLATION({attribute})"


def reason_code(reason: str) -> str:
    """Base code of a (possibly parameterized) rejection reason."""
    return reason.split("(", 1)[0]


@dataclass(frozen=True)
class FilterVerdict:
    transformed_face_id: str
    accepted: bool
    reasons: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.accepted != (len(self.reasons) == 0):
            raise DomainError("accepted must hold exactly when reasons is empty")
        for r in self.reasons:
            if reason_code(r) not in REJECTION_CODES:
                raise DomainError(f"unknown rejection code: {r!r}")


@dataclass(frozen=True)
class SurveyLabel:
    """Aggregated human label for one face or pair."""

    face_id: str
    survey: str  # "distortion" | "attribute"
    label: str
    responses: int


@dataclass(frozen=True)
class CellReport:
    """Per (attribute, demographic[, concept]) aggregate."""

    attribute: str
    demographic: str  # two-letter code
    concept: str | None = None
    n: int = 0
    efficacy: float | None = None
    mean_delta: float | None = None
    ci_half_width: float | None = None


Record = Identity | FaceRecord | DetectionReport | FilterVerdict | SurveyLabel | CellReport


# ---------------------------------------------------------------------------
# Serialization (manifest line format)
# ---------------------------------------------------------------------------

KIND_IDENTITY = "identity"
KIND_FACE = "face"
KIND_DETECTION = "detection"
KIND_VERDICT = "verdict"
KIND_SURVEY_LABEL = "survey-label"
KIND_CELL_REPORT = "cell-report"


def record_kind(record: Record) -> str:
    if isinstance(record, Identity):
        return KIND_IDENTITY
    if isinstance(record, FaceRecord):
        return KIND_FACE
    if isinstance(record, DetectionReport):
        return KIND_DETECTION
    if isinstance(record, FilterVerdict):
        return KIND_VERDICT
    if isinstance(record, SurveyLabel):
        return KIND_SURVEY_LABEL
    if isinstance(record, CellReport):
        return KIND_CELL_REPORT
    raise DomainError(f"not a manifest record: {type(record).__name__}")


def _vector_to_json(vec: AttributeVector | None) -> dict[str, Any] | None:
    if vec is None:
        return None
    return {"flags": dict(vec.flags), "age-years": vec.age_years}


def _vector_from_json(obj: Any) -> AttributeVector | None:
    if obj is None:
        return None
    return AttributeVector(obj["flags"], obj["age-years"])


def record_to_json(record: Record) -> dict[str, Any]:
    """Body of the manifest line for a record (without the sequence number)."""
    kind = record_kind(record)
    if isinstance(record, Identity):
        return {
            "kind": kind,
            "identity-id": record.identity_id,
            "display-name": record.display_name,
            "demographic": record.demographic.code,
            "celebrity": record.celebrity,
            "identity_validated": record.identity_validated,
        }
    if isinstance(record, FaceRecord):
        body: dict[str, Any] = {
            "kind": kind,
            "face-id": record.face_id,
            "identity-id": record.identity_id,
            "variation-index": record.variation_index,
            "face-kind": record.kind,
            "image-ref": record.image_ref,
            "gen-params": dict(record.gen_params),
        }
        if record.kind == "transformed":
            body["applied-attribute"] = record.applied_attribute
            body["parent-face-id"] = record.parent_face_id
        return body
    if isinstance(record, DetectionReport):
        return {
            "kind": kind,
            "face-id": record.face_id,
            "attributes": _vector_to_json(record.attributes),
            "distortion-score": record.distortion_score,
            "distorted": record.distorted,
            "detector-versions": dict(record.detector_versions),
        }
    if isinstance(record, FilterVerdict):
        return {
            "kind": kind,
            "transformed-face-id": record.transformed_face_id,
            "accepted": record.accepted,
            "reasons": list(record.reasons),
        }
    if isinstance(record, SurveyLabel):
        return {
            "kind": kind,
            "face-id": record.face_id,
            "survey": record.survey,
            "label": record.label,
            "responses": record.responses,
        }
    if isinstance(record, CellReport):
        return {
            "kind": kind,
            "attribute": record.attribute,
            "demographic": record.demographic,
            "concept": record.concept,
            "n": record.n,
            "efficacy": record.efficacy,
            "mean-delta": record.mean_delta,
            "ci-half-width": record.ci_half_width,
        }
    raise DomainError(f"unserializable record: {record!r}")


_REQUIRED_FIELDS: dict[str, set[str]] = {
    KIND_IDENTITY: {"identity-id", "display-name", "demographic", "celebrity"},
    KIND_FACE: {"face-id", "identity-id", "variation-index", "face-kind", "image-ref", "gen-params"},
    KIND_DETECTION: {"face-id", "attributes", "distortion-score", "distorted"},
    KIND_VERDICT: {"transformed-face-id", "accepted", "reasons"},
    KIND_SURVEY_LABEL: {"face-id", "survey", "label", "responses"},
    KIND_CELL_REPORT: {"attribute", "demographic", "concept", "n"},
}

_OPTIONAL_FIELDS: dict[str, set[str]] = {
    KIND_IDENTITY: {"identity_validated"},
    KIND_FACE: {"applied-attribute", "parent-face-id"},
    KIND_DETECTION: {"detector-versions"},
    KIND_VERDICT: set(),
    KIND_SURVEY_LABEL: set(),
    KIND_CELL_REPORT: {"efficacy", "mean-delta", "ci-half-width"},
}


class MalformedRecord(DomainError):
    pass


def record_from_json(body: Mapping[str, Any], *, strict: bool = True) -> Record:
    """Parse one manifest line body back into its record.

    Strict mode rejects unknown fields; lenient mode ignores them.
    """
    try:
        kind = body["kind"]
    except KeyError:
        raise MalformedRecord("record missing 'kind'") from None
    if kind not in _REQUIRED_FIELDS:
        raise MalformedRecord(f"unknown record kind: {kind!r}")
    present = set(body) - {"kind", "seq"}
    missing = _REQUIRED_FIELDS[kind] - present
    if missing:
        raise MalformedRecord(f"{kind} record missing fields: {sorted(missing)}")
    if strict:
        unknown = present - _REQUIRED_FIELDS[kind] - _OPTIONAL_FIELDS[kind]
        if unknown:
            raise MalformedRecord(f"{kind} record has unknown fields: {sorted(unknown)}")
    try:
        if kind == KIND_IDENTITY:
            return Identity(
                identity_id=body["identity-id"],
                display_name=body["display-name"],
                demographic=parse_demographic(body["demographic"]),
                celebrity=bool(body["celebrity"]),
                identity_validated=bool(body.get("identity_validated", False)),
            )
        if kind == KIND_FACE:
            return FaceRecord(
                face_id=body["face-id"],
                identity_id=body["identity-id"],
                variation_index=int(body["variation-index"]),
                kind=body["face-kind"],
                image_ref=body["image-ref"],
                gen_params=dict(body["gen-params"]),
                applied_attribute=body.get("applied-attribute"),
                parent_face_id=body.get("parent-face-id"),
            )
        if kind == KIND_DETECTION:
            return DetectionReport(
                face_id=body["face-id"],
                attributes=_vector_from_json(body["attributes"]),
                distortion_score=body["distortion-score"],
                distorted=body["distorted"],
                detector_versions=dict(body.get("detector-versions", {})),
            )
        if kind == KIND_VERDICT:
            return FilterVerdict(
                transformed_face_id=body["transformed-face-id"],
                accepted=bool(body["accepted"]),
                reasons=tuple(body["reasons"]),
            )
        if kind == KIND_SURVEY_LABEL:
            return SurveyLabel(
                face_id=body["face-id"],
                survey=body["survey"],
                label=body["label"],
                responses=int(body["responses"]),
            )
        if kind == KIND_CELL_REPORT:
            return CellReport(
                attribute=body["attribute"],
                demographic=body["demographic"],
                concept=body.get("concept"),
                n=int(body["n"]),
                efficacy=body.get("efficacy"),
                mean_delta=body.get("mean-delta"),
                ci_half_width=body.get("ci-half-width"),
            )
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedRecord(f"bad {kind} record: {exc}") from exc
    raise AssertionError("unreachable")
